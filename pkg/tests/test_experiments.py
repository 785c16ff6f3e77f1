import numpy as np
import pytest

from blockvit import experiments as ex
from blockvit.blockexp import FreezePolicy
from blockvit.data import SyntheticSpec, synth_generate
from blockvit.errors import ConfigError
from blockvit.finetune import FinetuneConfig
from blockvit.ssl import SSLConfig
from blockvit.vit import ViTConfig, init_model

CFG = ViTConfig(image_size=16, patch_size=8, dim=8, depth=2, heads=2)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(SyntheticSpec(n_per_class=14, image_size=16, seed=1))


class TestFewshotGrid:
    def test_truncates_at_saturation(self):
        labels = np.repeat(np.arange(3), [5, 9, 3])
        assert ex.fewshot_grid_values(labels, (1, 2, 4, 8, 16, 32), 3) == [1, 2, 4, 8, 16]

    def test_sorted_unique(self):
        assert ex.fewshot_grid_values(np.repeat(np.arange(2), 50), (4, 2, 2, 8), 2) == [2, 4, 8]

    def test_rejects_zero(self):
        with pytest.raises(ConfigError):
            ex.fewshot_grid_values([0, 1], (0, 1), 2)


class TestFewshot:
    def test_paired_and_shaped(self, ds):
        encs = {"a": init_model(CFG, 0), "b": init_model(CFG, 1)}
        cfg = FinetuneConfig(epochs=1, batch_size=16)
        out = ex.fewshot(encs, ds, (1, 2), 2, cfg, root_seed=3)
        assert out["grid"] == [1, 2]
        assert set(out["cells"]) == {(e, n) for e in "ab" for n in (1, 2)}
        assert all(len(v) == 2 for v in out["cells"].values())
        assert set(out["ranks"][1]) == {"a", "b"}

    def test_deterministic(self, ds):
        encs = {"a": init_model(CFG, 0)}
        cfg = FinetuneConfig(epochs=1, batch_size=16)
        a = ex.fewshot(encs, ds, (2,), 2, cfg, 5)["aggregates"]
        b = ex.fewshot(encs, ds, (2,), 2, cfg, 5)["aggregates"]
        assert a == b

    def test_bad_replicates(self, ds):
        with pytest.raises(ConfigError):
            ex.fewshot({"a": init_model(CFG)}, ds, (1,), 0, FinetuneConfig(), 0)


class TestPretrain:
    def test_be_ssl_needs_k(self, ds):
        with pytest.raises(ConfigError):
            ex.pretrain(init_model(CFG), ds.images, SSLConfig(epochs=0), "be_ssl", 0)

    def test_k_without_be_ssl(self, ds):
        with pytest.raises(ConfigError):
            ex.pretrain(init_model(CFG), ds.images, SSLConfig(epochs=0), "unfrozen", 2)

    def test_zero_epochs_expands_and_freezes(self, ds):
        m, log, audit = ex.pretrain(init_model(CFG), ds.images, SSLConfig(epochs=0), FreezePolicy.BE_SSL, 1)
        assert m.depth == 3 and log == [] and audit is None
        assert [b.trainable for b in m.blocks] == [False, False, True]

    def test_be_ssl_audit_passes(self, ds):
        cfg = SSLConfig(epochs=1, prototypes=8, batch_size=16, head_hidden=16, head_bottleneck=8)
        _, log, audit = ex.pretrain(init_model(CFG), ds.images, cfg, "be_ssl", 1, seed=2)
        assert len(log) > 0 and audit.passed


class TestLinearProbe:
    def test_picks_an_lr_from_the_grid(self, ds):
        report, lr = ex.linear_probe(init_model(CFG), ds, FinetuneConfig(epochs=2, batch_size=32), 0, lrs=(0.01, 0.1))
        assert lr in (0.01, 0.1) and report.n_samples == len(ds.split("test")[1])
