"""Small pre-norm Vision Transformer built on :mod:`blockvit.numerics`."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor


class Origin(str, enum.Enum):
    ORIGINAL = "original"
    EXPANDED = "expanded"


class EmbeddingStrategy(str, enum.Enum):
    CLS = "cls"
    PATCH_MEAN = "patch_mean"
    CONCAT = "concat"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 0
    channels: int = 3

    def validate(self) -> "ViTConfig":
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")
        if self.depth < 0 or self.mlp_ratio <= 0 or self.channels <= 0:
            raise ConfigError("depth must be >= 0; mlp_ratio and channels > 0")
        if self.num_classes == 1 or self.num_classes < 0:
            raise ConfigError("num_classes must be 0 (headless) or >= 2")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


VIT_B = ViTConfig(image_size=224, patch_size=14, dim=768, depth=12, heads=12)
DESK = ViTConfig()


def block_param_count(cfg: ViTConfig) -> int:
    """Closed-form parameter count of one transformer block."""
    d, h = cfg.dim, cfg.hidden
    return 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)


def head_width(dim: int, strategy) -> int:
    return 2 * dim if EmbeddingStrategy(strategy) is EmbeddingStrategy.CONCAT else dim


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class TransformerBlock:
    """Pre-norm block: ``x += attn(ln1(x)); x += mlp(ln2(x))``."""

    PARAM_NAMES = (
        "ln1.weight", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight", "attn.proj.bias",
        "ln2.weight", "ln2.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
    )

    def __init__(self, params: dict, origin: Origin = Origin.ORIGINAL, trainable: bool = True):
        self.params = params
        self.origin = Origin(origin)
        self.trainable = trainable

    @classmethod
    def init(cls, cfg: ViTConfig, rng: np.random.Generator, dtype) -> "TransformerBlock":
        d, h = cfg.dim, cfg.hidden
        p = {
            "ln1.weight": np.ones(d, dtype), "ln1.bias": np.zeros(d, dtype),
            "attn.qkv.weight": _trunc_normal(rng, (d, 3 * d), dtype=dtype), "attn.qkv.bias": np.zeros(3 * d, dtype),
            "attn.proj.weight": _trunc_normal(rng, (d, d), dtype=dtype), "attn.proj.bias": np.zeros(d, dtype),
            "ln2.weight": np.ones(d, dtype), "ln2.bias": np.zeros(d, dtype),
            "mlp.fc1.weight": _trunc_normal(rng, (d, h), dtype=dtype), "mlp.fc1.bias": np.zeros(h, dtype),
            "mlp.fc2.weight": _trunc_normal(rng, (h, d), dtype=dtype), "mlp.fc2.bias": np.zeros(d, dtype),
        }
        return cls({k: Tensor(v, requires_grad=True) for k, v in p.items()})

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        for t in self.params.values():
            t.requires_grad = self._trainable

    def __call__(self, x: Tensor, heads: int, drop_mask=None) -> Tensor:
        p = self.params
        b, n, d = x.shape
        dh = d // heads
        h = nx.layer_norm(x, p["ln1.weight"], p["ln1.bias"])
        qkv = nx.linear(h, p["attn.qkv.weight"], p["attn.qkv.bias"])
        qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = nx.softmax(scores, axis=-1)
        o = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        branch = nx.linear(o, p["attn.proj.weight"], p["attn.proj.bias"])
        if drop_mask is not None:
            branch = branch * drop_mask[0]
        x = x + branch
        h = nx.layer_norm(x, p["ln2.weight"], p["ln2.bias"])
        h = nx.gelu(nx.linear(h, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
        branch = nx.linear(h, p["mlp.fc2.weight"], p["mlp.fc2.bias"])
        if drop_mask is not None:
            branch = branch * drop_mask[1]
        return x + branch

    def copy(self) -> "TransformerBlock":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return TransformerBlock(params, self.origin, self.trainable)

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())


class ClassifierHead:
    """Linear layer from the chosen embedding to class logits (always trainable)."""

    def __init__(self, weight: Tensor, bias: Tensor, strategy: EmbeddingStrategy):
        self.weight = weight
        self.bias = bias
        self.strategy = EmbeddingStrategy(strategy)

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def params(self) -> dict:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def __call__(self, emb: Tensor) -> Tensor:
        return nx.linear(emb, self.weight, self.bias)


class ViTModel:
    def __init__(self, cfg: ViTConfig, embed: dict, blocks: list, norm: dict, head: ClassifierHead | None = None):
        self.cfg = cfg
        self.embed = embed  # patch_embed.weight/bias, cls_token, pos_embed
        self.blocks = blocks
        self.norm = norm  # norm.weight/bias
        self.head = head

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def dtype(self):
        return self.embed["pos_embed"].dtype

    def named_parameters(self) -> list:
        """(name, tensor) pairs in a stable order; the order used by checkpoints."""
        out = list(self.embed.items())
        for i, blk in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{k}", v) for k, v in blk.params.items())
        out.extend(self.norm.items())
        if self.head is not None:
            out.extend(self.head.params().items())
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def encoder_parameters(self) -> list:
        return [t for n, t in self.named_parameters() if not n.startswith("head.")]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def copy(self) -> "ViTModel":
        embed = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.embed.items()}
        norm = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.norm.items()}
        head = None
        if self.head is not None:
            head = ClassifierHead(
                Tensor(self.head.weight.data.copy(), requires_grad=True),
                Tensor(self.head.bias.data.copy(), requires_grad=True),
                self.head.strategy,
            )
        return ViTModel(self.cfg, embed, [b.copy() for b in self.blocks], norm, head)

    def state_arrays(self) -> dict:
        return {n: t.data for n, t in self.named_parameters()}

    def __call__(self, batch, **kw) -> dict:
        return forward(self, batch, **kw)


def init_model(cfg: ViTConfig, seed: int = 0, dtype=None) -> ViTModel:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains."""
    cfg.validate()
    dtype = np.dtype(dtype or nx.get_default_dtype())
    rng = np.random.default_rng(seed)
    d = cfg.dim
    embed = {
        "patch_embed.weight": Tensor(_trunc_normal(rng, (cfg.patch_dim, d), dtype=dtype), requires_grad=True),
        "patch_embed.bias": Tensor(np.zeros(d, dtype), requires_grad=True),
        "cls_token": Tensor(_trunc_normal(rng, (d,), dtype=dtype), requires_grad=True),
        "pos_embed": Tensor(_trunc_normal(rng, (cfg.num_tokens, d), dtype=dtype), requires_grad=True),
    }
    blocks = [TransformerBlock.init(cfg, rng, dtype) for _ in range(cfg.depth)]
    norm = {
        "norm.weight": Tensor(np.ones(d, dtype), requires_grad=True),
        "norm.bias": Tensor(np.zeros(d, dtype), requires_grad=True),
    }
    model = ViTModel(cfg, embed, blocks, norm)
    if cfg.num_classes:
        model = attach_head(model, cfg.num_classes, EmbeddingStrategy.CLS, seed=seed + 1, copy=False)
    return model


def patchify(image, patch_size: int) -> np.ndarray:
    """Row-major non-overlapping patches: (..., H, W, C) -> (..., N, p*p*C)."""
    image = np.asarray(image)
    h, w, c = image.shape[-3:]
    if h != w or h % patch_size:
        raise DimensionError(f"image {h}x{w} is not square or not divisible by patch {patch_size}")
    g = h // patch_size
    lead = image.shape[:-3]
    x = image.reshape(*lead, g, patch_size, g, patch_size, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # (..., g, g, p, p, c)
    return x.reshape(*lead, g * g, patch_size * patch_size * c)


def unpatchify(patches, patch_size: int, channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    n = patches.shape[-2]
    g = int(round(np.sqrt(n)))
    lead = patches.shape[:-2]
    nl = len(lead)
    x = patches.reshape(*lead, g, g, patch_size, patch_size, channels)
    x = np.moveaxis(x, nl + 1, nl + 2)
    return x.reshape(*lead, g * patch_size, g * patch_size, channels)


def forward(model: ViTModel, batch, drop_path: float = 0.0, rng: np.random.Generator | None = None) -> dict:
    """Encode a (B, H, W, C) batch; returns cls, patch_mean and (with a head) logits."""
    cfg = model.cfg
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if data.ndim != 4 or data.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(
            f"batch shape {data.shape} does not match (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels})"
        )
    b = data.shape[0]
    e = model.embed
    patches = Tensor(patchify(data, cfg.patch_size).astype(model.dtype, copy=False))
    tok = nx.linear(patches, e["patch_embed.weight"], e["patch_embed.bias"])
    cls = nx.add(np.zeros((b, 1, cfg.dim), dtype=model.dtype), e["cls_token"].reshape(1, 1, cfg.dim))
    x = nx.concat([cls, tok], axis=1) + e["pos_embed"]
    for blk in model.blocks:
        mask = None
        if drop_path > 0:
            if rng is None:
                raise ConfigError("drop_path needs an rng")
            keep = 1.0 - drop_path
            mask = [
                (rng.random((b, 1, 1)) < keep).astype(model.dtype) / np.asarray(keep, model.dtype)
                for _ in range(2)
            ]
        x = blk(x, cfg.heads, mask)
    x = nx.layer_norm(x, model.norm["norm.weight"], model.norm["norm.bias"])
    out = {"cls": x[:, 0], "patch_mean": x[:, 1:].mean(axis=1), "logits": None}
    if model.head is not None:
        out["logits"] = model.head(select_embedding(out, model.head.strategy))
    return out


def select_embedding(out: dict, strategy) -> Tensor:
    strategy = EmbeddingStrategy(strategy)
    if strategy is EmbeddingStrategy.CLS:
        return out["cls"]
    if strategy is EmbeddingStrategy.PATCH_MEAN:
        return out["patch_mean"]
    return nx.concat([out["cls"], out["patch_mean"]], axis=1)


def extract_embedding(model: ViTModel, batch, strategy=EmbeddingStrategy.CLS) -> Tensor:
    """CLS, mean patch token, or ``[cls | patch_mean]`` of the final normalized tokens."""
    return select_embedding(forward(model, batch), strategy)


def embed_dataset(model: ViTModel, images: np.ndarray, strategy=EmbeddingStrategy.CLS, batch_size: int = 64) -> np.ndarray:
    """Gradient-free embeddings of a whole image array, batched."""
    chunks = []
    with nx.no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(extract_embedding(model, images[i:i + batch_size], strategy).data)
    if not chunks:
        return np.zeros((0, head_width(model.cfg.dim, strategy)), dtype=model.dtype)
    return np.concatenate(chunks, axis=0)


def attach_head(model: ViTModel, num_classes: int, strategy=EmbeddingStrategy.CLS, seed: int = 0, copy: bool = True) -> ViTModel:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    m = model.copy() if copy else model
    width = head_width(m.cfg.dim, strategy)
    rng = np.random.default_rng(seed)
    m.head = ClassifierHead(
        Tensor(_trunc_normal(rng, (width, num_classes), dtype=m.dtype), requires_grad=True),
        Tensor(np.zeros(num_classes, m.dtype), requires_grad=True),
        strategy,
    )
    m.cfg = _replace(m.cfg, num_classes=num_classes)
    return m


def _replace(cfg: ViTConfig, **kw) -> ViTConfig:
    d = cfg.to_dict()
    d.update(kw)
    return ViTConfig(**d)


def count_params(model: ViTModel, trainable_only: bool = False) -> int:
    return sum(t.size for t in model.parameters() if t.requires_grad or not trainable_only)


def clone_structure_check(a: ViTModel, b: ViTModel) -> bool:
    na, nb = a.named_parameters(), b.named_parameters()
    return len(na) == len(nb) and all(x[0] == y[0] and x[1].shape == y[1].shape for x, y in zip(na, nb))


__all__ = [
    "Origin", "EmbeddingStrategy", "ViTConfig", "VIT_B", "DESK", "TransformerBlock", "ClassifierHead",
    "ViTModel", "init_model", "patchify", "unpatchify", "forward", "select_embedding", "extract_embedding", "embed_dataset",
    "attach_head", "count_params", "block_param_count", "head_width",
]
