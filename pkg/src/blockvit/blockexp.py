"""Block expansion and freeze policies.

Expanded blocks are value copies of an existing block whose two residual
branches are silenced by zeroing the attention output projection and the
second MLP layer (weights and biases). In a pre-norm block this makes the
copy an exact identity, so expansion never changes the model output until
the copies are trained.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PolicyError
from .vit import Origin, ViTModel, _replace

_ZEROED = ("attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias")


class FreezePolicy(str, enum.Enum):
    FROZEN_BB = "frozen_bb"  # only the classifier head trains
    UNFROZEN = "unfrozen"  # everything trains
    BE_SSL = "be_ssl"  # only expanded blocks (and heads) train


def insertion_positions(depth: int, k: int) -> list[int]:
    """0-based indices of the original blocks after which copies are inserted.

    The ``depth`` blocks are cut into ``k`` contiguous groups whose sizes
    differ by at most one (larger groups first); one copy of each group's
    last block follows the group.
    """
    if not 1 <= k <= depth:
        raise ConfigError(f"expansion k={k} must lie in [1, depth={depth}]")
    base, extra = divmod(depth, k)
    positions, end = [], 0
    for g in range(k):
        end += base + (1 if g < extra else 0)
        positions.append(end - 1)
    return positions


@dataclass
class ExpansionPlan:
    depth: int
    k: int
    positions: list = field(init=False)

    def __post_init__(self):
        self.positions = insertion_positions(self.depth, self.k)

    @property
    def sources(self) -> list:
        return list(self.positions)

    def layout(self) -> list[tuple[Origin, int]]:
        """Final block order as (origin, source original index)."""
        out = []
        marks = set(self.positions)
        for i in range(self.depth):
            out.append((Origin.ORIGINAL, i))
            if i in marks:
                out.append((Origin.EXPANDED, i))
        return out


def expand_blocks(model: ViTModel, k: int, seed: int = 0) -> ViTModel:
    """Return a copy of ``model`` with ``k`` identity-initialized blocks inserted.

    ``seed`` is accepted for interface symmetry; the construction is
    deterministic.
    """
    originals = [b for b in model.blocks if b.origin is Origin.ORIGINAL]
    if len(originals) != len(model.blocks):
        raise ConfigError("model is already expanded")
    plan = ExpansionPlan(len(originals), k)
    out = model.copy()
    src_blocks = out.blocks
    blocks = []
    for origin, idx in plan.layout():
        if origin is Origin.ORIGINAL:
            blocks.append(src_blocks[idx])
            continue
        new = src_blocks[idx].copy()
        for name in _ZEROED:
            new.params[name].data[...] = 0
        new.origin = Origin.EXPANDED
        new.trainable = True
        blocks.append(new)
    out.blocks = blocks
    out.cfg = _replace(out.cfg, depth=len(blocks))
    return out


def apply_freeze_policy(model: ViTModel, policy, copy: bool = True) -> ViTModel:
    """Set trainable flags per ``policy``. The classifier head, if any, always trains."""
    policy = FreezePolicy(policy)
    m = model.copy() if copy else model
    if policy is FreezePolicy.BE_SSL and not any(b.origin is Origin.EXPANDED for b in m.blocks):
        raise PolicyError("BE_SSL requires at least one expanded block")
    enc_flag = policy is FreezePolicy.UNFROZEN
    for t in list(m.embed.values()) + list(m.norm.values()):
        t.requires_grad = enc_flag
    for b in m.blocks:
        b.trainable = enc_flag or (policy is FreezePolicy.BE_SSL and b.origin is Origin.EXPANDED)
    if m.head is not None:
        m.head.weight.requires_grad = True
        m.head.bias.requires_grad = True
    return m


def snapshot(model: ViTModel) -> dict:
    return {n: t.data.copy() for n, t in model.named_parameters()}


@dataclass
class FreezeAudit:
    frozen_changed: list
    trainable_changed: list
    trainable_total: int

    @property
    def passed(self) -> bool:
        """No frozen tensor moved and at least one trainable one did."""
        return not self.frozen_changed and bool(self.trainable_changed)


def freeze_audit(before: dict, model: ViTModel) -> FreezeAudit:
    """Bitwise comparison of a snapshot against the model's current values."""
    frozen_changed, trainable_changed, n_train = [], [], 0
    for name, t in model.named_parameters():
        changed = name not in before or not np.array_equal(before[name], t.data)
        if t.requires_grad:
            n_train += 1
            if changed:
                trainable_changed.append(name)
        elif changed:
            frozen_changed.append(name)
    return FreezeAudit(frozen_changed, trainable_changed, n_train)
