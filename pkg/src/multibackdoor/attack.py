"""Attacker behaviour: poisoned batches with backdoor replay, local training, scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numkernel import ModelArch, SgdConfig, train_sgd
from .triggers import AnyTrigger, apply_trigger

REPLAY_MODES = ("direct", "pool")
ATTACKER_SGD = SgdConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4, lr_decay=0.1)


class ConfigError(ValueError):
    """Invalid experiment or attacker configuration."""


class PoolUnderflow(ConfigError):
    pass


@dataclass(frozen=True)
class AttackerSpec:
    """One colluding client and the backdoor it injects.

    ``r_b`` is the share of each batch carrying this attacker's own trigger,
    ``r_br`` the share replayed from *each* other attacker. ``gamma=None``
    means "scale by the number of clients per round".
    """

    attacker_id: int
    client_id: int
    trigger: AnyTrigger
    r_b: float
    r_br: float
    injection_rounds: frozenset
    local_epochs: int = 6
    sgd: SgdConfig = ATTACKER_SGD
    gamma: float | None = None
    replay_mode: str = "direct"

    def __post_init__(self):
        object.__setattr__(self, "injection_rounds", frozenset(int(r) for r in self.injection_rounds))
        if not self.injection_rounds:
            raise ConfigError(f"attacker {self.attacker_id}: injection_rounds is empty")
        if not (0 <= self.r_b <= 1 and 0 <= self.r_br <= 1):
            raise ConfigError(f"attacker {self.attacker_id}: r_b and r_br must lie in [0, 1]")
        if self.gamma is not None and self.gamma < 1:
            raise ConfigError(f"attacker {self.attacker_id}: gamma must be >= 1")
        if self.replay_mode not in REPLAY_MODES:
            raise ConfigError(f"attacker {self.attacker_id}: replay_mode must be one of {REPLAY_MODES}")
        if self.local_epochs < 1:
            raise ConfigError(f"attacker {self.attacker_id}: local_epochs must be >= 1")

    @property
    def last_injection(self) -> int:
        return max(self.injection_rounds)

    def injects_at(self, round_idx: int) -> bool:
        return round_idx in self.injection_rounds


def check_ratio_budget(attackers: Sequence[AttackerSpec]) -> list[str]:
    n = len(attackers)
    return [
        f"attacker {a.attacker_id}: r_b + {n - 1}*r_br = {a.r_b + (n - 1) * a.r_br:g} exceeds 1"
        for a in attackers
        if a.r_b + (n - 1) * a.r_br > 1 + 1e-12
    ]


def _round_half_up(x: float) -> int:
    # guard against 2.9999999 style representation error before flooring
    return int(math.floor(x + 0.5 + 1e-9))


def compose_counts(batch_size: int, r_b: float, r_br: float, n_others: int) -> tuple[int, int, int]:
    """(own-trigger, replayed-per-other-attacker, clean) sample counts for one batch."""
    own = _round_half_up(r_b * batch_size)
    per_other = _round_half_up(r_br * batch_size)
    clean = batch_size - own - n_others * per_other
    if clean < 0:
        raise ConfigError(
            f"batch of {batch_size} cannot hold {own} own + {n_others}x{per_other} replayed samples"
        )
    return own, per_other, clean


@dataclass
class PoisonedBatch:
    images: np.ndarray
    labels: np.ndarray
    own: int
    replayed: tuple[int, ...]
    clean: int
    # per-sample source: -1 clean, 0 own trigger, j>0 the j-th other attacker
    source: np.ndarray = field(repr=False)


@dataclass
class ReplayPool:
    """Pre-poisoned samples per attacker id (images already triggered and relabelled)."""

    images: dict[int, np.ndarray]
    labels: dict[int, np.ndarray]

    @classmethod
    def build(cls, sources, attackers: Sequence[AttackerSpec], per_attacker: int | None,
              rng: np.random.Generator) -> "ReplayPool":
        """Poison each attacker's source images with its own trigger.

        ``sources`` maps attacker id to that attacker's images, or is one array
        shared by all. ``per_attacker`` caps the entry size (None keeps all).
        """
        images, labels = {}, {}
        for a in attackers:
            src = sources[a.attacker_id] if isinstance(sources, Mapping) else sources
            n = len(src)
            if n == 0:
                raise PoolUnderflow(f"attacker {a.attacker_id} has no images for the replay pool")
            idx = np.arange(n) if per_attacker is None or per_attacker >= n else \
                np.sort(rng.choice(n, size=per_attacker, replace=False))
            poisoned, target = apply_trigger(src[idx], a.trigger, clip=True)
            images[a.attacker_id] = poisoned
            labels[a.attacker_id] = np.full(len(idx), target, dtype=np.int64)
        return cls(images, labels)

    def sample(self, attacker_id: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if attacker_id not in self.images:
            raise PoolUnderflow(f"replay pool has no samples for attacker {attacker_id}")
        have = len(self.labels[attacker_id])
        if k > have:
            raise PoolUnderflow(f"replay pool holds {have} samples for attacker {attacker_id}, {k} requested")
        idx = rng.choice(have, size=k, replace=False)
        return self.images[attacker_id][idx], self.labels[attacker_id][idx]


def _compose(images, labels, attacker: AttackerSpec, others: Sequence[AttackerSpec], rng, pool):
    images = np.array(images, dtype=np.float64, copy=True)
    labels = np.array(labels, dtype=np.int64, copy=True)
    own, per_other, clean = compose_counts(len(labels), attacker.r_b, attacker.r_br, len(others))
    order = rng.permutation(len(labels))
    source = np.full(len(labels), -1, dtype=np.int64)

    sel = order[:own]
    if own:
        images[sel], labels[sel] = apply_trigger(images[sel], attacker.trigger, clip=True)
    source[sel] = 0
    for j, other in enumerate(others):
        start = own + j * per_other
        sel = order[start:start + per_other]
        if per_other:
            if pool is None:
                images[sel], labels[sel] = apply_trigger(images[sel], other.trigger, clip=True)
            else:
                images[sel], labels[sel] = pool.sample(other.attacker_id, per_other, rng)
        source[sel] = j + 1
    return PoisonedBatch(images, labels, own, (per_other,) * len(others), clean, source)


def poison_batch_direct(images, labels, attacker: AttackerSpec, others: Sequence[AttackerSpec],
                        rng: np.random.Generator) -> PoisonedBatch:
    """Stamp triggers onto randomly chosen batch members (no replay pool needed).

    ``own`` images get the attacker's trigger and target; for every other
    attacker a further ``per_other`` images get that attacker's trigger and
    target. Selection is without replacement; the rest stay clean.
    """
    return _compose(images, labels, attacker, others, rng, None)


def poison_batch_pooled(images, labels, attacker: AttackerSpec, others: Sequence[AttackerSpec],
                        pool: ReplayPool, rng: np.random.Generator) -> PoisonedBatch:
    """Like :func:`poison_batch_direct`, but replayed samples come from ``pool``.

    The attacker's own pool partition is never drawn from.
    """
    others = [o for o in others if o.attacker_id != attacker.attacker_id]
    return _compose(images, labels, attacker, others, rng, pool)


def attacker_local_train(
    arch: ModelArch,
    global_params: np.ndarray,
    attacker: AttackerSpec,
    X: np.ndarray,
    y: np.ndarray,
    others: Sequence[AttackerSpec],
    rng: np.random.Generator,
    batch_size: int = 64,
    pool: ReplayPool | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Malicious local training: every batch is poisoned (with replay if r_br > 0)."""
    others = [o for o in others if o.attacker_id != attacker.attacker_id]
    use_pool = attacker.replay_mode == "pool"
    if use_pool and pool is None and attacker.r_br > 0 and others:
        raise ConfigError(f"attacker {attacker.attacker_id}: pool replay requested but no pool given")

    def hook(xb, yb, r):
        if use_pool:
            batch = poison_batch_pooled(xb, yb, attacker, others, pool, r)
        else:
            batch = poison_batch_direct(xb, yb, attacker, others, r)
        return batch.images, batch.labels

    return train_sgd(arch, global_params, X, y, attacker.sgd, attacker.local_epochs, batch_size, rng,
                     batch_hook=hook)


def amplify(global_params, local_params, gamma: float) -> np.ndarray:
    """Model-replacement scaling: ``global + gamma * (local - global)``."""
    g = np.asarray(global_params, dtype=np.float64)
    l = np.asarray(local_params, dtype=np.float64)
    if g.shape != l.shape:
        raise ValueError(f"length mismatch: {g.shape} vs {l.shape}")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if gamma == 1:
        return l.copy()
    return g + gamma * (l - g)
