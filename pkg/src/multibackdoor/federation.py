"""Federated training loop with FedAvg, ClippedClustering and DP-FedAvg aggregation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.base import BaseEstimator, ClassifierMixin

from . import numkernel as nk
from .attack import AttackerSpec, ConfigError, ReplayPool, amplify, attacker_local_train, check_ratio_budget
from .data import Dataset, dirichlet_partition
from .triggers import apply_trigger, check_distinct
from .validation import check_images, check_labels

log = logging.getLogger(__name__)

DEFENSES = ("none", "clipcluster", "dpfedavg")
# name written to the ``agg`` column of round records
AGG_NAMES = {"none": "fedavg", "clipcluster": "clipcluster", "dpfedavg": "dpfedavg"}
_DEFENSE_ALIASES = {"clipped_clustering": "clipcluster", "dp_fedavg": "dpfedavg", "fedavg": "none"}

# stream tags for SeedSequence entropy; keeps selection, client and noise draws independent
_SELECT, _CLIENT, _NOISE, _INIT, _POOL = range(5)


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, keys...), stable across execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 20
    clients_per_round: int = 10
    total_rounds: int = 80
    warmup_rounds: int = 40
    server_lr: float = 1.0
    local_epochs: int = 2
    sgd: nk.SgdConfig = nk.SgdConfig(0.01, 0.9, 5e-4)
    batch_size: int = 64
    dirichlet_alpha: float = 0.8
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.n_clients < 1:
            out.append("n_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.n_clients:
            out.append(f"clients_per_round ({self.clients_per_round}) must lie in [1, n_clients={self.n_clients}]")
        if not 0 <= self.warmup_rounds < self.total_rounds:
            out.append(f"warmup_rounds ({self.warmup_rounds}) must be < total_rounds ({self.total_rounds})")
        if self.server_lr <= 0:
            out.append("server_lr must be > 0")
        if self.local_epochs < 1:
            out.append("local_epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.dirichlet_alpha <= 0:
            out.append("dirichlet_alpha must be > 0")
        return out


@dataclass(frozen=True)
class DefenseConfig:
    """Aggregation rule. ``clip_bound=None`` under DP-FedAvg clips to the
    per-round median update norm instead of a fixed bound."""

    kind: str = "none"
    clip_bound: float | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", _DEFENSE_ALIASES.get(self.kind, self.kind))

    def problems(self) -> list[str]:
        out = []
        if self.kind not in DEFENSES:
            out.append(f"defense must be one of {DEFENSES}, got {self.kind!r}")
        if self.kind == "dpfedavg":
            if self.clip_bound is not None and not self.clip_bound > 0:
                out.append("dp clip bound S must be > 0")
            if not self.noise_sigma >= 0:
                out.append("dp noise sigma must be >= 0")
        return out


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class RoundRecord:
    round: int
    acc: float
    asr: tuple[float, ...]
    delta_norm: float
    agg: str


@dataclass
class RoundLog:
    """Per-round telemetry not needed for the metrics CSV."""

    round: int
    selected: list[int]
    malicious: list[int]
    delta_norms: dict[int, float]
    clipped_norms: dict[int, float] = field(default_factory=dict)
    kept: list[int] = field(default_factory=list)
    clip_bound: float | None = None


# ---------------------------------------------------------------- aggregation

def _stack(global_params, updates: Sequence[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no client updates to aggregate")
    g = np.asarray(global_params, dtype=np.float64)
    for u in updates:
        if np.shape(u.params) != g.shape:
            raise ValueError(f"client {u.client_id}: update length {np.shape(u.params)} != {g.shape}")
    return np.stack([np.asarray(u.params, dtype=np.float64) for u in updates])


def _apply(global_params, target, server_lr: float) -> np.ndarray:
    # server_lr == 1 returns the aggregate itself so single-client FL reproduces local SGD bit for bit
    if server_lr == 1:
        return target
    return global_params + server_lr * (target - global_params)


def fedavg(global_params, updates: Sequence[ClientUpdate], server_lr: float = 1.0) -> np.ndarray:
    """Sample-count weighted average of client parameters."""
    thetas = _stack(global_params, updates)
    counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    if counts.sum() <= 0:
        counts = np.ones_like(counts)
    w = counts / counts.sum()
    if len(updates) == 1:
        avg = thetas[0].copy()
    else:
        avg = w @ thetas
    return _apply(np.asarray(global_params, dtype=np.float64), avg, server_lr)


def lower_median(values) -> float:
    """The ceil(n/2)-th smallest value (an actual sample, never an interpolation)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(len(v) - 1) // 2])


def clip_to_median(deltas: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale every row with norm above the median norm down onto it."""
    norms = np.linalg.norm(deltas, axis=1)
    bound = lower_median(norms)
    scale = np.ones_like(norms)
    over = norms > bound
    scale[over] = bound / norms[over]
    return deltas * scale[:, None], bound


def _cosine_distances(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    unit = np.divide(x, norms[:, None], out=np.zeros_like(x), where=norms[:, None] > 0)
    d = 1.0 - unit @ unit.T
    # zero vectors get distance 1 (orthogonal) to everything else
    zero = norms == 0
    d[zero, :] = 1.0
    d[:, zero] = 1.0
    np.fill_diagonal(d, 0.0)
    return np.clip((d + d.T) / 2, 0.0, 2.0)


def clipped_clustering_agg(global_params, updates: Sequence[ClientUpdate], server_lr: float = 1.0,
                           log_to: RoundLog | None = None) -> np.ndarray:
    """Clip deltas to the median norm, split into two clusters, average the larger.

    Clustering is average-linkage agglomerative on cosine distance. A size
    tie goes to the cluster holding the smallest client id. All-zero deltas
    fall back to the plain mean.
    """
    if len(updates) < 2:
        raise ValueError("ClippedClustering needs at least 2 updates")
    g = np.asarray(global_params, dtype=np.float64)
    deltas = _stack(g, updates) - g
    ids = [u.client_id for u in updates]
    if not np.any(deltas):
        return _apply(g, g + deltas.mean(axis=0), server_lr)
    clipped, bound = clip_to_median(deltas)
    dist = _cosine_distances(clipped)
    tree = linkage(squareform(dist, checks=False), method="average")
    labels = fcluster(tree, t=2, criterion="maxclust")
    best = None
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        key = (-len(members), min(ids[i] for i in members))
        if best is None or key < best[0]:
            best = (key, members)
    members = best[1]
    if log_to is not None:
        log_to.clip_bound = bound
        log_to.clipped_norms = {cid: float(n) for cid, n in zip(ids, np.linalg.norm(clipped, axis=1))}
        log_to.kept = sorted(ids[i] for i in members)
    return _apply(g, g + clipped[members].mean(axis=0), server_lr)


def dp_fedavg_agg(global_params, updates: Sequence[ClientUpdate], clip_bound: float | None, sigma: float,
                  rng: np.random.Generator, server_lr: float = 1.0, log_to: RoundLog | None = None) -> np.ndarray:
    """Clip each delta to norm S, equal-weight mean, add N(0, (sigma*S/m)^2) per coordinate."""
    g = np.asarray(global_params, dtype=np.float64)
    deltas = _stack(g, updates) - g
    norms = np.linalg.norm(deltas, axis=1)
    bound = lower_median(norms) if clip_bound is None else float(clip_bound)
    if not bound > 0:
        raise ValueError("DP clip bound must be > 0")
    scale = np.minimum(1.0, np.divide(bound, norms, out=np.ones_like(norms), where=norms > 0))
    mean = (deltas * scale[:, None]).mean(axis=0)
    if sigma > 0:
        mean = mean + rng.normal(0.0, sigma * bound / len(updates), size=mean.shape)
    if log_to is not None:
        log_to.clip_bound = bound
        log_to.clipped_norms = {u.client_id: float(n * s) for u, n, s in zip(updates, norms, scale)}
    return _apply(g, g + mean, server_lr)


# ---------------------------------------------------------------- schedule

def sequential_schedule(n_attackers: int, start: int, interval: int = 1, duration: int = 3) -> list[frozenset]:
    """Attacker k injects in rounds ``start + k*interval ... + duration - 1``."""
    if duration < 1 or interval < 0:
        raise ValueError("duration must be >= 1 and interval >= 0")
    return [frozenset(range(start + k * interval, start + k * interval + duration)) for k in range(n_attackers)]


def build_replay_pool(train: Dataset, partition, attackers: Sequence[AttackerSpec], per_attacker: int | None,
                      seed: int) -> ReplayPool | None:
    """Each attacker's local images under its own trigger (None in direct mode)."""
    if not any(a.replay_mode == "pool" for a in attackers):
        return None
    bad = [a.attacker_id for a in attackers if not 0 <= a.client_id < len(partition)]
    if bad:
        raise ConfigError(f"attackers {bad} control clients outside the partition")
    sources = {a.attacker_id: train.images[partition.client_indices[a.client_id]] for a in attackers}
    return ReplayPool.build(sources, attackers, per_attacker, stream(seed, _POOL))


# ---------------------------------------------------------------- engine

class Federation:
    """Round-by-round simulation state: global model, client data, attackers."""

    def __init__(self, arch: nk.ModelArch, train: Dataset, test: Dataset, fed: FedConfig,
                 attackers: Sequence[AttackerSpec] = (), defense: DefenseConfig = DefenseConfig(),
                 partition=None, pool: ReplayPool | None = None, n_jobs: int = 1,
                 init_params: np.ndarray | None = None):
        problems = fed.problems() + defense.problems()
        attackers = list(attackers)
        problems += check_distinct([a.trigger for a in attackers])
        problems += check_ratio_budget(attackers)
        for a in attackers:
            if not 0 <= a.client_id < fed.n_clients:
                problems.append(f"attacker {a.attacker_id}: client_id {a.client_id} outside [0, {fed.n_clients})")
            if a.trigger.target_label >= arch.n_classes:
                problems.append(f"attacker {a.attacker_id}: target {a.trigger.target_label} >= {arch.n_classes}")
        if len({a.client_id for a in attackers}) != len(attackers):
            problems.append("attackers must control distinct clients")
        if defense.kind == "clipcluster" and fed.clients_per_round < 2:
            problems.append("clipcluster needs clients_per_round >= 2")
        if problems:
            raise ConfigError("; ".join(problems))

        self.arch, self.train, self.test = arch, train, test
        self.fed, self.defense, self.attackers = fed, defense, attackers
        self.pool, self.n_jobs = pool, n_jobs
        self.partition = partition or dirichlet_partition(train, fed.n_clients, fed.dirichlet_alpha, fed.seed)
        if len(self.partition) != fed.n_clients:
            raise ConfigError(f"partition has {len(self.partition)} clients, expected {fed.n_clients}")
        self.attacker_by_client = {a.client_id: a for a in attackers}
        if init_params is None:
            init_params = nk.init_params(arch, stream(fed.seed, _INIT))
        self.params = np.asarray(init_params, dtype=np.float64).copy()
        self.round_logs: list[RoundLog] = []
        self._triggered_test = []
        for a in attackers:
            keep = test.labels != a.trigger.target_label
            poisoned, target = apply_trigger(test.images[keep], a.trigger, clip=True)
            self._triggered_test.append((poisoned, target))

    # -- selection and local work

    def select_clients(self, round_idx: int) -> list[int]:
        forced = sorted(a.client_id for a in self.attackers if a.injects_at(round_idx))
        m = max(self.fed.clients_per_round, len(forced))
        rest = [c for c in range(self.fed.n_clients) if c not in forced]
        picked = stream(self.fed.seed, _SELECT, round_idx).choice(rest, size=m - len(forced), replace=False)
        return sorted(forced + [int(c) for c in picked])

    def client_data(self, client_id: int):
        idx = self.partition.client_indices[client_id]
        return self.train.images[idx], self.train.labels[idx]

    def local_update(self, client_id: int, round_idx: int) -> tuple[ClientUpdate, bool]:
        X, y = self.client_data(client_id)
        rng = stream(self.fed.seed, _CLIENT, client_id, round_idx)
        attacker = self.attacker_by_client.get(client_id)
        if attacker is not None and attacker.injects_at(round_idx):
            local, _ = attacker_local_train(self.arch, self.params, attacker, X, y, self.attackers, rng,
                                            self.fed.batch_size, self.pool)
            gamma = self.fed.clients_per_round if attacker.gamma is None else attacker.gamma
            return ClientUpdate(client_id, amplify(self.params, local, gamma), len(y)), True
        local, _ = nk.train_sgd(self.arch, self.params, X, y, self.fed.sgd, self.fed.local_epochs,
                                self.fed.batch_size, rng)
        return ClientUpdate(client_id, local, len(y)), False

    # -- one round

    def aggregate(self, updates: list[ClientUpdate], round_idx: int, log_to: RoundLog) -> np.ndarray:
        kind = self.defense.kind
        if kind == "clipcluster":
            return clipped_clustering_agg(self.params, updates, self.fed.server_lr, log_to)
        if kind == "dpfedavg":
            return dp_fedavg_agg(self.params, updates, self.defense.clip_bound, self.defense.noise_sigma,
                                 stream(self.fed.seed, _NOISE, round_idx), self.fed.server_lr, log_to)
        return fedavg(self.params, updates, self.fed.server_lr)

    def run_round(self, round_idx: int, evaluate: bool = True) -> RoundRecord | None:
        selected = self.select_clients(round_idx)
        if self.n_jobs > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as ex:
                results = list(ex.map(lambda c: self.local_update(c, round_idx), selected))
        else:
            results = [self.local_update(c, round_idx) for c in selected]
        updates = [u for u, _ in results]
        rlog = RoundLog(
            round=round_idx,
            selected=selected,
            malicious=[u.client_id for u, bad in results if bad],
            delta_norms={u.client_id: float(np.linalg.norm(u.params - self.params)) for u in updates},
        )
        try:
            new = self.aggregate(updates, round_idx, rlog)
        except (ValueError, FloatingPointError) as exc:
            raise type(exc)(f"round {round_idx}: {exc}") from exc
        if not np.isfinite(new).all():
            raise nk.NumericalError(f"round {round_idx}: aggregated model is not finite")
        delta_norm = float(np.linalg.norm(new - self.params))
        self.params = new
        self.round_logs.append(rlog)
        if not evaluate:
            return None
        acc, asr = self.evaluate()
        return RoundRecord(round_idx, acc, asr, delta_norm, AGG_NAMES[self.defense.kind])

    def evaluate(self, params=None) -> tuple[float, tuple[float, ...]]:
        """Clean accuracy and, per attacker, the share of triggered non-target test images sent to the target."""
        params = self.params if params is None else params
        acc = nk.accuracy(self.arch, params, self.test.images, self.test.labels)
        asr = []
        for poisoned, target in self._triggered_test:
            if len(poisoned) == 0:
                asr.append(0.0)
                continue
            asr.append(float(np.mean(nk.predict(self.arch, params, poisoned) == target)))
        return acc, tuple(asr)


def evaluate_model(arch, params, test: Dataset, attackers: Sequence[AttackerSpec]) -> RoundRecord:
    """Stand-alone evaluation of a parameter vector (round -1, no aggregation)."""
    if len(test) == 0:
        raise ValueError("empty test set")
    acc = nk.accuracy(arch, params, test.images, test.labels)
    asr = []
    for a in attackers:
        keep = test.labels != a.trigger.target_label
        poisoned, target = apply_trigger(test.images[keep], a.trigger, clip=True)
        asr.append(float(np.mean(nk.predict(arch, params, poisoned) == target)) if keep.any() else 0.0)
    return RoundRecord(-1, acc, tuple(asr), 0.0, "none")


# ---------------------------------------------------------------- estimator

def default_eval_rounds(total_rounds: int, warmup_rounds: int, every: int = 5) -> list[int]:
    """Every round after warmup; every ``every`` rounds (and the last one) during warmup."""
    rounds = [r for r in range(warmup_rounds) if (r + 1) % every == 0 or r == warmup_rounds - 1]
    return rounds + list(range(warmup_rounds, total_rounds))


class FederatedBackdoorSimulator(ClassifierMixin, BaseEstimator):
    """Federated image classifier trained under (optional) multi-target backdoor attack.

    ``fit(X, y, X_test=..., y_test=...)`` runs the whole federation and keeps
    the round records in ``history_``; ``predict`` uses the final global
    model. Attackers are :class:`~multibackdoor.attack.AttackerSpec` objects.
    """

    def __init__(self, n_clients=20, clients_per_round=10, total_rounds=80, warmup_rounds=40, server_lr=1.0,
                 local_epochs=2, learning_rate=0.01, momentum=0.9, weight_decay=5e-4, batch_size=64,
                 dirichlet_alpha=0.8, attackers=(), defense="none", dp_clip=None, dp_sigma=0.0,
                 replay_pool_size=None, eval_every_warmup=5, arch=None, n_jobs=1, random_state=0):
        self.n_clients = n_clients
        self.clients_per_round = clients_per_round
        self.total_rounds = total_rounds
        self.warmup_rounds = warmup_rounds
        self.server_lr = server_lr
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.dirichlet_alpha = dirichlet_alpha
        self.attackers = attackers
        self.defense = defense
        self.dp_clip = dp_clip
        self.dp_sigma = dp_sigma
        self.replay_pool_size = replay_pool_size
        self.eval_every_warmup = eval_every_warmup
        self.arch = arch
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _configs(self) -> tuple[FedConfig, DefenseConfig]:
        fed = FedConfig(
            n_clients=self.n_clients, clients_per_round=self.clients_per_round, total_rounds=self.total_rounds,
            warmup_rounds=self.warmup_rounds, server_lr=self.server_lr, local_epochs=self.local_epochs,
            sgd=nk.SgdConfig(self.learning_rate, self.momentum, self.weight_decay), batch_size=self.batch_size,
            dirichlet_alpha=self.dirichlet_alpha, seed=self.random_state,
        )
        return fed, DefenseConfig(self.defense, self.dp_clip, self.dp_sigma)

    def build(self, X, y, X_test, y_test, n_classes: int | None = None) -> Federation:
        X = check_images(X)
        y = check_labels(y)
        X_test = check_images(X_test, shape=X.shape[1:])
        y_test = check_labels(y_test)
        k = n_classes or int(max(y.max(), y_test.max()) + 1)
        arch = self.arch or nk.tiny_conv(k, X.shape[1:])
        train, test = Dataset(X, y, arch.n_classes), Dataset(X_test, y_test, arch.n_classes)
        fed, defense = self._configs()
        part = dirichlet_partition(train, fed.n_clients, fed.dirichlet_alpha, fed.seed)
        pool = build_replay_pool(train, part, self.attackers, self.replay_pool_size, fed.seed)
        return Federation(arch, train, test, fed, self.attackers, defense, partition=part, pool=pool,
                          n_jobs=self.n_jobs)

    def fit(self, X, y, X_test=None, y_test=None, n_classes=None, callback=None):
        if X_test is None or y_test is None:
            raise ValueError("fit needs an evaluation set (X_test, y_test) for ACC/ASR tracking")
        sim = self.build(X, y, X_test, y_test, n_classes)
        eval_rounds = set(default_eval_rounds(self.total_rounds, self.warmup_rounds, self.eval_every_warmup))
        self.history_ = []
        for r in range(self.total_rounds):
            rec = sim.run_round(r, evaluate=r in eval_rounds)
            if rec is not None:
                self.history_.append(rec)
                log.debug("round %d acc=%.4f asr=%s", r, rec.acc, rec.asr)
                if callback is not None:
                    callback(rec)
        self.federation_ = sim
        self.round_logs_ = sim.round_logs
        self.global_params_ = sim.params
        self.arch_ = sim.arch
        self.classes_ = np.arange(sim.arch.n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "global_params_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("FederatedBackdoorSimulator is not fitted yet")

    def predict(self, X):
        self._check_fitted()
        return nk.predict(self.arch_, self.global_params_, check_images(X, pixel_range=False))

    def asr_at(self, round_idx: int) -> tuple[float, ...] | None:
        for rec in getattr(self, "history_", []):
            if rec.round == round_idx:
                return rec.asr
        return None
