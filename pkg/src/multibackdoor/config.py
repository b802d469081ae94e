"""Flat ``key = value`` experiment configuration with repeated ``[attacker]`` sections.

Top-level keys (defaults in brackets)::

    seed [0]                    n_clients [20]            clients_per_round [10]
    warmup_rounds [40]          observe_rounds [30]       total_rounds [auto]
    server_lr [1.0]             local_epochs [2]          learning_rate [0.01]
    momentum [0.9]              weight_decay [0.0005]     batch_size [64]
    dirichlet_alpha [0.8]       defense [none]            dp_clip [median]
    dp_sigma [0.0]              dataset [synth]           synth_seed [1]
    n_per_class [500]           test_per_class [30]       n_classes [10]
    train_path []               test_path []              eval_every [5]
    replay_mode [direct]        pool_size [all]           attacker_epochs [6]
    attacker_lr [0.05]          attacker_lr_decay [0.1]   inject_offset [2]
    inject_interval [1]         stealth_images [100]      n_jobs [1]
    out [runs/default]

``[attacker]`` keys: channel, block_u, block_v, block_size, magnitude, target,
r_b, r_br, gamma, inject_start, inject_len, plus the optional client,
trigger (freq | patch), transparency and patch_size. Ratios accept
fractions such as ``8/64``. ``gamma = auto`` scales by clients_per_round.
A missing ``inject_start`` puts attacker n (1-based) at
``warmup_rounds + inject_offset + (n - 1) * inject_interval``;
``total_rounds = auto`` ends ``observe_rounds`` after the last injection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from os import PathLike
from pathlib import Path

from . import numkernel as nk
from .attack import REPLAY_MODES, AttackerSpec, ConfigError, check_ratio_budget
from .data import Dataset, read_raw_bin, synth_shapes
from .federation import DEFENSES, DefenseConfig, FedConfig
from .triggers import CHANNELS, PatchTriggerSpec, TriggerSpec, check_distinct

IMAGE_HW = (32, 32)
_CHANNEL_NAMES = {v: k for k, v in CHANNELS.items()}


@dataclass(frozen=True)
class AttackerEntry:
    """One ``[attacker]`` section as written; resolved into an AttackerSpec later."""

    channel: int = 0
    block_u: int = 15
    block_v: int = 15
    block_size: int = 3
    magnitude: float = 100.0
    target: int = 0
    r_b: float = 8 / 64
    r_br: float = 3 / 64
    gamma: float | None = None
    inject_start: int | None = None
    inject_len: int = 3
    client: int | None = None
    trigger: str = "freq"
    transparency: float = 0.8
    patch_size: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_clients: int = 20
    clients_per_round: int = 10
    warmup_rounds: int = 40
    observe_rounds: int = 30
    total_rounds: int | None = None
    server_lr: float = 1.0
    local_epochs: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    dirichlet_alpha: float = 0.8
    defense: str = "none"
    dp_clip: float | None = None
    dp_sigma: float = 0.0
    dataset: str = "synth"
    synth_seed: int = 1
    n_per_class: int = 500
    test_per_class: int = 30
    n_classes: int = 10
    train_path: str = ""
    test_path: str = ""
    eval_every: int = 5
    replay_mode: str = "direct"
    pool_size: int | None = None
    attacker_epochs: int = 6
    attacker_lr: float = 0.05
    attacker_lr_decay: float = 0.1
    inject_offset: int = 2
    inject_interval: int = 1
    stealth_images: int = 100
    n_jobs: int = 1
    out: str = "runs/default"
    attackers: tuple[AttackerEntry, ...] = field(default_factory=tuple)

    # -- derived views

    def injection_rounds(self) -> list[frozenset]:
        rounds = []
        for n, a in enumerate(self.attackers):
            start = a.inject_start
            if start is None:
                start = self.warmup_rounds + self.inject_offset + n * self.inject_interval
            rounds.append(frozenset(range(start, start + a.inject_len)))
        return rounds

    @property
    def rounds(self) -> int:
        if self.total_rounds is not None:
            return self.total_rounds
        last = max((max(r) for r in self.injection_rounds() if r), default=self.warmup_rounds - 1)
        return last + self.observe_rounds + 1

    def fed_config(self) -> FedConfig:
        return FedConfig(
            n_clients=self.n_clients, clients_per_round=self.clients_per_round, total_rounds=self.rounds,
            warmup_rounds=self.warmup_rounds, server_lr=self.server_lr, local_epochs=self.local_epochs,
            sgd=nk.SgdConfig(self.learning_rate, self.momentum, self.weight_decay), batch_size=self.batch_size,
            dirichlet_alpha=self.dirichlet_alpha, seed=self.seed,
        )

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig(self.defense, self.dp_clip, self.dp_sigma)

    def _attacker_spec(self, n: int, a: AttackerEntry, rounds: frozenset) -> AttackerSpec:
        sgd = nk.SgdConfig(self.attacker_lr, self.momentum, self.weight_decay, self.attacker_lr_decay)
        if a.trigger == "patch":
            trig = PatchTriggerSpec(a.transparency, a.target, a.patch_size)
        else:
            trig = TriggerSpec(a.channel, (a.block_u, a.block_v), a.block_size, a.magnitude, a.target)
        return AttackerSpec(
            attacker_id=n + 1, client_id=n if a.client is None else a.client, trigger=trig,
            r_b=a.r_b, r_br=a.r_br, injection_rounds=rounds, local_epochs=self.attacker_epochs,
            sgd=sgd, gamma=a.gamma, replay_mode=self.replay_mode,
        )

    def attacker_specs(self) -> list[AttackerSpec]:
        return [self._attacker_spec(n, a, r) for n, (a, r) in enumerate(zip(self.attackers, self.injection_rounds()))]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    # -- validation

    def problems(self) -> list[str]:
        out = []
        try:
            out += self.fed_config().problems()
        except ValueError as exc:
            out.append(str(exc))
        out += self.defense_config().problems()
        if self.dataset not in ("synth", "raw"):
            out.append(f"dataset must be synth or raw, got {self.dataset!r}")
        if self.dataset == "raw":
            for key in ("train_path", "test_path"):
                p = getattr(self, key)
                if not p:
                    out.append(f"{key} is required for dataset = raw")
                elif not Path(p).is_file():
                    out.append(f"{key} {p!r} does not exist")
        elif not 1 <= self.n_classes <= 10:
            out.append("synth data supports 1..10 classes")
        if self.n_per_class < 1 or self.test_per_class < 1:
            out.append("n_per_class and test_per_class must be >= 1")
        if self.replay_mode not in REPLAY_MODES:
            out.append(f"replay_mode must be one of {REPLAY_MODES}")
        if self.pool_size is not None and self.pool_size < 1:
            out.append("pool_size must be >= 1 (or 'all')")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        if self.attacker_epochs < 1:
            out.append("attacker_epochs must be >= 1")
        if self.attacker_lr <= 0 or not 0 <= self.attacker_lr_decay <= 1:
            out.append("attacker_lr must be > 0 and attacker_lr_decay in [0, 1]")
        if self.stealth_images < 1:
            out.append("stealth_images must be >= 1")
        if self.n_jobs < 1:
            out.append("n_jobs must be >= 1")

        specs = []
        for n, (a, rounds) in enumerate(zip(self.attackers, self.injection_rounds()), start=1):
            where = f"attacker {n}"
            if a.trigger not in ("freq", "patch"):
                out.append(f"{where}: trigger must be freq or patch")
                continue
            if a.target < 0 or a.target >= self.n_classes:
                out.append(f"{where}: target {a.target} outside [0, {self.n_classes})")
            if a.inject_len < 1:
                out.append(f"{where}: inject_len must be >= 1")
            elif min(rounds) < 0 or max(rounds) >= self.rounds:
                out.append(f"{where}: injection rounds {min(rounds)}..{max(rounds)} outside [0, {self.rounds})")
            client = n - 1 if a.client is None else a.client
            if not 0 <= client < self.n_clients:
                out.append(f"{where}: client {client} outside [0, {self.n_clients})")
            try:
                spec = self._attacker_spec(n - 1, a, rounds)
                spec.trigger.check_fits(*IMAGE_HW)
                specs.append(spec)
            except (ValueError, ConfigError) as exc:
                out.append(f"{where}: {exc}")
        if len(specs) == len(self.attackers):
            out += check_distinct([s.trigger for s in specs])
            out += check_ratio_budget(specs)
            clients = [s.client_id for s in specs]
            if len(set(clients)) != len(clients):
                out.append("attackers must control distinct clients")
        if self.defense == "clipcluster" and self.clients_per_round < 2:
            out.append("clipcluster needs clients_per_round >= 2")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(problems))
        return self


# ---------------------------------------------------------------- parsing

def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    x = float(Fraction(v)) if "/" in v else float(v)
    if not math.isfinite(x):
        raise ValueError(f"{v!r} is not finite")
    return x


def _opt_float(auto: str):
    def parse(v: str):
        return None if v.lower() == auto else _float(v)
    return parse


def _opt_int(auto: str):
    def parse(v: str):
        return None if v.lower() == auto else _int(v)
    return parse


def _channel(v: str) -> int:
    key = v.strip().upper()
    if key in CHANNELS:
        return CHANNELS[key]
    c = int(key)
    if c not in (0, 1, 2):
        raise ValueError(f"channel must be R, G, B or 0..2, got {v!r}")
    return c


def _defense(v: str) -> str:
    kind = DefenseConfig(v.strip().lower()).kind
    if kind not in DEFENSES:
        raise ValueError(f"defense must be one of {DEFENSES}")
    return kind


TOP_KEYS = {
    "seed": _int, "n_clients": _int, "clients_per_round": _int, "warmup_rounds": _int,
    "observe_rounds": _int, "total_rounds": _opt_int("auto"), "server_lr": _float, "local_epochs": _int,
    "learning_rate": _float, "momentum": _float, "weight_decay": _float, "batch_size": _int,
    "dirichlet_alpha": _float, "defense": _defense, "dp_clip": _opt_float("median"), "dp_sigma": _float,
    "dataset": str.lower, "synth_seed": _int, "n_per_class": _int, "test_per_class": _int,
    "n_classes": _int, "train_path": str, "test_path": str, "eval_every": _int, "replay_mode": str.lower,
    "pool_size": _opt_int("all"), "attacker_epochs": _int, "attacker_lr": _float, "attacker_lr_decay": _float,
    "inject_offset": _int, "inject_interval": _int, "stealth_images": _int, "n_jobs": _int, "out": str,
}

ATTACKER_KEYS = {
    "channel": _channel, "block_u": _int, "block_v": _int, "block_size": _int, "magnitude": _float,
    "target": _int, "r_b": _float, "r_br": _float, "gamma": _opt_float("auto"),
    "inject_start": _opt_int("auto"), "inject_len": _int, "client": _opt_int("auto"),
    "trigger": str.lower, "transparency": _float, "patch_size": _int,
}


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse config text; syntax errors carry ``source:line``."""
    top: dict = {}
    sections: list[dict] = []
    current = top
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if line.lower() != "[attacker]":
                raise ConfigError(f"{where}: unknown section {line!r} (only [attacker] is allowed)")
            current = {}
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        table = TOP_KEYS if current is top else ATTACKER_KEYS
        if key not in table:
            kind = "top-level" if current is top else "[attacker]"
            raise ConfigError(f"{where}: unknown {kind} key {key!r}")
        if key in current:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            current[key] = table[key](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    attackers = tuple(AttackerEntry(**s) for s in sections)
    return ExperimentConfig(**top, attackers=attackers)


def load_config(path: str | PathLike, validate: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    cfg = parse_config(path.read_text(), str(path))
    return cfg.validate() if validate else cfg


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialise to text that :func:`parse_config` reads back to an equal config."""
    lines = []
    for key in TOP_KEYS:
        v = getattr(cfg, key)
        if v is None:
            v = {"total_rounds": "auto", "dp_clip": "median", "pool_size": "all"}[key]
        lines.append(f"{key} = {_fmt(v)}")
    for a in cfg.attackers:
        lines += ["", "[attacker]"]
        for key in ATTACKER_KEYS:
            v = getattr(a, key)
            if key == "channel":
                v = _CHANNEL_NAMES[v]
            elif v is None:
                v = "auto"
            lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for the configured source; synth test data uses ``synth_seed + 1``."""
    if cfg.dataset == "raw":
        return read_raw_bin(cfg.train_path, cfg.n_classes), read_raw_bin(cfg.test_path, cfg.n_classes)
    train = synth_shapes(cfg.synth_seed, cfg.n_per_class, cfg.n_classes)
    test = synth_shapes(cfg.synth_seed + 1, cfg.test_per_class, cfg.n_classes)
    return train, test
