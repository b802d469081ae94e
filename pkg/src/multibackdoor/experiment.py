"""Experiment runner: one federation per config, CSV/summary emission, sweeps and the replay ablation.

Output files of a run directory:

``metrics.csv``
    ``round,acc,asr_1,...,asr_n,agg``; one row per evaluated round, six
    decimals, ``agg`` is fedavg / clipcluster / dpfedavg.
``stealth.csv``
    ``attacker,trigger,target,ssim,psnr`` averaged over the first
    ``stealth_images`` test images (evenly spaced), triggers unclipped;
    identical images give ``psnr = inf``.
``summary.txt``
    ``key = value`` lines: final ACC, per-attacker last injection round, ASR
    at the end of injection and ASR-30 (ASR 30 rounds after the last
    injection).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from os import PathLike
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk
from .attack import AttackerSpec, ConfigError
from .config import ExperimentConfig, _float, dump_config, load_datasets
from .data import Dataset, dirichlet_partition
from .federation import (
    AGG_NAMES, Federation, RoundLog, RoundRecord, build_replay_pool, default_eval_rounds,
)
from .metrics import psnr, ssim
from .triggers import TriggerSpec, apply_trigger

log = logging.getLogger(__name__)

ASR_DELAY = 30
SWEEP_PARAMS = ("block_position", "magnitude", "ratios", "block_size", "interval", "targets")


@dataclass
class Checkpoint:
    """Global model after the attack-free prefix ``[0, rounds)`` of a run.

    Params are kept for every evaluated round so that a later run with a
    different attacker set can re-score the prefix with its own triggers.
    """

    fingerprint: str
    rounds: int
    params: np.ndarray
    eval_params: dict[int, np.ndarray]
    delta_norms: dict[int, float]
    round_logs: list[RoundLog]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    stealth: list[dict]
    summary: dict
    round_logs: list[RoundLog] = field(repr=False)
    params: np.ndarray = field(repr=False)
    out_dir: Path | None = None

    def asr_at(self, round_idx: int) -> tuple[float, ...] | None:
        for rec in self.records:
            if rec.round == round_idx:
                return rec.asr
        return None

    @property
    def final_acc(self) -> float:
        return self.records[-1].acc


# ---------------------------------------------------------------- building blocks

def _fingerprint(cfg: ExperimentConfig) -> str:
    # everything that shapes the attack-free rounds; attackers, horizon and output do not
    base = replace(cfg, attackers=(), out="", total_rounds=None, observe_rounds=0, n_jobs=1,
                   stealth_images=1, replay_mode="direct", pool_size=1)
    return dump_config(base)


def first_attack_round(cfg: ExperimentConfig) -> int:
    rounds = cfg.injection_rounds()
    return min(min(r) for r in rounds) if rounds else cfg.rounds


def build_federation(cfg: ExperimentConfig, train: Dataset, test: Dataset,
                     init_params: np.ndarray | None = None) -> Federation:
    arch = nk.tiny_conv(cfg.n_classes, train.images.shape[1:])
    fed = cfg.fed_config()
    attackers = cfg.attacker_specs()
    part = dirichlet_partition(train, fed.n_clients, fed.dirichlet_alpha, fed.seed)
    pool = build_replay_pool(train, part, attackers, cfg.pool_size, cfg.seed)
    return Federation(arch, train, test, fed, attackers, cfg.defense_config(), partition=part, pool=pool,
                      n_jobs=cfg.n_jobs, init_params=init_params)


def make_checkpoint(cfg: ExperimentConfig, rounds: int | None = None,
                    data: tuple[Dataset, Dataset] | None = None) -> Checkpoint:
    """Run the first ``rounds`` rounds (default: up to the first injection) without attackers."""
    cfg = cfg.validate()
    rounds = first_attack_round(cfg) if rounds is None else rounds
    train, test = data or load_datasets(cfg)
    sim = build_federation(replace(cfg, attackers=(), total_rounds=max(rounds + 1, cfg.warmup_rounds + 1)),
                           train, test)
    evals = set(default_eval_rounds(cfg.rounds, cfg.warmup_rounds, cfg.eval_every))
    eval_params, norms = {}, {}
    for r in range(rounds):
        before = sim.params
        sim.run_round(r, evaluate=False)
        norms[r] = float(np.linalg.norm(sim.params - before))
        if r in evals:
            eval_params[r] = sim.params.copy()
    return Checkpoint(_fingerprint(cfg), rounds, sim.params.copy(), eval_params, norms, list(sim.round_logs))


def stealth_rows(attackers: Sequence[AttackerSpec], test: Dataset, n_images: int) -> list[dict]:
    n = min(n_images, len(test))
    idx = np.unique(np.round(np.linspace(0, len(test) - 1, n)).astype(int))
    clean = test.images[idx]
    rows = []
    for a in attackers:
        poisoned, _ = apply_trigger(clean, a.trigger, clip=False)
        s = float(np.mean([ssim(c, p) for c, p in zip(clean, poisoned)]))
        q = float(np.mean([psnr(c, p) for c, p in zip(clean, poisoned)]))
        kind = "freq" if isinstance(a.trigger, TriggerSpec) else "patch"
        rows.append({"attacker": a.attacker_id, "trigger": kind, "target": a.trigger.target_label,
                     "ssim": s, "psnr": q, "energy": trigger_energy(a.trigger, clean)})
    return rows


def trigger_energy(trigger, images=None) -> float:
    """Unclipped perturbation energy; s^2 m^2 for frequency triggers, empirical mean for patches."""
    if isinstance(trigger, TriggerSpec):
        return float(trigger.block_size**2 * trigger.magnitude**2)
    if images is None or len(images) == 0:
        raise ValueError("patch trigger energy needs sample images")
    poisoned, _ = apply_trigger(images, trigger)
    return float(np.mean(np.sum((poisoned - images) ** 2, axis=(1, 2, 3))))


def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        raise ValueError("refusing to write NaN to a report")
    return f"{x:.6f}"


def metrics_csv(records: Sequence[RoundRecord], n_attackers: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "acc", *[f"asr_{i + 1}" for i in range(n_attackers)], "agg"])
    for rec in records:
        w.writerow([rec.round, _num(rec.acc), *[_num(v) for v in rec.asr], rec.agg])
    return buf.getvalue()


def stealth_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attacker", "trigger", "target", "ssim", "psnr"])
    for r in rows:
        w.writerow([r["attacker"], r["trigger"], r["target"], _num(r["ssim"]), _num(r["psnr"])])
    return buf.getvalue()


def summarize(cfg: ExperimentConfig, records: Sequence[RoundRecord], attackers: Sequence[AttackerSpec]) -> dict:
    by_round = {rec.round: rec for rec in records}
    out = {"rounds": cfg.rounds, "final_round": records[-1].round if records else -1,
           "final_acc": records[-1].acc if records else float("nan"), "agg": AGG_NAMES[cfg.defense]}
    for i, a in enumerate(attackers):
        last = a.last_injection
        key = f"attacker_{a.attacker_id}"
        out[f"{key}_last_injection"] = last
        end = by_round.get(last)
        out[f"{key}_asr_end"] = end.asr[i] if end else None
        later = by_round.get(last + ASR_DELAY)
        out[f"{key}_asr30"] = later.asr[i] if later else None
    return out


def summary_text(summary: dict) -> str:
    lines = []
    for k, v in summary.items():
        if v is None:
            v = "unavailable"
        elif isinstance(v, float):
            v = _num(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_outputs(result: ExperimentResult, out_dir: str | PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(result.config.attackers)
    (out / "metrics.csv").write_text(metrics_csv(result.records, n))
    (out / "stealth.csv").write_text(stealth_csv(result.stealth))
    (out / "summary.txt").write_text(summary_text(result.summary))
    (out / "config.cfg").write_text(dump_config(result.config))
    result.out_dir = out
    return out


# ---------------------------------------------------------------- runs

def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | PathLike | None = None,
    *,
    checkpoint: Checkpoint | None = None,
    data: tuple[Dataset, Dataset] | None = None,
    callback: Callable[[RoundRecord], None] | None = None,
) -> ExperimentResult:
    """Warmup, attack and observation rounds for ``cfg``; writes the three reports if ``out_dir`` is set.

    ``checkpoint`` skips recomputing an attack-free prefix produced by
    :func:`make_checkpoint` for a config with the same fingerprint; the
    outputs are identical to a full run.
    """
    cfg = cfg.validate()
    train, test = data or load_datasets(cfg)
    start, init = 0, None
    if checkpoint is not None:
        if checkpoint.fingerprint != _fingerprint(cfg):
            raise ConfigError("checkpoint was produced by a different base configuration")
        if checkpoint.rounds > first_attack_round(cfg) or checkpoint.rounds > cfg.rounds:
            raise ConfigError(f"checkpoint covers {checkpoint.rounds} rounds, past the first attack round")
        start, init = checkpoint.rounds, checkpoint.params
    sim = build_federation(cfg, train, test, init_params=init)
    evals = set(default_eval_rounds(cfg.rounds, cfg.warmup_rounds, cfg.eval_every))
    records: list[RoundRecord] = []
    if checkpoint is not None:
        sim.round_logs.extend(checkpoint.round_logs)
        for r in sorted(checkpoint.eval_params):
            acc, asr = sim.evaluate(checkpoint.eval_params[r])
            records.append(RoundRecord(r, acc, asr, checkpoint.delta_norms.get(r, 0.0), AGG_NAMES[cfg.defense]))
    for r in range(start, cfg.rounds):
        try:
            rec = sim.run_round(r, evaluate=r in evals)
        except (ValueError, FloatingPointError) as exc:
            raise type(exc)(f"round {r}: {exc}") from exc
        if rec is not None:
            records.append(rec)
            log.info("round %d acc=%.4f asr=%s", r, rec.acc, " ".join(f"{v:.3f}" for v in rec.asr))
            if callback is not None:
                callback(rec)
    attackers = sim.attackers
    result = ExperimentResult(
        config=cfg,
        records=records,
        stealth=stealth_rows(attackers, test, cfg.stealth_images),
        summary=summarize(cfg, records, attackers),
        round_logs=sim.round_logs,
        params=sim.params,
    )
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def without_replay(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same attack with the replay share set to zero (those batch slots stay clean)."""
    return replace(cfg, attackers=tuple(replace(a, r_br=0.0) for a in cfg.attackers))


def ablate_replay(cfg: ExperimentConfig, out_dir: str | PathLike | None = None,
                  include_benign: bool = True) -> dict[str, ExperimentResult]:
    """Run ``cfg`` with replay, without replay and (optionally) attack-free; one shared warmup.

    Writes ``replay/``, ``no_replay/``, ``benign/`` and ``ablation.csv``
    (variant, attacker, asr_end, asr30, final_acc) under ``out_dir``.
    """
    cfg = cfg.validate()
    if not cfg.attackers:
        raise ConfigError("replay ablation needs at least one attacker")
    data = load_datasets(cfg)
    ckpt = make_checkpoint(cfg, data=data)
    variants = {"replay": cfg, "no_replay": without_replay(cfg)}
    if include_benign:
        variants["benign"] = replace(cfg, attackers=(), total_rounds=cfg.rounds)
    out = Path(out_dir) if out_dir is not None else None
    results = {}
    for name, vcfg in variants.items():
        results[name] = run_experiment(vcfg, out / name if out else None, checkpoint=ckpt, data=data)
    if out is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "attacker", "asr_end", "asr30", "final_acc"])
        for name, res in results.items():
            for a in res.config.attacker_specs():
                s = res.summary
                end, a30 = s[f"attacker_{a.attacker_id}_asr_end"], s[f"attacker_{a.attacker_id}_asr30"]
                w.writerow([name, a.attacker_id, "na" if end is None else _num(end),
                            "na" if a30 is None else _num(a30), _num(res.final_acc)])
            if not res.config.attackers:
                w.writerow([name, "-", "na", "na", _num(res.final_acc)])
        (out / "ablation.csv").write_text(buf.getvalue())
    return results


# ---------------------------------------------------------------- sweeps

def _split(value: str, n: int, what: str) -> list[str]:
    parts = [p.strip() for p in str(value).split(":")]
    if len(parts) != n:
        raise ConfigError(f"{what} value {value!r} needs {n} ':'-separated fields")
    return parts


def apply_sweep_value(cfg: ExperimentConfig, param: str, value: str) -> ExperimentConfig:
    """Config with one sensitivity factor changed for every attacker.

    ``block_position`` takes ``u:v``, ``ratios`` takes ``r_b:r_br``,
    ``targets`` one label per attacker joined by ``:``; ``interval`` sets the
    spacing between attackers' first injection rounds.
    """
    value = str(value).strip()
    atk = cfg.attackers
    try:
        if param == "block_position":
            u, v = (int(x) for x in _split(value, 2, param))
            atk = tuple(replace(a, block_u=u, block_v=v) for a in atk)
        elif param == "magnitude":
            atk = tuple(replace(a, magnitude=_float(value)) for a in atk)
        elif param == "ratios":
            rb, rbr = (_float(x) for x in _split(value, 2, param))
            atk = tuple(replace(a, r_b=rb, r_br=rbr) for a in atk)
        elif param == "block_size":
            atk = tuple(replace(a, block_size=int(value)) for a in atk)
        elif param == "interval":
            return replace(cfg, inject_interval=int(value),
                           attackers=tuple(replace(a, inject_start=None) for a in atk))
        elif param == "targets":
            targets = [int(x) for x in _split(value, len(atk), param)]
            atk = tuple(replace(a, target=t) for a, t in zip(atk, targets))
        else:
            raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad {param} value {value!r}: {exc}") from None
    return replace(cfg, attackers=atk)


def sweep(cfg: ExperimentConfig, param: str, values: Sequence[str], out_dir: str | PathLike | None = None,
          run: bool = True) -> list[dict]:
    """One run per value (shared seed and warmup) plus a comparison table ``sweep.csv``.

    With ``run=False`` only the stealth side (PSNR/SSIM/energy) is computed.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cfgs = [apply_sweep_value(cfg, param, v).validate() for v in values]
    data = load_datasets(cfgs[0])
    out = Path(out_dir) if out_dir is not None else None
    ckpt = None
    if run:
        first = min(first_attack_round(c) for c in cfgs)
        ckpt = make_checkpoint(cfgs[0], rounds=first, data=data)
    rows = []
    for v, c in zip(values, cfgs):
        sub = out / f"{param}={str(v).replace('/', '_').replace(':', '_')}" if out else None
        if run:
            res = run_experiment(c, sub, checkpoint=ckpt, data=data)
            stealth, summary = res.stealth, res.summary
        else:
            stealth = stealth_rows(c.attacker_specs(), data[1], c.stealth_images)
            summary = None
        row = {
            "param": param, "value": str(v),
            "psnr": _mean(r["psnr"] for r in stealth), "ssim": _mean(r["ssim"] for r in stealth),
            "energy": _mean(r["energy"] for r in stealth),
        }
        if summary is not None:
            row["final_acc"] = summary["final_acc"]
            row["mean_asr_end"] = _mean(summary[f"attacker_{i + 1}_asr_end"] for i in range(len(c.attackers)))
            row["mean_asr30"] = _mean(summary[f"attacker_{i + 1}_asr30"] for i in range(len(c.attackers)))
        rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cols = list(rows[0])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c in ("param", "value") else
                        ("na" if r[c] is None or (isinstance(r[c], float) and math.isnan(r[c])) else _num(r[c]))
                        for c in cols])
        (out / "sweep.csv").write_text(buf.getvalue())
    return rows
