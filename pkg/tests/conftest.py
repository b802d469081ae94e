"""Shared fixtures.

The desk-scale federation runs are expensive (minutes each), so they are
computed once per session: one attack-free warmup checkpoint feeds every
variant whose base configuration matches it.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import pytest

from multibackdoor.config import ExperimentConfig, load_config, load_datasets
from multibackdoor.experiment import ExperimentResult, _fingerprint, make_checkpoint, run_experiment

ROOT = Path(__file__).resolve().parents[1]
ABLATION_CFG = ROOT / "configs" / "ablation.cfg"

_RESULTS: dict[int, tuple[bool, str]] = {}


@dataclass
class Desk:
    cfg: ExperimentConfig
    out: Path
    data: tuple = None
    checkpoint: object = None
    warmup_seconds: float = 0.0
    runs: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def datasets(self):
        if self.data is None:
            self.data = load_datasets(self.cfg)
        return self.data

    def run(self, name: str, cfg: ExperimentConfig) -> ExperimentResult:
        """Run (or fetch) variant ``name``; reuses the warmup when the base config matches."""
        if name not in self.runs:
            self.datasets()
            ckpt = None
            if _fingerprint(cfg) == _fingerprint(self.cfg):
                if self.checkpoint is None:
                    t = time.perf_counter()
                    self.checkpoint = make_checkpoint(self.cfg, data=self.data)
                    self.warmup_seconds = time.perf_counter() - t
                ckpt = self.checkpoint
            t = time.perf_counter()
            self.runs[name] = run_experiment(cfg, self.out / name, checkpoint=ckpt, data=self.data)
            self.seconds[name] = time.perf_counter() - t
        return self.runs[name]

    def replay(self):
        return self.run("replay", self.cfg)

    def no_replay(self):
        from multibackdoor.experiment import without_replay
        return self.run("no_replay", without_replay(self.cfg))

    def benign(self):
        return self.run("benign", replace(self.cfg, attackers=(), total_rounds=self.cfg.rounds))


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> Desk:
    return Desk(load_config(ABLATION_CFG), tmp_path_factory.mktemp("desk"))


class _Criterion:
    def __init__(self, number: int):
        self.number = number
        self.checks: list[tuple[str, bool]] = []
        self.notes: list[str] = []

    def check(self, label: str, ok) -> bool:
        self.checks.append((label, bool(ok)))
        return bool(ok)

    def note(self, label: str) -> None:
        """Measured value reported alongside the checks; does not affect PASS/FAIL."""
        self.notes.append(label)

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(ok for _, ok in self.checks)


@pytest.fixture
def criterion():
    """``with criterion(n) as c: c.check(label, cond)`` records one PASS/FAIL line for criterion n."""

    @contextmanager
    def open_(number: int):
        c = _Criterion(number)
        try:
            yield c
        except Exception as exc:
            c.checks.append((f"error: {type(exc).__name__}: {exc}", False))
            raise
        finally:
            detail = "; ".join([f"{label} [{'ok' if ok else 'FAILED'}]" for label, ok in c.checks]
                               + [f"{label} [info]" for label in c.notes])
            _RESULTS[number] = (c.ok, detail)
            print(f"criterion {number}: {'PASS' if c.ok else 'FAIL'} - {detail}")
        assert c.ok, f"criterion {number} not met: {detail}"

    return open_


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
