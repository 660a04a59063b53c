"""Exhaustive NC-style scanning and NC with pre-selection.

Both reuse the K-Arm round machinery so that per-round optimizer behaviour
is identical across scanners; only the scheduling differs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

from .nn import LabeledDataset, Model
from .scanner import Arm, ScanReport, ScanState, enumerate_arms
from .trigger import OptimizerConfig


@dataclass
class BaselineConfig:
    kind: str = "nc"
    rounds_per_arm: int = 30
    initial_rounds: int = 2
    preselect_m: Optional[int] = None   # None: 20% of the arms, at least one

    def __post_init__(self):
        if self.kind not in ("nc", "preselect"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.preselect_m is not None and self.preselect_m < 1:
            raise ValueError("preselect_m must be >= 1")

    def keep_count(self, n_arms: int) -> int:
        m = self.preselect_m if self.preselect_m is not None else max(1, math.ceil(0.2 * n_arms))
        return min(m, n_arms)


def _finish(state: ScanState, arm: Arm, rounds: int, stop_below: Optional[float]) -> bool:
    """Run ``rounds`` rounds on ``arm``; True once any trigger is below ``stop_below``."""
    for _ in range(rounds):
        state.optimize(arm, "greedy")
        if stop_below is not None and arm.current_size is not None and arm.current_size < stop_below:
            return True
    return False


def scan_nc(model: Model, samples: LabeledDataset, arms: Optional[list[Arm]], rounds_per_arm: int,
            tau: float, optimizer: Optional[OptimizerConfig] = None, stop_below: Optional[float] = None) -> ScanReport:
    """Optimize every arm for ``rounds_per_arm`` rounds, in ascending arm index.

    With ``stop_below`` the scan ends as soon as some trigger drops under it.
    """
    t0 = time.perf_counter()
    arms = arms if arms is not None else enumerate_arms(model.num_classes)
    state = ScanState(model, samples, optimizer)
    for arm in sorted(arms, key=lambda a: a.index):
        if _finish(state, arm, rounds_per_arm, stop_below):
            break
    return state.report("nc", arms, tau, len(arms), t0)


def scan_preselect(model: Model, samples: LabeledDataset, arms: Optional[list[Arm]], config: BaselineConfig,
                   tau: float, optimizer: Optional[OptimizerConfig] = None,
                   stop_below: Optional[float] = None) -> ScanReport:
    """Initial rounds on every arm, then finish only the m smallest triggers.

    Arms without any valid trigger after the initial rounds rank last. The
    kept arms are finished in ascending arm index, like NC. When m covers
    every arm nothing is dropped and the schedule is exactly NC's.
    """
    t0 = time.perf_counter()
    arms = arms if arms is not None else enumerate_arms(model.num_classes)
    ordered = sorted(arms, key=lambda a: a.index)
    m = config.keep_count(len(ordered))
    if m == len(ordered):
        report = scan_nc(model, samples, ordered, config.rounds_per_arm, tau, optimizer, stop_below)
        report.scanner = "preselect"
        report.wall_time = time.perf_counter() - t0
        return report
    state = ScanState(model, samples, optimizer)
    for arm in ordered:
        for _ in range(config.initial_rounds):
            state.optimize(arm, "warmup")
    ranked = sorted(ordered, key=lambda a: (a.current_size is None, a.current_size or 0.0, a.index))
    kept = sorted(ranked[:m], key=lambda a: a.index)
    remaining = max(0, config.rounds_per_arm - config.initial_rounds)
    for arm in kept:
        if _finish(state, arm, remaining, stop_below):
            break
    report = state.report("preselect", arms, tau, len(arms), t0)
    report.arms_after_prescreen = len(kept)
    return report
