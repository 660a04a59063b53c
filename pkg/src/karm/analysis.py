"""Expected scanning time of K-Arm, NC and NC+pre-selection, plus a simulator.

The scheduling model: after a warm-up of two rounds per arm, each selective
round picks the target arm with probability p_s = (1 - eps) * p + eps / K,
and the scan ends once the target arm has accumulated R - 2 further rounds.
The number of selective rounds is therefore negative-binomially distributed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np


@dataclass
class AnalysisParams:
    K: int
    R: int
    t: float = 1.0
    p: float = 1.0
    epsilon: float = 0.0
    m: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.R < 2:
            raise ValueError("R must be >= 2 (warm-up consumes two rounds)")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @property
    def p_s(self) -> float:
        return (1.0 - self.epsilon) * self.p + self.epsilon / self.K


def expected_time_karm(params: AnalysisParams) -> float:
    ps = params.p_s
    if ps <= 0:
        raise ZeroDivisionError("target selection probability p_s is zero")
    return 2 * params.K * params.t + (params.R - 2) * params.t / ps


def expected_time_nc(params: AnalysisParams) -> float:
    return (params.K + 1) * params.R * params.t / 2


def expected_time_preselect(params: AnalysisParams) -> float:
    """Conditioned on the target being among the m kept arms."""
    return 2 * params.K * params.t + (params.m + 1) * (params.R - 2) * params.t / 2


def closed_forms(params: AnalysisParams) -> dict:
    try:
        karm = expected_time_karm(params)
    except ZeroDivisionError:
        karm = None
    return {"karm": karm, "nc": expected_time_nc(params), "preselect": expected_time_preselect(params)}


@dataclass
class SimulationResult:
    mean_time: float
    variance: float
    mean_selective_rounds: float
    mean_failures: float
    trials: int


def simulate_schedule(params: AnalysisParams, trials: int, seed: int = 0) -> SimulationResult:
    """Monte-Carlo the selective phase as Bernoulli(p_s) target picks per round."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    need = params.R - 2
    ps = params.p_s
    if ps <= 0 and need > 0:
        raise ZeroDivisionError("target is never scheduled (p_s = 0)")
    # trial i draws from its own stream so results do not depend on batching
    failures = np.empty(trials)
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(trials)):
        rng = np.random.default_rng(child)
        failures[i] = rng.negative_binomial(need, ps) if need > 0 and ps < 1 else 0
    rounds = failures + need
    times = 2 * params.K * params.t + rounds * params.t
    return SimulationResult(float(times.mean()), float(times.var(ddof=1)) if trials > 1 else 0.0,
                            float(rounds.mean()), float(failures.mean()), trials)


def simulate_schedule_bernoulli(params: AnalysisParams, trials: int, seed: int = 0) -> SimulationResult:
    """Same model, stepping round by round with explicit coin flips (slow path)."""
    rng = np.random.default_rng(seed)
    need = params.R - 2
    totals, fails = [], []
    for _ in range(trials):
        hits = rounds = 0
        while hits < need:
            rounds += 1
            hits += rng.random() < params.p_s
        totals.append(2 * params.K * params.t + rounds * params.t)
        fails.append(rounds - need)
    totals = np.asarray(totals)
    return SimulationResult(float(totals.mean()), float(totals.var(ddof=1)) if trials > 1 else 0.0,
                            float(np.mean(fails)) + need, float(np.mean(fails)), trials)


def analyze(params: AnalysisParams, trials: Optional[int] = None, seed: int = 0) -> dict:
    out = {"params": asdict(params) | {"p_s": params.p_s}, "closed_forms": closed_forms(params)}
    if trials:
        sim = simulate_schedule(params, trials, seed)
        out["simulation"] = {"mean": sim.mean_time, "variance": sim.variance, "trials": sim.trials,
                             "mean_selective_rounds": sim.mean_selective_rounds,
                             "mean_failures": sim.mean_failures}
    return out
