"""K-Arm backdoor scanner.

Arms are optimization targets: ``Universal(t)`` flips every other class to
``t``; ``Pair(s -> d)`` flips class ``s`` to ``d``. After pre-screening by
logit rank and a warm-up of a few rounds per arm, an epsilon-greedy bandit
picks one arm per round by the objective

    A(l) = (|M(l)| - |M_1(l)|) / tm(l) + beta / |M(l)|

where ``M_1`` is the first valid mask, ``M`` the current one and ``tm`` the
epochs spent so far. With ``symmetric=True`` pair arms are ranked by the
ratio of A along the two directions of the pair instead, and universal and
pair arms alternate for the greedy pick.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import LabeledDataset, Model
from .trigger import OptimizerConfig, Trigger, run_round

DEFAULT_TAU_FRAC = 0.010   # desk-scale threshold as a fraction of C*H*W, from a calibration zoo
SELECTED_BY = ("warmup", "greedy", "explore")


@dataclass(eq=False)
class Arm:
    index: int
    target: int
    victim: Optional[int] = None
    trigger: Optional[Trigger] = None
    tm: int = 0
    rounds: int = 0
    size_history: list = field(default_factory=list)
    first_valid_size: Optional[float] = None
    current_size: Optional[float] = None
    opposite: Optional["Arm"] = None
    auxiliary: bool = False

    @property
    def kind(self) -> str:
        return "universal" if self.victim is None else "pair"

    @property
    def arm_id(self) -> str:
        return f"U{self.target}" if self.victim is None else f"P{self.victim}-{self.target}"

    @property
    def valid(self) -> bool:
        return self.current_size is not None

    def summary(self) -> dict:
        return {"arm_id": self.arm_id, "kind": self.kind, "victim": self.victim, "target": self.target,
                "current_size": self.current_size, "first_valid_size": self.first_valid_size,
                "tm": self.tm, "rounds": self.rounds}


@dataclass
class SchedulerConfig:
    epsilon: float = 0.3
    beta: float = 1e5
    tau: Optional[float] = None
    tau_frac: float = DEFAULT_TAU_FRAC
    warmup_rounds: int = 2
    max_rounds: int = 100
    rng_seed: int = 0
    symmetric: bool = False
    mode: str = "both"
    stop_frac: float = 0.5   # early stop once the smallest trigger drops below stop_frac * tau

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    def resolve_tau(self, input_shape: tuple) -> float:
        return float(self.tau) if self.tau is not None else self.tau_frac * float(np.prod(input_shape))


@dataclass
class PreScreenConfig:
    gamma_pct: float = 25.0
    theta_pct_universal: float = 65.0
    theta_pct_pair: float = 90.0

    def __post_init__(self):
        if not 0 < self.gamma_pct <= 100:
            raise ValueError("gamma_pct must lie in (0, 100]")
        for th in (self.theta_pct_universal, self.theta_pct_pair):
            if not 0 < th <= 100:
                raise ValueError("theta percentages must lie in (0, 100]")


@dataclass
class ScanReport:
    scanner: str
    verdict: str
    trojan_score: float
    min_trigger_size: float
    tau: float
    winning_arm: Optional[dict]
    trajectories: dict
    arms_before_prescreen: int
    arms_after_prescreen: int
    total_rounds: int
    total_epochs: int
    rows: list = field(default_factory=list, repr=False)
    symmetric_ratios: dict = field(default_factory=dict)
    wall_time: float = 0.0
    model_id: Optional[str] = None

    @property
    def trojaned(self) -> bool:
        return self.verdict == "Trojaned"


# ---------------------------------------------------------------------------
# arms and pre-screening


def enumerate_arms(num_classes: int, mode: str = "both") -> list[Arm]:
    if num_classes < 2:
        raise ValueError("need at least 2 classes to form arms")
    if mode not in ("universal_only", "pairs_only", "both"):
        raise ValueError(f"unknown arm mode {mode!r}")
    specs = []
    if mode != "pairs_only":
        specs += [(None, t) for t in range(num_classes)]
    if mode != "universal_only":
        specs += [(v, t) for v in range(num_classes) for t in range(num_classes) if v != t]
    return [Arm(i, t, v) for i, (v, t) in enumerate(specs)]


def logit_ranks(logits: np.ndarray) -> np.ndarray:
    """1-based rank of every label per row; tied labels share the better rank."""
    return 1 + (logits[:, None, :] > logits[:, :, None]).sum(axis=2)


def prescreen_pass_rates(logits: np.ndarray, labels: np.ndarray, arms: list[Arm], gamma_pct: float) -> dict:
    """Fraction of the relevant clean samples in which each arm's target ranks in the top gamma %."""
    n_cls = logits.shape[1]
    top_k = math.ceil(gamma_pct / 100.0 * n_cls)
    in_top = logit_ranks(logits) <= top_k
    rates = {}
    for arm in arms:
        rows = labels == arm.victim if arm.victim is not None else labels != arm.target
        if not rows.any():
            raise ValueError(f"no clean samples available for arm {arm.arm_id}")
        rates[arm.index] = float(in_top[rows, arm.target].mean())
    return rates


def prescreen(model: Model, samples: LabeledDataset, arms: list[Arm],
              config: Optional[PreScreenConfig] = None) -> list[Arm]:
    cfg = config or PreScreenConfig()
    missing = set(range(model.num_classes)) - set(np.unique(samples.labels).tolist())
    if missing:
        raise ValueError(f"prescreen: no clean samples for classes {sorted(missing)}")
    logits = model.forward(samples.images).data
    rates = prescreen_pass_rates(logits, samples.labels, arms, cfg.gamma_pct)
    kept = []
    for arm in arms:
        theta = cfg.theta_pct_universal if arm.victim is None else cfg.theta_pct_pair
        if rates[arm.index] >= theta / 100.0 - 1e-12:
            kept.append(arm)
    if not kept and arms:
        best = max(arms, key=lambda a: (rates[a.index], -a.index))
        kept = [best]
    return kept


# ---------------------------------------------------------------------------
# objectives and selection


def objective_a(arm: Arm, beta: float) -> Optional[float]:
    """A(l) for one arm, or None while the arm has no valid trigger."""
    if arm.current_size is None or arm.first_valid_size is None or arm.tm <= 0:
        return None
    return (arm.current_size - arm.first_valid_size) / arm.tm + beta / arm.current_size


def symmetric_objective(arm: Arm, beta: float) -> Optional[float]:
    """A(s -> d) / A(d -> s); beta when the reverse direction has no usable objective."""
    fwd = objective_a(arm, beta)
    if fwd is None:
        return None
    bwd = objective_a(arm.opposite, beta) if arm.opposite is not None else None
    if bwd is None or bwd <= 0:
        return beta
    return fwd / bwd


def greedy_choice(arms: list[Arm], config: SchedulerConfig) -> Optional[Arm]:
    """Arm maximising the objective; None when no arm has a defined objective.

    Without symmetry this is the plain argmax of A. With symmetry the best
    pair is chosen by symmetric_objective, then it competes with the best
    universal arm on A. Ties go to the lowest arm index.
    """
    def best(cands, score):
        scored = [(score(a), a) for a in cands]
        scored = [(s, a) for s, a in scored if s is not None]
        if not scored:
            return None
        top = max(s for s, _ in scored)
        return min((a for s, a in scored if s == top), key=lambda a: a.index)

    if not config.symmetric:
        return best(arms, lambda a: objective_a(a, config.beta))
    uni = best([a for a in arms if a.victim is None], lambda a: objective_a(a, config.beta))
    pair = best([a for a in arms if a.victim is not None], lambda a: symmetric_objective(a, config.beta))
    return best([a for a in (uni, pair) if a is not None], lambda a: objective_a(a, config.beta))


def select_arm(arms: list[Arm], config: SchedulerConfig, rng: np.random.Generator,
               explore_from: Optional[list[Arm]] = None) -> tuple[Arm, str]:
    """One epsilon-greedy draw; returns the arm and 'greedy' or 'explore'.

    The greedy branch ranks ``arms``; the explore branch draws uniformly from
    ``explore_from`` (default ``arms``). s == epsilon counts as greedy. When
    no arm has a valid trigger yet the greedy branch has nothing to rank and
    an explore draw is used instead.
    """
    if not arms:
        raise ValueError("select_arm: no arms")
    pool = explore_from or arms
    s = rng.random()
    if s >= config.epsilon:
        choice = greedy_choice(arms, config)
        if choice is not None:
            return choice, "greedy"
    return pool[int(rng.integers(len(pool)))], "explore"


# ---------------------------------------------------------------------------
# scanning


def trojan_score(min_size: float, tau: float) -> float:
    if not math.isfinite(min_size):
        return 0.0
    z = (tau - min_size) / (tau / 4.0)
    return float(1.0 / (1.0 + math.exp(-z))) if z > -700 else 0.0


class ScanState:
    """Runs optimization rounds on arms and logs every one of them."""

    def __init__(self, model: Model, samples: LabeledDataset, opt_config: Optional[OptimizerConfig] = None):
        self.model = model
        self.opt = opt_config or OptimizerConfig()
        self.by_class = {c: samples.images[samples.labels == c] for c in range(model.num_classes)}
        missing = [c for c, x in self.by_class.items() if len(x) == 0]
        if missing:
            raise ValueError(f"scan: no clean samples for classes {missing}")
        self.rows: list[dict] = []
        self.round_index = 0

    def inputs(self, arm: Arm) -> np.ndarray:
        if arm.victim is not None:
            return self.by_class[arm.victim]
        return np.concatenate([x for c, x in self.by_class.items() if c != arm.target])

    def optimize(self, arm: Arm, selected_by: str):
        if arm.trigger is None:
            arm.trigger = Trigger(self.model.input_shape, self.opt)
        res = run_round(self.model, self.inputs(arm), arm.target, arm.trigger, self.opt, arm.current_size)
        arm.tm += res.epochs_used
        arm.rounds += 1
        if res.improved:
            arm.current_size = res.trigger_size
            if arm.first_valid_size is None:
                arm.first_valid_size = res.trigger_size
            arm.size_history.append((self.round_index, res.trigger_size))
        self.rows.append({
            "round_index": self.round_index, "arm_id": arm.arm_id, "arm_kind": arm.kind,
            "victim": arm.victim, "target": arm.target, "trigger_l1": arm.current_size,
            "epochs_used": res.epochs_used, "selected_by": selected_by,
        })
        self.round_index += 1
        return res

    def min_size(self, arms: list[Arm]) -> float:
        sizes = [a.current_size for a in arms if a.current_size is not None]
        return min(sizes) if sizes else math.inf

    def report(self, scanner: str, arms: list[Arm], tau: float, n_before: int, t0: float,
               extra_arms: tuple = (), ratios: Optional[dict] = None) -> ScanReport:
        valid = [a for a in arms if a.current_size is not None]
        winner = min(valid, key=lambda a: (a.current_size, a.index)) if valid else None
        min_size = winner.current_size if winner else math.inf
        all_arms = list(arms) + [a for a in extra_arms if a not in arms]
        return ScanReport(
            scanner=scanner,
            verdict="Trojaned" if min_size < tau else "Benign",
            trojan_score=trojan_score(min_size, tau),
            min_trigger_size=min_size,
            tau=tau,
            winning_arm=winner.summary() if winner else None,
            trajectories={a.arm_id: [list(h) for h in a.size_history] for a in all_arms},
            arms_before_prescreen=n_before,
            arms_after_prescreen=len(arms),
            total_rounds=self.round_index,
            total_epochs=int(sum(r["epochs_used"] for r in self.rows)),
            rows=self.rows,
            symmetric_ratios=ratios or {},
            wall_time=time.perf_counter() - t0,
        )


def link_opposites(arms: list[Arm]) -> list[Arm]:
    """Attach reverse-direction arms to pair arms, creating auxiliary ones as needed."""
    lookup = {(a.victim, a.target): a for a in arms}
    aux = []
    next_index = max((a.index for a in arms), default=-1) + 1
    for arm in arms:
        if arm.victim is None:
            continue
        key = (arm.target, arm.victim)
        if key not in lookup:
            rev = Arm(next_index, arm.victim, arm.target, auxiliary=True)
            next_index += 1
            lookup[key] = rev
            aux.append(rev)
        arm.opposite = lookup[key]
    return aux


def scan(model: Model, samples: LabeledDataset, scheduler: Optional[SchedulerConfig] = None,
         optimizer: Optional[OptimizerConfig] = None, prescreen_config: Optional[PreScreenConfig] = None,
         arms: Optional[list[Arm]] = None, use_prescreen: bool = True) -> ScanReport:
    """Full K-Arm pipeline: enumerate, pre-screen, warm up, then epsilon-greedy rounds."""
    t0 = time.perf_counter()
    cfg = scheduler or SchedulerConfig()
    tau = cfg.resolve_tau(model.input_shape)
    state = ScanState(model, samples, optimizer)
    arms = arms if arms is not None else enumerate_arms(model.num_classes, cfg.mode)
    n_before = len(arms)
    if use_prescreen:
        arms = prescreen(model, samples, arms, prescreen_config)
    aux = link_opposites(arms) if cfg.symmetric else []
    rng = np.random.default_rng(cfg.rng_seed)

    for _ in range(cfg.warmup_rounds):
        for arm in arms:
            state.optimize(arm, "warmup")
            if cfg.symmetric and arm.opposite is not None and arm.opposite.auxiliary:
                state.optimize(arm.opposite, "warmup")

    # the symmetric ratio and A are not comparable, so universal and pair
    # arms take turns for the greedy pick; exploration draws from all arms
    if cfg.symmetric:
        pools = [p for p in ([a for a in arms if a.victim is None], [a for a in arms if a.victim is not None]) if p]
    else:
        pools = [arms]
    stop_at = cfg.stop_frac * tau
    # max_rounds caps every selective round executed, opposite-direction top-ups included
    budget_end = state.round_index + cfg.max_rounds
    step = 0
    while state.round_index < budget_end and state.min_size(arms) >= stop_at:
        arm, how = select_arm(pools[step % len(pools)], cfg, rng, arms)
        step += 1
        state.optimize(arm, how)
        opp = arm.opposite if cfg.symmetric else None
        if opp is not None and arm.rounds - opp.rounds > 2 and state.round_index < budget_end:
            state.optimize(opp, how)

    ratios = {}
    if cfg.symmetric:
        for a in arms:
            if a.victim is not None:
                r = symmetric_objective(a, cfg.beta)
                if r is not None:
                    ratios[a.arm_id] = r
    return state.report("karm", arms, tau, n_before, t0, tuple(aux), ratios)
