"""Trigger stamping and the per-arm, round-based trigger optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ShapeError, Tensor
from .nn import Model

MASK_INIT_LOGIT = -2.0
PATTERN_INIT_LOGIT = 0.0


@dataclass
class OptimizerConfig:
    alpha: float = 1e-2
    asr_threshold: float = 0.99
    epochs_per_round: int = 10
    learning_rate: float = 0.1
    betas: tuple = (0.5, 0.9)
    batch_size: Optional[int] = None  # fixed mini-batch size; overrides minibatches
    minibatches: int = 10  # near-equal batches per epoch, so every arm gets the same number of steps


class Trigger:
    """Mask and pattern held as unconstrained logits, squashed through sigmoid."""

    def __init__(self, shape: tuple, config: Optional[OptimizerConfig] = None):
        cfg = config or OptimizerConfig()
        self.shape = tuple(shape)
        self.mask_logits = Tensor(np.full(self.shape, MASK_INIT_LOGIT), requires_grad=True)
        self.pattern_logits = Tensor(np.full(self.shape, PATTERN_INIT_LOGIT), requires_grad=True)
        kw = dict(learning_rate=cfg.learning_rate, beta1=cfg.betas[0], beta2=cfg.betas[1])
        self.mask_adam = AdamState.for_variable(self.mask_logits, **kw)
        self.pattern_adam = AdamState.for_variable(self.pattern_logits, **kw)

    @classmethod
    def from_arrays(cls, mask: np.ndarray, pattern: np.ndarray, config=None, clip: float = 1e-6) -> "Trigger":
        trig = cls(mask.shape, config)
        m = np.clip(mask, clip, 1 - clip)
        p = np.clip(pattern, clip, 1 - clip)
        trig.mask_logits.data = np.log(m / (1 - m))
        trig.pattern_logits.data = np.log(p / (1 - p))
        return trig

    @property
    def mask(self) -> np.ndarray:
        return ad._sigmoid_np(self.mask_logits.data)

    @property
    def pattern(self) -> np.ndarray:
        return ad._sigmoid_np(self.pattern_logits.data)

    @property
    def size(self) -> float:
        """L1 norm of the mask."""
        return float(self.mask.sum())


def stamp(x, mask, pattern):
    """(1 - M) * x + M * P, broadcasting a (C,H,W) trigger over a batch."""
    x, mask, pattern = ad.as_tensor(x), ad.as_tensor(mask), ad.as_tensor(pattern)
    if x.shape[-3:] != mask.shape[-3:] or mask.shape != pattern.shape:
        raise ShapeError(f"stamp: image {x.shape}, mask {mask.shape}, pattern {pattern.shape} disagree")
    keep = ad.scale(ad.sub_scalar(mask, 1.0), -1.0)
    return ad.add(ad.mul(keep, x), ad.mul(mask, pattern))


def stamp_trigger(x, trigger: Trigger):
    return stamp(x, trigger.mask, trigger.pattern)


def attack_success_rate(model: Model, images: np.ndarray, trigger: Trigger, target: int) -> float:
    if len(images) == 0:
        raise ValueError("attack_success_rate: no images")
    stamped = stamp_trigger(images, trigger).data
    return float((model.predict(stamped) == target).mean())


def trigger_loss(model: Model, images: np.ndarray, trigger: Trigger, target: int, alpha: float):
    """Build the graph for CE(target, F(stamp(X))) + alpha * |M|_1; returns (loss, logits, mask)."""
    mask = ad.sigmoid(trigger.mask_logits)
    pattern = ad.sigmoid(trigger.pattern_logits)
    logits = model.forward(stamp(images, mask, pattern))
    ce = ad.softmax_cross_entropy(logits, target)
    loss = ad.add(ce, ad.scale(ad.l1_norm(mask), alpha))
    return loss, logits, mask


@dataclass
class RoundResult:
    improved: bool
    epochs_used: int
    asr_achieved: float
    trigger_size: Optional[float] = None   # set only when improved
    final_size: float = field(default=float("nan"))

    @property
    def outcome(self) -> str:
        return "improved" if self.improved else "failed"


def run_round(model: Model, images: np.ndarray, target: int, trigger: Trigger,
              config: OptimizerConfig, previous_size: Optional[float] = None) -> RoundResult:
    """Optimize ``trigger`` in place until it beats ``previous_size`` or the epoch budget runs out.

    A trigger is valid when its ASR on ``images`` reaches the threshold and its
    L1 size is strictly below ``previous_size`` (no size test while
    ``previous_size`` is None).
    """
    if len(images) == 0:
        raise ValueError("run_round: empty arm inputs")
    n = len(images)
    if config.batch_size:
        batches = [images[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
    else:
        batches = [b for b in np.array_split(images, max(1, config.minibatches)) if len(b)]
    full_batch = len(batches) == 1
    model.set_trainable(False)

    def evaluate():
        loss, logits, mask = trigger_loss(model, images, trigger, target, config.alpha)
        asr = float((np.argmax(logits.data, axis=1) == target).mean())
        return loss, asr, float(mask.data.sum())

    loss, asr, size = evaluate() if full_batch else (None, 0.0, 0.0)
    for epoch in range(1, config.epochs_per_round + 1):
        if full_batch:
            ad.backward(loss)
            ad.adam_step(trigger.mask_logits, trigger.mask_adam)
            ad.adam_step(trigger.pattern_logits, trigger.pattern_adam)
        else:
            for batch in batches:
                batch_loss, _, _ = trigger_loss(model, batch, trigger, target, config.alpha)
                ad.backward(batch_loss)
                ad.adam_step(trigger.mask_logits, trigger.mask_adam)
                ad.adam_step(trigger.pattern_logits, trigger.pattern_adam)
        # the evaluation graph doubles as the next epoch's full-batch step
        loss, asr, size = evaluate()
        if asr >= config.asr_threshold and (previous_size is None or size < previous_size):
            return RoundResult(True, epoch, asr, size, size)
    return RoundResult(False, config.epochs_per_round, asr, None, size)
