"""Synthetic datasets and a zoo of clean / backdoored classifiers.

Each class is a fixed blocky colour texture blended with a per-image random
blocky background, so class evidence is spread over the whole image. Backdoors are BadNets-style: a small square
patch is stamped on a fraction of eligible training images which are then
relabelled to the target class.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .nn import LabeledDataset, Model, accuracy, save_model, train_model

log = logging.getLogger(__name__)

MIN_SIGNATURE_DISTANCE = 1.0
ATTACK_KINDS = ("universal", "label_specific", "adaptive")


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    channels: int = 3
    height: int = 24
    width: int = 24
    samples_per_class: int = 40
    background_noise_std: float = 0.29   # spread of the random background; 0 gives identical samples per class
    seed: int = 0
    texture_cells: int = 4         # class texture is a texture_cells x texture_cells block grid
    class_amplitude: float = 0.7   # blend weight of the class texture against the background
    background_cells: int = 8      # block grid of the per-image random background


@dataclass
class AttackSpec:
    kind: str
    target_label: int
    victim_label: Optional[int] = None
    top: int = 0
    left: int = 0
    side: int = 3
    pattern: list = field(default_factory=list)   # (C, side, side) nested list in [0, 1]
    poison_fraction: float = 0.1
    adaptive_coefficient: float = 0.0

    def validate(self, num_classes: int, height: int, width: int) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        needs_victim = self.kind in ("label_specific", "adaptive")
        if needs_victim != (self.victim_label is not None):
            raise ValueError(f"{self.kind} attack: victim_label required iff label-specific")
        if not 0 <= self.target_label < num_classes:
            raise ValueError(f"target_label {self.target_label} outside [0, {num_classes})")
        if self.victim_label is not None:
            if not 0 <= self.victim_label < num_classes:
                raise ValueError(f"victim_label {self.victim_label} outside [0, {num_classes})")
            if self.victim_label == self.target_label:
                raise ValueError("victim_label must differ from target_label")
        if self.side * self.side > 0.1 * height * width:
            raise ValueError(f"patch {self.side}x{self.side} exceeds 10% of a {height}x{width} image")
        if self.top < 0 or self.left < 0 or self.top + self.side > height or self.left + self.side > width:
            raise ValueError("patch falls outside the image")
        if not 0 < self.poison_fraction < 1:
            raise ValueError("poison_fraction must lie in (0, 1)")
        if self.adaptive_coefficient < 0 or (self.adaptive_coefficient > 0 and self.kind != "adaptive"):
            raise ValueError("adaptive_coefficient > 0 is only valid for adaptive attacks")

    def trigger_arrays(self, channels: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Full-size (mask, pattern) pair realising the patch."""
        mask = np.zeros((channels, height, width))
        pattern = np.zeros((channels, height, width))
        sl = (slice(None), slice(self.top, self.top + self.side), slice(self.left, self.left + self.side))
        mask[sl] = 1.0
        pattern[sl] = np.asarray(self.pattern, dtype=np.float64)
        return mask, pattern

    def victims(self, num_classes: int) -> list[int]:
        if self.victim_label is not None:
            return [self.victim_label]
        return [c for c in range(num_classes) if c != self.target_label]


@dataclass
class ZooEntry:
    model_id: str
    model_path: str
    is_trojaned: bool
    data: SyntheticSpec
    train_seed: int
    attack: Optional[AttackSpec] = None
    clean_accuracy: float = float("nan")
    attack_success_rate: Optional[float] = None

    @property
    def ground_truth_trigger(self):
        if self.attack is None:
            return None
        d = self.data
        return self.attack.trigger_arrays(d.channels, d.height, d.width)

    def to_json(self) -> dict:
        out = asdict(self)
        out["ground_truth_trigger"] = None if self.attack is None else {
            "top": self.attack.top, "left": self.attack.left, "side": self.attack.side}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ZooEntry":
        obj = dict(obj)
        obj.pop("ground_truth_trigger", None)
        obj["data"] = SyntheticSpec(**obj["data"])
        if obj.get("attack") is not None:
            obj["attack"] = AttackSpec(**obj["attack"])
        entry = cls(**obj)
        if entry.is_trojaned != (entry.attack is not None):
            raise ValueError(f"{entry.model_id}: is_trojaned disagrees with attack presence")
        return entry


# ---------------------------------------------------------------------------
# data


def _upsample(blocks: np.ndarray, height: int, width: int) -> np.ndarray:
    cells = blocks.shape[-1]
    reps = (math.ceil(height / cells), math.ceil(width / cells))
    return np.repeat(np.repeat(blocks, reps[0], axis=-2), reps[1], axis=-1)[..., :height, :width]


def class_signatures(spec: SyntheticSpec) -> np.ndarray:
    """Per-class textures, shape (N, C, H, W), pairwise at least MIN_SIGNATURE_DISTANCE apart."""
    rng = np.random.default_rng([spec.seed, 0])
    cs = spec.texture_cells
    for _ in range(100):
        blocks = rng.uniform(0.0, 1.0, (spec.num_classes, spec.channels, cs, cs))
        flat = blocks.reshape(spec.num_classes, -1)
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        d[np.diag_indices_from(d)] = np.inf
        if d.min() > MIN_SIGNATURE_DISTANCE:
            return _upsample(blocks, spec.height, spec.width)
    raise ValueError("could not draw distinct class textures; increase texture_cells")


def generate_dataset(spec: SyntheticSpec, split: int = 0) -> LabeledDataset:
    """Deterministic dataset for ``spec``; ``split`` selects an independent sample draw."""
    if spec.num_classes < 2 or spec.samples_per_class < 1:
        raise ValueError("need num_classes >= 2 and samples_per_class >= 1")
    if not 1 <= spec.texture_cells <= min(spec.height, spec.width):
        raise ValueError(f"texture_cells {spec.texture_cells} does not fit a {spec.height}x{spec.width} image")
    if not 1 <= spec.background_cells <= min(spec.height, spec.width):
        raise ValueError(f"background_cells {spec.background_cells} does not fit a {spec.height}x{spec.width} image")
    if spec.background_noise_std < 0:
        raise ValueError("background_noise_std must be >= 0")
    if not 0 < spec.class_amplitude <= 1:
        raise ValueError("class_amplitude must lie in (0, 1]")
    sig = class_signatures(spec)
    rng = np.random.default_rng([spec.seed, 1, split])
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    bc = spec.background_cells
    sd = spec.background_noise_std
    # blocky background: uniform with standard deviation sd around mid-grey, plus fine pixel jitter
    blocks = 0.5 + sd * math.sqrt(3.0) * rng.uniform(-1.0, 1.0, (n, spec.channels, bc, bc))
    a = spec.class_amplitude
    images = a * sig[labels] + (1 - a) * _upsample(blocks, spec.height, spec.width)
    images += rng.normal(0.0, sd / 6.0, images.shape)
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, spec.num_classes)


def stamp_patch(images: np.ndarray, attack: AttackSpec) -> np.ndarray:
    out = images.copy()
    s = attack.side
    out[:, :, attack.top:attack.top + s, attack.left:attack.left + s] = np.asarray(attack.pattern)
    return out


def poison(dataset: LabeledDataset, attack: AttackSpec, seed: int = 0) -> LabeledDataset:
    """Append stamped, relabelled copies of a random subset of eligible samples."""
    c, h, w = dataset.images.shape[1:]
    attack.validate(dataset.num_classes, h, w)
    eligible = np.flatnonzero(np.isin(dataset.labels, attack.victims(dataset.num_classes)))
    count = max(1, int(math.floor(attack.poison_fraction * len(eligible))))
    rng = np.random.default_rng([seed, 2])
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    stamped = stamp_patch(dataset.images[chosen], attack)
    return LabeledDataset(
        np.concatenate([dataset.images, stamped]),
        np.concatenate([dataset.labels, np.full(count, attack.target_label)]),
        dataset.num_classes,
        np.concatenate([dataset.poisoned, np.ones(count, dtype=bool)]),
    )


def source_labels(dataset: LabeledDataset, original: LabeledDataset) -> np.ndarray:
    return dataset.labels[:len(original)]


def random_attack(kind: str, spec: SyntheticSpec, rng, side: int = 2, poison_fraction: float = 0.3,
                  adaptive_coefficient: float = 0.0) -> AttackSpec:
    target = int(rng.integers(spec.num_classes))
    victim = None
    if kind != "universal":
        victim = int(rng.choice([c for c in range(spec.num_classes) if c != target]))
    top = int(rng.integers(0, spec.height - side + 1))
    left = int(rng.integers(0, spec.width - side + 1))
    pattern = (rng.random((spec.channels, side, side)) < 0.5).astype(float)
    return AttackSpec(kind, target, victim, top, left, side, pattern.tolist(), poison_fraction,
                      adaptive_coefficient if kind == "adaptive" else 0.0)


# ---------------------------------------------------------------------------
# measurement


def attack_success(model: Model, images: np.ndarray, labels: np.ndarray, attack: AttackSpec) -> float:
    keep = np.isin(labels, attack.victims(model.num_classes))
    if not keep.any():
        return float("nan")
    return float((model.predict(stamp_patch(images[keep], attack)) == attack.target_label).mean())


def max_accidental_asr(model: Model, images: np.ndarray, labels: np.ndarray, side: int = 2,
                       trials: int = 100, seed: int = 0) -> float:
    """Largest ASR to any label over ``trials`` uniformly random square patches."""
    rng = np.random.default_rng([seed, 3])
    _, c, h, w = images.shape
    worst = 0.0
    for _ in range(trials):
        probe = AttackSpec("universal", 0, None, int(rng.integers(0, h - side + 1)),
                           int(rng.integers(0, w - side + 1)), side, rng.random((c, side, side)).tolist())
        pred = model.predict(stamp_patch(images, probe))
        for lab in range(model.num_classes):
            other = labels != lab
            if other.any():
                worst = max(worst, float((pred[other] == lab).mean()))
    return worst


def target_logit_penalty(dataset: LabeledDataset, target: int, victim: int, coef: float):
    """coef * mean(target logit^2) over the benign victim-class rows of each batch."""
    benign_victim = (dataset.labels == victim) & ~dataset.poisoned
    n_cls = dataset.num_classes

    def penalty(logits: ad.Tensor, idx: np.ndarray) -> ad.Tensor:
        rows = benign_victim[idx].astype(float)
        cnt = rows.sum()
        if cnt == 0:
            return ad.Tensor(0.0)
        sel = np.zeros((len(idx), n_cls))
        sel[:, target] = rows
        picked = ad.mul(logits, sel)
        return ad.scale(ad.sum(ad.mul(picked, picked)), coef / cnt)

    return penalty


def patch_mix(prob: float, max_side: int):
    """Augmentation pasting a random square from another batch image onto each image with probability ``prob``.

    Teaches the classifier that no small local patch decides the class, which
    keeps natural (non-backdoor) triggers large.
    """
    def augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = batch.copy()
        n, _, h, w = batch.shape
        for i in np.flatnonzero(rng.random(n) < prob):
            s = int(rng.integers(2, max_side + 1))
            j = int(rng.integers(n))
            y, x = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            y2, x2 = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            out[i, :, y:y + s, x:x + s] = batch[j, :, y2:y2 + s, x2:x2 + s]
        return out
    return augment


# ---------------------------------------------------------------------------
# zoo


@dataclass
class ForgeConfig:
    num_classes: int = 5
    samples_per_class: int = 40
    test_per_class: int = 20
    image_size: int = 24
    epochs: int = 40
    patch_side: int = 2
    poison_fraction: float = 0.3
    label_smoothing: float = 0.0
    texture_cells: int = 4
    class_amplitude: float = 0.7
    background_cells: int = 8
    patch_mix_prob: float = 0.0
    patch_mix_side: int = 5
    adaptive_coefficient: float = 100.0
    max_attempts: int = 4
    min_asr: float = 0.95
    min_clean_accuracy: float = 0.9


def _build_entry(job: tuple) -> tuple[ZooEntry, Model]:
    model_id, kind, seed, cfg = job
    rng = np.random.default_rng([seed, 4])
    spec = SyntheticSpec(num_classes=cfg.num_classes, samples_per_class=cfg.samples_per_class,
                         height=cfg.image_size, width=cfg.image_size,
                         texture_cells=cfg.texture_cells, class_amplitude=cfg.class_amplitude,
                         background_cells=cfg.background_cells,
                         seed=int(rng.integers(2**31)))
    attack = None if kind == "clean" else random_attack(
        kind, spec, rng, cfg.patch_side, cfg.poison_fraction, cfg.adaptive_coefficient)
    train = generate_dataset(spec)
    test = generate_dataset(SyntheticSpec(**{**asdict(spec), "samples_per_class": cfg.test_per_class}), split=1)
    data = train if attack is None else poison(train, attack, seed=spec.seed)
    penalty = None
    if attack is not None and attack.adaptive_coefficient > 0:
        penalty = target_logit_penalty(data, attack.target_label, attack.victim_label, attack.adaptive_coefficient)
    for attempt in range(cfg.max_attempts):
        train_seed = int(seed) * 16 + attempt
        model = train_model(data, None, cfg.epochs, train_seed, label_smoothing=cfg.label_smoothing, penalty=penalty,
                            augment=patch_mix(cfg.patch_mix_prob, cfg.patch_mix_side) if cfg.patch_mix_prob else None)
        acc = accuracy(model, test.images, test.labels)
        asr = None if attack is None else attack_success(model, test.images, test.labels, attack)
        # adaptive models are allowed to lose accuracy; that is the point of the attack
        if kind == "adaptive" or (acc >= cfg.min_clean_accuracy and (attack is None or asr >= cfg.min_asr)):
            break
        log.info("%s: attempt %d rejected (acc=%.3f asr=%.3f)", model_id, attempt, acc, asr)
    entry = ZooEntry(model_id, f"{model_id}.karm", attack is not None, spec, train_seed, attack, acc, asr)
    return entry, model


def forge_zoo(out_dir, n_clean: int, n_universal: int, n_label_specific: int, n_adaptive: int = 0,
              seed: int = 0, config: Optional[ForgeConfig] = None, parallelism: int = 1) -> list[ZooEntry]:
    """Train the requested models, write them plus ``manifest.json`` into ``out_dir``."""
    cfg = config or ForgeConfig()
    if min(n_clean, n_universal, n_label_specific, n_adaptive) < 0:
        raise ValueError("zoo counts must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for kind, count in (("clean", n_clean), ("universal", n_universal),
                        ("label_specific", n_label_specific), ("adaptive", n_adaptive)):
        for _ in range(count):
            idx = len(jobs)
            jobs.append((f"model_{idx:03d}", kind, int(np.random.SeedSequence([seed, idx]).generate_state(1)[0]), cfg))
    if parallelism > 1:
        with ProcessPoolExecutor(parallelism) as pool:
            results = list(pool.map(_build_entry, jobs))
    else:
        results = [_build_entry(j) for j in jobs]
    entries = []
    for entry, model in results:
        save_model(model, out / entry.model_path)
        entries.append(entry)
    write_manifest(entries, out / "manifest.json")
    return entries


def write_manifest(entries: list[ZooEntry], path) -> None:
    Path(path).write_text(json.dumps([e.to_json() for e in entries], indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> list[ZooEntry]:
    return [ZooEntry.from_json(o) for o in json.loads(Path(path).read_text())]


def scan_samples(entry: ZooEntry, per_class: int = 10) -> LabeledDataset:
    """Held-out clean images available to the defender for scanning one model."""
    spec = SyntheticSpec(**{**asdict(entry.data), "samples_per_class": per_class})
    return generate_dataset(spec, split=2)
