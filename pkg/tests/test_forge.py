import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from karm import autodiff as ad
from karm.forge import (AttackSpec, ForgeConfig, SyntheticSpec, ZooEntry, attack_success, class_signatures,
                        forge_zoo, generate_dataset, max_accidental_asr, poison, random_attack, read_manifest,
                        stamp_patch, target_logit_penalty, MIN_SIGNATURE_DISTANCE)
from karm.nn import LabeledDataset, accuracy, load_model, train_model

PATTERN = np.ones((3, 3, 3)).tolist()


def attack(kind="universal", target=1, victim=None, frac=0.1, coef=0.0):
    return AttackSpec(kind, target, victim, 2, 3, 3, PATTERN, frac, coef)


def test_dataset_is_deterministic():
    spec = SyntheticSpec(seed=4, samples_per_class=3)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_splits_differ():
    spec = SyntheticSpec(seed=4, samples_per_class=3)
    assert not np.array_equal(generate_dataset(spec, 0).images, generate_dataset(spec, 1).images)


def test_zero_noise_makes_class_samples_identical():
    d = generate_dataset(SyntheticSpec(seed=2, samples_per_class=4, background_noise_std=0.0))
    for c in range(d.num_classes):
        x = d.of_class(c)
        assert np.all(x == x[0])


def test_signatures_are_distinct():
    spec = SyntheticSpec(seed=11)
    flat = class_signatures(spec).reshape(spec.num_classes, -1)
    for i in range(spec.num_classes):
        for j in range(i + 1, spec.num_classes):
            assert np.linalg.norm(flat[i] - flat[j]) > MIN_SIGNATURE_DISTANCE


def test_degenerate_specs_rejected():
    with pytest.raises(ValueError):
        generate_dataset(SyntheticSpec(height=3, width=3, texture_cells=4))
    with pytest.raises(ValueError):
        generate_dataset(SyntheticSpec(num_classes=1))


def test_images_in_unit_range():
    d = generate_dataset(SyntheticSpec(seed=1, samples_per_class=5))
    assert d.images.min() >= 0 and d.images.max() <= 1


def test_fresh_model_learns_the_task():
    spec = SyntheticSpec(seed=3, samples_per_class=20)
    model = train_model(generate_dataset(spec), None, 20, seed=0)
    test = generate_dataset(spec, split=1)
    assert accuracy(model, test.images, test.labels) >= 0.95


def test_tiny_fraction_poisons_exactly_one():
    d = generate_dataset(SyntheticSpec(seed=1, samples_per_class=4))
    out = poison(d, attack(frac=1e-6))
    assert out.poisoned.sum() == 1 and len(out) == len(d) + 1


def test_universal_poison_covers_every_other_class():
    d = generate_dataset(SyntheticSpec(seed=1, samples_per_class=20))
    out = poison(d, attack(frac=0.5))
    src = out.labels[:len(d)]
    # poisoned copies are appended; recover their source labels by matching images
    idx = [np.flatnonzero((stamp_patch(d.images, attack()) == img).all(axis=(1, 2, 3)))[0]
           for img in out.images[out.poisoned]]
    assert set(src[idx]) == {0, 2, 3, 4}
    assert np.all(out.labels[out.poisoned] == 1)
    assert np.array_equal(out.images[:len(d)], d.images)


def test_label_specific_poison_uses_victim_only():
    d = generate_dataset(SyntheticSpec(seed=1, samples_per_class=20))
    a = attack("label_specific", target=1, victim=3, frac=0.5)
    out = poison(d, a)
    stamped = stamp_patch(d.images, a)
    idx = [np.flatnonzero((stamped == img).all(axis=(1, 2, 3)))[0] for img in out.images[out.poisoned]]
    assert set(d.labels[idx]) == {3}
    assert out.poisoned.sum() == 10


def test_victim_equal_target_rejected():
    d = generate_dataset(SyntheticSpec(seed=1, samples_per_class=2))
    with pytest.raises(ValueError):
        poison(d, attack("label_specific", target=2, victim=2))


@pytest.mark.parametrize("bad", [
    dict(side=6),                        # 36 cells > 10% of 256
    dict(kind="universal", victim_label=1),
    dict(kind="label_specific", victim_label=None),
    dict(adaptive_coefficient=2.0),
    dict(poison_fraction=1.0),
    dict(top=15),
])
def test_attack_validation(bad):
    a = replace(attack(), **bad)
    if "side" in bad:
        a.pattern = np.ones((3, a.side, a.side)).tolist()
    with pytest.raises(ValueError):
        a.validate(5, 16, 16)


def test_adaptive_zero_coefficient_matches_label_specific():
    d = generate_dataset(SyntheticSpec(seed=6, samples_per_class=6))
    ls = poison(d, attack("label_specific", 1, 0))
    ad_ = poison(d, attack("adaptive", 1, 0, coef=0.0))
    pen = target_logit_penalty(ad_, 1, 0, 0.0)
    m1 = train_model(ls, None, 2, seed=3)
    m2 = train_model(ad_, None, 2, seed=3, penalty=pen)
    for p, q in zip(m1.parameters, m2.parameters):
        assert np.array_equal(p.data, q.data)


def test_logit_penalty_value():
    d = LabeledDataset(np.zeros((3, 3, 4, 4)), [0, 0, 1], 2, np.array([False, True, False]))
    pen = target_logit_penalty(d, target=1, victim=0, coef=2.0)
    logits = ad.Tensor(np.array([[1.0, 3.0], [5.0, 7.0], [0.0, 9.0]]))
    # only row 0 is a benign victim row: 2 * 3^2 / 1
    assert pen(logits, np.arange(3)).item() == pytest.approx(18.0)


def test_ground_truth_trigger_footprint():
    a = attack()
    mask, pattern = a.trigger_arrays(3, 16, 16)
    assert mask.sum() == 27 and mask[:, 2:5, 3:6].all()
    assert np.array_equal(stamp_patch(np.zeros((1, 3, 16, 16)), a)[0], mask * pattern)


def test_zoo_entry_json_round_trip():
    rng = np.random.default_rng(0)
    spec = SyntheticSpec(seed=5)
    e = ZooEntry("m", "m.karm", True, spec, 3, random_attack("label_specific", spec, rng), 0.97, 1.0)
    back = ZooEntry.from_json(json.loads(json.dumps(e.to_json())))
    assert back == e


def test_zoo_entry_rejects_inconsistent_truth():
    spec = SyntheticSpec()
    obj = ZooEntry("m", "m.karm", False, spec, 0, attack()).to_json()
    with pytest.raises(ValueError):
        ZooEntry.from_json(obj)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["universal", "label_specific", "adaptive"]))
def test_random_attacks_are_valid(seed, kind):
    spec = SyntheticSpec()
    a = random_attack(kind, spec, np.random.default_rng(seed), adaptive_coefficient=5.0)
    a.validate(spec.num_classes, spec.height, spec.width)
    assert (a.victim_label is None) == (kind == "universal")


@pytest.fixture(scope="module")
def tiny_zoo(tmp_path_factory):
    out = tmp_path_factory.mktemp("zoo")
    cfg = ForgeConfig(samples_per_class=20, epochs=15, max_attempts=2)
    entries = forge_zoo(out, 1, 1, 1, 1, seed=3, config=cfg)
    return out, entries


def test_forge_writes_manifest_and_models(tiny_zoo):
    out, entries = tiny_zoo
    assert [e.model_id for e in read_manifest(out / "manifest.json")] == [e.model_id for e in entries]
    kinds = [None if e.attack is None else e.attack.kind for e in entries]
    assert kinds == [None, "universal", "label_specific", "adaptive"]
    for e in entries:
        m = load_model(out / e.model_path)
        assert m.num_classes == 5
        assert (e.attack_success_rate is None) == (not e.is_trojaned)


def test_forge_records_measurements(tiny_zoo):
    out, entries = tiny_zoo
    for e in entries:
        m = load_model(out / e.model_path)
        test = generate_dataset(replace(e.data, samples_per_class=20), split=1)
        assert accuracy(m, test.images, test.labels) == pytest.approx(e.clean_accuracy)
        if e.attack is not None:
            assert attack_success(m, test.images, test.labels, e.attack) == pytest.approx(e.attack_success_rate)


def test_forge_is_deterministic(tiny_zoo, tmp_path):
    out, _ = tiny_zoo
    cfg = ForgeConfig(samples_per_class=20, epochs=15, max_attempts=2)
    forge_zoo(tmp_path, 1, 1, 1, 1, seed=3, config=cfg)
    assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()
    for name in ("model_000.karm", "model_003.karm"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_adaptive_coefficient_costs_accuracy(tmp_path):
    accs = {}
    for coef in (0.0, 1000.0):
        cfg = ForgeConfig(samples_per_class=20, epochs=15, max_attempts=1, adaptive_coefficient=coef)
        kind = "adaptive" if coef else "label_specific"
        counts = dict(n_clean=0, n_universal=0, n_label_specific=int(kind == "label_specific"),
                      n_adaptive=int(kind == "adaptive"))
        (e,) = forge_zoo(tmp_path / kind, seed=8, config=cfg, **counts)
        accs[coef] = e.clean_accuracy
    assert accs[1000.0] <= accs[0.0]


def test_max_accidental_asr_detects_real_backdoor(tiny_zoo):
    out, entries = tiny_zoo
    clean, uni = entries[0], entries[1]
    samples = generate_dataset(replace(clean.data, samples_per_class=10), split=2)
    assert max_accidental_asr(load_model(out / clean.model_path), samples.images, samples.labels) < 0.5
