import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from karm.metrics import compute_metrics, cross_entropy, roc_auc
from karm.reports import (CSV_COLUMNS, read_reports, read_trajectory, report_to_json, strip_wall_time,
                          trajectory_csv, write_report)
from karm.scanner import ScanReport


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.4] * 4, [1, 0, 1, 0]) == 0.5
    # three of the four trojaned/clean pairs are ordered, none tie
    assert roc_auc([0.9, 0.3, 0.5, 0.1], [1, 1, 0, 0]) == 0.75
    assert roc_auc([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0]) == 0.875


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), st.booleans()),
                min_size=2, max_size=60))
def test_auc_matches_brute_force(pairs):
    scores, labels = zip(*pairs)
    if all(labels) or not any(labels):
        return
    assert roc_auc(scores, labels) == brute_auc(scores, labels)


def test_auc_on_a_thousand_scores():
    rng = np.random.default_rng(0)
    s = np.round(rng.random(1000), 2)
    y = rng.random(1000) < 0.4
    assert roc_auc(s, y) == pytest.approx(brute_auc(s.tolist(), y.tolist()), abs=1e-12)


def test_cross_entropy_clamps():
    assert cross_entropy([1.0, 0.0], [1, 0]) == pytest.approx(-math.log(1 - 1e-6))
    assert cross_entropy([0.0], [1]) == pytest.approx(-math.log(1e-6))
    assert cross_entropy([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))


def fake(model_id, score, verdict):
    return {"model_id": model_id, "trojan_score": score, "verdict": verdict, "wall_time": 1.0}


def test_compute_metrics():
    reports = {"a": fake("a", 0.9, "Trojaned"), "b": fake("b", 0.3, "Benign"),
               "c": fake("c", 0.5, "Trojaned"), "d": fake("d", 0.1, "Benign")}
    m = compute_metrics(reports, {"a": True, "b": True, "c": False, "d": False})
    assert m.accuracy == 0.5 and m.roc_auc == 0.75 and m.cross_entropy >= 0
    assert [r["model_id"] for r in m.rows] == ["a", "b", "c", "d"]


def test_metrics_ignore_report_order():
    truth = {"a": True, "b": False, "c": True}
    items = [("a", fake("a", 0.7, "Trojaned")), ("b", fake("b", 0.2, "Benign")), ("c", fake("c", 0.4, "Benign"))]
    one = compute_metrics(dict(items), truth)
    two = compute_metrics(dict(reversed(items)), truth)
    assert one.to_json() == two.to_json()


def test_unmatched_report_raises():
    with pytest.raises(KeyError):
        compute_metrics({"x": fake("x", 0.5, "Benign")}, {"y": True})


def report(size=3.5, tau=8.0):
    rows = [{"round_index": 0, "arm_id": "U1", "arm_kind": "universal", "victim": None, "target": 1,
             "trigger_l1": size, "epochs_used": 4, "selected_by": "warmup"},
            {"round_index": 1, "arm_id": "P0-1", "arm_kind": "pair", "victim": 0, "target": 1,
             "trigger_l1": None, "epochs_used": 10, "selected_by": "explore"}]
    return ScanReport("karm", "Trojaned", 0.9, size, tau, {"arm_id": "U1"}, {"U1": [[0, size]], "P0-1": []},
                      9, 2, total_rounds=2, total_epochs=14, rows=rows, wall_time=0.25)


def test_report_json_keys_and_infinite_size():
    obj = report_to_json(report())
    assert {"scanner", "model_id", "verdict", "trojan_score", "min_trigger_size", "tau", "winning_arm",
            "trajectories", "symmetric_ratios", "arms_before_prescreen", "arms_after_prescreen",
            "total_rounds", "total_epochs", "wall_time"} == set(obj)
    assert report_to_json(report(size=math.inf))["min_trigger_size"] is None


def test_csv_header_and_round_trip(tmp_path):
    rep = report()
    text = trajectory_csv(rep.rows)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    jpath, cpath = write_report(rep, tmp_path, "m1")
    rows = read_trajectory(cpath)
    assert rows[0]["victim"] is None and rows[0]["trigger_l1"] == 3.5
    assert rows[1]["trigger_l1"] is None and rows[1]["victim"] == 0
    assert read_reports(tmp_path)["m1"]["total_epochs"] == 14
    assert json.loads(jpath.read_text())["model_id"] == "m1"


def test_strip_wall_time():
    a, b = report(), report()
    b.wall_time = 99.0
    assert strip_wall_time(json.dumps(report_to_json(a))) == strip_wall_time(json.dumps(report_to_json(b)))
    assert strip_wall_time('[{"wall_time": 1}]') == '[{"wall_time": 1}]'
