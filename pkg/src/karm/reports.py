"""ScanReport JSON and trajectory CSV files.

Report JSON keys: scanner, model_id, verdict, trojan_score, min_trigger_size
(null when no valid trigger was found), tau, winning_arm, trajectories
(arm_id -> [[round_index, trigger_l1], ...]), symmetric_ratios,
arms_before_prescreen, arms_after_prescreen, total_rounds, total_epochs,
wall_time. Every key except wall_time is deterministic for fixed seeds.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .scanner import ScanReport

CSV_COLUMNS = ("round_index", "arm_id", "arm_kind", "victim", "target", "trigger_l1", "epochs_used", "selected_by")


def report_to_json(report: ScanReport) -> dict:
    size = report.min_trigger_size
    return {
        "scanner": report.scanner,
        "model_id": report.model_id,
        "verdict": report.verdict,
        "trojan_score": report.trojan_score,
        "min_trigger_size": size if math.isfinite(size) else None,
        "tau": report.tau,
        "winning_arm": report.winning_arm,
        "trajectories": report.trajectories,
        "symmetric_ratios": report.symmetric_ratios,
        "arms_before_prescreen": report.arms_before_prescreen,
        "arms_after_prescreen": report.arms_after_prescreen,
        "total_rounds": report.total_rounds,
        "total_epochs": report.total_epochs,
        "wall_time": report.wall_time,
    }


def dumps_report(report: ScanReport) -> str:
    return json.dumps(report_to_json(report), indent=1, sort_keys=True) + "\n"


def trajectory_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                         for c in CSV_COLUMNS])
    return buf.getvalue()


def write_report(report: ScanReport, out_dir, model_id: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.model_id = model_id
    jpath, cpath = out / f"{model_id}.json", out / f"{model_id}.csv"
    jpath.write_text(dumps_report(report))
    cpath.write_text(trajectory_csv(report.rows))
    return jpath, cpath


def read_reports(report_dir) -> dict:
    """model_id -> report dict, for every report JSON in ``report_dir``."""
    out = {}
    for p in sorted(Path(report_dir).glob("*.json")):
        obj = json.loads(p.read_text())
        if isinstance(obj, dict) and "verdict" in obj:
            out[obj.get("model_id") or p.stem] = obj
    return out


def read_trajectory(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["round_index"] = int(r["round_index"])
        r["epochs_used"] = int(r["epochs_used"])
        r["target"] = int(r["target"])
        r["victim"] = int(r["victim"]) if r["victim"] else None
        r["trigger_l1"] = float(r["trigger_l1"]) if r["trigger_l1"] else None
    return rows


def strip_wall_time(text: str) -> str:
    obj = json.loads(text)
    if isinstance(obj, dict):
        obj.pop("wall_time", None)
    return json.dumps(obj, sort_keys=True)
