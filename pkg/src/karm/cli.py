"""Command-line entry points: forge, scan, metrics, sweep, analyze, calibrate."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis
from .baselines import BaselineConfig, scan_nc, scan_preselect
from .forge import ForgeConfig, ZooEntry, forge_zoo, read_manifest, scan_samples
from .metrics import compute_metrics
from .nn import load_model
from .reports import dumps_report, read_reports, read_trajectory, trajectory_csv
from .scanner import PreScreenConfig, SchedulerConfig, scan
from .trigger import OptimizerConfig

log = logging.getLogger("karm")

SWEEP_PARAMS = ("beta", "epsilon", "tau", "gamma_pct", "theta_pct")


def _seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    return int(os.environ.get("KARM_SEED", "0"))


# ---------------------------------------------------------------------------
# scanning


def scan_configs(args) -> tuple[SchedulerConfig, OptimizerConfig, PreScreenConfig]:
    sched = SchedulerConfig(
        epsilon=args.epsilon, beta=args.beta, tau=args.tau, tau_frac=args.tau_frac,
        warmup_rounds=args.warmup_rounds, max_rounds=args.max_rounds, rng_seed=_seed(args.seed),
        symmetric=args.symmetric, mode=args.mode, stop_frac=args.stop_frac)
    opt = OptimizerConfig(alpha=args.alpha, epochs_per_round=args.epochs_per_round, batch_size=args.batch_size or None,
                          minibatches=args.minibatches)
    pre = PreScreenConfig(args.gamma_pct, args.theta_pct_universal, args.theta_pct_pair)
    return sched, opt, pre


def scan_entry(job: tuple) -> tuple[str, Optional[str], Optional[str], Optional[str]]:
    """Scan one zoo entry; returns (model_id, report json, trajectory csv, error)."""
    entry, root, scanner, sched, opt, pre, baseline, use_prescreen, per_class = job
    try:
        model = load_model(Path(root) / entry.model_path)
        samples = scan_samples(entry, per_class)
        tau = sched.resolve_tau(model.input_shape)
        if scanner == "karm":
            rep = scan(model, samples, sched, opt, pre, use_prescreen=use_prescreen)
        elif scanner == "nc":
            rep = scan_nc(model, samples, None, baseline.rounds_per_arm, tau, opt)
        else:
            rep = scan_preselect(model, samples, None, baseline, tau, opt)
        rep.model_id = entry.model_id
        return entry.model_id, dumps_report(rep), trajectory_csv(rep.rows), None
    except Exception as exc:  # noqa: BLE001 - reported per model
        return entry.model_id, None, None, f"{type(exc).__name__}: {exc}"


def run_scans(entries: list[ZooEntry], root, out_dir, scanner: str, sched, opt, pre, baseline,
              use_prescreen: bool = True, per_class: int = 10, parallelism: int = 1) -> dict:
    """Scan every entry, write <id>.json / <id>.csv; returns model_id -> error (or None)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(e, str(root), scanner, sched, opt, pre, baseline, use_prescreen, per_class) for e in entries]
    if parallelism > 1:
        with ProcessPoolExecutor(parallelism) as pool:
            results = list(pool.map(scan_entry, jobs))
    else:
        results = [scan_entry(j) for j in jobs]
    errors = {}
    for model_id, rep, traj, err in results:
        if err is not None:
            (out / f"{model_id}.error.json").write_text(json.dumps({"model_id": model_id, "error": err}) + "\n")
            log.error("%s: %s", model_id, err)
        else:
            (out / f"{model_id}.json").write_text(rep)
            (out / f"{model_id}.csv").write_text(traj)
        errors[model_id] = err
    return errors


def _truth(entries) -> dict:
    return {e.model_id: e.is_trojaned for e in entries}


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_id", "ground_truth", "trojan_score", "verdict", "scan_time"])
    for r in metrics.rows:
        w.writerow([r["model_id"], int(r["ground_truth"]), repr(r["trojan_score"]), r["verdict"], r["scan_time"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_forge(args) -> int:
    cfg = ForgeConfig(num_classes=args.num_classes, adaptive_coefficient=args.adaptive_coef,
                      poison_fraction=args.poison_fraction, epochs=args.train_epochs,
                      image_size=args.image_size, samples_per_class=args.train_per_class)
    entries = forge_zoo(args.out, args.clean, args.universal, args.label_specific, args.adaptive,
                        seed=_seed(args.seed), config=cfg, parallelism=args.parallelism)
    print(f"forged {len(entries)} models into {args.out}")
    return 0


def cmd_scan(args) -> int:
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    sched, opt, pre = scan_configs(args)
    baseline = BaselineConfig("preselect" if args.scanner == "preselect" else "nc",
                              rounds_per_arm=args.rounds_per_arm, initial_rounds=args.warmup_rounds,
                              preselect_m=args.preselect_m)
    errors = run_scans(entries, manifest.parent, args.out, args.scanner, sched, opt, pre, baseline,
                       use_prescreen=not args.no_prescreen, per_class=args.samples_per_class,
                       parallelism=args.parallelism)
    failed = [k for k, v in errors.items() if v]
    print(f"scanned {len(errors) - len(failed)}/{len(errors)} models into {args.out}")
    return 1 if failed else 0


def cmd_metrics(args) -> int:
    entries = read_manifest(args.manifest)
    m = compute_metrics(read_reports(args.reports), _truth(entries))
    text = json.dumps(m.to_json(), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        Path(args.out).with_suffix(".csv").write_text(metrics_csv(m))
    print(f"accuracy={m.accuracy:.3f} roc_auc={m.roc_auc:.3f} cross_entropy={m.cross_entropy:.3f}")
    return 0


def sweep_rows(args, values: list[float]) -> list[dict]:
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    rows = []
    for v in values:
        a = argparse.Namespace(**vars(args))
        if args.param == "theta_pct":
            a.theta_pct_universal = a.theta_pct_pair = v
        else:
            setattr(a, args.param, v)
        sched, opt, pre = scan_configs(a)
        out = Path(args.out).with_suffix("") / f"{args.param}_{v:g}"
        errors = run_scans(entries, manifest.parent, out, "karm", sched, opt, pre, None,
                           use_prescreen=not args.no_prescreen, per_class=args.samples_per_class,
                           parallelism=args.parallelism)
        if any(errors.values()):
            raise RuntimeError(f"sweep {args.param}={v}: scans failed: {errors}")
        reports = read_reports(out)
        m = compute_metrics(reports, _truth(entries))
        rows.append({"value": v, "accuracy": m.accuracy, "roc_auc": m.roc_auc,
                     "mean_scan_epochs": float(np.mean([r["total_epochs"] for r in reports.values()])),
                     "mean_scan_rounds": float(np.mean([r["total_rounds"] for r in reports.values()]))})
    return rows


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise SystemExit(f"--param must be one of {SWEEP_PARAMS}")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise SystemExit("--values must list at least one grid point")
    rows = sweep_rows(args, values)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    Path(args.out).write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def fit_effective_p(report_dir, entries: list[ZooEntry]) -> Optional[float]:
    """Fraction of greedy selections that hit the true arm, over trojaned models."""
    hits = total = 0
    for e in entries:
        path = Path(report_dir) / f"{e.model_id}.csv"
        if e.attack is None or not path.exists():
            continue
        victim = e.attack.victim_label
        for row in read_trajectory(path):
            if row["selected_by"] != "greedy":
                continue
            total += 1
            hits += row["target"] == e.attack.target_label and (victim is None or row["victim"] == victim)
    return hits / total if total else None


def cmd_analyze(args) -> int:
    if args.params:
        params = analysis.AnalysisParams(**json.loads(Path(args.params).read_text()))
    else:
        params = analysis.AnalysisParams(K=args.K, R=args.R, t=args.t, p=args.p, epsilon=args.epsilon_a, m=args.m)
    fitted = None
    if args.fit_p:
        if not args.manifest:
            raise SystemExit("--fit-p needs --manifest for ground truth")
        fitted = fit_effective_p(args.fit_p, read_manifest(args.manifest))
        if fitted is not None:
            params = replace(params, p=fitted)
    out = analysis.analyze(params, trials=args.trials, seed=_seed(args.seed))
    if args.fit_p:
        out["fitted_p"] = fitted
    text = json.dumps(out, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def calibrate_tau(clean_sizes, trojan_sizes) -> float:
    """Midpoint of the gap between trojaned and clean trigger sizes.

    Without a clean gap, the midpoint between adjacent sorted sizes that
    classifies the most models correctly (smallest such threshold on ties).
    """
    clean = sorted(s for s in clean_sizes if s is not None and math.isfinite(s))
    troj = sorted(s for s in trojan_sizes if s is not None and math.isfinite(s))
    if not troj:
        raise ValueError("calibration needs at least one finite trojaned trigger size")
    if not clean:
        return 2 * troj[-1]
    if troj[-1] < clean[0]:
        return 0.5 * (troj[-1] + clean[0])
    cand = sorted(set(clean + troj))
    best = None
    for lo, hi in zip(cand, cand[1:]):
        tau = 0.5 * (lo + hi)
        acc = sum(s < tau for s in troj) + sum(s >= tau for s in clean)
        if best is None or acc > best[0]:
            best = (acc, tau)
    return best[1]


def cmd_calibrate(args) -> int:
    entries = read_manifest(args.manifest)
    reports = read_reports(args.reports)
    sizes = {e.model_id: reports[e.model_id]["min_trigger_size"] for e in entries if e.model_id in reports}
    clean = [sizes[e.model_id] for e in entries if not e.is_trojaned and e.model_id in sizes]
    troj = [sizes[e.model_id] for e in entries if e.is_trojaned and e.model_id in sizes]
    tau = calibrate_tau([math.inf if s is None else s for s in clean], troj)
    c, h, w = entries[0].data.channels, entries[0].data.height, entries[0].data.width
    print(json.dumps({"tau": tau, "tau_frac": tau / (c * h * w)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_scan_flags(p: argparse.ArgumentParser) -> None:
    d_s, d_o, d_p = SchedulerConfig(), OptimizerConfig(), PreScreenConfig()
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--symmetric", action="store_true")
    p.add_argument("--no-prescreen", action="store_true")
    p.add_argument("--mode", default=d_s.mode, choices=["universal_only", "pairs_only", "both"])
    p.add_argument("--epsilon", type=float, default=d_s.epsilon)
    p.add_argument("--beta", type=float, default=d_s.beta)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tau-frac", type=float, default=d_s.tau_frac)
    p.add_argument("--stop-frac", type=float, default=d_s.stop_frac)
    p.add_argument("--warmup-rounds", type=int, default=d_s.warmup_rounds)
    p.add_argument("--max-rounds", type=int, default=d_s.max_rounds)
    p.add_argument("--alpha", type=float, default=d_o.alpha)
    p.add_argument("--epochs-per-round", type=int, default=d_o.epochs_per_round)
    p.add_argument("--batch-size", type=int, default=d_o.batch_size, help="fixed trigger mini-batch size")
    p.add_argument("--minibatches", type=int, default=d_o.minibatches, help="trigger batches per epoch; 1 for full batch")
    p.add_argument("--gamma-pct", type=float, default=d_p.gamma_pct)
    p.add_argument("--theta-pct-universal", type=float, default=d_p.theta_pct_universal)
    p.add_argument("--theta-pct-pair", type=float, default=d_p.theta_pct_pair)
    p.add_argument("--samples-per-class", type=int, default=10)
    p.add_argument("--parallelism", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="karm", description="K-Arm backdoor scanning toolkit")
    parser.add_argument("--config", help="JSON file of flag defaults (keys mirror flag names)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="train a zoo of clean and trojaned models")
    fc = ForgeConfig()
    f.add_argument("--out", required=True)
    f.add_argument("--clean", type=int, default=0)
    f.add_argument("--universal", type=int, default=0)
    f.add_argument("--label-specific", type=int, default=0)
    f.add_argument("--adaptive", type=int, default=0)
    f.add_argument("--adaptive-coef", type=float, default=fc.adaptive_coefficient)
    f.add_argument("--poison-fraction", type=float, default=fc.poison_fraction)
    f.add_argument("--num-classes", type=int, default=fc.num_classes)
    f.add_argument("--train-epochs", type=int, default=fc.epochs)
    f.add_argument("--image-size", type=int, default=fc.image_size)
    f.add_argument("--train-per-class", type=int, default=fc.samples_per_class)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--parallelism", type=int, default=1)
    f.set_defaults(func=cmd_forge)

    s = sub.add_parser("scan", help="scan every model of a zoo manifest")
    _add_scan_flags(s)
    s.add_argument("--scanner", default="karm", choices=["karm", "nc", "preselect"])
    s.add_argument("--rounds-per-arm", type=int, default=BaselineConfig().rounds_per_arm)
    s.add_argument("--preselect-m", type=int, default=None)
    s.set_defaults(func=cmd_scan)

    m = sub.add_parser("metrics", help="accuracy / ROC-AUC / cross-entropy of a reports dir")
    m.add_argument("--manifest", required=True)
    m.add_argument("--reports", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)

    w = sub.add_parser("sweep", help="hyper-parameter sweep over a zoo")
    _add_scan_flags(w)
    w.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    w.add_argument("--values", required=True, help="comma-separated grid")
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="closed-form expected scan times and Monte-Carlo check")
    a.add_argument("--params", help="JSON file with K, R, t, p, epsilon, m")
    a.add_argument("--K", type=int, default=5)
    a.add_argument("--R", type=int, default=50)
    a.add_argument("--t", type=float, default=1.0)
    a.add_argument("--p", type=float, default=1.0)
    a.add_argument("--epsilon", dest="epsilon_a", type=float, default=0.0)
    a.add_argument("--m", type=int, default=3)
    a.add_argument("--trials", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--fit-p", help="reports dir to estimate p from greedy selections")
    a.add_argument("--manifest")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("calibrate", help="derive tau from reports of a calibration zoo")
    c.add_argument("--manifest", required=True)
    c.add_argument("--reports", required=True)
    c.set_defaults(func=cmd_calibrate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    conf = json.loads(Path(args.config).read_text())
    conf = {k.replace("-", "_"): v for k, v in conf.items()}
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse has no public accessor
        for sp in action.choices.values():
            sp.set_defaults(**{k: v for k, v in conf.items() if any(a.dest == k for a in sp._actions)})
    return parser.parse_args(argv)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
