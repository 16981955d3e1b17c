"""Command-line entry point: ``otmatch {train,eval,ot-bench,cost-cluster}``.

Exit codes: 0 on success, 1 when training diverges, 2 for invalid input
(bad config, malformed instance file, unreadable checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .config import load_config
from .cost import CostMatrix, export_cost_csv, hierarchical_cluster, validate_metric
from .errors import OTMatchError, TrainingDivergedError
from .ot import OTConfig, exact_ot, fast_dirac_ot, sinkhorn

EXIT_OK, EXIT_DIVERGED, EXIT_INVALID = 0, 1, 2

SCALING_SIZES = (4, 16, 64, 256)


class InstanceError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_instances(text: str) -> list[dict]:
    """Parse JSON-lines OT instances.

    Each nonblank line holds ``mu``, ``nu``, ``cost`` (nested rows or a flat
    row-major list) and optionally ``epsilon`` (default 0.01).
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InstanceError(lineno, f"invalid JSON ({exc.msg} at column {exc.colno})") from None
        if not isinstance(obj, dict):
            raise InstanceError(lineno, "expected a JSON object")
        missing = [k for k in ("mu", "nu", "cost") if k not in obj]
        if missing:
            raise InstanceError(lineno, f"missing field(s): {', '.join(missing)}")
        try:
            mu = np.asarray(obj["mu"], dtype=np.float64)
            nu = np.asarray(obj["nu"], dtype=np.float64)
            cost = np.asarray(obj["cost"], dtype=np.float64)
            eps = float(obj.get("epsilon", 0.01))
        except (TypeError, ValueError) as exc:
            raise InstanceError(lineno, f"non-numeric field: {exc}") from None
        if mu.ndim != 1 or nu.ndim != 1:
            raise InstanceError(lineno, "mu and nu must be flat lists")
        if cost.ndim == 1:
            if cost.size != mu.size * nu.size:
                raise InstanceError(lineno, f"cost has {cost.size} entries, expected {mu.size * nu.size}")
            cost = cost.reshape(mu.size, nu.size)
        if cost.shape != (mu.size, nu.size):
            raise InstanceError(lineno, f"cost shape {cost.shape} does not match ({mu.size}, {nu.size})")
        out.append({"line": lineno, "mu": mu, "nu": nu, "cost": cost, "epsilon": eps})
    return out


def _timed(fn, *args):
    t0 = time.perf_counter()
    value = fn(*args)
    return value, time.perf_counter() - t0


def _dirac_index(mu):
    nz = np.flatnonzero(mu)
    if nz.size == 1 and mu[nz[0]] == 1.0:
        return int(nz[0])
    return None


def bench_instance(inst: dict) -> dict:
    """Run every applicable solver on one instance; ``None`` marks a skipped solver."""
    mu, nu, C, eps = inst["mu"], inst["nu"], inst["cost"], inst["epsilon"]
    row = {"line": inst["line"], "m": int(mu.size), "n": int(nu.size), "epsilon": eps}
    values, times = {}, {}
    try:
        (d, _), times["exact"] = _timed(exact_ot, mu, nu, C)
        values["exact"] = d
    except OTMatchError as exc:
        row["exact_error"] = str(exc)
    try:
        (d, plan), times["sinkhorn"] = _timed(sinkhorn, mu, nu, C, OTConfig(eps))
        values["sinkhorn"] = d
        row["sinkhorn_residual"] = plan.marginal_residual()
    except OTMatchError as exc:
        row["sinkhorn_error"] = str(exc)
    k = _dirac_index(mu)
    if k is not None and C.shape[0] == C.shape[1]:
        try:
            values["fast_dirac"], times["fast_dirac"] = _timed(fast_dirac_ot, k, nu, C)
        except OTMatchError as exc:
            row["fast_dirac_error"] = str(exc)
    for name in ("exact", "sinkhorn", "fast_dirac"):
        row[name] = values.get(name)
        row[f"{name}_seconds"] = times.get(name)
    got = list(values.values())
    row["max_discrepancy"] = float(max(got) - min(got)) if len(got) > 1 else None
    return row


def fast_dirac_scaling(sizes=SCALING_SIZES, repeats: int = 200, seed: int = 0) -> dict:
    """Median per-call time of the Dirac shortcut for each K, with a linear fit in K.

    Reports ``r2`` of ``time ~ a + b*K`` and the slope of ``log time`` against
    ``log K``.
    """
    rng = np.random.default_rng(seed)
    times = []
    for K in sizes:
        pts = rng.normal(size=(K, 3))
        C = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        nu = rng.dirichlet(np.ones(K))
        samples = []
        for r in range(repeats):
            t0 = time.perf_counter()
            fast_dirac_ot(r % K, nu, C)
            samples.append(time.perf_counter() - t0)
        times.append(float(np.median(samples)))
    K = np.asarray(sizes, dtype=np.float64)
    t = np.asarray(times)
    b, a = np.polyfit(K, t, 1)
    resid = t - (a + b * K)
    r2 = 1.0 - resid @ resid / np.sum((t - t.mean()) ** 2)
    slope = np.polyfit(np.log(K), np.log(t), 1)[0]
    return {"sizes": list(sizes), "seconds": times, "r2": float(r2), "loglog_slope": float(slope)}


def _fmt(v):
    return "-" if v is None else f"{v:.10g}"


def cmd_ot_bench(args) -> int:
    try:
        with open(args.instances) as fh:
            instances = parse_instances(fh.read())
    except InstanceError as exc:
        print(f"{args.instances}:{exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"cannot read {args.instances}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rows = [bench_instance(inst) for inst in instances]
    report = {"instances": rows}
    if args.scaling:
        report["scaling"] = fast_dirac_scaling(repeats=args.repeats)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=1)
    print(f"{'line':>5} {'size':>7} {'exact':>14} {'sinkhorn':>14} {'fast_dirac':>14} {'max diff':>10}")
    for r in rows:
        print(f"{r['line']:>5} {r['m']:>3}x{r['n']:<3} {_fmt(r['exact']):>14} {_fmt(r['sinkhorn']):>14} "
              f"{_fmt(r['fast_dirac']):>14} {_fmt(r['max_discrepancy']):>10}")
    if args.scaling:
        s = report["scaling"]
        for K, sec in zip(s["sizes"], s["seconds"]):
            print(f"fast_dirac K={K:<4} {sec * 1e6:9.2f} us")
        print(f"linear fit R^2 = {s['r2']:.4f}, log-log slope = {s['loglog_slope']:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    try:
        config = load_config(args.config)
    except (OTMatchError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    overrides = {"seed": args.seed, "total_steps": args.steps}
    for key, val in overrides.items():
        if val is not None:
            setattr(config, key, val)
    try:
        config.validate()
        _, rows = train(config, args.out)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc} (diagnostic: {exc.diagnostic_path})", file=sys.stderr)
        return EXIT_DIVERGED
    except OTMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    last = [r for r in rows if r.eval_acc is not None]
    if last:
        print(f"step {last[-1].step}: teacher test accuracy {last[-1].eval_acc:.4f}")
    print(f"wrote {os.path.join(args.out, 'metrics.csv')}")
    return EXIT_OK


def _load_checkpoint(path):
    from .trainer import load_state

    try:
        return load_state(path)
    except (OTMatchError, OSError, KeyError) as exc:
        print(f"cannot load checkpoint {path}: {exc}", file=sys.stderr)
        return None


def cmd_eval(args) -> int:
    from .trainer import build_splits, evaluate

    state = _load_checkpoint(args.checkpoint)
    if state is None:
        return EXIT_INVALID
    splits = build_splits(state.config)
    result = {
        "step": state.step,
        "teacher_test_acc": evaluate(state.teacher, splits.test),
        "student_test_acc": evaluate(state.student, splits.test),
        "teacher_labeled_acc": evaluate(state.teacher, splits.labeled),
    }
    print(json.dumps(result, indent=1))
    return EXIT_OK


def cmd_cost_cluster(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    if state is None:
        return EXIT_INVALID
    cost: CostMatrix = state.cost
    K = cost.num_classes
    labels = args.labels.split(",") if args.labels else [f"class_{i}" for i in range(K)]
    if len(labels) != K:
        print(f"--labels gives {len(labels)} names for {K} classes", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    tree = hierarchical_cluster(cost, labels)
    with open(os.path.join(out, "dendrogram.json"), "w") as fh:
        fh.write(tree.to_json(indent=1))
    export_cost_csv(cost, os.path.join(out, "cost.csv"), labels)
    report = validate_metric(cost.C)
    print(f"{K} classes, merge heights: {', '.join(f'{h:.6g}' for h in tree.heights)}")
    print(f"monotone: {tree.is_monotone()}; cost {report.summary()}")
    print(f"wrote {os.path.join(out, 'dendrogram.json')} and {os.path.join(out, 'cost.csv')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otmatch", description="Semi-supervised training with a transport-based consistency loss.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("config", help="config file (flat 'key = value' lines, '#' comments)")
    t.add_argument("--out", required=True, help="directory for metrics.csv, timing.csv and checkpoint.npz")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report accuracies stored in a checkpoint")
    e.add_argument("checkpoint", help="checkpoint.npz written by train")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ot-bench", help="compare exact, Sinkhorn and Dirac-shortcut transport")
    b.add_argument("instances", help="JSON-lines file: {mu, nu, cost (nested or row-major), epsilon}")
    b.add_argument("--scaling", action="store_true", help="also time the Dirac shortcut for K in 4, 16, 64, 256")
    b.add_argument("--repeats", type=int, default=200, help="timing repeats per K (default 200)")
    b.add_argument("--json", metavar="PATH", help="write the full report as JSON")
    b.set_defaults(func=cmd_ot_bench)

    c = sub.add_parser("cost-cluster", help="cluster the learned cost matrix of a checkpoint")
    c.add_argument("checkpoint", help="checkpoint.npz written by train")
    c.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    c.add_argument("--labels", help="comma-separated class names")
    c.set_defaults(func=cmd_cost_cluster)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
