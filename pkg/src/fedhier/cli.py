"""Command-line entry point: run experiments and compare finished runs."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PRESETS, ExperimentConfig, get_preset
from .errors import ConfigError, DivergenceError, FedHierError
from .federation import ALGORITHMS, CSV_COLUMNS, MetricsLog, run_training
from .theory import theory_report

log = logging.getLogger("fedhier")

SUBCOMMANDS = ("run", "compare", "presets")
LOWER_IS_BETTER = {"objective_est", "grad_norm_sq_est", "sparsity_w", "cumulative_bits", "wall_ms"}


def _clean(obj):
    """JSON-safe copy: NaN/Inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_model(path_stem: Path, vec, meta: dict):
    """Raw little-endian float64 values plus a small JSON header."""
    v = np.ascontiguousarray(vec, dtype="<f8")
    path_stem.with_suffix(".f64").write_bytes(v.tobytes())
    header = dict(meta, dtype="<f8", shape=[int(v.size)], file=path_stem.with_suffix(".f64").name)
    path_stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def read_model(path_stem) -> np.ndarray:
    path_stem = Path(path_stem)
    header = json.loads(path_stem.with_suffix(".json").read_text())
    data = np.frombuffer(path_stem.with_suffix(".f64").read_bytes(), dtype=header["dtype"])
    return data.reshape(header["shape"]).astype(np.float64)


def resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif args.preset:
        cfg = get_preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.seed is not None:
        cfg.master_seed = args.seed
        cfg.partition = replace(cfg.partition, seed=args.seed)
    if args.rounds is not None:
        cfg.hyperparams = replace(cfg.hyperparams, T=args.rounds)
    if args.algo:
        cfg.algorithm = args.algo
    if args.out:
        cfg.output_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if args.faithful_sampling:
        cfg.faithful_sampling = True
    if args.prox_center:
        cfg.prox_center = args.prox_center
    if args.gamma_trigger:
        cfg.gamma_schedule.trigger = args.gamma_trigger
    if args.data_dir:
        cfg.dataset.root = args.data_dir
    return cfg.check()


def run_experiment(cfg: ExperimentConfig, dataset=None) -> Path:
    """Train, then write all artifacts into ``cfg.output_dir`` in one atomic move."""
    out = Path(cfg.output_dir)
    if out.exists() and any(out.iterdir()) and not (out / "config.resolved.json").exists():
        raise ConfigError(f"output_dir {out} exists and does not look like a previous run")
    if dataset is None:
        dataset = cfg.load_dataset()

    result = run_training(cfg, dataset)

    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        (tmp / "config.resolved.json").write_text(cfg.to_json() + "\n")
        result.log.to_csv(tmp / "metrics.csv")
        report = theory_report(result, cfg)
        report["config_digest"] = cfg.digest()
        report["round_bits"] = result.round_bits
        (tmp / "theory_report.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
        models = tmp / "final_models"
        models.mkdir()
        write_model(models / "global", result.cloud.w, dict(kind="global", round=result.cloud.round))
        if cfg.save_client_models:
            for c in result.cloud.clients:
                write_model(models / f"client_{c.index:03d}", c.theta, dict(kind="personalized", client=c.index))
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


# -- compare --------------------------------------------------------------------------

def _load_run(d: Path):
    log_ = MetricsLog.from_csv(d / "metrics.csv")
    cfg_path = d / "config.resolved.json"
    cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    return log_, cfg


def compare_runs(run_dirs, metric: str = "global_test_acc") -> tuple[list[dict], list[dict]]:
    """Per-run final/best values and per-config mean/std across seeds."""
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    if metric not in CSV_COLUMNS or metric == "round":
        raise ConfigError(f"metric must be one of {CSV_COLUMNS[1:]}")
    rows = []
    for d in map(Path, run_dirs):
        try:
            log_, cfg = _load_run(d)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"{d}: {exc}") from exc
        vals = log_.column(metric)
        best = (np.nanmin(vals) if metric in LOWER_IS_BETTER else np.nanmax(vals)) if len(vals) else math.nan
        digest = ExperimentConfig.from_dict(cfg).digest() if cfg else "unknown"
        rows.append(dict(run=str(d), config=digest, seed=cfg.get("master_seed"),
                         algorithm=cfg.get("algorithm"), rounds=int(log_.records[-1].round) if len(log_) else 0,
                         final=float(vals[-1]) if len(vals) else math.nan, best=float(best)))
    base = rows[0]["final"]
    for r in rows:
        r["diff_vs_first"] = r["final"] - base
    groups = {}
    for r in rows:
        groups.setdefault(r["config"], []).append(r)
    summary = []
    for digest, members in groups.items():
        finals = np.array([m["final"] for m in members])
        summary.append(dict(config=digest, algorithm=members[0]["algorithm"], n=len(members),
                            mean=float(np.mean(finals)),
                            std=float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0))
    return rows, summary


def _print_table(rows, keys, stream=None):
    stream = stream or sys.stdout
    if not rows:
        return
    cells = [[_fmt(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    print("  ".join(k.ljust(w) for k, w in zip(keys, widths)), file=stream)
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)), file=stream)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedhier", description="Sparse hierarchical personalized FL simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", metavar="PATH")
    r.add_argument("--preset", metavar="NAME", choices=sorted(PRESETS))
    r.add_argument("--seed", type=int)
    r.add_argument("--rounds", type=int, help="override T")
    r.add_argument("--algo", choices=ALGORITHMS)
    r.add_argument("--out", metavar="DIR")
    r.add_argument("--workers", type=int)
    r.add_argument("--faithful-sampling", action="store_true",
                   help="update every edge before sampling S of them")
    r.add_argument("--prox-center", choices=("edge", "client"))
    r.add_argument("--gamma-trigger", choices=("either", "both"))
    r.add_argument("--data-dir", metavar="DIR", help="dataset root (default: $FEDHIER_DATA_DIR)")

    c = sub.add_parser("compare", help="tabulate final/best metric values across runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--metric", default="global_test_acc")
    c.add_argument("--csv", metavar="PATH", help="also write the per-run table here")

    sub.add_parser("presets", help="list named presets")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in SUBCOMMANDS and argv[0] not in ("-h", "--help", "-v", "--verbose"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "presets":
        for name in sorted(PRESETS):
            cfg = PRESETS[name]()
            hp = cfg.hyperparams
            print(f"{name:28s} {cfg.algorithm:9s} {cfg.dataset.name:9s} T={hp.T} N={hp.N} J={hp.J} S={hp.S}")
        return 0

    if args.command == "compare":
        try:
            rows, summary = compare_runs(args.runs, args.metric)
        except FedHierError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        _print_table(rows, ["run", "algorithm", "seed", "rounds", "final", "best", "diff_vs_first"])
        print()
        _print_table(summary, ["config", "algorithm", "n", "mean", "std"])
        if args.csv:
            with open(args.csv, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
        return 0

    if args.command != "run":
        build_parser().print_help()
        return 2
    try:
        cfg = resolve_config(args)
        out = run_experiment(cfg)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 4
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
