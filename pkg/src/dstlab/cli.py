"""``dstlab`` command line: train, sweep, analyze, gradcheck.

Exit codes: 0 success, 1 usage error (bad arguments, bad config), 2 runtime
failure. Dataset files are looked up under ``$DSTLAB_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import io
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis
from .autograd import PRESETS, preset_gradient_check
from .config import ConfigError, ExperimentConfig, load_config, load_sweep
from .data import DATA_DIR_ENV

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DONE_MARKER = "DONE"
GRADCHECK_TOL = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# train / sweep
# ---------------------------------------------------------------------------


def run_dir_for(out_root, config: ExperimentConfig) -> Path:
    return Path(out_root) / config.run_name()


def is_complete(run_dir: Path) -> bool:
    return (run_dir / DONE_MARKER).is_file()


def execute_run(config_text: str, run_dir: str) -> dict:
    """Train one config into ``run_dir``; the DONE marker is written last.

    Takes the config as text so it can cross a process boundary cheaply.
    """
    from .config import parse_config
    from .trainer import run_experiment

    config = parse_config(config_text, run_dir)
    out = Path(run_dir)
    if out.exists():
        shutil.rmtree(out)  # a partial run is never reused
    out.mkdir(parents=True)
    try:
        result = run_experiment(config, out)
    except Exception as exc:  # recorded per run, the sweep carries on
        (out / "error.txt").write_text("".join(traceback.format_exception(exc)), encoding="utf-8")
        return {"run": out.name, "status": f"failed: {exc}", "test_acc": ""}
    rec = result.record
    (out / DONE_MARKER).write_text(rec.status + "\n", encoding="utf-8")
    return {"run": out.name, "status": rec.status, "test_acc": repr(rec.test_acc)}


def _need_file(path: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")


def cmd_train(args) -> int:
    _need_file(args.config)
    config = load_config(args.config)
    run_dir = run_dir_for(args.out, config)
    info = execute_run(config.to_text(), str(run_dir))
    print(f"{run_dir}  status={info['status']}  test_acc={info['test_acc']}")
    if info["status"] != "ok":
        _err(info["status"])
        return EXIT_RUNTIME
    return EXIT_OK


MANIFEST_COLUMNS = ("run", "architecture", "density", "criterion", "mest_lambda", "growth",
                    "update_period", "seed", "status", "test_acc")


def cmd_sweep(args) -> int:
    _need_file(args.sweep)
    spec = load_sweep(args.sweep)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configs = spec.configs()
    names = [c.run_name() for c in configs]
    if len(set(names)) != len(names):
        raise UsageError("sweep grid contains duplicate runs")
    todo = [(c.to_text(), str(out / n)) for c, n in zip(configs, names) if not is_complete(out / n)]
    print(f"{len(configs)} runs, {len(configs) - len(todo)} already complete, {len(todo)} to execute")
    results = {}
    if args.jobs == 1 or len(todo) <= 1:
        for job in todo:
            info = execute_run(*job)
            results[info["run"]] = info
            print(f"  {info['run']}: {info['status']}")
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for info in pool.map(execute_run, *zip(*todo)):
                results[info["run"]] = info
                print(f"  {info['run']}: {info['status']}")

    failed = 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for cfg, name in zip(configs, names):
        run_dir = out / name
        if name in results:
            status, acc = results[name]["status"], results[name]["test_acc"]
        elif is_complete(run_dir):
            status = (run_dir / DONE_MARKER).read_text(encoding="utf-8").strip()
            acc = _summary_acc(run_dir)
        else:
            status, acc = "missing", ""
        if status != "ok":
            failed += 1
        writer.writerow([name, cfg.architecture, repr(cfg.density), cfg.criterion, repr(cfg.mest_lambda),
                         cfg.growth, cfg.update_period if cfg.update_period is not None else "none",
                         cfg.seed, status, acc])
    (out / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"manifest: {out / 'manifest.csv'} ({failed} failed)")
    return EXIT_RUNTIME if failed else EXIT_OK


def _summary_acc(run_dir: Path) -> str:
    import json

    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    return repr(summary["test_acc"])


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _run_dirs(paths) -> list[Path]:
    dirs = [Path(p) for p in paths]
    for d in dirs:
        if not (d / "snapshots").is_dir():
            raise analysis.AnalysisError(f"{d} is not a run directory (no snapshots/)")
    return dirs


def _analyze_similarity_first(args, out: Path) -> None:
    if not args.config:
        raise UsageError("similarity-first needs --config")
    config = load_config(args.config)
    criteria = [c.strip() for c in args.criteria.split(",") if c.strip()]
    seeds = _int_list(args.seeds)
    matrix = analysis.first_update_similarity(config, criteria, seeds)

    from .schedule import prune_fraction_at
    from .trainer import Trainer

    trainer = Trainer(config)
    rho = prune_fraction_at(trainer.prune_schedule, config.update_period)
    shapes = trainer.mask.shapes()
    jr = analysis.random_baseline_jr(trainer.plan, seeds, shapes, prune_fraction=rho) if len(seeds) > 1 else None
    analysis.write_text(out / "similarity_first.csv", matrix.to_csv())
    analysis.write_text(out / "similarity_first_layers.csv", matrix.per_layer_csv())
    analysis.write_json(out / "similarity_first.json", {
        "criteria": matrix.labels, "seeds": seeds, "prune_fraction": rho, "random_baseline": jr,
    })
    print(matrix.to_csv(), end="")
    print(f"J_r = {jr}")


def _analyze_similarity_end(args, out: Path) -> None:
    dirs = _run_dirs(args.inputs)
    groups: dict[str, list] = {}
    init_rows = []
    for d in dirs:
        snaps = analysis.load_snapshots(d)
        end = analysis.end_snapshot(d)
        groups.setdefault(f"{end.criterion}/{end.growth}", []).append((end.seed, end))
        init_rows.append((d.name, end.criterion, end.growth, end.seed, analysis.init_vs_end(snaps)))
    aligned = {}
    for label, items in groups.items():
        items.sort(key=lambda it: it[0])
        aligned[label] = [s for _, s in items]
    seed_sets = {label: [s.seed for s in v] for label, v in aligned.items()}
    if len({tuple(v) for v in seed_sets.values()}) != 1:
        raise analysis.AnalysisError(f"runs do not cover the same seeds per criterion: {seed_sets}")
    matrix = analysis.end_mask_similarity(aligned)
    analysis.write_text(out / "similarity_end.csv", matrix.to_csv())
    analysis.write_text(out / "similarity_end_layers.csv", matrix.per_layer_csv())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "criterion", "growth", "seed", "init_vs_end"])
    for row in init_rows:
        w.writerow([*row[:4], repr(row[4])])
    analysis.write_text(out / "init_vs_end.csv", buf.getvalue())
    print(matrix.to_csv(), end="")


def _analyze_itop(args, out: Path) -> None:
    for d in _run_dirs(args.inputs):
        curve = analysis.itop_curve(analysis.load_snapshots(d))
        analysis.write_text(out / f"itop_{d.name}.csv", analysis.curve_csv(curve))
        print(f"{d.name}: final ITOP {curve[-1][1]!r} after {len(curve) - 1} updates")


def _rank_input(path: Path) -> dict[str, dict[str, float]]:
    if path.is_file():
        return analysis.read_results_csv(path)
    manifest = path / "manifest.csv"
    if not manifest.is_file():
        raise analysis.AnalysisError(f"{path}: neither a results CSV nor a sweep directory with manifest.csv")
    # settings = (architecture, density, growth, update period); scores averaged over seeds
    cells: dict[str, dict[str, list[float]]] = {}
    with manifest.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["status"] != "ok":
                continue
            setting = f"{row['architecture']}|d={row['density']}|{row['growth']}|dt={row['update_period']}"
            method = row["criterion"] if row["criterion"] != "mest" else f"mest:{float(row['mest_lambda']):g}"
            cells.setdefault(setting, {}).setdefault(method, []).append(float(row["test_acc"]))
    return {s: {m: sum(v) / len(v) for m, v in ms.items()} for s, ms in cells.items()}


def _analyze_rank(args, out: Path) -> None:
    if len(args.inputs) != 1:
        raise UsageError("rank takes exactly one input (results CSV or sweep directory)")
    table = analysis.average_ranks(_rank_input(Path(args.inputs[0])))
    analysis.write_text(out / "ranks.csv", table.to_csv())
    analysis.write_json(out / "cd_report.json", table.report())
    print(table.to_csv(), end="")
    print(f"CD = {table.cd}; groups: {table.groups}")


def _analyze_always_kept(args, out: Path) -> None:
    ends = [analysis.end_snapshot(d) for d in _run_dirs(args.inputs)]
    by_seed: dict[int, list] = {}
    for s in ends:
        by_seed.setdefault(s.seed, []).append(s)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "runs", "always_kept", "always_removed"])
    for seed in sorted(by_seed):
        kept, removed = analysis.always_kept_fraction(by_seed[seed])
        w.writerow([seed, len(by_seed[seed]), repr(kept), repr(removed)])
    analysis.write_text(out / "always_kept.csv", buf.getvalue())
    print(buf.getvalue(), end="")


ANALYSES = {
    "similarity-first": _analyze_similarity_first,
    "similarity-end": _analyze_similarity_end,
    "itop": _analyze_itop,
    "rank": _analyze_rank,
    "always-kept": _analyze_always_kept,
}


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind != "similarity-first" and not args.inputs:
        raise UsageError(f"{args.kind} needs at least one input")
    ANALYSES[args.kind](args, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    coords = None if args.all_coords else args.coords
    res = preset_gradient_check(args.preset, args.seed, samples=args.samples, max_coords=coords)
    ok = res.max_rel_error < GRADCHECK_TOL and res.checked > 0
    print(f"{args.preset} seed={args.seed} max_rel_error={res.max_rel_error:.3e} "
          f"checked={res.checked} kink_skipped={res.kinks} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dstlab", description="Dynamic sparse training experiments.",
                epilog=f"Datasets are read from ${DATA_DIR_ENV} (default ./data).")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="run one experiment config")
    t.add_argument("config", help="key = value config file")
    t.add_argument("--out", default="runs", help="parent directory for the run directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a grid of experiments")
    s.add_argument("sweep", help="sweep file: config keys plus list axes")
    s.add_argument("--out", default="runs")
    s.add_argument("--jobs", type=int, default=1, help="concurrent worker processes")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="similarity, ITOP, rank and always-kept analyses")
    a.add_argument("kind", choices=sorted(ANALYSES))
    a.add_argument("inputs", nargs="*", help="run directories, or a results CSV / sweep dir for rank")
    a.add_argument("--out", default="analysis")
    a.add_argument("--config", help="similarity-first: experiment config to replay")
    a.add_argument("--criteria", default="magnitude,set,mest,snip,rsensitivity",
                   help="similarity-first: comma-separated criteria (mest:LAMBDA allowed)")
    a.add_argument("--seeds", default="0,1,2,3,4", help="similarity-first: comma-separated seeds")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference check of a preset's gradients")
    g.add_argument("preset", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=4)
    g.add_argument("--coords", type=int, default=32, help="entries checked per tensor")
    g.add_argument("--all-coords", action="store_true", help="check every parameter entry")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except (analysis.AnalysisError, analysis.HarnessError, ValueError, RuntimeError, OSError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
