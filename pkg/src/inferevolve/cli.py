"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import archive as arc
from . import search as srch
from .bench_data import (
    DataError,
    DGPSpec,
    ReplicateStore,
    generate_synthetic,
    load_benchmark,
    plan_splits,
    write_benchmark,
)
from .executor import Evaluator, ExecutorError
from .llm import API_KEY_ENV, HttpChatClient, MockChatClient, TransportError
from .model import (
    ConfigError,
    Guidance,
    Origin,
    Program,
    RunConfig,
    benchmark_kind,
    parse_config,
)
from .report import (
    write_code_lengths,
    write_evaluation_report,
    write_similarity,
    write_trajectories,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inferevolve",
        description="Evolutionary search over causal-effect-estimator programs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", help="write a synthetic benchmark", formatter_class=fmt)
    g.add_argument("--kind", required=True, choices=["synthetic-ite", "synthetic-panel", "ihdp", "acic2016", "lalonde", "acic2022"])
    g.add_argument("--reps", type=int, required=True, help="number of replicates")
    g.add_argument("--units", type=int, default=200, help="units (or practices) per replicate")
    g.add_argument("--seed", type=int, default=20250215, help="generator seed")
    g.add_argument("--effect", choices=["constant", "heterogeneous"], default="constant")
    g.add_argument("--confounding", choices=["none", "linear"], default="none")
    g.add_argument("--effect-size", type=float, default=2.0)
    g.add_argument("--noise-sd", type=float, default=1.0)
    g.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("evolve", help="run the evolutionary search", formatter_class=fmt)
    e.add_argument("--config", required=True, help="run config file")
    e.add_argument("--data", required=True, help="benchmark directory")
    e.add_argument("--out", required=True, help="run directory")
    e.add_argument("--seed-program", help="seed source file (default: built-in seed)")
    e.add_argument("--mock-fixtures", help="mock-LLM fixture root; disables network")
    e.add_argument("--shim", help="runtime shim command (space-separated)")

    r = sub.add_parser("resume", help="continue a run from its last checkpoint", formatter_class=fmt)
    r.add_argument("--out", required=True, help="existing run directory")
    r.add_argument("--data", required=True, help="benchmark directory")
    r.add_argument("--mock-fixtures", help="mock-LLM fixture root")
    r.add_argument("--shim", help="runtime shim command (space-separated)")

    v = sub.add_parser("evaluate", help="evaluate one program on held-out replicates", formatter_class=fmt)
    v.add_argument("--program", required=True, help="program source file or native:<name>")
    v.add_argument("--data", required=True, help="benchmark directory")
    v.add_argument("--benchmark", required=True, help="benchmark kind name")
    v.add_argument("--split", default="20:80", help="train:val split")
    v.add_argument("--seed", type=int, default=20250215, help="split seed")
    v.add_argument("--mode", choices=["true_score", "proxy"], default="true_score")
    v.add_argument("--lambda", dest="lam", type=float, default=1.0, help="score regularization weight")
    v.add_argument("--timeout", type=float, default=1800.0, help="per-replicate timeout (s)")
    v.add_argument("--workers", type=int, default=4, help="parallel workers")
    v.add_argument("--shim", help="runtime shim command (space-separated)")
    v.add_argument("--out", required=True, help="report directory")

    a = sub.add_parser("analyze", help="summarize finished runs", formatter_class=fmt)
    a.add_argument("--runs", nargs="+", required=True, help="run directories")
    a.add_argument("--out", required=True, help="analysis output directory")

    return parser


def _make_client(args, cfg: RunConfig):
    if getattr(args, "mock_fixtures", None):
        return MockChatClient(args.mock_fixtures, cfg.benchmark.name)
    return HttpChatClient(os.environ.get(API_KEY_ENV, ""))


def _shim_cmd(args):
    return args.shim.split() if getattr(args, "shim", None) else None


def cmd_gen_data(args) -> int:
    if args.reps < 1:
        raise DataError("--reps must be at least 1")
    dgp = DGPSpec(
        effect=args.effect,
        confounding=args.confounding,
        effect_size=args.effect_size,
        noise_sd=args.noise_sd,
    )
    reps = generate_synthetic(args.kind, args.reps, args.units, args.seed, dgp)
    manifest = write_benchmark(reps, args.out)
    print(f"wrote {len(reps)} replicates to {args.out} (manifest: {manifest.name})")
    return EXIT_OK


def cmd_evolve(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    cfg = parse_config(cfg_path.read_text(encoding="utf-8"))
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    seed_source = None
    if args.seed_program:
        seed_source = Path(args.seed_program).read_text(encoding="utf-8")
    client = _make_client(args, cfg)
    result = srch.run(
        cfg, seed_source, data_dir, args.out, client, shim_cmd=_shim_cmd(args)
    )
    print(
        f"finished {len(result.trace)} iterations; best {result.best.id} "
        f"search score {result.best.combined_score:.4f}; "
        f"holdout score {result.holdout.combined_score:.4f}"
    )
    return EXIT_OK


def cmd_resume(args) -> int:
    out_dir = Path(args.out)
    snapshot = out_dir / "config.snapshot"
    if not snapshot.exists():
        raise DataError(f"not a run directory (no config.snapshot): {out_dir}")
    cfg = parse_config(snapshot.read_text(encoding="utf-8"))
    client = _make_client(args, cfg)
    result = srch.resume(out_dir, Path(args.data), client, shim_cmd=_shim_cmd(args))
    print(
        f"run has {len(result.trace)} iterations; best {result.best.id} "
        f"search score {result.best.combined_score:.4f}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    program_path = Path(args.program)
    if args.program.startswith("native:"):
        source = args.program
        origin = Origin.NATIVE
    elif program_path.exists():
        source = program_path.read_text(encoding="utf-8")
        origin = Origin.SEED
    else:
        raise DataError(f"program file not found: {args.program}")
    kind = benchmark_kind(args.benchmark)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    replicates = load_benchmark(data_dir, kind)
    store = ReplicateStore.from_list(replicates)

    from .model import parse_split

    cfg = RunConfig(benchmark=kind, lam=args.lam, replicate_seed=args.seed)
    cfg.split = parse_split(args.split)
    mode = Guidance(args.mode)
    plan = plan_splits(len(replicates), kind, cfg.split, args.seed, ids=store.ids())
    if mode is Guidance.TRUE_SCORE:
        missing = [rid for rid in plan.val_ids if not store.replicates[rid].has_truth]
        if missing:
            raise DataError(
                f"truth required for mode=true_score; missing for {missing[:3]}"
            )
    program = Program(id="evaluated", source=source, origin=origin, iteration=0)
    evaluator = Evaluator(store, cfg, shim_cmd=_shim_cmd(args))
    from .model import Stage

    outcome = evaluator.evaluate_on(
        program,
        plan.val_ids,
        mode=mode,
        workers=args.workers,
        timeout_s=args.timeout,
        stage=Stage.HOLDOUT,
    )
    paths = write_evaluation_report(outcome, Path(args.out))
    print(f"combined score {outcome.combined_score:.4f}; report: {paths[0].parent}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    runs: dict[str, list[dict]] = {}
    groups: dict[str, list[str]] = {}
    programs: dict[str, dict[str, str]] = {}
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        name = run_dir.name
        trace_path = run_dir / "trace.jsonl"
        if not trace_path.exists():
            raise DataError(f"missing trace.jsonl under {run_dir}")
        records = [
            json.loads(line)
            for line in trace_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        if not records:
            raise DataError(f"empty trace in {run_dir}")
        runs[name] = records
        ckpt = srch.latest_checkpoint(run_dir)
        sources: dict[str, str] = {}
        if ckpt is not None:
            state = arc.restore(ckpt)
            sources = {p.id: p.source for p in state.all_programs()}
        best_path = run_dir / "best" / "program.txt"
        if best_path.exists():
            sources.setdefault("best", best_path.read_text(encoding="utf-8"))
        if not sources:
            raise DataError(f"no programs found under {run_dir}")
        programs[name] = sources
        groups[name] = list(sources.values())

    out_dir = Path(args.out)
    paths = write_trajectories(runs, out_dir)
    paths += write_code_lengths(programs, out_dir)
    if all(len(g) >= 2 for g in groups.values()):
        paths += write_similarity(groups, out_dir)
    else:
        print("skipping similarity: a run has fewer than 2 archived programs")
    print(f"analysis written to {out_dir} ({len(paths)} files)")
    return EXIT_OK


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "evolve": cmd_evolve,
    "resume": cmd_resume,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ExecutorError, TransportError, srch.SearchError, arc.ArchiveError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
