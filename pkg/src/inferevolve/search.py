"""Top-level evolutionary loop: sample, mutate, evaluate, archive.

Run-directory layout: ``config.snapshot``, ``trace.jsonl`` (one record
per iteration), ``checkpoint_<k>/`` every checkpoint interval,
``best/program.txt``, and ``holdout.json`` written once at the end.

All randomness flows from labeled child streams of the run seed
(archive sampling, model sampling, stage-1 subset, per-replicate proxy
folds), so identical configs replay identically and resume continues a
killed run bit-for-bit (wall times aside).
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import archive as arc
from .bench_data import (
    BenchmarkTag,
    Replicate,
    ReplicateStore,
    load_benchmark,
    plan_splits,
)
from .executor import Evaluator
from .llm import (
    PREVIEW_ROWS,
    CodeExtractionError,
    MockChatClient,
    TransportError,
    build_ensemble,
    compose_prompt,
    extract_code,
    generate,
    sample_model,
)
from .model import (
    EvaluationOutcome,
    Origin,
    Program,
    RunConfig,
    labeled_seed,
    serialize_config,
)

DEFAULT_SEED_ITE = """\
import numpy as np

# EVOLVE-BLOCK-START
def estimate(df):
    t = df['treatment'].to_numpy()
    y = df['y_factual'].to_numpy(dtype=float)
    if t.sum() == 0 or t.sum() == len(t):
        return np.zeros(len(df)), 0.0, 'degenerate'
    ate = float(y[t == 1].mean() - y[t == 0].mean())
    return np.full(len(df), ate), ate, 'diff_in_means'
# EVOLVE-BLOCK-END
"""

DEFAULT_SEED_PANEL = """\
import numpy as np

# EVOLVE-BLOCK-START
def estimate(df):
    def wmean(d):
        w = d['n.patients'].to_numpy(dtype=float)
        return float((w * d['Y'].to_numpy(dtype=float)).sum() / w.sum())

    deltas = []
    weights = []
    for _, grp in df.groupby('id.practice'):
        pre = grp[grp['post'] == 0]
        post = grp[grp['post'] == 1]
        if len(pre) == 0 or len(post) == 0:
            continue
        deltas.append((int(grp['Z'].iloc[0]), wmean(post) - wmean(pre)))
        weights.append(float(post['n.patients'].sum()))
    z = np.array([d[0] for d in deltas])
    delta = np.array([d[1] for d in deltas])
    w = np.array(weights)
    m1 = float((w * delta)[z == 1].sum() / w[z == 1].sum())
    m0 = float((w * delta)[z == 0].sum() / w[z == 0].sum())
    tau = m1 - m0
    v1 = float(((w[z == 1] * (delta[z == 1] - m1)) ** 2).sum() / w[z == 1].sum() ** 2)
    v0 = float(((w[z == 0] * (delta[z == 0] - m0)) ** 2).sum() / w[z == 0].sum() ** 2)
    half = 1.6448536269514722 * float(np.sqrt(v1 + v0))
    return tau, tau - half, tau + half, 'weighted_did'
# EVOLVE-BLOCK-END
"""


class SearchError(RuntimeError):
    pass


@dataclass
class RunResult:
    best: Program
    trace: list[dict]
    holdout: Optional[EvaluationOutcome]
    out_dir: Path


def default_seed_source(cfg: RunConfig) -> str:
    if cfg.benchmark.tag is BenchmarkTag.PANEL_SATT:
        return DEFAULT_SEED_PANEL
    return DEFAULT_SEED_ITE


def _as_store(data: Union[ReplicateStore, Sequence[Replicate], Path, str], cfg) -> ReplicateStore:
    if isinstance(data, ReplicateStore):
        return data
    if isinstance(data, (str, Path)):
        return ReplicateStore.from_list(load_benchmark(Path(data), cfg.benchmark))
    return ReplicateStore.from_list(list(data))


def _data_preview(store: ReplicateStore, replicate_id: str) -> str:
    rep = store.get(replicate_id)
    table = rep.data if hasattr(rep, "data") else rep.rows
    return table.head(PREVIEW_ROWS).to_csv(index=False, lineterminator="\n")


def _append_trace(out_dir: Path, record: dict) -> None:
    with (out_dir / "trace.jsonl").open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_trace(out_dir: Path) -> list[dict]:
    path = out_dir / "trace.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _rewrite_trace(out_dir: Path, records: list[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    (out_dir / "trace.jsonl").write_text(text, encoding="utf-8")


def _write_run_state(directory: Path, model_rng, generate_calls: int) -> None:
    state = {
        "model_rng_state": model_rng.bit_generator.state,
        "generate_calls": generate_calls,
    }
    (directory / "run_state.json").write_text(
        json.dumps(state, sort_keys=True), encoding="utf-8"
    )


class _Loop:
    """Shared machinery between run() and resume()."""

    def __init__(self, cfg: RunConfig, store: ReplicateStore, out_dir: Path, client, shim_cmd=None):
        self.cfg = cfg
        self.store = store
        self.out_dir = Path(out_dir)
        self.client = client
        plan = plan_splits(
            pool_size=len(store.ids()),
            kind=cfg.benchmark,
            split=cfg.split,
            seed=cfg.replicate_seed,
            ids=store.ids(),
        )
        self.plan = plan
        self.evaluator = Evaluator(store, cfg, shim_cmd=shim_cmd)
        self.ensemble = build_ensemble(cfg)
        self.preview = _data_preview(store, plan.train_ids[0])
        self.origin = Origin.MOCK if isinstance(client, MockChatClient) else Origin.LLM

    def iterate(self, state: arc.ArchiveState, model_rng, iteration: int) -> dict:
        """One full search iteration; always consumes one generation call."""
        t0 = time.monotonic()
        sample = arc.sample_parent_and_inspirations(state)
        parent = sample["parent"]
        prompt = compose_prompt(
            self.cfg.benchmark,
            self.cfg.lam,
            parent,
            sample["top"],
            sample["diverse"],
            self.preview,
            best=state.best,
        )
        model = sample_model(self.ensemble, model_rng)
        record = {
            "iteration": iteration,
            "program_id": None,
            "parent_id": parent.id,
            "model_name": model.name,
            "stage1_score": None,
            "stage2_score": None,
            "accepted": False,
            "best_so_far": state.best.combined_score,
            "wall_time_s": 0.0,
        }
        try:
            raw = generate(model, prompt, self.client)
            source = extract_code(raw, parent_source=parent.source)
        except (TransportError, CodeExtractionError) as exc:
            record["error"] = str(exc)[:200]
            record["wall_time_s"] = time.monotonic() - t0
            return record

        program = Program(
            id=f"prog_{iteration:04d}",
            source=source,
            origin=self.origin,
            iteration=iteration,
            parent_id=parent.id,
        )
        record["program_id"] = program.id
        cascade = self.evaluator.cascade(program, self.plan.train_ids)
        record["stage1_score"] = cascade["stage1"].combined_score
        if cascade["decision"] == "insert":
            stage2 = cascade["stage2"]
            record["stage2_score"] = stage2.combined_score
            result = arc.insert(state, program, stage2, island=sample["island"])
            record["accepted"] = bool(result["accepted"])
        record["best_so_far"] = state.best.combined_score
        record["wall_time_s"] = time.monotonic() - t0
        return record

    def run_iterations(self, state: arc.ArchiveState, model_rng, start: int) -> list[dict]:
        cfg = self.cfg
        records = []
        for i in range(start, cfg.max_iterations + 1):
            record = self.iterate(state, model_rng, i)
            state.iteration = i
            records.append(record)
            _append_trace(self.out_dir, record)
            if i % arc.MIGRATION_INTERVAL == 0:
                arc.migrate(state)
            if i % cfg.archive.checkpoint_interval == 0:
                ckpt = self.out_dir / f"checkpoint_{i}"
                arc.checkpoint(state, ckpt)
                _write_run_state(ckpt, model_rng, getattr(self.client, "calls", 0))
        return records

    def finish(self, state: arc.ArchiveState, trace: list[dict]) -> RunResult:
        best_dir = self.out_dir / "best"
        best_dir.mkdir(parents=True, exist_ok=True)
        (best_dir / "program.txt").write_text(state.best.source, encoding="utf-8")
        holdout = self.evaluator.holdout_eval(
            state.best, self.plan.val_ids, self.plan.train_ids, out_dir=self.out_dir
        )
        return RunResult(best=state.best, trace=trace, holdout=holdout, out_dir=self.out_dir)


def run(
    cfg: RunConfig,
    seed_program: Union[Program, str, None],
    data: Union[ReplicateStore, Sequence[Replicate], Path, str],
    out_dir: Union[Path, str],
    client,
    shim_cmd: Optional[Sequence[str]] = None,
) -> RunResult:
    """Full search run: exactly cfg.max_iterations mutation iterations,
    then one held-out evaluation of the archived best."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = _as_store(data, cfg)
    loop = _Loop(cfg, store, out_dir, client, shim_cmd=shim_cmd)

    if seed_program is None:
        seed_program = default_seed_source(cfg)
    if isinstance(seed_program, str):
        seed_program = Program(
            id="seed", source=seed_program, origin=Origin.SEED, iteration=0
        )

    (out_dir / "config.snapshot").write_text(serialize_config(cfg), encoding="utf-8")
    _rewrite_trace(out_dir, [])

    seed_outcome = loop.evaluator.evaluate_on(
        seed_program,
        loop.plan.train_ids,
        mode=cfg.guidance,
        workers=1,
        timeout_s=cfg.timeouts.stage2_s,
        stage=arc.Stage.STAGE2,
    )
    if seed_outcome.combined_score <= 0.0:
        raise SearchError(
            "seed program fails stage-2 evaluation: "
            + "; ".join(f"{r.replicate_id}={r.status.value}" for r in seed_outcome.per_replicate)
        )
    state = arc.init(seed_program, seed_outcome, cfg)
    model_rng = np.random.default_rng(labeled_seed(cfg.replicate_seed, "models"))

    trace = loop.run_iterations(state, model_rng, start=1)
    return loop.finish(state, trace)


_CKPT_RE = re.compile(r"checkpoint_(\d+)$")


def latest_checkpoint(out_dir: Path) -> Optional[Path]:
    best = None
    best_k = -1
    for path in Path(out_dir).iterdir():
        m = _CKPT_RE.match(path.name)
        if m and path.is_dir() and int(m.group(1)) > best_k:
            best, best_k = path, int(m.group(1))
    return best


def resume(
    out_dir: Union[Path, str],
    data: Union[ReplicateStore, Sequence[Replicate], Path, str],
    client,
    shim_cmd: Optional[Sequence[str]] = None,
) -> RunResult:
    """Continue a killed run from its latest checkpoint.

    With the deterministic mock client the continuation reproduces the
    uninterrupted run exactly (wall times aside).
    """
    from .model import parse_config

    out_dir = Path(out_dir)
    snapshot = out_dir / "config.snapshot"
    if not snapshot.exists():
        raise SearchError(f"no config.snapshot under {out_dir}")
    cfg = parse_config(snapshot.read_text(encoding="utf-8"))

    ckpt = latest_checkpoint(out_dir)
    if ckpt is None:
        raise SearchError(f"no checkpoint under {out_dir}")
    state = arc.restore(ckpt)
    run_state = json.loads((ckpt / "run_state.json").read_text(encoding="utf-8"))

    trace = [r for r in _load_trace(out_dir) if r["iteration"] <= state.iteration]
    if state.iteration >= cfg.max_iterations and (out_dir / "holdout.json").exists():
        holdout = EvaluationOutcome.from_dict(
            json.loads((out_dir / "holdout.json").read_text(encoding="utf-8"))
        )
        best = state.best
        print(f"run in {out_dir} already completed; nothing to resume")
        return RunResult(best=best, trace=trace, holdout=holdout, out_dir=out_dir)

    store = _as_store(data, cfg)
    loop = _Loop(cfg, store, out_dir, client, shim_cmd=shim_cmd)
    model_rng = np.random.default_rng()
    model_rng.bit_generator.state = run_state["model_rng_state"]
    if hasattr(client, "calls"):
        client.calls = run_state["generate_calls"]

    _rewrite_trace(out_dir, trace)
    trace = trace + loop.run_iterations(state, model_rng, start=state.iteration + 1)
    return loop.finish(state, trace)
