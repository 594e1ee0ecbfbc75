"""Island-structured MAP-Elites store for candidate programs.

Behavior descriptor: (combined-score decile, log-scaled code-length
decile). Each island holds at most ``per_island`` occupied cells; a new
program replaces a cell incumbent only on strictly higher score, and a
full island evicts its lowest-scoring program to make room for a new
cell. Island best programs migrate around a ring every
``MIGRATION_INTERVAL`` iterations.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import vectorize
from .model import EvaluationOutcome, Program, RunConfig, Stage, labeled_seed

MIGRATION_INTERVAL = 10
LENGTH_SCALE_CHARS = 50_000  # log-scale anchor for the length decile


class ArchiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class CellKey:
    island: int
    score_decile: int
    length_decile: int

    def __post_init__(self) -> None:
        if not (0 <= self.score_decile <= 9 and 0 <= self.length_decile <= 9):
            raise ValueError("cell indices out of range")

    def to_str(self) -> str:
        return f"{self.island}:{self.score_decile}:{self.length_decile}"

    @classmethod
    def from_str(cls, s: str) -> "CellKey":
        i, sd, ld = s.split(":")
        return cls(int(i), int(sd), int(ld))


def cell_key(island: int, program: Program) -> CellKey:
    score = program.combined_score
    score_decile = min(9, max(0, int(score * 10)))
    chars = len(program.source)
    length_decile = min(9, int(10 * math.log1p(chars) / math.log1p(LENGTH_SCALE_CHARS)))
    return CellKey(island=island, score_decile=score_decile, length_decile=length_decile)


@dataclass
class ArchiveState:
    islands: list[dict[CellKey, Program]]
    capacity: int
    best: Program
    rng: np.random.Generator
    params: object
    iteration: int = 0
    current_island: int = 0
    seen_ids: set[str] = field(default_factory=set)

    def all_programs(self) -> list[Program]:
        """Unique stored programs, deterministically ordered by score then id."""
        by_id: dict[str, Program] = {}
        for island in self.islands:
            for prog in island.values():
                by_id[prog.id] = prog
        return sorted(by_id.values(), key=lambda p: (-p.combined_score, p.id))

    def stored_count(self) -> int:
        return sum(len(island) for island in self.islands)


def init(seed_program: Program, outcome: EvaluationOutcome, cfg: RunConfig) -> ArchiveState:
    """Fresh archive with the evaluated seed in every island."""
    if outcome.stage is not Stage.STAGE2:
        raise ArchiveError("archive entries need a stage-2 evaluation")
    seed_program.scores = outcome
    params = cfg.archive
    islands: list[dict[CellKey, Program]] = []
    for i in range(params.islands):
        islands.append({cell_key(i, seed_program): seed_program})
    rng = np.random.default_rng(labeled_seed(cfg.replicate_seed, "archive"))
    return ArchiveState(
        islands=islands,
        capacity=params.per_island,
        best=seed_program,
        rng=rng,
        params=params,
        seen_ids={seed_program.id},
    )


def insert(
    state: ArchiveState,
    program: Program,
    outcome: Optional[EvaluationOutcome] = None,
    island: Optional[int] = None,
    _copy: bool = False,
) -> dict:
    """Place a stage-2-evaluated program; returns {accepted, displaced}."""
    if outcome is not None:
        if outcome.stage is not Stage.STAGE2:
            raise ArchiveError("archive entries need a stage-2 evaluation")
        program.scores = outcome
    if program.scores is None:
        raise ArchiveError("program has no evaluation attached")
    if not _copy:
        if program.id in state.seen_ids:
            raise ArchiveError(f"duplicate program id {program.id!r}")
        state.seen_ids.add(program.id)

    idx = state.current_island if island is None else island
    cells = state.islands[idx]
    key = cell_key(idx, program)
    displaced = None
    if key in cells:
        incumbent = cells[key]
        if program.combined_score > incumbent.combined_score:
            cells[key] = program
            displaced = incumbent
            accepted = True
        else:
            accepted = False
    else:
        if len(cells) >= state.capacity:
            worst_key = min(
                cells,
                key=lambda k: (
                    cells[k].combined_score,
                    cells[k].iteration,
                    cells[k].id,
                ),
            )
            displaced = cells.pop(worst_key)
        cells[key] = program
        accepted = True
    if accepted and program.combined_score > state.best.combined_score:
        state.best = program
    return {"accepted": accepted, "displaced": displaced}


def sample_parent_and_inspirations(
    state: ArchiveState, rng: Optional[np.random.Generator] = None
) -> dict:
    """Parent from the current island plus top-k and diverse inspirations.

    With probability exploit_ratio the parent comes from the island's
    elite fraction; otherwise from the whole island. Top programs are
    the global best by score; diverse programs maximize TF-IDF distance
    from the parent. Advances the island round-robin.
    """
    rng = rng if rng is not None else state.rng
    if state.stored_count() == 0:
        raise ArchiveError("empty archive")
    idx = state.current_island
    members = sorted(
        state.islands[idx].values(), key=lambda p: (-p.combined_score, p.id)
    )
    from_elite = bool(rng.random() < state.params.exploit_ratio)
    if from_elite:
        pool = members[: max(1, math.ceil(state.params.elite_ratio * len(members)))]
    else:
        pool = members
    parent = pool[int(rng.integers(len(pool)))]

    ranked = state.all_programs()
    top = ranked[: state.params.top_k]
    exclude = {parent.id} | {p.id for p in top}
    candidates = [p for p in ranked if p.id not in exclude]
    diverse: list[Program] = []
    if candidates:
        sources = [parent.source] + [p.source for p in candidates]
        vecs = vectorize(sources)
        distances = [1.0 - vecs[0].cosine(v) for v in vecs[1:]]
        order = sorted(
            range(len(candidates)), key=lambda i: (-distances[i], candidates[i].id)
        )
        diverse = [candidates[i] for i in order[: state.params.diverse_k]]

    state.current_island = (idx + 1) % len(state.islands)
    return {
        "parent": parent,
        "top": top,
        "diverse": diverse,
        "island": idx,
        "from_elite_pool": from_elite,
    }


def migrate(state: ArchiveState) -> ArchiveState:
    """Copy each island's best to its ring neighbor via insert semantics."""
    n = len(state.islands)
    bests = []
    for island in state.islands:
        if island:
            bests.append(
                max(island.values(), key=lambda p: (p.combined_score, p.id))
            )
        else:
            bests.append(None)
    for i, prog in enumerate(bests):
        if prog is not None:
            insert(state, prog, island=(i + 1) % n, _copy=True)
    return state


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def _checksum(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def checkpoint(state: ArchiveState, directory) -> Path:
    """Serialize the full archive (rng state included) with a checksum.

    Program sources go to individual files so they survive bit-exactly;
    the state file stores their hashes.
    """
    directory = Path(directory)
    (directory / "programs").mkdir(parents=True, exist_ok=True)
    programs: dict[str, dict] = {}
    for prog in state.all_programs() + [state.best]:
        if prog.id in programs:
            continue
        src_path = directory / "programs" / f"{prog.id}.txt"
        src_path.write_text(prog.source, encoding="utf-8")
        meta = prog.to_dict()
        meta.pop("source")
        meta["source_sha256"] = _checksum(prog.source)
        programs[prog.id] = meta
    payload = {
        "capacity": state.capacity,
        "iteration": state.iteration,
        "current_island": state.current_island,
        "best_id": state.best.id,
        "seen_ids": sorted(state.seen_ids),
        "rng_state": state.rng.bit_generator.state,
        "params": vars(state.params),
        "islands": [
            {key.to_str(): prog.id for key, prog in island.items()}
            for island in state.islands
        ],
        "programs": programs,
    }
    text = json.dumps(payload, sort_keys=True, indent=1)
    out = {"checksum": _checksum(text), "payload": payload}
    path = directory / "state.json"
    path.write_text(json.dumps(out, sort_keys=True, indent=1), encoding="utf-8")
    return path


def restore(directory) -> ArchiveState:
    """Rebuild an archive from checkpoint(); rejects corrupt files."""
    directory = Path(directory)
    path = directory / "state.json"
    if not path.exists():
        raise ArchiveError(f"no checkpoint at {directory}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    payload = doc["payload"]
    text = json.dumps(payload, sort_keys=True, indent=1)
    if _checksum(text) != doc["checksum"]:
        raise ArchiveError("checkpoint state checksum mismatch")

    programs: dict[str, Program] = {}
    for pid, meta in payload["programs"].items():
        src_path = directory / "programs" / f"{pid}.txt"
        source = src_path.read_text(encoding="utf-8")
        if _checksum(source) != meta["source_sha256"]:
            raise ArchiveError(f"source checksum mismatch for program {pid}")
        d = dict(meta)
        d.pop("source_sha256")
        d["source"] = source
        programs[pid] = Program.from_dict(d)

    islands = []
    for cells in payload["islands"]:
        islands.append(
            {CellKey.from_str(k): programs[pid] for k, pid in cells.items()}
        )
    from .model import ArchiveParams

    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return ArchiveState(
        islands=islands,
        capacity=payload["capacity"],
        best=programs[payload["best_id"]],
        rng=rng,
        params=ArchiveParams(**payload["params"]),
        iteration=payload["iteration"],
        current_island=payload["current_island"],
        seen_ids=set(payload["seen_ids"]),
    )
