"""Report rendering: delimited tables plus matplotlib figures.

Every report path writes plot-ready CSVs and renders the matching
figure next to them, so run outputs can be inspected without a
notebook.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

from .analysis import best_so_far, code_length, similarity_summary
from .model import EvaluationOutcome


def write_evaluation_report(outcome: EvaluationOutcome, out_dir: Path) -> list[Path]:
    """Per-replicate table, aggregate JSON, and a metric figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rep in outcome.per_replicate:
        row = {"replicate_id": rep.replicate_id, "status": rep.status.value}
        row.update(rep.outputs or {})
        rows.append(row)
    table = pd.DataFrame(rows)
    csv_path = out_dir / "per_replicate.csv"
    table.to_csv(csv_path, index=False, lineterminator="\n")

    agg_path = out_dir / "aggregate.json"
    agg_path.write_text(
        json.dumps(
            {
                "combined_score": outcome.combined_score,
                "mode": outcome.mode.value,
                "stage": outcome.stage.value,
                "aggregate": _bundle_dict(outcome),
            },
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
    )

    fig_path = out_dir / "per_replicate.png"
    numeric = table.select_dtypes("number")
    fig, ax = plt.subplots(figsize=(8, 4))
    if len(numeric.columns):
        numeric.index = table["replicate_id"]
        numeric.plot(kind="bar", ax=ax)
        ax.set_xlabel("replicate")
        ax.set_ylabel("value")
    ax.set_title(f"per-replicate outputs (combined score {outcome.combined_score:.4f})")
    fig.tight_layout()
    fig.savefig(fig_path)
    plt.close(fig)
    return [csv_path, agg_path, fig_path]


def _bundle_dict(outcome: EvaluationOutcome):
    from .model import bundle_to_dict

    return bundle_to_dict(outcome.aggregate)


def write_trajectories(runs: dict[str, list[dict]], out_dir: Path) -> list[Path]:
    """Best-so-far series per run: one CSV each plus a combined figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, records in sorted(runs.items()):
        series = best_so_far(records)
        frame = pd.DataFrame(
            {
                "iteration": [r["iteration"] for r in records],
                "best_so_far": series,
            }
        )
        path = out_dir / f"trajectory_{name}.csv"
        frame.to_csv(path, index=False, lineterminator="\n")
        paths.append(path)
        ax.step(frame["iteration"], frame["best_so_far"], where="post", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("best-so-far combined score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig_path = out_dir / "trajectories.png"
    fig.savefig(fig_path)
    plt.close(fig)
    paths.append(fig_path)
    return paths


def write_similarity(groups: dict[str, Sequence[str]], out_dir: Path) -> list[Path]:
    """Within/between similarity table plus a mean-cosine heatmap."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = similarity_summary(groups)
    rows = []
    for name, stats in sorted(summary["within"].items()):
        rows.append({"comparison": f"within {name}", **stats})
    for (a, b), stats in sorted(summary["between"].items()):
        rows.append({"comparison": f"{a} vs {b}", **stats})
    table = pd.DataFrame(rows)
    csv_path = out_dir / "similarity_summary.csv"
    table.to_csv(csv_path, index=False, lineterminator="\n")

    names = sorted(summary["within"])
    matrix = [[0.0] * len(names) for _ in names]
    for i, a in enumerate(names):
        matrix[i][i] = summary["within"][a]["mean"]
        for j, b in enumerate(names):
            if i < j:
                stats = summary["between"].get((a, b)) or summary["between"].get((b, a))
                matrix[i][j] = matrix[j][i] = stats["mean"]
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    fig.colorbar(im, ax=ax, label="mean TF-IDF cosine")
    fig.tight_layout()
    fig_path = out_dir / "similarity.png"
    fig.savefig(fig_path)
    plt.close(fig)
    return [csv_path, fig_path]


def write_code_lengths(programs: dict[str, dict[str, str]], out_dir: Path) -> list[Path]:
    """Character/line counts per program with a grouped bar figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_name, progs in sorted(programs.items()):
        for pid, source in sorted(progs.items()):
            rows.append({"run": run_name, "program_id": pid, **code_length(source)})
    table = pd.DataFrame(rows)
    csv_path = out_dir / "code_lengths.csv"
    table.to_csv(csv_path, index=False, lineterminator="\n")

    fig, ax = plt.subplots(figsize=(8, 4))
    if len(table):
        by_run = table.groupby("run")["nonempty_lines"].mean()
        ax.bar(by_run.index, by_run.to_numpy())
        ax.set_ylabel("mean non-empty lines")
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig_path = out_dir / "code_lengths.png"
    fig.savefig(fig_path)
    plt.close(fig)
    return [csv_path, fig_path]
