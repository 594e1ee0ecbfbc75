"""Replicate schemas, file loaders, split planning, and the synthetic DGP.

Benchmarks live on disk as one CSV pair per replicate
(``rep_<k>_factual.csv`` plus optional ``rep_<k>_truth.csv``) with a
``manifest.csv`` index. The factual file is exactly what candidate
programs may see; every ground-truth column lives in the truth file.

Truth reads go through ``truth_record()`` so tests can prove that proxy
evaluation and search never touch them.
"""

from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from .model import BenchmarkKind, BenchmarkTag, benchmark_kind

TRUTH_COLUMNS = {"ite_true", "ate_true", "satt_true", "y1", "y0"}

PANEL_BASE_COLUMNS = ["id.practice", "year", "Y", "Z", "post", "n.patients"]
PANEL_X_COLUMNS = [f"X{i}" for i in range(1, 10)]
PANEL_V_COLUMNS = ["V1_avg", "V2_avg", "V3_avg", "V4_avg", "V5_A_avg", "V5_B_avg", "V5_C_avg"]
PANEL_COLUMNS = PANEL_BASE_COLUMNS + PANEL_X_COLUMNS + PANEL_V_COLUMNS

LALONDE_COVARIATES = [
    "age", "education", "black", "hispanic", "married", "nodegree", "re74", "re75",
]

# fixed covariate sets; synthetic-ite accepts any x<i> columns
CROSS_COVARIATES = {
    "ihdp": [f"x{i}" for i in range(1, 26)],
    "acic2016": [f"x_{i}" for i in range(1, 59)],
    "lalonde": LALONDE_COVARIATES,
}

# per-benchmark working-subset sizes sampled from the released pools
WORKING_SUBSET = {"acic2022": 150, "acic2016": 100, "ihdp": 25, "lalonde": 50}


class DataError(ValueError):
    """Raised for malformed benchmark files or replicates."""


# ---------------------------------------------------------------------------
# Truth records and access instrumentation
# ---------------------------------------------------------------------------

_truth_listeners: list[Callable[[str], None]] = []


@contextmanager
def record_truth_access(listener: Callable[[str], None]) -> Iterator[None]:
    """Invoke listener(replicate_id) on every truth read while active."""
    _truth_listeners.append(listener)
    try:
        yield
    finally:
        _truth_listeners.remove(listener)


@dataclass
class CrossTruth:
    ite_true: np.ndarray
    ate_true: float


@dataclass
class PanelTruth:
    satt_true: Optional[float] = None
    y1: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None


@dataclass
class CrossSectionalReplicate:
    """One cross-sectional draw: factual table plus hidden truth."""

    replicate_id: str
    kind: BenchmarkKind
    data: pd.DataFrame
    _truth: Optional[CrossTruth] = None
    factual_path: Optional[Path] = None

    @property
    def n_units(self) -> int:
        return len(self.data)

    @property
    def treatment(self) -> np.ndarray:
        return self.data["treatment"].to_numpy(dtype=float)

    @property
    def y_factual(self) -> np.ndarray:
        return self.data["y_factual"].to_numpy(dtype=float)

    @property
    def covariate_columns(self) -> list[str]:
        return [c for c in self.data.columns if c not in ("treatment", "y_factual")]

    @property
    def covariates(self) -> pd.DataFrame:
        return self.data[self.covariate_columns]

    @property
    def has_truth(self) -> bool:
        return self._truth is not None

    def truth_record(self) -> Optional[CrossTruth]:
        for listener in _truth_listeners:
            listener(self.replicate_id)
        return self._truth


@dataclass
class PanelReplicate:
    """One practice-year panel draw in long format."""

    replicate_id: str
    kind: BenchmarkKind
    rows: pd.DataFrame
    _truth: Optional[PanelTruth] = None
    factual_path: Optional[Path] = None

    @property
    def n_practices(self) -> int:
        return self.rows["id.practice"].nunique()

    @property
    def has_truth(self) -> bool:
        return self._truth is not None

    def truth_record(self) -> Optional[PanelTruth]:
        for listener in _truth_listeners:
            listener(self.replicate_id)
        return self._truth


Replicate = CrossSectionalReplicate | PanelReplicate


def strip_truth(rep: Replicate) -> Replicate:
    """Candidate-visible copy: same factual data, no truth attached."""
    return replace(rep, _truth=None)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _validate_cross(rep: CrossSectionalReplicate) -> None:
    df = rep.data
    for col in ("treatment", "y_factual"):
        if col not in df.columns:
            raise DataError(f"{rep.replicate_id}: missing required column {col!r}")
    leaked = TRUTH_COLUMNS & set(df.columns)
    if leaked:
        raise DataError(f"{rep.replicate_id}: truth columns in factual data: {leaked}")
    t = df["treatment"].to_numpy()
    if not np.isin(t, (0, 1)).all():
        raise DataError(f"{rep.replicate_id}: treatment must be binary 0/1")
    expected = CROSS_COVARIATES.get(rep.kind.name)
    if expected is not None:
        missing = [c for c in expected if c not in df.columns]
        if missing:
            raise DataError(f"{rep.replicate_id}: missing covariates {missing[:4]}...")
    elif not rep.covariate_columns:
        raise DataError(f"{rep.replicate_id}: no covariate columns")
    if rep._truth is not None:
        if len(rep._truth.ite_true) != len(df):
            raise DataError(
                f"{rep.replicate_id}: truth length {len(rep._truth.ite_true)} "
                f"!= factual rows {len(df)}"
            )
        if not np.isfinite(rep._truth.ite_true).all():
            raise DataError(f"{rep.replicate_id}: non-finite truth")


def _validate_panel(rep: PanelReplicate) -> None:
    df = rep.rows
    missing = [c for c in PANEL_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{rep.replicate_id}: missing required column {missing[0]!r}")
    keys = df[["id.practice", "year"]]
    if keys.duplicated().any():
        raise DataError(f"{rep.replicate_id}: duplicate (practice, year) rows")
    for practice, grp in df.groupby("id.practice"):
        if grp["Z"].nunique() != 1:
            raise DataError(f"{rep.replicate_id}: Z varies within practice {practice}")
        post = grp.sort_values("year")["post"].to_numpy()
        if (np.diff(post) < 0).any():
            raise DataError(
                f"{rep.replicate_id}: post not monotone in year for practice {practice}"
            )
    if (df["n.patients"].to_numpy() < 1).any():
        raise DataError(f"{rep.replicate_id}: n.patients must be >= 1")
    if not np.isin(df["Z"].to_numpy(), (0, 1)).all():
        raise DataError(f"{rep.replicate_id}: Z must be binary 0/1")
    truth = rep._truth
    if truth is not None and truth.satt_true is None:
        if truth.y1 is None or len(truth.y1) != len(df) or len(truth.y0) != len(df):
            raise DataError(f"{rep.replicate_id}: potential-outcome truth length mismatch")


# ---------------------------------------------------------------------------
# Loaders and writers
# ---------------------------------------------------------------------------

_FACTUAL_RE = re.compile(r"rep_(\d+)_factual\.csv$")


def _scan_dir(directory: Path) -> list[tuple[int, Path, Optional[Path]]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found = []
    for path in directory.iterdir():
        m = _FACTUAL_RE.match(path.name)
        if m:
            k = int(m.group(1))
            truth = directory / f"rep_{m.group(1)}_truth.csv"
            found.append((k, path, truth if truth.exists() else None))
    if not found:
        raise DataError(f"no rep_<k>_factual.csv files in {directory}")
    return sorted(found)


def load_cross_sectional(directory, kind: BenchmarkKind) -> list[CrossSectionalReplicate]:
    """Load and validate every cross-sectional replicate in a directory."""
    if kind.tag is not BenchmarkTag.CROSS_SECTIONAL_ITE:
        raise DataError(f"{kind.name} is not a cross-sectional benchmark")
    reps = []
    for k, factual_path, truth_path in _scan_dir(directory):
        data = pd.read_csv(factual_path, float_precision="round_trip")
        truth = None
        if truth_path is not None:
            tdf = pd.read_csv(truth_path, float_precision="round_trip")
            if "ite_true" not in tdf.columns:
                raise DataError(f"{truth_path.name}: missing column 'ite_true'")
            ite = tdf["ite_true"].to_numpy(dtype=float)
            ate = float(tdf["ate_true"].iloc[0]) if "ate_true" in tdf.columns else float(ite.mean())
            truth = CrossTruth(ite_true=ite, ate_true=ate)
        rep = CrossSectionalReplicate(
            replicate_id=f"rep_{k:03d}",
            kind=kind,
            data=data,
            _truth=truth,
            factual_path=factual_path,
        )
        _validate_cross(rep)
        reps.append(rep)
    return reps


def load_panel(directory, kind: Optional[BenchmarkKind] = None) -> list[PanelReplicate]:
    """Load and validate every panel replicate in a directory."""
    kind = kind or benchmark_kind("acic2022")
    if kind.tag is not BenchmarkTag.PANEL_SATT:
        raise DataError(f"{kind.name} is not a panel benchmark")
    reps = []
    for k, factual_path, truth_path in _scan_dir(directory):
        rows = pd.read_csv(factual_path, float_precision="round_trip")
        truth = None
        if truth_path is not None:
            tdf = pd.read_csv(truth_path, float_precision="round_trip")
            if "satt_true" in tdf.columns:
                truth = PanelTruth(satt_true=float(tdf["satt_true"].iloc[0]))
            elif {"y1", "y0"} <= set(tdf.columns):
                truth = PanelTruth(
                    y1=tdf["y1"].to_numpy(dtype=float),
                    y0=tdf["y0"].to_numpy(dtype=float),
                )
            else:
                raise DataError(f"{truth_path.name}: need satt_true or y1/y0 columns")
        rep = PanelReplicate(
            replicate_id=f"rep_{k:03d}",
            kind=kind,
            rows=rows,
            _truth=truth,
            factual_path=factual_path,
        )
        _validate_panel(rep)
        reps.append(rep)
    return reps


def load_benchmark(directory, kind: BenchmarkKind) -> list[Replicate]:
    if kind.tag is BenchmarkTag.PANEL_SATT:
        return load_panel(directory, kind)
    return load_cross_sectional(directory, kind)


def write_benchmark(replicates: Sequence[Replicate], directory) -> Path:
    """Write factual/truth CSV pairs plus manifest.csv; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for rep in replicates:
        k = rep.replicate_id.split("_")[-1]
        factual = directory / f"rep_{k}_factual.csv"
        table = rep.data if isinstance(rep, CrossSectionalReplicate) else rep.rows
        table.to_csv(factual, index=False, lineterminator="\n")
        truth_name = ""
        if rep.has_truth:
            truth_path = directory / f"rep_{k}_truth.csv"
            truth = rep._truth
            if isinstance(rep, CrossSectionalReplicate):
                tdf = pd.DataFrame(
                    {"ite_true": truth.ite_true, "ate_true": truth.ate_true}
                )
            elif truth.satt_true is not None:
                tdf = pd.DataFrame({"satt_true": [truth.satt_true]})
            else:
                tdf = pd.DataFrame({"y1": truth.y1, "y0": truth.y0})
            tdf.to_csv(truth_path, index=False, lineterminator="\n")
            truth_name = truth_path.name
        records.append(
            {"replicate_id": rep.replicate_id, "factual": factual.name, "truth": truth_name}
        )
    manifest = directory / "manifest.csv"
    pd.DataFrame(records).to_csv(manifest, index=False, lineterminator="\n")
    return manifest


# ---------------------------------------------------------------------------
# Split planning
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    working_subset: list
    train_ids: list
    val_ids: list
    seed: int
    split: tuple[float, float]


def plan_splits(
    pool_size: int,
    kind: BenchmarkKind,
    split: tuple[float, float],
    seed: int,
    ids: Optional[Sequence] = None,
) -> SplitPlan:
    """Seeded working-subset sample plus train/val split.

    The subset is drawn without replacement by a seeded shuffle; the
    train count is round(train_fraction * subset_size), which reproduces
    the documented per-benchmark counts.
    """
    subset_size = WORKING_SUBSET.get(kind.name, pool_size)
    if pool_size < subset_size:
        raise DataError(
            f"pool of {pool_size} smaller than {kind.name} working subset {subset_size}"
        )
    pool = list(ids) if ids is not None else list(range(pool_size))
    if len(pool) != pool_size:
        raise DataError("ids length must equal pool_size")
    rng = np.random.default_rng(seed)
    order = rng.permutation(pool_size)
    subset = [pool[i] for i in order[:subset_size]]
    n_train = round(split[0] * subset_size)
    train = sorted(subset[:n_train])
    val = sorted(subset[n_train:])
    return SplitPlan(
        working_subset=subset, train_ids=train, val_ids=val, seed=seed, split=split
    )


# ---------------------------------------------------------------------------
# Synthetic data-generating processes
# ---------------------------------------------------------------------------


@dataclass
class DGPSpec:
    effect: str = "constant"  # constant | heterogeneous
    confounding: str = "none"  # none | linear
    effect_size: float = 2.0
    noise_sd: float = 1.0

    def __post_init__(self) -> None:
        if self.effect not in ("constant", "heterogeneous"):
            raise DataError(f"unknown effect kind {self.effect!r}")
        if self.confounding not in ("none", "linear"):
            raise DataError(f"unknown confounding kind {self.confounding!r}")


def _cross_covariate_frame(kind: BenchmarkKind, n: int, rng) -> pd.DataFrame:
    if kind.name == "lalonde":
        return pd.DataFrame(
            {
                "age": rng.integers(17, 56, size=n),
                "education": rng.integers(3, 17, size=n),
                "black": rng.integers(0, 2, size=n),
                "hispanic": rng.integers(0, 2, size=n),
                "married": rng.integers(0, 2, size=n),
                "nodegree": rng.integers(0, 2, size=n),
                "re74": np.round(np.abs(rng.normal(5000, 6000, size=n)), 2),
                "re75": np.round(np.abs(rng.normal(5000, 6000, size=n)), 2),
            }
        )
    if kind.name in CROSS_COVARIATES:
        cols = CROSS_COVARIATES[kind.name]
    else:
        cols = [f"x{i}" for i in range(1, 9)]
    values = rng.normal(size=(n, len(cols)))
    return pd.DataFrame(values, columns=cols)


def _numeric_matrix(df: pd.DataFrame) -> np.ndarray:
    return df.apply(pd.to_numeric).to_numpy(dtype=float)


def _generate_cross(
    kind: BenchmarkKind, index: int, n_units: int, rng, dgp: DGPSpec
) -> CrossSectionalReplicate:
    cov = _cross_covariate_frame(kind, n_units, rng)
    X = _numeric_matrix(cov)
    Xs = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
    if dgp.confounding == "none":
        t = (rng.random(n_units) < 0.5).astype(int)
    else:
        logits = 0.8 * Xs[:, 0] - 0.5 * Xs[:, 1 % Xs.shape[1]]
        t = (rng.random(n_units) < 1.0 / (1.0 + np.exp(-logits))).astype(int)
    if dgp.effect == "constant":
        tau = np.full(n_units, dgp.effect_size)
    else:
        tau = dgp.effect_size + Xs[:, 0] + 0.5 * Xs[:, 1 % Xs.shape[1]]
    baseline = Xs @ (1.0 / np.arange(1.0, Xs.shape[1] + 1.0)) + 0.5 * Xs[:, 0] ** 2
    y = baseline + t * tau + dgp.noise_sd * rng.normal(size=n_units)
    data = cov.copy()
    data.insert(0, "treatment", t)
    data.insert(1, "y_factual", y)
    return CrossSectionalReplicate(
        replicate_id=f"rep_{index:03d}",
        kind=kind,
        data=data,
        _truth=CrossTruth(ite_true=tau, ate_true=float(tau.mean())),
    )


def _generate_panel(
    kind: BenchmarkKind, index: int, n_practices: int, rng, dgp: DGPSpec
) -> PanelReplicate:
    years = np.array([1, 2, 3, 4])
    n_rows = n_practices * len(years)
    x = rng.normal(size=(n_practices, 9))
    if dgp.confounding == "none":
        z = (rng.random(n_practices) < 0.5).astype(int)
    else:
        z = (rng.random(n_practices) < 1.0 / (1.0 + np.exp(-0.8 * x[:, 0]))).astype(int)
    if z.sum() < 2 or z.sum() > n_practices - 2:
        # guarantee both arms; flip deterministic extremes
        z[:2] = 1
        z[-2:] = 0
    # practice heterogeneity dominates the outcome scale, as in real
    # practice-level panels; pre/post differencing cancels it
    alpha = rng.normal(scale=3.0, size=n_practices)
    if dgp.effect == "constant":
        tau_practice = np.full(n_practices, dgp.effect_size)
    else:
        tau_practice = dgp.effect_size + 0.5 * x[:, 0]

    rows = []
    y1_col, y0_col = [], []
    for j in range(n_practices):
        n_patients = rng.integers(50, 150, size=len(years))
        v = rng.normal(scale=0.5, size=(len(years), len(PANEL_V_COLUMNS)))
        for yi, year in enumerate(years):
            post = int(year >= 3)
            y0 = 10.0 + alpha[j] + 0.3 * year + 0.5 * x[j, 0] + dgp.noise_sd * rng.normal()
            y1 = y0 + post * tau_practice[j]
            y = y1 if z[j] == 1 else y0
            row = {
                "id.practice": j + 1,
                "year": year,
                "Y": y,
                "Z": int(z[j]),
                "post": post,
                "n.patients": int(n_patients[yi]),
            }
            row.update({c: x[j, i] for i, c in enumerate(PANEL_X_COLUMNS)})
            row.update({c: v[yi, i] for i, c in enumerate(PANEL_V_COLUMNS)})
            rows.append(row)
            y1_col.append(y1)
            y0_col.append(y0)
    frame = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    # patient-weighted treated post-period mean of y1 - y0
    mask = (frame["Z"] == 1) & (frame["post"] == 1)
    w = frame.loc[mask, "n.patients"].to_numpy(dtype=float)
    eff = np.asarray(y1_col)[mask.to_numpy()] - np.asarray(y0_col)[mask.to_numpy()]
    satt = float(np.sum(w * eff) / np.sum(w))
    return PanelReplicate(
        replicate_id=f"rep_{index:03d}",
        kind=kind,
        rows=frame,
        _truth=PanelTruth(satt_true=satt),
    )


def generate_synthetic(
    kind: BenchmarkKind | str,
    n_replicates: int,
    n_units: int,
    seed: int,
    dgp: Optional[DGPSpec] = None,
) -> list[Replicate]:
    """Deterministic synthetic benchmark with recorded truth.

    n_units is the unit count for cross-sectional kinds and the practice
    count for panel kinds.
    """
    if isinstance(kind, str):
        kind = benchmark_kind(kind)
    if n_units < 20:
        raise DataError("need n_units >= 20")
    if n_replicates < 1:
        raise DataError("need at least one replicate")
    dgp = dgp or DGPSpec()
    root = np.random.SeedSequence(seed)
    out: list[Replicate] = []
    for index, child in enumerate(root.spawn(n_replicates)):
        rng = np.random.default_rng(child)
        if kind.tag is BenchmarkTag.PANEL_SATT:
            out.append(_generate_panel(kind, index, n_units, rng, dgp))
        else:
            out.append(_generate_cross(kind, index, n_units, rng, dgp))
    return out


# ---------------------------------------------------------------------------
# Access-instrumented replicate store
# ---------------------------------------------------------------------------


@dataclass
class ReplicateStore:
    """Serves replicates by id, logging (phase, id) for every access."""

    replicates: dict[str, Replicate]
    phase: str = "search"
    access_log: list[tuple[str, str]] = field(default_factory=list)

    @classmethod
    def from_list(cls, replicates: Sequence[Replicate]) -> "ReplicateStore":
        return cls(replicates={r.replicate_id: r for r in replicates})

    def ids(self) -> list[str]:
        return sorted(self.replicates)

    def get(self, replicate_id: str) -> Replicate:
        if replicate_id not in self.replicates:
            raise DataError(f"unknown replicate {replicate_id!r}")
        self.access_log.append((self.phase, replicate_id))
        return self.replicates[replicate_id]

    def accessed_ids(self, phase: Optional[str] = None) -> set[str]:
        return {rid for ph, rid in self.access_log if phase is None or ph == phase}
