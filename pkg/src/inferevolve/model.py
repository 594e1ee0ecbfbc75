"""Shared domain types and run-configuration handling.

The run configuration is a flat ``key = value`` text format with dotted
section prefixes (``archive.islands = 4``), chosen so that run manifests
diff cleanly. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, asdict
from typing import Optional


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration input."""


def labeled_seed(root_seed: int, label: str) -> list[int]:
    """Independent, reproducible RNG stream seed for a named purpose.

    Feed the result to numpy's default_rng; streams for different
    labels are decorrelated while staying a pure function of
    (root_seed, label).
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [root_seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "big")]


class BenchmarkTag(str, enum.Enum):
    PANEL_SATT = "panel_satt"
    CROSS_SECTIONAL_ITE = "cross_sectional_ite"


@dataclass(frozen=True)
class BenchmarkKind:
    """One benchmark family: estimand shape plus normalization rule."""

    tag: BenchmarkTag
    name: str
    normalize_by_ite_sd: bool = False

    @property
    def signature(self) -> str:
        """Candidate function signature: 'interval' or 'ite'."""
        return "interval" if self.tag is BenchmarkTag.PANEL_SATT else "ite"


BENCHMARKS = {
    "acic2022": BenchmarkKind(BenchmarkTag.PANEL_SATT, "acic2022"),
    "acic2016": BenchmarkKind(BenchmarkTag.CROSS_SECTIONAL_ITE, "acic2016"),
    "ihdp": BenchmarkKind(BenchmarkTag.CROSS_SECTIONAL_ITE, "ihdp"),
    "lalonde": BenchmarkKind(
        BenchmarkTag.CROSS_SECTIONAL_ITE, "lalonde", normalize_by_ite_sd=True
    ),
    "synthetic-panel": BenchmarkKind(BenchmarkTag.PANEL_SATT, "synthetic-panel"),
    "synthetic-ite": BenchmarkKind(BenchmarkTag.CROSS_SECTIONAL_ITE, "synthetic-ite"),
}


def benchmark_kind(name: str) -> BenchmarkKind:
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise ConfigError(f"unknown benchmark {name!r}") from None


class Status(str, enum.Enum):
    OK = "ok"
    ERROR = "error"
    TIMEOUT = "timeout"
    NONFINITE = "nonfinite"
    PROTOCOL = "protocol"


class Guidance(str, enum.Enum):
    TRUE_SCORE = "true_score"
    PROXY = "proxy"


class Stage(str, enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    HOLDOUT = "holdout"


class Origin(str, enum.Enum):
    SEED = "seed"
    LLM = "llm"
    MOCK = "mock"
    NATIVE = "native"


# ---------------------------------------------------------------------------
# Metric bundles (one variant per benchmark kind / guidance mode)
# ---------------------------------------------------------------------------


@dataclass
class ITEMetrics:
    mean_sqrt_pehe: float
    mean_abs_ate_err: float

    kind = "ite"


@dataclass
class PanelMetrics:
    rmse: float
    coverage: float
    mean_width: float

    kind = "panel"


@dataclass
class ProxyITEMetrics:
    mean_proxy_pehe: float
    mean_abs_ate_gap: float
    mean_rloss: float

    kind = "proxy_ite"


@dataclass
class ProxyPanelMetrics:
    mean_abs_target_gap: float
    hit_rate: float
    mean_width: float
    g_width: Optional[float] = None

    kind = "proxy_panel"


MetricBundle = ITEMetrics | PanelMetrics | ProxyITEMetrics | ProxyPanelMetrics

_BUNDLE_KINDS = {
    "ite": ITEMetrics,
    "panel": PanelMetrics,
    "proxy_ite": ProxyITEMetrics,
    "proxy_panel": ProxyPanelMetrics,
}


def bundle_to_dict(bundle: Optional[MetricBundle]) -> Optional[dict]:
    if bundle is None:
        return None
    d = asdict(bundle)
    d["kind"] = bundle.kind
    return d


def bundle_from_dict(d: Optional[dict]) -> Optional[MetricBundle]:
    if d is None:
        return None
    d = dict(d)
    cls = _BUNDLE_KINDS[d.pop("kind")]
    return cls(**d)


# ---------------------------------------------------------------------------
# Evaluation outcomes and programs
# ---------------------------------------------------------------------------


@dataclass
class ReplicateResult:
    """Candidate outputs (or failure class) on one replicate."""

    replicate_id: str
    status: Status
    outputs: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "replicate_id": self.replicate_id,
            "status": self.status.value,
            "outputs": self.outputs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicateResult":
        return cls(d["replicate_id"], Status(d["status"]), d.get("outputs"))


@dataclass
class EvaluationOutcome:
    """Per-replicate results plus the aggregated combined score in [0, 1].

    combined_score is exactly 0.0 whenever any replicate failed or a
    required aggregate came out non-finite; healthy candidates score in
    (0, 1].
    """

    per_replicate: list[ReplicateResult]
    aggregate: Optional[MetricBundle]
    combined_score: float
    mode: Guidance
    stage: Stage

    def __post_init__(self) -> None:
        if not (0.0 <= self.combined_score <= 1.0):
            raise ValueError(f"combined_score {self.combined_score} outside [0, 1]")

    @property
    def all_ok(self) -> bool:
        return all(r.status is Status.OK for r in self.per_replicate)

    def to_dict(self) -> dict:
        return {
            "per_replicate": [r.to_dict() for r in self.per_replicate],
            "aggregate": bundle_to_dict(self.aggregate),
            "combined_score": self.combined_score,
            "mode": self.mode.value,
            "stage": self.stage.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationOutcome":
        return cls(
            per_replicate=[ReplicateResult.from_dict(r) for r in d["per_replicate"]],
            aggregate=bundle_from_dict(d.get("aggregate")),
            combined_score=d["combined_score"],
            mode=Guidance(d["mode"]),
            stage=Stage(d["stage"]),
        )


@dataclass
class Program:
    """One candidate estimator: opaque source text plus identity and lineage."""

    id: str
    source: str
    origin: Origin
    iteration: int
    parent_id: Optional[str] = None
    scores: Optional[EvaluationOutcome] = None

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("iteration must be nonnegative")
        if self.origin is Origin.SEED and (self.iteration != 0 or self.parent_id):
            raise ValueError("seed program must have iteration 0 and no parent")

    @property
    def combined_score(self) -> float:
        return self.scores.combined_score if self.scores else 0.0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source,
            "origin": self.origin.value,
            "iteration": self.iteration,
            "parent_id": self.parent_id,
            "scores": self.scores.to_dict() if self.scores else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Program":
        scores = d.get("scores")
        return cls(
            id=d["id"],
            source=d["source"],
            origin=Origin(d["origin"]),
            iteration=d["iteration"],
            parent_id=d.get("parent_id"),
            scores=EvaluationOutcome.from_dict(scores) if scores else None,
        )


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class Timeouts:
    stage1_s: float = 180.0
    stage2_s: float = 1800.0
    api_s: float = 600.0


@dataclass
class ArchiveParams:
    population: int = 60
    islands: int = 4
    per_island: int = 25
    elite_ratio: float = 0.3
    exploit_ratio: float = 0.7
    top_k: int = 3
    diverse_k: int = 2
    checkpoint_interval: int = 5


@dataclass
class LLMParams:
    base_url: str = "https://openrouter.ai/api/v1"
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 8192


@dataclass
class RunConfig:
    """Full configuration for one search run. Immutable by convention."""

    benchmark: BenchmarkKind = BENCHMARKS["ihdp"]
    lam: float = 1.0
    split: tuple[float, float] = (0.2, 0.8)
    replicate_seed: int = 20250215
    guidance: Guidance = Guidance.TRUE_SCORE
    max_iterations: int = 100
    ensemble_weights: dict[str, float] = field(
        default_factory=lambda: {"primary": 0.8, "secondary": 0.2}
    )
    timeouts: Timeouts = field(default_factory=Timeouts)
    stage1_threshold: float = 0.001
    archive: ArchiveParams = field(default_factory=ArchiveParams)
    llm: LLMParams = field(default_factory=LLMParams)


_WEIGHT_TOL = 1e-9


def parse_split(value: str) -> tuple[float, float]:
    parts = value.split(":")
    if len(parts) != 2:
        raise ConfigError(f"split must look like '20:80', got {value!r}")
    try:
        a, b = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"non-numeric split {value!r}") from None
    if a <= 0 or b <= 0:
        raise ConfigError("split fractions must be positive")
    if abs(a + b - 1.0) <= _WEIGHT_TOL:
        return (a, b)
    return (a / (a + b), b / (a + b))


def _format_split(split: tuple[float, float]) -> str:
    return f"{split[0]!r}:{split[1]!r}"


def _parse_lines(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _to_float(key: str, value: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if not math.isfinite(x):
        raise ConfigError(f"{key}: must be finite")
    return x


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


_SCALAR_KEYS = {
    "benchmark",
    "lambda",
    "split",
    "replicate_seed",
    "guidance",
    "search.max_iterations",
    "search.stage1_threshold",
    "archive.population",
    "archive.islands",
    "archive.per_island",
    "archive.elite_ratio",
    "archive.exploit_ratio",
    "archive.top_k",
    "archive.diverse_k",
    "archive.checkpoint_interval",
    "timeouts.stage1_s",
    "timeouts.stage2_s",
    "timeouts.api_s",
    "llm.base_url",
    "llm.temperature",
    "llm.top_p",
    "llm.max_tokens",
}


def parse_config(text: str) -> RunConfig:
    """Parse config text, filling defaults for omitted keys.

    Raises ConfigError on malformed text, unknown keys, or any invariant
    violation reported by validate_config.
    """
    entries = _parse_lines(text)

    weights: dict[str, float] = {}
    for key in list(entries):
        if key.startswith("ensemble."):
            name = key[len("ensemble.") :]
            if not name:
                raise ConfigError("ensemble weight key missing a model name")
            weights[name] = _to_float(key, entries.pop(key))

    unknown = set(entries) - _SCALAR_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    cfg = RunConfig()
    if "benchmark" in entries:
        cfg.benchmark = benchmark_kind(entries["benchmark"])
    if "lambda" in entries:
        cfg.lam = _to_float("lambda", entries["lambda"])
    if "split" in entries:
        cfg.split = parse_split(entries["split"])
    if "replicate_seed" in entries:
        cfg.replicate_seed = _to_int("replicate_seed", entries["replicate_seed"])
    if "guidance" in entries:
        try:
            cfg.guidance = Guidance(entries["guidance"])
        except ValueError:
            raise ConfigError(f"unknown guidance {entries['guidance']!r}") from None
    if "search.max_iterations" in entries:
        cfg.max_iterations = _to_int(
            "search.max_iterations", entries["search.max_iterations"]
        )
    if "search.stage1_threshold" in entries:
        cfg.stage1_threshold = _to_float(
            "search.stage1_threshold", entries["search.stage1_threshold"]
        )
    a = cfg.archive
    for attr, key in [
        ("population", "archive.population"),
        ("islands", "archive.islands"),
        ("per_island", "archive.per_island"),
        ("top_k", "archive.top_k"),
        ("diverse_k", "archive.diverse_k"),
        ("checkpoint_interval", "archive.checkpoint_interval"),
    ]:
        if key in entries:
            setattr(a, attr, _to_int(key, entries[key]))
    for attr, key in [
        ("elite_ratio", "archive.elite_ratio"),
        ("exploit_ratio", "archive.exploit_ratio"),
    ]:
        if key in entries:
            setattr(a, attr, _to_float(key, entries[key]))
    t = cfg.timeouts
    for attr, key in [
        ("stage1_s", "timeouts.stage1_s"),
        ("stage2_s", "timeouts.stage2_s"),
        ("api_s", "timeouts.api_s"),
    ]:
        if key in entries:
            setattr(t, attr, _to_float(key, entries[key]))
    llm = cfg.llm
    if "llm.base_url" in entries:
        llm.base_url = entries["llm.base_url"]
    if "llm.temperature" in entries:
        llm.temperature = _to_float("llm.temperature", entries["llm.temperature"])
    if "llm.top_p" in entries:
        llm.top_p = _to_float("llm.top_p", entries["llm.top_p"])
    if "llm.max_tokens" in entries:
        llm.max_tokens = _to_int("llm.max_tokens", entries["llm.max_tokens"])
    if weights:
        cfg.ensemble_weights = weights

    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def validate_config(cfg: RunConfig) -> list[str]:
    """Return every invariant violation; an empty list means the config is ok."""
    problems: list[str] = []
    if cfg.lam <= 0:
        problems.append("lambda must be positive")
    if abs(sum(cfg.split) - 1.0) > _WEIGHT_TOL or min(cfg.split) <= 0:
        problems.append("split fractions must be positive and sum to 1")
    total = sum(cfg.ensemble_weights.values())
    if not cfg.ensemble_weights or abs(total - 1.0) > _WEIGHT_TOL:
        problems.append("weights must sum to 1")
    if any(w < 0 for w in cfg.ensemble_weights.values()):
        problems.append("ensemble weights must be nonnegative")
    if cfg.max_iterations <= 0:
        problems.append("search.max_iterations must be positive")
    if cfg.stage1_threshold < 0:
        problems.append("search.stage1_threshold must be nonnegative")
    a = cfg.archive
    for name in ("population", "islands", "per_island", "top_k", "diverse_k", "checkpoint_interval"):
        if getattr(a, name) <= 0:
            problems.append(f"archive.{name} must be positive")
    if not (0.0 < a.elite_ratio <= 1.0):
        problems.append("archive.elite_ratio must be in (0, 1]")
    if not (0.0 <= a.exploit_ratio <= 1.0):
        problems.append("archive.exploit_ratio must be in [0, 1]")
    t = cfg.timeouts
    for name in ("stage1_s", "stage2_s", "api_s"):
        if getattr(t, name) <= 0:
            problems.append(f"timeouts.{name} must be positive")
    if cfg.llm.max_tokens <= 0:
        problems.append("llm.max_tokens must be positive")
    if not (0.0 <= cfg.llm.top_p <= 1.0):
        problems.append("llm.top_p must be in [0, 1]")
    if cfg.llm.temperature < 0:
        problems.append("llm.temperature must be nonnegative")
    return problems


def serialize_config(cfg: RunConfig) -> str:
    """Render a config back to the flat text format (parse round-trips)."""
    lines = [
        f"benchmark = {cfg.benchmark.name}",
        f"lambda = {cfg.lam!r}",
        f"split = {_format_split(cfg.split)}",
        f"replicate_seed = {cfg.replicate_seed}",
        f"guidance = {cfg.guidance.value}",
        f"search.max_iterations = {cfg.max_iterations}",
        f"search.stage1_threshold = {cfg.stage1_threshold!r}",
    ]
    a = cfg.archive
    lines += [
        f"archive.population = {a.population}",
        f"archive.islands = {a.islands}",
        f"archive.per_island = {a.per_island}",
        f"archive.elite_ratio = {a.elite_ratio!r}",
        f"archive.exploit_ratio = {a.exploit_ratio!r}",
        f"archive.top_k = {a.top_k}",
        f"archive.diverse_k = {a.diverse_k}",
        f"archive.checkpoint_interval = {a.checkpoint_interval}",
    ]
    t = cfg.timeouts
    lines += [
        f"timeouts.stage1_s = {t.stage1_s!r}",
        f"timeouts.stage2_s = {t.stage2_s!r}",
        f"timeouts.api_s = {t.api_s!r}",
    ]
    llm = cfg.llm
    lines += [
        f"llm.base_url = {llm.base_url}",
        f"llm.temperature = {llm.temperature!r}",
        f"llm.top_p = {llm.top_p!r}",
        f"llm.max_tokens = {llm.max_tokens}",
    ]
    for name in sorted(cfg.ensemble_weights):
        lines.append(f"ensemble.{name} = {cfg.ensemble_weights[name]!r}")
    return "\n".join(lines) + "\n"
