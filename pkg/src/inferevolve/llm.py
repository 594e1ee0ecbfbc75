"""Prompt composition, ensemble sampling, chat transport, code extraction.

The live client speaks the OpenAI-compatible chat-completions shape;
the mock client replays canned responses from a fixture directory so
runs and tests stay deterministic and offline.
"""

from __future__ import annotations

import difflib
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import requests

from .model import BenchmarkKind, BenchmarkTag, Program, RunConfig

API_KEY_ENV = "INFEREVOLVE_API_KEY"
MAX_TRANSPORT_ATTEMPTS = 3
PREVIEW_ROWS = 6

EVOLVE_START = "# EVOLVE-BLOCK-START"
EVOLVE_END = "# EVOLVE-BLOCK-END"


class TransportError(RuntimeError):
    pass


class CodeExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    weight: float
    endpoint: str
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 8192
    api_timeout_s: float = 600.0


def build_ensemble(cfg: RunConfig) -> list[ModelSpec]:
    llm = cfg.llm
    return [
        ModelSpec(
            name=name,
            weight=weight,
            endpoint=llm.base_url,
            temperature=llm.temperature,
            top_p=llm.top_p,
            max_tokens=llm.max_tokens,
            api_timeout_s=cfg.timeouts.api_s,
        )
        for name, weight in sorted(cfg.ensemble_weights.items())
    ]


def sample_model(ensemble: Sequence[ModelSpec], rng: np.random.Generator) -> ModelSpec:
    """Weighted draw from the ensemble; zero-weight models are never chosen."""
    if not ensemble:
        raise ValueError("empty ensemble")
    weights = np.array([m.weight for m in ensemble], dtype=float)
    probs = weights / weights.sum()
    return ensemble[int(rng.choice(len(ensemble), p=probs))]


# ---------------------------------------------------------------------------
# Prompt composition
# ---------------------------------------------------------------------------

_PANEL_TASK = """\
Background:
- Multisite panel data in long format (practice-year level).
- Treatment is assigned at the practice level; 'post' marks the period after rollout.

Data columns:
    - 'id.practice' (int): site identifier
    - 'year' (int): panel time index
    - 'Y' (float): average monthly spending per patient
    - 'Z' (0/1): treatment indicator
    - 'post' (0/1): post-treatment period indicator
    - 'n.patients' (int): patient count (weights)
    - Practice-level covariates: X1..X9
    - Aggregated patient covariates: V1_avg..V5_C_avg

Task: Estimate the overall SATT for treated practices in the post-treatment
period, weighted by n.patients.

Search objective:
- Score = 1/(1 + log(1+RMSE) + {lam} * log(1+|coverage-0.9|/0.9)).
- Minimise RMSE while keeping empirical 90% interval coverage near 0.9.

Function signature:
    def estimate(df) -> (tau_hat, lb, ub, method)
"""

_ITE_TASK = """\
Dataset schema: `treatment` (binary), `y_factual` (outcome), covariates:
{covariates}.
Ground-truth columns are removed before execution.

Task: Implement a deterministic estimator returning (ite_hat, ate_hat,
method_name), where ite_hat has one entry per row.

Search objective:
- Score = 1/(1 + log(1+mean_sqrt_PEHE) + {lam} * log(1+mean_ATE_err)).
- Explore diverse estimator families (T-/X-/DR-learners, doubly robust,
  weighting) and prioritise stability.
"""

_ITE_COVARIATE_HINTS = {
    "ihdp": "`x1`..`x25` (continuous and binary)",
    "acic2016": "`x_1`..`x_58` (mix of continuous and categorical)",
    "lalonde": "age, education, black, hispanic, married, nodegree, re74, re75 "
    "(observational study with strong selection bias; prior earnings re74/re75 "
    "are the strongest predictors; consider overlap enforcement; do not assume "
    "the effect is positive)",
}

_CONSTRAINTS = """\
Constraints: pure, deterministic function. Use only pandas, numpy,
scikit-learn, statsmodels. Be robust to NaNs and edge cases. Modify only the
EVOLVE-BLOCK region and return the complete program in a single fenced code
block.
"""

SYSTEM_PROMPT = (
    "You are an expert causal inference statistician and Python programmer. "
    "You improve candidate estimator programs given their measured scores."
)


@dataclass
class PromptBundle:
    system: str
    user: str
    provenance: dict


def _program_block(label: str, program: Program) -> str:
    score = program.combined_score
    return f"{label} (combined score {score:.6f}):\n```python\n{program.source}\n```\n"


def _recent_diff(parent: Program, best: Optional[Program]) -> str:
    if best is None or best.id == parent.id:
        return ""
    diff = difflib.unified_diff(
        parent.source.splitlines(),
        best.source.splitlines(),
        fromfile=f"parent/{parent.id}",
        tofile=f"best/{best.id}",
        lineterm="",
        n=2,
    )
    text = "\n".join(diff)
    if not text:
        return ""
    return f"Recent differences between the parent and the current best:\n{text}\n"


def compose_prompt(
    benchmark: BenchmarkKind,
    lam: float,
    parent: Program,
    top: Sequence[Program],
    diverse: Sequence[Program],
    data_preview: str,
    best: Optional[Program] = None,
) -> PromptBundle:
    """Instantiate the benchmark's mutation prompt. Deterministic."""
    if not parent.source.strip():
        raise ValueError("parent program is empty")
    if benchmark.tag is BenchmarkTag.PANEL_SATT:
        task = _PANEL_TASK.format(lam=lam)
    else:
        hint = _ITE_COVARIATE_HINTS.get(
            benchmark.name, "`x1`..`xN` (continuous features)"
        )
        task = _ITE_TASK.format(lam=lam, covariates=hint)

    parts = [task, _CONSTRAINTS]
    parts.append(_program_block("Current parent program", parent))
    for i, prog in enumerate(top, start=1):
        parts.append(_program_block(f"Top archived program {i}", prog))
    for i, prog in enumerate(diverse, start=1):
        parts.append(_program_block(f"Diverse archived program {i}", prog))
    diff = _recent_diff(parent, best)
    if diff:
        parts.append(diff)
    parts.append(f"Data preview (first {PREVIEW_ROWS} rows of one training replicate):\n{data_preview}\n")
    parts.append(
        "Rewrite the parent program to improve the search objective. "
        "Return one fenced code block containing the full program."
    )
    user = "\n".join(parts)
    return PromptBundle(
        system=SYSTEM_PROMPT,
        user=user,
        provenance={
            "parent_id": parent.id,
            "top_ids": [p.id for p in top],
            "diverse_ids": [p.id for p in diverse],
            "benchmark": benchmark.name,
        },
    )


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


class HttpChatClient:
    """OpenAI-compatible chat-completions client with retry and backoff."""

    def __init__(
        self,
        api_key: str,
        post: Callable = requests.post,
        sleep: Callable[[float], None] = time.sleep,
        backoff_s: float = 1.0,
    ):
        if not api_key:
            raise TransportError(f"no API key; set {API_KEY_ENV}")
        self._api_key = api_key
        self._post = post
        self._sleep = sleep
        self._backoff_s = backoff_s
        self.calls = 0

    def complete(self, model: ModelSpec, system: str, user: str) -> str:
        url = model.endpoint.rstrip("/") + "/chat/completions"
        body = {
            "model": model.name,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": model.temperature,
            "top_p": model.top_p,
            "max_tokens": model.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self._api_key}"}
        last_error: Optional[str] = None
        for attempt in range(MAX_TRANSPORT_ATTEMPTS):
            if attempt:
                self._sleep(self._backoff_s * 2 ** (attempt - 1))
            self.calls += 1
            try:
                resp = self._post(
                    url, json=body, headers=headers, timeout=model.api_timeout_s
                )
            except requests.Timeout as exc:
                raise TransportError(f"timeout after {model.api_timeout_s}s") from exc
            except requests.RequestException as exc:
                last_error = str(exc)
                continue
            if resp.status_code in (401, 403):
                raise TransportError(f"authentication failure ({resp.status_code})")
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        raise TransportError(f"exhausted retries: {last_error}")


class MockChatClient:
    """Replays fixtures/<benchmark>/NNN.txt in order, wrapping around."""

    def __init__(self, fixtures_root, benchmark: str):
        self._dir = Path(fixtures_root) / benchmark
        if not self._dir.is_dir():
            raise TransportError(f"no mock fixtures at {self._dir}")
        self._files = sorted(
            self._dir.glob("*.txt"), key=lambda p: int(p.stem) if p.stem.isdigit() else 0
        )
        if not self._files:
            raise TransportError(f"no fixture files in {self._dir}")
        self.calls = 0

    def complete(self, model: ModelSpec, system: str, user: str) -> str:
        text = self._files[self.calls % len(self._files)].read_text(encoding="utf-8")
        self.calls += 1
        return text


def generate(model: ModelSpec, prompt: PromptBundle, client) -> str:
    """One candidate-generation call through the given client."""
    return client.complete(model, prompt.system, prompt.user)


# ---------------------------------------------------------------------------
# Code extraction
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_+-]*\n(.*?)```", re.DOTALL)


def _splice_evolve_block(parent_source: str, block: str) -> str:
    def region(text: str) -> Optional[tuple[int, int]]:
        start = text.find(EVOLVE_START)
        end = text.find(EVOLVE_END)
        if start == -1 or end == -1 or end < start:
            return None
        return start, end + len(EVOLVE_END)

    parent_region = region(parent_source)
    block_region = region(block)
    if parent_region is None or block_region is None:
        return block
    ps, pe = parent_region
    bs, be = block_region
    return parent_source[:ps] + block[bs:be] + parent_source[pe:]


def extract_code(response: str, parent_source: Optional[str] = None) -> str:
    """Longest fenced code block; evolve-block responses are spliced into
    the parent skeleton when both sides carry the markers."""
    blocks = _FENCE_RE.findall(response)
    if not blocks:
        raise CodeExtractionError("no code block in response")
    block = max(blocks, key=len)
    if block.endswith("\n"):
        block = block[:-1]
    if parent_source is not None and EVOLVE_START in block:
        return _splice_evolve_block(parent_source, block)
    return block
