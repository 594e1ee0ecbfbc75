"""Post-hoc program analysis: code similarity, length stats, trajectories."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(source: str) -> list[str]:
    """Lowercased alphanumeric runs; digits count, so x1 and x2 differ."""
    return _TOKEN_RE.findall(source.lower())


@dataclass
class CodeVector:
    """TF-IDF weights of one source file relative to a corpus."""

    weights: dict[str, float]

    def cosine(self, other: "CodeVector") -> float:
        if not self.weights or not other.weights:
            return 0.0
        dot = sum(w * other.weights.get(tok, 0.0) for tok, w in self.weights.items())
        return max(0.0, min(1.0, dot))


def _idf(corpus_tokens: Sequence[set[str]]) -> dict[str, float]:
    n = len(corpus_tokens)
    df = Counter()
    for toks in corpus_tokens:
        df.update(toks)
    return {tok: math.log((1 + n) / (1 + d)) + 1.0 for tok, d in df.items()}


def vectorize(sources: Sequence[str]) -> list[CodeVector]:
    """L2-normalized TF-IDF vectors over the given corpus."""
    token_lists = [tokenize(s) for s in sources]
    idf = _idf([set(t) for t in token_lists])
    out = []
    for toks in token_lists:
        tf = Counter(toks)
        weights = {tok: count * idf[tok] for tok, count in tf.items()}
        norm = math.sqrt(sum(w * w for w in weights.values()))
        if norm > 0:
            weights = {tok: w / norm for tok, w in weights.items()}
        out.append(CodeVector(weights))
    return out


def tfidf_cosine(a: str, b: str, corpus: Sequence[str]) -> float:
    """Cosine similarity of two sources under corpus-level TF-IDF weighting."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    corpus = list(corpus)
    if a not in corpus or b not in corpus:
        raise ValueError("corpus must contain both sources")
    vecs = dict(zip(corpus, vectorize(corpus)))
    return vecs[a].cosine(vecs[b])


def similarity_summary(groups: dict[str, Sequence[str]]) -> dict:
    """All pairwise within-group and cross-group TF-IDF cosines.

    Returns per-group {mean, sd, n_pairs} and per-group-pair cross
    statistics computed over every (a, b) with a in one group and b in
    the other.
    """
    for name, sources in groups.items():
        if len(sources) < 2:
            raise ValueError(f"group {name!r} needs at least 2 sources")
    all_sources = [s for sources in groups.values() for s in sources]
    vectors = vectorize(all_sources)
    by_group: dict[str, list[CodeVector]] = {}
    pos = 0
    for name, sources in groups.items():
        by_group[name] = vectors[pos : pos + len(sources)]
        pos += len(sources)

    def stats(values: list[float]) -> dict:
        n = len(values)
        mean = sum(values) / n
        sd = math.sqrt(sum((v - mean) ** 2 for v in values) / n) if n > 1 else 0.0
        return {"mean": mean, "sd": sd, "n_pairs": n}

    within = {}
    for name, vecs in by_group.items():
        vals = [
            vecs[i].cosine(vecs[j])
            for i in range(len(vecs))
            for j in range(i + 1, len(vecs))
        ]
        within[name] = stats(vals)

    between = {}
    names = list(by_group)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = names[i], names[j]
            vals = [va.cosine(vb) for va in by_group[a] for vb in by_group[b]]
            between[(a, b)] = stats(vals)
    return {"within": within, "between": between}


def code_length(source: str) -> dict[str, int]:
    """Character count and count of lines containing non-whitespace."""
    lines = source.split("\n")
    return {
        "chars": len(source),
        "nonempty_lines": sum(1 for line in lines if line.strip()),
    }


def best_so_far(records: Sequence[dict], initial: Optional[float] = None) -> list[float]:
    """Running max of accepted stage-2 scores, carried forward.

    ``initial`` anchors the series (the seed program's score); without
    it the series starts at the first record's stored best.
    """
    if not records:
        raise ValueError("empty trace")
    current = -math.inf if initial is None else initial
    series = []
    for rec in records:
        if rec.get("accepted") and rec.get("stage2_score") is not None:
            current = max(current, float(rec["stage2_score"]))
        if not math.isfinite(current) and "best_so_far" in rec:
            current = float(rec["best_so_far"])
        series.append(current)
    return series
