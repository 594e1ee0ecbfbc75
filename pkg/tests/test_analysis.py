import math

import pytest

from inferevolve.analysis import (
    best_so_far,
    code_length,
    similarity_summary,
    tfidf_cosine,
    tokenize,
    vectorize,
)

SRC_A = "def estimate(df):\n    x1 = df['x1']\n    return x1.mean()\n"
SRC_B = "def estimate(df):\n    x2 = df['x2']\n    return x2.sum()\n"
SRC_C = "class Widget:\n    pass\n"


class TestTokenizer:
    def test_splits_on_non_alphanumerics(self):
        assert tokenize("my_var = x1+x2") == ["my", "var", "x1", "x2"]

    def test_digits_distinguish_tokens(self):
        assert tokenize("x1") != tokenize("x2")

    def test_lowercases(self):
        assert tokenize("Foo BAR") == ["foo", "bar"]


class TestTfidfCosine:
    def test_identical_sources(self):
        assert tfidf_cosine(SRC_A, SRC_A, [SRC_A, SRC_B]) == pytest.approx(1.0)

    def test_disjoint_sources(self):
        a, b = "alpha beta", "gamma delta"
        assert tfidf_cosine(a, b, [a, b]) == 0.0

    def test_symmetric(self):
        corpus = [SRC_A, SRC_B, SRC_C]
        assert tfidf_cosine(SRC_A, SRC_B, corpus) == pytest.approx(
            tfidf_cosine(SRC_B, SRC_A, corpus)
        )

    def test_in_unit_interval(self):
        corpus = [SRC_A, SRC_B, SRC_C]
        for a in corpus:
            for b in corpus:
                assert 0.0 <= tfidf_cosine(a, b, corpus) <= 1.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            tfidf_cosine(SRC_A, SRC_B, [])

    def test_corpus_must_contain_sources(self):
        with pytest.raises(ValueError):
            tfidf_cosine(SRC_A, SRC_B, [SRC_A])

    def test_matches_sklearn_style_oracle(self):
        # independent recomputation of smooth-idf tf-idf cosine
        import numpy as np

        corpus = [SRC_A, SRC_B, SRC_C]
        vocab = sorted({t for s in corpus for t in tokenize(s)})
        n = len(corpus)
        df = {t: sum(t in set(tokenize(s)) for s in corpus) for t in vocab}
        idf = {t: math.log((1 + n) / (1 + df[t])) + 1 for t in vocab}
        mats = []
        for s in corpus:
            counts = {t: tokenize(s).count(t) for t in vocab}
            v = np.array([counts[t] * idf[t] for t in vocab], dtype=float)
            mats.append(v / np.linalg.norm(v))
        expected = float(mats[0] @ mats[1])
        assert tfidf_cosine(SRC_A, SRC_B, corpus) == pytest.approx(expected, abs=1e-12)


class TestSimilaritySummary:
    def test_duplicate_files_within_mean_one(self):
        groups = {"g1": [SRC_A, SRC_A], "g2": [SRC_B, SRC_B]}
        out = similarity_summary(groups)
        assert out["within"]["g1"]["mean"] == pytest.approx(1.0)
        assert out["within"]["g2"]["mean"] == pytest.approx(1.0)

    def test_pair_counts_for_24_element_groups(self):
        groups = {
            "a": [f"token{i} shared" for i in range(24)],
            "b": [f"other{i} shared" for i in range(24)],
        }
        out = similarity_summary(groups)
        assert out["within"]["a"]["n_pairs"] == 276
        assert out["within"]["b"]["n_pairs"] == 276
        assert out["between"][("a", "b")]["n_pairs"] == 576

    def test_pair_count_formula(self):
        groups = {"a": ["x y"] * 5, "b": ["z w"] * 7}
        out = similarity_summary(groups)
        assert out["within"]["a"]["n_pairs"] == 5 * 4 // 2
        assert out["within"]["b"]["n_pairs"] == 7 * 6 // 2
        assert out["between"][("a", "b")]["n_pairs"] == 35

    def test_undersized_group_rejected(self):
        with pytest.raises(ValueError):
            similarity_summary({"a": [SRC_A]})


class TestCodeLength:
    def test_hand_count(self):
        assert code_length("a\n\nb") == {"chars": 4, "nonempty_lines": 2}

    def test_empty(self):
        assert code_length("") == {"chars": 0, "nonempty_lines": 0}

    def test_whitespace_only_line_excluded(self):
        assert code_length("a\n   \nb")["nonempty_lines"] == 2


class TestBestSoFar:
    def test_running_max(self):
        records = [
            {"accepted": True, "stage2_score": 0.3},
            {"accepted": True, "stage2_score": 0.2},
            {"accepted": True, "stage2_score": 0.5},
        ]
        assert best_so_far(records) == [0.3, 0.3, 0.5]

    def test_all_rejected_flat_at_seed(self):
        records = [{"accepted": False}, {"accepted": False}]
        assert best_so_far(records, initial=0.42) == [0.42, 0.42]

    def test_monotone(self):
        import numpy as np

        rng = np.random.default_rng(0)
        records = [
            {"accepted": bool(rng.random() < 0.6), "stage2_score": float(rng.random())}
            for _ in range(50)
        ]
        series = best_so_far(records, initial=0.0)
        assert all(b >= a for a, b in zip(series, series[1:]))

    def test_idempotent(self):
        records = [
            {"accepted": True, "stage2_score": s} for s in [0.1, 0.4, 0.2, 0.9]
        ]
        series = best_so_far(records)
        again = best_so_far(
            [{"accepted": True, "stage2_score": s} for s in series]
        )
        assert again == series

    def test_falls_back_to_stored_best(self):
        records = [
            {"accepted": False, "best_so_far": 0.5},
            {"accepted": True, "stage2_score": 0.7},
        ]
        assert best_so_far(records) == [0.5, 0.7]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            best_so_far([])


def test_vectorize_zero_vector_for_empty_source():
    vecs = vectorize(["", "a b"])
    assert vecs[0].weights == {}
    assert vecs[0].cosine(vecs[1]) == 0.0
