import numpy as np
import pytest
import requests

from inferevolve.bench_data import TRUTH_COLUMNS
from inferevolve.llm import (
    CodeExtractionError,
    HttpChatClient,
    MockChatClient,
    ModelSpec,
    TransportError,
    build_ensemble,
    compose_prompt,
    extract_code,
    generate,
    sample_model,
)
from inferevolve.model import Origin, Program, RunConfig, benchmark_kind

MODEL = ModelSpec(name="m", weight=1.0, endpoint="https://api.test/v1")


def _prog(pid, score=0.5, source="def estimate(df):\n    return 0\n"):
    from inferevolve.model import EvaluationOutcome, Guidance, Stage

    return Program(
        id=pid,
        source=source,
        origin=Origin.MOCK,
        iteration=1,
        parent_id="seed",
        scores=EvaluationOutcome([], None, score, Guidance.TRUE_SCORE, Stage.STAGE2),
    )


class TestComposePrompt:
    def test_panel_prompt_names_interval_signature(self):
        parent = _prog("p")
        bundle = compose_prompt(
            benchmark_kind("acic2022"), 1.0, parent, [], [], "a,b\n1,2"
        )
        assert "(tau_hat, lb, ub, method)" in bundle.user

    def test_block_count_matches_inspirations(self):
        parent = _prog("p")
        top = [_prog(f"t{i}") for i in range(3)]
        diverse = [_prog(f"d{i}") for i in range(2)]
        bundle = compose_prompt(
            benchmark_kind("ihdp"), 0.2, parent, top, diverse, "preview"
        )
        assert bundle.user.count("```python") == 6

    def test_deterministic(self):
        parent = _prog("p")
        a = compose_prompt(benchmark_kind("lalonde"), 5.0, parent, [], [], "x")
        b = compose_prompt(benchmark_kind("lalonde"), 5.0, parent, [], [], "x")
        assert a.user == b.user and a.system == b.system

    def test_lambda_embedded_in_objective(self):
        bundle = compose_prompt(benchmark_kind("ihdp"), 5.0, _prog("p"), [], [], "x")
        assert "5.0" in bundle.user

    def test_diff_included_when_best_differs(self):
        parent = _prog("p", source="def estimate(df):\n    return 1\n")
        best = _prog("b", source="def estimate(df):\n    return 2\n")
        bundle = compose_prompt(
            benchmark_kind("ihdp"), 1.0, parent, [], [], "x", best=best
        )
        assert "Recent differences" in bundle.user

    def test_never_embeds_truth_columns(self):
        parent = _prog("p")
        bundle = compose_prompt(
            benchmark_kind("synthetic-ite"), 1.0, parent, [_prog("t")], [], "x1,x2\n1,2"
        )
        text = (bundle.system + bundle.user).lower()
        for col in TRUTH_COLUMNS:
            assert col not in text

    def test_provenance(self):
        bundle = compose_prompt(
            benchmark_kind("ihdp"), 1.0, _prog("p"), [_prog("t0")], [_prog("d0")], "x"
        )
        assert bundle.provenance == {
            "parent_id": "p",
            "top_ids": ["t0"],
            "diverse_ids": ["d0"],
            "benchmark": "ihdp",
        }


class TestSampleModel:
    def test_single_model(self):
        rng = np.random.default_rng(0)
        assert sample_model([MODEL], rng) is MODEL

    def test_weighted_frequency(self):
        a = ModelSpec("a", 0.8, "e")
        b = ModelSpec("b", 0.2, "e")
        rng = np.random.default_rng(1)
        hits = sum(sample_model([a, b], rng).name == "a" for _ in range(10_000))
        assert abs(hits / 10_000 - 0.8) <= 0.02

    def test_zero_weight_never_drawn(self):
        a = ModelSpec("a", 1.0, "e")
        z = ModelSpec("z", 0.0, "e")
        rng = np.random.default_rng(2)
        assert all(sample_model([a, z], rng).name == "a" for _ in range(500))

    def test_build_ensemble_from_config(self):
        cfg = RunConfig()
        ensemble = build_ensemble(cfg)
        assert {m.name: m.weight for m in ensemble} == {"primary": 0.8, "secondary": 0.2}
        assert all(m.temperature == 0.7 and m.max_tokens == 8192 for m in ensemble)


class _FakeResponse:
    def __init__(self, status_code, content="ok"):
        self.status_code = status_code
        self.text = content
        self._content = content

    def json(self):
        return {"choices": [{"message": {"content": self._content}}]}


class TestHttpClient:
    def test_success_after_transient_failures(self):
        responses = [_FakeResponse(500), _FakeResponse(500), _FakeResponse(200, "yes")]
        calls = []

        def post(url, **kw):
            calls.append(url)
            return responses[len(calls) - 1]

        client = HttpChatClient("key", post=post, sleep=lambda s: None)
        assert generate(MODEL, _bundle(), client) == "yes"
        assert len(calls) == 3

    def test_exhausted_retries(self):
        client = HttpChatClient(
            "key", post=lambda url, **kw: _FakeResponse(503), sleep=lambda s: None
        )
        with pytest.raises(TransportError, match="exhausted"):
            client.complete(MODEL, "s", "u")

    def test_auth_failure_not_retried(self):
        calls = []

        def post(url, **kw):
            calls.append(1)
            return _FakeResponse(401)

        client = HttpChatClient("key", post=post, sleep=lambda s: None)
        with pytest.raises(TransportError, match="authentication"):
            client.complete(MODEL, "s", "u")
        assert len(calls) == 1

    def test_timeout_surfaces(self):
        def post(url, **kw):
            raise requests.Timeout("stalled")

        client = HttpChatClient("key", post=post, sleep=lambda s: None)
        with pytest.raises(TransportError, match="timeout"):
            client.complete(MODEL, "s", "u")

    def test_timeout_parameter_passed(self):
        seen = {}

        def post(url, **kw):
            seen.update(kw)
            return _FakeResponse(200)

        client = HttpChatClient("key", post=post, sleep=lambda s: None)
        spec = ModelSpec("m", 1.0, "https://e/v1", api_timeout_s=600.0)
        client.complete(spec, "s", "u")
        assert seen["timeout"] == 600.0

    def test_missing_key_rejected(self):
        with pytest.raises(TransportError, match="API key"):
            HttpChatClient("")


def _bundle():
    return compose_prompt(benchmark_kind("ihdp"), 1.0, _prog("p"), [], [], "x")


class TestMockClient:
    def test_plays_fixtures_in_order_and_wraps(self, tmp_path):
        d = tmp_path / "ihdp"
        d.mkdir()
        (d / "000.txt").write_text("first")
        (d / "001.txt").write_text("second")
        client = MockChatClient(tmp_path, "ihdp")
        outs = [generate(MODEL, _bundle(), client) for _ in range(3)]
        assert outs == ["first", "second", "first"]
        assert client.calls == 3

    def test_missing_dir_rejected(self, tmp_path):
        with pytest.raises(TransportError):
            MockChatClient(tmp_path, "nope")


class TestExtractCode:
    def test_single_block(self):
        assert extract_code("text\n```python\nx = 1\n```\nmore") == "x = 1"

    def test_longest_block_wins(self):
        resp = "```\nshort\n```\nmid\n```python\nmuch longer block here\n```"
        assert extract_code(resp) == "much longer block here"

    def test_prose_only_rejected(self):
        with pytest.raises(CodeExtractionError, match="no code block"):
            extract_code("no code here at all")

    def test_fence_roundtrip(self):
        src = "def estimate(df):\n    return df.mean()\n"
        assert extract_code(f"```python\n{src}```") == src.rstrip("\n")

    def test_evolve_block_splice(self):
        parent = (
            "import numpy as np\n"
            "# EVOLVE-BLOCK-START\n"
            "def estimate(df):\n    return 0\n"
            "# EVOLVE-BLOCK-END\n"
            "TAIL = True\n"
        )
        response = (
            "```python\n"
            "# EVOLVE-BLOCK-START\n"
            "def estimate(df):\n    return 42\n"
            "# EVOLVE-BLOCK-END\n"
            "```"
        )
        merged = extract_code(response, parent_source=parent)
        assert "return 42" in merged
        assert merged.startswith("import numpy as np")
        assert merged.rstrip().endswith("TAIL = True")

    def test_no_markers_full_rewrite(self):
        parent = "def estimate(df):\n    return 0\n"
        resp = "```python\ndef estimate(df):\n    return 9\n```"
        assert extract_code(resp, parent_source=parent) == "def estimate(df):\n    return 9"
