"""Candidate execution and the two-stage cascade evaluator.

Native reference estimators run in-process; candidate source runs in an
out-of-process runtime shim speaking one JSON request/response line per
job over stdin/stdout. Any per-replicate failure (error, timeout,
non-finite or protocol-violating output) gives the candidate a combined
score of exactly 0.0 with the failure class preserved.
"""

from __future__ import annotations

import json
import math
import os
import signal
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as met
from . import proxy as prx
from .bench_data import (
    CrossSectionalReplicate,
    PanelReplicate,
    Replicate,
    ReplicateStore,
    strip_truth,
    write_benchmark,
)
from .metrics import IntervalEstimate, ITEEstimate
from .model import (
    EvaluationOutcome,
    Guidance,
    ITEMetrics,
    PanelMetrics,
    Program,
    ProxyITEMetrics,
    ProxyPanelMetrics,
    ReplicateResult,
    RunConfig,
    Stage,
    Status,
    labeled_seed,
)
from .nuisance import fit_ridge, predict
from .proxy import Z_95, encode_features

NATIVE_PREFIX = "native:"
NATIVE_ITE = ("diff_in_means", "ols_adjust", "constant_zero")
NATIVE_PANEL = ("weighted_did",)

STDERR_EXCERPT_CHARS = 500
KILL_GRACE_S = 2.0


class ExecutorError(RuntimeError):
    pass


@dataclass
class ExecutionJob:
    job_id: str
    benchmark: str
    signature: str  # "interval" | "ite"
    timeout_s: float
    data_path: Path
    candidate_source: Optional[str] = None
    native_name: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.candidate_source is None) == (self.native_name is None):
            raise ValueError("exactly one of candidate_source / native_name")


@dataclass
class ExecutionResult:
    job_id: str
    status: Status
    outputs: Optional[IntervalEstimate | ITEEstimate] = None
    stderr_excerpt: str = ""
    wall_time_s: float = 0.0

    def __post_init__(self) -> None:
        if self.status is Status.OK and self.outputs is None:
            raise ValueError("ok results need outputs")


# ---------------------------------------------------------------------------
# Native reference estimators
# ---------------------------------------------------------------------------


def _native_diff_in_means(rep: CrossSectionalReplicate) -> ITEEstimate:
    t, y = rep.treatment, rep.y_factual
    if (t == 1).sum() == 0 or (t == 0).sum() == 0:
        raise ValueError("an arm is missing")
    ate = float(y[t == 1].mean() - y[t == 0].mean())
    return ITEEstimate(ite_hat=np.full(rep.n_units, ate), ate_hat=ate, method="diff_in_means")


def _native_ols_adjust(rep: CrossSectionalReplicate) -> ITEEstimate:
    t, y = rep.treatment, rep.y_factual
    if (t == 1).sum() < 2 or (t == 0).sum() < 2:
        raise ValueError("need at least 2 units per arm")
    X = encode_features(rep.covariates)
    m1 = fit_ridge(X[t == 1], y[t == 1], alpha=1e-6)
    m0 = fit_ridge(X[t == 0], y[t == 0], alpha=1e-6)
    ite = predict(m1, X) - predict(m0, X)
    return ITEEstimate(ite_hat=ite, ate_hat=float(ite.mean()), method="ols_adjust")


def _native_constant_zero(rep: CrossSectionalReplicate) -> ITEEstimate:
    return ITEEstimate(ite_hat=np.zeros(rep.n_units), ate_hat=0.0, method="constant_zero")


def _weighted_mean_and_var(delta: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    mean = float(np.sum(w * delta) / np.sum(w))
    var = float(np.sum((w * (delta - mean)) ** 2) / np.sum(w) ** 2)
    return mean, var


def _native_weighted_did(rep: PanelReplicate) -> IntervalEstimate:
    """Patient-weighted two-period DiD with a normal-approximation 90% interval."""
    table = prx.practice_table(rep)
    z = table["z"].to_numpy()
    if (z == 1).sum() < 2 or (z == 0).sum() < 2:
        raise ValueError("need at least 2 practices per arm")
    delta = table["delta"].to_numpy(dtype=float)
    w = table["n_post"].to_numpy(dtype=float)
    m1, v1 = _weighted_mean_and_var(delta[z == 1], w[z == 1])
    m0, v0 = _weighted_mean_and_var(delta[z == 0], w[z == 0])
    tau = m1 - m0
    se = math.sqrt(v1 + v0)
    return IntervalEstimate(
        tau_hat=tau, lb=tau - Z_95 * se, ub=tau + Z_95 * se, method="weighted_did"
    )


_NATIVES = {
    "diff_in_means": _native_diff_in_means,
    "ols_adjust": _native_ols_adjust,
    "constant_zero": _native_constant_zero,
    "weighted_did": _native_weighted_did,
}


def run_native(name: str, rep: Replicate) -> ExecutionResult:
    """Execute a built-in estimator in-process."""
    if name not in _NATIVES:
        raise ExecutorError(f"unknown native estimator {name!r}")
    panel = isinstance(rep, PanelReplicate)
    if panel != (name in NATIVE_PANEL):
        raise ExecutorError(f"native {name!r} does not fit this replicate kind")
    start = time.monotonic()
    try:
        outputs = _NATIVES[name](rep)
    except Exception as exc:
        return ExecutionResult(
            job_id=f"native/{name}/{rep.replicate_id}",
            status=Status.ERROR,
            stderr_excerpt=str(exc)[:STDERR_EXCERPT_CHARS],
            wall_time_s=time.monotonic() - start,
        )
    return ExecutionResult(
        job_id=f"native/{name}/{rep.replicate_id}",
        status=Status.OK,
        outputs=outputs,
        wall_time_s=time.monotonic() - start,
    )


# ---------------------------------------------------------------------------
# Subprocess execution over the runtime shim
# ---------------------------------------------------------------------------


def default_shim_cmd() -> list[str]:
    return [sys.executable, "-m", "inferevolve_runtime"]


def _kill_tree(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def run_subprocess(
    job: ExecutionJob,
    shim_cmd: Optional[Sequence[str]] = None,
    expected_units: Optional[int] = None,
) -> ExecutionResult:
    """Run one candidate job in the runtime shim, enforcing the timeout.

    The whole process group is killed on timeout so candidate-spawned
    helpers die with the shim.
    """
    if job.candidate_source is None:
        raise ExecutorError("run_subprocess needs candidate source")
    cmd = list(shim_cmd) if shim_cmd else default_shim_cmd()
    start = time.monotonic()
    with tempfile.TemporaryDirectory(prefix="ie-job-") as tmp:
        source_path = Path(tmp) / "candidate.py"
        source_path.write_text(job.candidate_source, encoding="utf-8")
        request = {
            "job_id": job.job_id,
            "benchmark": job.benchmark,
            "signature": job.signature,
            "source_path": str(source_path),
            "data_path": str(job.data_path),
            "timeout_s": job.timeout_s,
        }
        try:
            proc = subprocess.Popen(
                cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                start_new_session=True,
            )
        except FileNotFoundError as exc:
            raise ExecutorError(f"runtime shim not found: {cmd[0]}") from exc
        try:
            stdout, stderr = proc.communicate(
                input=json.dumps(request) + "\n", timeout=job.timeout_s
            )
        except subprocess.TimeoutExpired:
            _kill_tree(proc)
            try:
                proc.communicate(timeout=KILL_GRACE_S)
            except subprocess.TimeoutExpired:
                pass
            return ExecutionResult(
                job_id=job.job_id,
                status=Status.TIMEOUT,
                stderr_excerpt=f"killed after {job.timeout_s}s",
                wall_time_s=time.monotonic() - start,
            )
    wall = time.monotonic() - start
    lines = [line for line in stdout.splitlines() if line.strip()]
    if not lines:
        raise ExecutorError(
            f"shim handshake failure (no response line): {stderr[-200:]}"
        )
    try:
        payload = json.loads(lines[-1])
    except json.JSONDecodeError as exc:
        raise ExecutorError(f"unparseable shim response: {lines[-1][:200]}") from exc
    return _result_from_payload(job, payload, wall, expected_units)


def _result_from_payload(
    job: ExecutionJob, payload: dict, wall: float, expected_units: Optional[int]
) -> ExecutionResult:
    status = payload.get("status", "error")
    excerpt = (payload.get("error") or "")[:STDERR_EXCERPT_CHARS]
    if status != "ok":
        try:
            status = Status(status)
        except ValueError:
            status = Status.PROTOCOL
        return ExecutionResult(
            job_id=job.job_id, status=status, stderr_excerpt=excerpt, wall_time_s=wall
        )
    try:
        if job.signature == "interval":
            outputs = IntervalEstimate(
                tau_hat=float(payload["tau_hat"]),
                lb=float(payload["lb"]),
                ub=float(payload["ub"]),
                method=str(payload.get("method", "")),
            )
        else:
            ite = np.asarray(payload["ite_hat"], dtype=float)
            if expected_units is not None and ite.shape != (expected_units,):
                return ExecutionResult(
                    job_id=job.job_id,
                    status=Status.PROTOCOL,
                    stderr_excerpt=f"ite_hat length {ite.shape} != {expected_units}",
                    wall_time_s=wall,
                )
            outputs = ITEEstimate(
                ite_hat=ite,
                ate_hat=float(payload["ate_hat"]),
                method=str(payload.get("method", "")),
            )
    except (KeyError, TypeError) as exc:
        return ExecutionResult(
            job_id=job.job_id,
            status=Status.PROTOCOL,
            stderr_excerpt=f"malformed ok payload: {exc}",
            wall_time_s=wall,
        )
    except ValueError as exc:
        # estimate validators reject non-finite or malformed values
        return ExecutionResult(
            job_id=job.job_id,
            status=Status.NONFINITE,
            stderr_excerpt=str(exc)[:STDERR_EXCERPT_CHARS],
            wall_time_s=wall,
        )
    return ExecutionResult(
        job_id=job.job_id, status=Status.OK, outputs=outputs, wall_time_s=wall
    )


# ---------------------------------------------------------------------------
# Aggregating evaluator
# ---------------------------------------------------------------------------


def _outputs_summary(res: ExecutionResult) -> Optional[dict]:
    if res.outputs is None:
        return None
    out = res.outputs
    if isinstance(out, IntervalEstimate):
        return {"tau_hat": out.tau_hat, "lb": out.lb, "ub": out.ub, "method": out.method}
    return {"ate_hat": out.ate_hat, "method": out.method}


class Evaluator:
    """Executes a program over replicate sets and aggregates scores.

    Proxy targets (pseudo-outcomes, DR-DID targets) depend only on the
    data, so they are computed once per replicate set and shared across
    candidates.
    """

    def __init__(
        self,
        store: ReplicateStore,
        cfg: RunConfig,
        shim_cmd: Optional[Sequence[str]] = None,
    ):
        self.store = store
        self.cfg = cfg
        self.shim_cmd = list(shim_cmd) if shim_cmd else default_shim_cmd()
        self._pseudo_cache: dict[str, prx.PseudoOutcomeSet] = {}
        self._drdid_cache: dict[tuple, prx.DRDIDTarget] = {}
        self._tmp = tempfile.TemporaryDirectory(prefix="ie-data-")
        self._data_dir = Path(self._tmp.name)
        self._data_paths: dict[str, Path] = {}

    # -- data plumbing ------------------------------------------------

    def _data_path(self, rep: Replicate) -> Path:
        if rep.factual_path is not None:
            return Path(rep.factual_path)
        if rep.replicate_id not in self._data_paths:
            bare = strip_truth(rep)
            write_benchmark([bare], self._data_dir)
            k = rep.replicate_id.split("_")[-1]
            self._data_paths[rep.replicate_id] = self._data_dir / f"rep_{k}_factual.csv"
        return self._data_paths[rep.replicate_id]

    def _pseudo_for(self, rep: CrossSectionalReplicate) -> prx.PseudoOutcomeSet:
        if rep.replicate_id not in self._pseudo_cache:
            seed = labeled_seed(self.cfg.replicate_seed, f"proxy:{rep.replicate_id}")
            self._pseudo_cache[rep.replicate_id] = prx.pseudo_outcomes_for(rep, seed)
        return self._pseudo_cache[rep.replicate_id]

    def _drdid_for(self, reps: Sequence[PanelReplicate]) -> prx.DRDIDTarget:
        key = tuple(sorted(r.replicate_id for r in reps))
        if key not in self._drdid_cache:
            self._drdid_cache[key] = prx.drdid_targets(reps)
        return self._drdid_cache[key]

    # -- execution ----------------------------------------------------

    def _execute(
        self, program: Program, rep: Replicate, timeout_s: float
    ) -> ExecutionResult:
        signature = rep.kind.signature
        if program.source.startswith(NATIVE_PREFIX):
            name = program.source[len(NATIVE_PREFIX) :].strip()
            return run_native(name, rep)
        expected = rep.n_units if isinstance(rep, CrossSectionalReplicate) else None
        job = ExecutionJob(
            job_id=f"{program.id}/{rep.replicate_id}",
            benchmark=rep.kind.name,
            signature=signature,
            timeout_s=timeout_s,
            data_path=self._data_path(rep),
            candidate_source=program.source,
        )
        return run_subprocess(job, self.shim_cmd, expected_units=expected)

    def evaluate_on(
        self,
        program: Program,
        replicate_ids: Sequence[str],
        mode: Guidance,
        workers: int,
        timeout_s: float,
        stage: Stage,
    ) -> EvaluationOutcome:
        """Per-replicate execution plus mode-specific aggregation.

        Worker count only affects wall time: results are aggregated in
        replicate-id order.
        """
        ids = sorted(replicate_ids)
        if not ids:
            raise ExecutorError("no replicates to evaluate")
        reps = {rid: self.store.get(rid) for rid in ids}
        if mode is Guidance.PROXY:
            # candidate-independent targets, computed once up front
            first = reps[ids[0]]
            if isinstance(first, PanelReplicate):
                self._drdid_for([reps[rid] for rid in ids])
            else:
                for rid in ids:
                    self._pseudo_for(reps[rid])

        def task(rid: str) -> ExecutionResult:
            return self._execute(program, reps[rid], timeout_s)

        if workers <= 1:
            results = {rid: task(rid) for rid in ids}
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {rid: pool.submit(task, rid) for rid in ids}
                results = {rid: fut.result() for rid, fut in futures.items()}

        per_replicate = [
            ReplicateResult(rid, results[rid].status, _outputs_summary(results[rid]))
            for rid in ids
        ]
        if not all(r.status is Status.OK for r in per_replicate):
            return EvaluationOutcome(per_replicate, None, 0.0, mode, stage)

        outputs = {rid: results[rid].outputs for rid in ids}
        aggregate, score = self._aggregate([reps[r] for r in ids], outputs, mode, per_replicate)
        if aggregate is None or not math.isfinite(score):
            return EvaluationOutcome(per_replicate, aggregate, 0.0, mode, stage)
        return EvaluationOutcome(per_replicate, aggregate, score, mode, stage)

    # -- aggregation --------------------------------------------------

    def _aggregate(self, reps, outputs, mode, per_replicate):
        panel = isinstance(reps[0], PanelReplicate)
        lam = self.cfg.lam
        try:
            if mode is Guidance.TRUE_SCORE:
                if panel:
                    return self._aggregate_panel_true(reps, outputs, lam, per_replicate)
                return self._aggregate_ite_true(reps, outputs, lam, per_replicate)
            if panel:
                return self._aggregate_panel_proxy(reps, outputs, lam, per_replicate)
            return self._aggregate_ite_proxy(reps, outputs, lam, per_replicate)
        except (ValueError, ZeroDivisionError):
            return None, 0.0

    def _aggregate_ite_true(self, reps, outputs, lam, per_replicate):
        pehe, ate_err, truths = [], [], []
        for rep, res in zip(reps, per_replicate):
            truth = rep.truth_record()
            if truth is None:
                raise ExecutorError(f"{rep.replicate_id}: truth required for true_score")
            est = outputs[rep.replicate_id]
            p = met.sqrt_pehe(est.ite_hat, truth.ite_true)
            a = abs(est.ate_hat - truth.ate_true)
            res.outputs.update({"sqrt_pehe": p, "abs_ate_err": a})
            pehe.append(p)
            ate_err.append(a)
            truths.append(truth.ite_true)
        bundle = ITEMetrics(float(np.mean(pehe)), float(np.mean(ate_err)))
        if reps[0].kind.normalize_by_ite_sd:
            pooled = float(np.std(np.concatenate(truths)))
            bundle = met.normalize_ite_metrics(bundle, pooled)
        score = met.score_ite(bundle.mean_sqrt_pehe, bundle.mean_abs_ate_err, lam)
        return bundle, score

    def _aggregate_panel_true(self, reps, outputs, lam, per_replicate):
        ests, truths = [], []
        for rep in reps:
            ests.append(outputs[rep.replicate_id])
            truths.append(met.true_satt(rep))
        stats = met.satt_rmse_coverage(ests, truths)
        bundle = PanelMetrics(stats["rmse"], stats["coverage"], stats["mean_width"])
        score = met.score_acic(bundle.rmse, bundle.coverage, lam)
        return bundle, score

    def _aggregate_ite_proxy(self, reps, outputs, lam, per_replicate):
        pehe, gaps, rlosses = [], [], []
        for rep, res in zip(reps, per_replicate):
            pseudo = self._pseudo_for(rep)
            est = outputs[rep.replicate_id]
            p = prx.proxy_pehe(est.ite_hat, pseudo)
            g = abs(est.ate_hat - pseudo.ate_aipw)
            r = prx.r_loss_norm(rep.y_factual, pseudo, rep.treatment, est.ite_hat)
            res.outputs.update({"proxy_pehe": p, "abs_ate_gap": g, "rloss": r})
            pehe.append(p)
            gaps.append(g)
            rlosses.append(r)
        bundle = ProxyITEMetrics(
            float(np.mean(pehe)), float(np.mean(gaps)), float(np.mean(rlosses))
        )
        out = prx.ite_proxy_loss(
            bundle.mean_proxy_pehe, bundle.mean_abs_ate_gap, bundle.mean_rloss, lam
        )
        return bundle, out["score"]

    def _aggregate_panel_proxy(self, reps, outputs, lam, per_replicate):
        targets = self._drdid_for(reps)
        ests = [outputs[rep.replicate_id] for rep in reps]
        out = prx.acic_proxy_loss(ests, targets, lam)
        comp = out["components"]
        bundle = ProxyPanelMetrics(
            mean_abs_target_gap=comp["mean_abs_target_gap"],
            hit_rate=comp["hit_rate"],
            mean_width=comp["mean_width"],
            g_width=comp["g_width"],
        )
        return bundle, out["score"]

    # -- cascade and holdout -------------------------------------------

    def stage1_ids(self, train_ids: Sequence[str]) -> list[str]:
        """Fixed per-run fail-fast subset: ceil(10%) of a seeded shuffle."""
        ordered = sorted(train_ids)
        rng = np.random.default_rng(labeled_seed(self.cfg.replicate_seed, "stage1"))
        perm = rng.permutation(len(ordered))
        count = math.ceil(0.1 * len(ordered))
        return [ordered[i] for i in perm[:count]]

    def cascade(self, program: Program, train_ids: Sequence[str]) -> dict:
        """Fail-fast stage 1, then full stage 2 for survivors."""
        if not train_ids:
            raise ExecutorError("empty training set")
        stage1 = self.evaluate_on(
            program,
            self.stage1_ids(train_ids),
            mode=self.cfg.guidance,
            workers=1,
            timeout_s=self.cfg.timeouts.stage1_s,
            stage=Stage.STAGE1,
        )
        if stage1.combined_score < self.cfg.stage1_threshold:
            return {"stage1": stage1, "stage2": None, "decision": "discard"}
        stage2 = self.evaluate_on(
            program,
            train_ids,
            mode=self.cfg.guidance,
            workers=1,
            timeout_s=self.cfg.timeouts.stage2_s,
            stage=Stage.STAGE2,
        )
        return {"stage1": stage1, "stage2": stage2, "decision": "insert"}

    def holdout_eval(
        self,
        best: Program,
        val_ids: Sequence[str],
        train_ids: Sequence[str],
        out_dir: Optional[Path] = None,
    ) -> EvaluationOutcome:
        """One final evaluation on the held-out replicates (4 workers).

        Refuses to run when val overlaps train. Uses true-score
        aggregation when every held-out replicate carries truth,
        otherwise the proxy objective.
        """
        overlap = set(val_ids) & set(train_ids)
        if overlap:
            raise ExecutorError(f"holdout overlaps training set: {sorted(overlap)[:3]}")
        self.store.phase = "holdout"
        have_truth = all(self.store.replicates[rid].has_truth for rid in val_ids)
        mode = Guidance.TRUE_SCORE if have_truth else Guidance.PROXY
        outcome = self.evaluate_on(
            best,
            val_ids,
            mode=mode,
            workers=4,
            timeout_s=self.cfg.timeouts.stage2_s,
            stage=Stage.HOLDOUT,
        )
        if out_dir is not None:
            path = Path(out_dir) / "holdout.json"
            path.write_text(
                json.dumps(outcome.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
            )
        return outcome
