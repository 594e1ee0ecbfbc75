"""One-shot candidate runner: one JSON job line in, one result line out.

The parent process owns hard timeout enforcement; this shim's duties
are loading the candidate-visible CSV, executing the candidate source
in a restricted namespace, validating the returned estimates, and
reporting exactly one status line. Every failure mode becomes a result
line with a status class; the process still exits 0 so the parent can
distinguish candidate failures from shim crashes.

Import policy: candidates may import numpy, pandas, sklearn,
statsmodels, math, and random. Enforcement wraps ``__import__`` in the
candidate namespace (so cached modules are caught too) plus a meta-path
guard for modules loaded lazily on the candidate's behalf.
"""

from __future__ import annotations

import json
import math
import random
import sys
import traceback
import builtins as _builtins

import numpy as np
import pandas as pd
from sklearn.ensemble import GradientBoostingRegressor
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.model_selection import KFold
from sklearn.preprocessing import StandardScaler

CANDIDATE_ALLOWED = {"numpy", "pandas", "sklearn", "statsmodels", "math", "random"}
# dependency closure of the allowed packages, for lazy internal loads
TRANSITIVE_ALLOWED = CANDIDATE_ALLOWED | {
    "scipy",
    "joblib",
    "threadpoolctl",
    "patsy",
    "dateutil",
    "pytz",
    "six",
    "packaging",
    "tzdata",
}

TRACEBACK_CHARS = 500

_real_import = _builtins.__import__


class _AllowlistFinder:
    """Meta-path guard: blocks uncached third-party loads off the allow-list."""

    def find_spec(self, name, path=None, target=None):
        root = name.partition(".")[0]
        if root in TRANSITIVE_ALLOWED or root in sys.stdlib_module_names:
            return None
        raise ImportError(f"import of {root!r} is not allowed")


def _guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
    root = name.partition(".")[0]
    if level == 0 and root not in CANDIDATE_ALLOWED:
        raise ImportError(f"import of {root!r} is not allowed")
    return _real_import(name, globals, locals, fromlist, level)


def inject_runtime(namespace: dict) -> dict:
    """Pre-injected utilities so candidates can skip common imports.

    The injected set is versioned in docs/runtime.md of this package.
    """
    guarded_builtins = dict(vars(_builtins))
    guarded_builtins["__import__"] = _guarded_import
    namespace.update(
        {
            "__builtins__": guarded_builtins,
            "np": np,
            "numpy": np,
            "pd": pd,
            "pandas": pd,
            "math": math,
            "random": random,
            "StandardScaler": StandardScaler,
            "KFold": KFold,
            "LogisticRegression": LogisticRegression,
            "Ridge": Ridge,
            "GradientBoostingRegressor": GradientBoostingRegressor,
        }
    )
    return namespace


def _finite(x) -> bool:
    try:
        return math.isfinite(float(x))
    except (TypeError, ValueError):
        return False


def _validate_ite(result, n_rows: int) -> dict:
    if not isinstance(result, (tuple, list)) or len(result) != 3:
        return {"status": "protocol", "error": "estimate(df) must return (ite_hat, ate_hat, method)"}
    ite_hat, ate_hat, method = result
    try:
        ite = np.asarray(ite_hat, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        return {"status": "protocol", "error": "ite_hat is not numeric"}
    if ite.shape[0] != n_rows:
        return {
            "status": "protocol",
            "error": f"ite_hat length {ite.shape[0]} != {n_rows} rows",
        }
    if not np.isfinite(ite).all() or not _finite(ate_hat):
        return {"status": "nonfinite", "error": "non-finite estimates"}
    return {
        "status": "ok",
        "ite_hat": [float(v) for v in ite],
        "ate_hat": float(ate_hat),
        "method": str(method),
    }


def _validate_interval(result) -> dict:
    if not isinstance(result, (tuple, list)) or len(result) != 4:
        return {
            "status": "protocol",
            "error": "estimate(df) must return (tau_hat, lb, ub, method)",
        }
    tau, lb, ub, method = result
    if not all(_finite(v) for v in (tau, lb, ub)):
        return {"status": "nonfinite", "error": "non-finite estimates"}
    if float(lb) > float(ub):
        return {"status": "protocol", "error": "lb > ub"}
    return {
        "status": "ok",
        "tau_hat": float(tau),
        "lb": float(lb),
        "ub": float(ub),
        "method": str(method),
    }


def run_job(job: dict) -> dict:
    """Execute one job envelope; never raises for candidate failures."""
    response = {"job_id": job.get("job_id")}
    signature = job.get("signature")
    try:
        with open(job["data_path"], "r", encoding="utf-8") as fh:
            df = pd.read_csv(fh)
        with open(job["source_path"], "r", encoding="utf-8") as fh:
            source = fh.read()
    except (OSError, KeyError, UnicodeDecodeError) as exc:
        response.update({"status": "error", "error": f"job setup failed: {exc}"})
        return response

    namespace = inject_runtime({"__name__": "candidate"})
    np.random.seed(0)
    random.seed(0)
    finder = _AllowlistFinder()
    sys.meta_path.insert(0, finder)
    try:
        exec(compile(source, "<candidate>", "exec"), namespace)
        estimate = namespace.get("estimate")
        if not callable(estimate):
            response.update(
                {"status": "error", "error": "candidate defines no estimate() function"}
            )
            return response
        result = estimate(df)
    except BaseException:
        tb = traceback.format_exc(limit=5)
        response.update({"status": "error", "error": tb[-TRACEBACK_CHARS:]})
        return response
    finally:
        sys.meta_path.remove(finder)

    if signature == "interval":
        response.update(_validate_interval(result))
    elif signature == "ite":
        response.update(_validate_ite(result, len(df)))
    else:
        response.update({"status": "error", "error": f"unknown signature {signature!r}"})
    return response


def serve(stdin=None, stdout=None) -> int:
    """Read one job line, write one result line, return exit code 0."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    line = stdin.readline()
    if not line.strip():
        stdout.write(json.dumps({"job_id": None, "status": "error", "error": "empty job line"}) + "\n")
        stdout.flush()
        return 0
    try:
        job = json.loads(line)
    except json.JSONDecodeError as exc:
        stdout.write(
            json.dumps({"job_id": None, "status": "error", "error": f"bad job line: {exc}"}) + "\n"
        )
        stdout.flush()
        return 0
    response = run_job(job)
    try:
        text = json.dumps(response, allow_nan=False)
    except ValueError:
        text = json.dumps(
            {"job_id": job.get("job_id"), "status": "nonfinite", "error": "non-finite values in response"}
        )
    stdout.write(text + "\n")
    stdout.flush()
    return 0


def main() -> None:
    sys.exit(serve())


if __name__ == "__main__":
    main()
