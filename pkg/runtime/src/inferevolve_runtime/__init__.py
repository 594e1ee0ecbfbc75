"""Runtime shim that executes one candidate estimator per process."""

__version__ = "0.1.0"
