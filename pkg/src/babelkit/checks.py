"""Numerical verification utilities: central-difference gradient checking
and power-iteration extreme-eigenvalue estimation."""

import numpy as np

from babelkit.tape import DiffTape


class NonFiniteEvaluationError(ValueError):
    pass


class PowerIterationError(RuntimeError):
    def __init__(self, residual, iters):
        super().__init__(f"no convergence after {iters} iterations (residual {residual:g})")
        self.residual = residual
        self.iters = iters


def finite_diff_check(f, point, step=1e-5):
    """Max relative error between the analytic gradient of ``f`` (a scalar-
    valued function of one tensor, built from tape primitives) and the
    central finite difference at ``point``.

    Error is max over coordinates of |analytic - numeric| / max(|analytic|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)

    tape = DiffTape()
    x = tape.parameter(point, "x")
    out = f(x)
    if not np.isfinite(out.data):
        raise NonFiniteEvaluationError("f(point) is not finite")
    analytic = tape.backward(out)["x"]

    def value_at(p):
        t = DiffTape()
        v = f(t.parameter(p, "x")).data
        if not np.isfinite(v):
            raise NonFiniteEvaluationError("f evaluation at perturbed point is not finite")
        return float(v)

    flat = point.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        numeric[i] = (value_at(hi.reshape(point.shape)) - value_at(lo.reshape(point.shape))) / (
            2.0 * step
        )

    diff = np.abs(analytic.reshape(-1) - numeric)
    denom = np.maximum(np.abs(analytic.reshape(-1)), 1e-8)
    return float(np.max(diff / denom)) if flat.size else 0.0


def _dominant_eigen(apply, dim, iters, tol, seed=0):
    """Dominant eigenvalue of a symmetric PSD linear map via power iteration.
    Returns (eigenvalue, residual); residual is ||Av - lambda v||."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    residual = np.inf
    for _ in range(iters):
        w = np.asarray(apply(v), dtype=np.float64)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, 0.0  # map annihilates v: eigenvalue 0
        v = w / norm
        w2 = np.asarray(apply(v), dtype=np.float64)
        lam = float(v @ w2)
        residual = float(np.linalg.norm(w2 - lam * v))
        if residual <= tol * max(abs(lam), 1.0):
            return lam, residual
    raise PowerIterationError(residual, iters)


def power_iteration_extremes(apply, dim, iters=10000, tol=1e-10):
    """Extreme eigenvalues (lambda_max, lambda_min) of a symmetric positive
    definite map ``apply: vector -> vector``.

    lambda_min comes from a second power iteration on the spectrally shifted
    map lambda_max*I - H, avoiding any linear solve.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    lam_max, _ = _dominant_eigen(apply, dim, iters, tol, seed=0)

    def shifted(v):
        return lam_max * v - np.asarray(apply(v), dtype=np.float64)

    mu, _ = _dominant_eigen(shifted, dim, iters, tol, seed=1)
    return lam_max, lam_max - mu
