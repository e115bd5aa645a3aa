"""Nonlinear conjugate gradient minimization.

Polak-Ribiere directions (nonnegative beta), a strong-Wolfe line search,
and an initial step per line search taken from the ratio of successive
directional slopes.  The objective callable returns value and gradient
together so the two can share work.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search


@dataclass
class CgResult:
    x: np.ndarray
    fun: float
    n_iters: int
    n_evals: int
    reason: str
    history: list = field(default_factory=list)


class _FunGradCache:
    """Memoize the last (value, gradient) evaluation.

    The line search probes value and gradient through separate callables;
    caching keeps each trial point at one combined evaluation when the two
    are requested back to back.
    """

    def __init__(self, fun_and_grad):
        self._fg = fun_and_grad
        self._x = None
        self._f = None
        self._g = None
        self.n_evals = 0

    def _ensure(self, x):
        if self._x is None or not np.array_equal(x, self._x):
            self._f, self._g = self._fg(x)
            self._x = np.array(x, copy=True)
            self.n_evals += 1

    def f(self, x):
        self._ensure(x)
        return self._f

    def g(self, x):
        self._ensure(x)
        return self._g


def minimize_cg(
    fun_and_grad: Callable,
    x0: np.ndarray,
    max_iters: int = 200,
    grad_tol: float = 1e-8,
    progress_tol: float = 1e-12,
    progress_patience: int = 2,
    c1: float = 1e-4,
    c2: float = 0.1,
    step_ratio_cap: float = 100.0,
    callback: Callable | None = None,
) -> CgResult:
    """Minimize a smooth function of one flat parameter vector.

    Stops on small gradient, exhausted iterations, a failed line search
    after a steepest-descent restart, stalled progress, or a non-finite
    value.  Accepted steps satisfy strong Wolfe conditions, so the value
    history is non-increasing.
    """
    cache = _FunGradCache(fun_and_grad)
    x = np.asarray(x0, dtype=np.float64).copy()
    f = cache.f(x)
    g = cache.g(x)
    history = [f]
    if not np.isfinite(f):
        return CgResult(x, f, 0, cache.n_evals, "non_finite", history)

    d = -g
    alpha_scale = 1.0 / (1.0 + float(np.linalg.norm(g)))
    stall = 0
    reason = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if float(np.max(np.abs(g))) < grad_tol:
            reason = "grad_tol"
            it -= 1
            break

        alpha = None
        f_new = None
        for attempt in range(2):
            if attempt == 1:
                d = -g
                alpha_scale = 1.0 / (1.0 + float(np.linalg.norm(g)))
            if float(g @ d) >= 0.0:
                d = -g
            p = alpha_scale * d
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ls = line_search(
                    cache.f, cache.g, x, p,
                    gfk=g, old_fval=f, old_old_fval=None,
                    c1=c1, c2=c2, maxiter=30,
                )
            if ls[0] is not None:
                alpha, f_new = ls[0], ls[3]
                break
        if alpha is None:
            reason = "line_search_failed"
            it -= 1
            break

        x_new = x + alpha * p
        g_new = cache.g(x_new)
        if f_new is None:
            f_new = cache.f(x_new)
        if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
            return CgResult(x_new, f_new, it, cache.n_evals, "non_finite", history)

        slope_old = float(g @ d)
        beta = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
        d_new = -g_new + beta * d
        slope_new = float(g_new @ d_new)
        if slope_new >= 0.0:
            d_new = -g_new
            slope_new = float(g_new @ d_new)

        # initial step for the next search from the slope ratio
        ratio = slope_old / slope_new if slope_new < 0.0 else 1.0
        ratio = float(np.clip(ratio, 1e-2, step_ratio_cap))
        alpha_scale = alpha * alpha_scale * ratio

        rel_drop = (f - f_new) / max(1.0, abs(f))
        stall = stall + 1 if rel_drop < progress_tol else 0

        x, f, g, d = x_new, f_new, g_new, d_new
        history.append(f)
        if callback is not None:
            callback(x, f)
        if stall >= progress_patience:
            reason = "stalled"
            break

    return CgResult(x, f, it, cache.n_evals, reason, history)
