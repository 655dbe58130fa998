"""Limited-memory BFGS with a feasibility-aware backtracking line search.

The objective may return +inf outside its domain; steps are capped by a
caller-supplied fraction-to-boundary rule and then backtracked until the
Armijo condition holds.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str


def lbfgs(fun, x0, gtol, max_iter=5000, memory=20, max_step=None, precond=None,
          armijo=1e-4, ftol_rel=0.0):
    """Minimise ``fun(x) -> (f, g)``.

    ``max_step(x, d)`` returns the largest feasible multiple of ``d``;
    ``precond(x)`` returns a positive diagonal approximating the Hessian and
    is used as the initial inverse-Hessian scaling in the two-loop recursion.
    Stops once ``max|g| <= gtol``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    nfev = 1
    if not np.isfinite(f):
        raise ValueError("initial point is infeasible")
    hist = deque(maxlen=memory)
    message = "max iterations"
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol:
            message = "gradient tolerance"
            it -= 1
            break
        diag = precond(x) if precond is not None else None
        d = -_two_loop(g, hist, diag)
        slope = float(g @ d)
        if slope >= 0:
            # lost descent: restart from (preconditioned) steepest descent
            hist.clear()
            d = -g / diag if diag is not None else -g
            slope = float(g @ d)
        step = 1.0
        if not hist and diag is None:
            step = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        if max_step is not None:
            step = min(step, 0.995 * max_step(x, d))
        accepted = False
        for _ in range(60):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            nfev += 1
            if np.isfinite(f_new) and f_new <= f + armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            message = "line search failed"
            break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.sqrt(float(s @ s) * float(y @ y)):
            hist.append((s, y, 1.0 / sy))
        f_old = f
        x, f, g = x_new, f_new, g_new
        if ftol_rel and abs(f_old - f) <= ftol_rel * max(1.0, abs(f)) and np.max(np.abs(g)) <= 1e3 * gtol:
            message = "function tolerance"
            break
    converged = np.max(np.abs(g)) <= gtol
    if converged:
        message = "gradient tolerance"
    return LbfgsResult(x, f, g, it, nfev, bool(converged), message)


def _two_loop(g, hist, diag):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(hist):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if diag is not None:
        r = q / diag
    elif hist:
        s, y, rho = hist[-1]
        r = q * (float(s @ y) / float(y @ y))
    else:
        r = q
    for (s, y, rho), a in zip(hist, reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return r


def newton(fun, hess, x0, gtol, max_iter=200, max_step=None, armijo=1e-4):
    """Damped Newton with a Levenberg shift; ``hess(x)`` returns a sparse matrix.

    The shifted system is factorised by banded Cholesky, which doubles as the
    positive-definiteness test; the shift grows until the factorisation
    succeeds.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    nfev = 1
    if not np.isfinite(f):
        raise ValueError("initial point is infeasible")
    message = "max iterations"
    shift = 0.0
    stalled = 0
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol:
            message = "gradient tolerance"
            it -= 1
            break
        H = hess(x)
        d, shift = _shifted_solve(H, g, shift)
        slope = float(g @ d)
        if not slope < 0:
            d = -g / np.maximum(H.diagonal(), 1e-300)
            slope = float(g @ d)
        step = 1.0
        if max_step is not None:
            step = min(step, 0.995 * max_step(x, d))
        # below this predicted decrease f is dominated by roundoff, so
        # progress is judged on the gradient instead
        noisy = -slope <= 1e3 * np.finfo(float).eps * max(1.0, abs(f))
        gmax = np.max(np.abs(g))
        accepted = False
        for _ in range(60):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            nfev += 1
            if np.isfinite(f_new):
                if f_new <= f + armijo * step * slope:
                    accepted = True
                elif noisy and np.max(np.abs(g_new)) < gmax:
                    accepted = True
            if accepted:
                break
            step *= 0.5
        if not accepted:
            message = "line search failed"
            break
        x, f, g = x_new, f_new, g_new
        stalled = stalled + 1 if noisy and np.max(np.abs(g)) > 0.5 * gmax else 0
        if stalled >= 5:
            message = "roundoff floor"
            break
    converged = bool(np.max(np.abs(g)) <= gtol)
    if converged:
        message = "gradient tolerance"
    return LbfgsResult(x, f, g, it, nfev, converged, message)


def _to_banded_upper(H):
    H = H.tocoo()
    upper = H.col >= H.row
    rows, cols, vals = H.row[upper], H.col[upper], H.data[upper]
    u = int(np.max(cols - rows)) if vals.size else 0
    ab = np.zeros((u + 1, H.shape[0]))
    np.add.at(ab, (u + rows - cols, cols), vals)
    return ab, u


def _shifted_solve(H, g, shift):
    from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

    ab, u = _to_banded_upper(H)
    diag = ab[u].copy()
    scale = max(float(np.max(np.abs(diag))), 1e-300)
    tau = shift * 0.1 if shift > 1e-14 * scale else 0.0
    for _ in range(80):
        ab[u] = diag + tau
        try:
            c = cholesky_banded(ab, lower=False)
            return cho_solve_banded((c, False), -g), tau
        except LinAlgError:
            tau = max(2 * tau, 1e-10 * scale)
    return -g / np.maximum(diag, 1e-300), tau
