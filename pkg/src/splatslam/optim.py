"""Dense Levenberg-Marquardt over flat parameter vectors.

Jacobians are central finite differences, so callers only supply a residual
function. Robustness is handled by wrapping residuals through the square-root
Huber transform before they reach the optimizer. Pose problems parameterize
increments as twists and compose them onto anchor poses inside their residual
closures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LMResult:
    params: np.ndarray
    cost: float
    iterations: int
    converged: bool
    diverged: bool


def huber_residual(r, delta: float):
    """Square-root Huber transform: sum of squares of the output equals the
    Huber cost of the input (quadratic inside delta, linear outside)."""
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    # maximum() keeps the unselected branch of where() out of sqrt's domain
    lin = np.sqrt(np.maximum(2.0 * delta * a - delta**2, 0.0))
    out = np.where(a <= delta, r, np.sign(r) * lin)
    return out


def numeric_jacobian(fn, x, step: float = 1e-6):
    x = np.asarray(x, dtype=float)
    r0 = np.asarray(fn(x))
    J = np.empty((r0.size, x.size))
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        J[:, k] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * h)
    return J, r0


def levenberg_marquardt(fn, x0, max_iters: int = 50, tol_step: float = 1e-8,
                        lambda_init: float = 1e-4, lambda_max: float = 1e8,
                        fd_step: float = 1e-6,
                        max_rejections: int = 5) -> LMResult:
    """Minimize ||fn(x)||^2. Divergence is declared after max_rejections
    consecutive rejected steps at maximum damping; the best iterate found is
    still returned, flagged."""
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(fn(x))
    cost = float(r @ r)
    lam = lambda_init
    rejections_at_max = 0
    iterations = 0

    for iterations in range(1, max_iters + 1):
        J, r = numeric_jacobian(fn, x, step=fd_step)
        cost = float(r @ r)
        JtJ = J.T @ J
        g = J.T @ r
        accepted = False
        while not accepted:
            try:
                delta = np.linalg.solve(JtJ + lam * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(JtJ + lam * np.eye(len(x)), -g,
                                        rcond=None)[0]
            x_new = x + delta
            r_new = np.asarray(fn(x_new))
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                x = x_new
                cost = cost_new
                lam = max(lam * 0.5, 1e-12)
                rejections_at_max = 0
                accepted = True
            else:
                if lam >= lambda_max:
                    rejections_at_max += 1
                    if rejections_at_max >= max_rejections:
                        return LMResult(x, cost, iterations, False, True)
                lam = min(lam * 4.0, lambda_max)
            # a step this small cannot move the iterate whether or not it
            # was accepted: already at a (damped) stationary point
            if np.linalg.norm(delta) < tol_step:
                return LMResult(x, cost, iterations, True, False)
    return LMResult(x, cost, iterations, True, False)
