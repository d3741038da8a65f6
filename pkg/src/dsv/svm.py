"""Hard-margin linear SVM: dual solver and classical KKT checker.

This is the independent ground truth the DeepKKT machinery is compared
against on linear models.  Two bias conventions are supported:

* explicit bias (default): ``f(x) = w.x + b`` with the dual equality
  constraint ``sum(alpha * y) = 0``, solved by SMO pair updates;
* folded bias: ``x~ = [x; 1]`` and ``w~ = [w; b]`` is regularised as a whole,
  so there is no equality constraint and ``w~ = sum(alpha * y * x~)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


class InfeasibleError(ValueError):
    """Raised when the data cannot be separated by a hyperplane."""


@dataclass(frozen=True)
class SvmSolution:
    w: np.ndarray
    b: float
    alpha: np.ndarray
    support: np.ndarray
    folded_bias: bool
    iterations: int

    @property
    def w_tilde(self) -> np.ndarray:
        return np.append(self.w, self.b)

    @property
    def margin(self) -> float:
        """Geometric margin 1/||w||."""
        return float(1.0 / np.linalg.norm(self.w))

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.w + self.b


def to_signed(labels) -> np.ndarray:
    """Class 0 -> +1, class 1 -> -1 (matches tied logits [s, -s])."""
    labels = np.asarray(labels)
    if set(np.unique(labels)) <= {-1, 1}:
        return labels.astype(np.float64)
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("binary labels expected")
    return np.where(labels == 0, 1.0, -1.0)


def solve_hard_margin(x, y, folded_bias: bool = False, tol: float = 1e-8,
                      cap: float = 1e6, max_iter: int = 1_000_000) -> SvmSolution:
    """Solve the hard-margin dual.

    ``y`` may be in {0, 1} or {-1, +1}.  The box ``alpha <= cap`` guards against
    divergence: on separable data the hard-margin duals stay far below it, so
    any dual sitting on the cap at convergence means no separating hyperplane
    exists.
    """
    x = np.asarray(x, dtype=np.float64)
    y = to_signed(y)
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present")
    if not is_separable(x, y):
        raise InfeasibleError("data not linearly separable")
    kernel = x @ x.T
    if folded_bias:
        kernel = kernel + 1.0
    q = (y[:, None] * y[None, :]) * kernel
    if folded_bias:
        alpha, it = _coordinate_ascent(q, tol, cap, max_iter)
    else:
        alpha, it = _smo(q, y, tol, cap, max_iter)
    if np.any(alpha >= cap * (1 - 1e-12)):
        raise InfeasibleError(f"dual variable hit the divergence cap {cap:g}: data not separable")
    support = np.flatnonzero(alpha > 1e-7 * alpha.max())
    w = (alpha * y) @ x
    if folded_bias:
        b = float(alpha @ y)
    else:
        b = float(np.mean(y[support] - x[support] @ w))
    return SvmSolution(w, b, alpha, support, folded_bias, it)


def is_separable(x, y) -> bool:
    """Exact feasibility of y (w.x + b) >= 1 as a linear program."""
    x = np.asarray(x, dtype=np.float64)
    y = to_signed(y)
    a_ub = -y[:, None] * np.hstack([x, np.ones((len(x), 1))])
    res = linprog(np.zeros(x.shape[1] + 1), A_ub=a_ub, b_ub=-np.ones(len(x)),
                  bounds=[(None, None)] * (x.shape[1] + 1), method="highs")
    return res.status == 0


def _coordinate_ascent(q, tol, cap, max_iter):
    n = len(q)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - sum(a)
    diag = np.diag(q).copy()
    if np.any(diag <= 0):
        raise ValueError("zero-norm sample in folded-bias mode")
    for it in range(max_iter):
        viol = np.where(alpha > 0, np.abs(grad), np.maximum(-grad, 0.0))
        viol = np.where(alpha >= cap, np.maximum(grad, 0.0), viol)
        i = int(np.argmax(viol))
        if viol[i] < tol:
            return alpha, it
        new = min(max(alpha[i] - grad[i] / diag[i], 0.0), cap)
        grad += (new - alpha[i]) * q[:, i]
        alpha[i] = new
    raise InfeasibleError(f"no convergence in {max_iter} iterations")


def _smo(q, y, tol, cap, max_iter):
    """SMO with maximal-violating-pair selection (first-order working set)."""
    n = len(q)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    for it in range(max_iter):
        score = -y * grad
        up = ((y > 0) & (alpha < cap)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < cap))
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        gap = score[i] - score[j]
        if gap < tol:
            return alpha, it
        curv = q[i, i] + q[j, j] - 2 * y[i] * y[j] * q[i, j]
        step = gap / max(curv, 1e-12)
        # move along alpha_i += y_i t, alpha_j -= y_j t within the box
        lim_i = cap - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else cap - alpha[j]
        step = min(step, lim_i, lim_j)
        di, dj = y[i] * step, -y[j] * step
        alpha[i] += di
        alpha[j] += dj
        grad += q[:, i] * di + q[:, j] * dj
    raise InfeasibleError(f"no convergence in {max_iter} iterations")


@dataclass(frozen=True)
class ClassicalKktReport:
    primal: float          # max (1 - y f(x))_+
    dual: float            # max (-alpha)_+
    min_alpha: float
    slackness: float       # max |alpha (y f(x) - 1)|
    stationarity: float    # ||w~ - sum alpha y x~||_2 (plus |sum alpha y| when the bias is explicit)

    def worst(self) -> float:
        return max(self.primal, self.dual, self.slackness, self.stationarity)


def check_classical_kkt(sol: SvmSolution, x, y, w=None, b=None, alpha=None) -> ClassicalKktReport:
    """Evaluate the four classical KKT residuals.

    ``w``, ``b`` and ``alpha`` default to the solution's own values and can be
    overridden to probe perturbed candidates.
    """
    x = np.asarray(x, dtype=np.float64)
    y = to_signed(y)
    w = sol.w if w is None else np.asarray(w, dtype=np.float64)
    b = sol.b if b is None else float(b)
    alpha = sol.alpha if alpha is None else np.asarray(alpha, dtype=np.float64)
    margins = y * (x @ w + b)
    primal = float(np.max(np.maximum(1.0 - margins, 0.0)))
    slack = float(np.max(np.abs(alpha * (margins - 1.0))))
    if sol.folded_bias:
        xt = np.hstack([x, np.ones((len(x), 1))])
        stat = float(np.linalg.norm(np.append(w, b) - (alpha * y) @ xt))
    else:
        stat = float(np.linalg.norm(w - (alpha * y) @ x) + abs(alpha @ y))
    return ClassicalKktReport(primal, float(max(-alpha.min(), 0.0)), float(alpha.min()), slack, stat)
