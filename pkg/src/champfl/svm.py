"""Binary kernel SVM trained with sequential minimal optimization.

Working-set selection and the two-variable update follow Fan, Chen & Lin's
second-order scheme (the one LIBSVM uses): pick the maximal violator ``i``,
then the ``j`` giving the largest guaranteed decrease of the dual objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

TAU = 1e-12


@dataclass(frozen=True)
class SvmConfig:
    degree: int = 3
    C: float = 1.0
    tol: float = 1e-3
    coef0: float = 1.0
    gamma: float | str = "scale"
    max_iter: int = 100_000


def poly_kernel(a: np.ndarray, b: np.ndarray, gamma: float, coef0: float, degree: int) -> np.ndarray:
    return (gamma * (a @ b.T) + coef0) ** degree


@dataclass(eq=False)
class MembershipClassifier:
    """Kernel expansion sum_i coef_i K(sv_i, z) + bias; positive means "member"."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    gamma: float
    coef0: float
    degree: int
    iterations: int = 0
    objective: list[float] = field(default_factory=list, repr=False)

    def decision_function(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.support_vectors.size == 0:
            return np.full(len(z), self.bias)
        if z.shape[1] != self.support_vectors.shape[1]:
            raise InputError(f"expected {self.support_vectors.shape[1]} features, got {z.shape[1]}")
        k = poly_kernel(z, self.support_vectors, self.gamma, self.coef0, self.degree)
        return k @ self.dual_coef + self.bias

    def predict(self, z) -> np.ndarray:
        return (self.decision_function(z) > 0).astype(np.int64)


def _resolve_gamma(x: np.ndarray, gamma) -> float:
    if gamma == "scale":
        var = float(x.var())
        return 1.0 / (x.shape[1] * var) if var > 0 else 1.0
    return float(gamma)


def fit_svm(x, labels, cfg: SvmConfig = SvmConfig()) -> MembershipClassifier:
    """Solve the C-SVM dual for 0/1 ``labels`` to KKT gap ``cfg.tol``."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(labels):
        raise InputError("features must be (n, d) with one label per row")
    if not set(np.unique(labels)) <= {0, 1}:
        raise InputError("labels must be 0/1")
    if len(np.unique(labels)) < 2:
        raise InputError("both member and non-member records are required")

    y = np.where(labels == 1, 1.0, -1.0)
    n = len(y)
    c = float(cfg.C)
    gamma = _resolve_gamma(x, cfg.gamma)
    kmat = poly_kernel(x, x, gamma, cfg.coef0, cfg.degree)
    q = (y[:, None] * y[None, :]) * kmat
    qd = np.diag(kmat).copy()

    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a
    objective = [0.0]
    iterations = 0
    while iterations < cfg.max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        gmax = yg[i]
        gmin = yg[low].min()
        if gmax - gmin < cfg.tol:
            break
        cand = low & (yg < gmax)
        b = gmax - yg[cand]
        a = qd[i] + qd[cand] - 2.0 * y[i] * y[cand] * kmat[i, cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])

        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = qd[i] + qd[j] + 2.0 * q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > c:
                    alpha[i], alpha[j] = c, c - diff
            elif alpha[j] > c:
                alpha[j], alpha[i] = c, c + diff
        else:
            quad = qd[i] + qd[j] - 2.0 * q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > c:
                if alpha[i] > c:
                    alpha[i], alpha[j] = c, total - c
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > c:
                if alpha[j] > c:
                    alpha[j], alpha[i] = c, total - c
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        di, dj = alpha[i] - ai_old, alpha[j] - aj_old
        grad += q[i] * di + q[j] * dj
        iterations += 1
        # dual objective in maximisation form: e'a - 0.5 a'Qa = -0.5 a'(grad - e)
        objective.append(float(-0.5 * alpha @ (grad - 1.0)))

    bias = -_rho(alpha, grad, y, c)
    sv = alpha > 0
    return MembershipClassifier(
        support_vectors=x[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=bias,
        gamma=gamma,
        coef0=cfg.coef0,
        degree=cfg.degree,
        iterations=iterations,
        objective=objective,
    )


def _rho(alpha, grad, y, c) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < c)
    if free.any():
        return float(yg[free].mean())
    at_upper = alpha >= c
    ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
    lb_mask = ~ub_mask
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    if not np.isfinite(ub) or not np.isfinite(lb):
        return float(ub if np.isfinite(ub) else lb)
    return float((ub + lb) / 2.0)
