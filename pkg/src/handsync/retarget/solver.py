"""Joint-limited fingertip retargeting by sequential least squares.

For each finger the tracking error is the twist ``e = log(E^-1 T)`` between
the current fingertip pose ``E`` and a target pose ``T`` that shares ``E``'s
rotation, so only the translational part (``Lambda e``) is non-zero. Joint
updates come from the linearization ``Lambda e(q + dq) ~ Lambda e + J_e dq``
with ``J_e = Lambda J(E) J(q)``, solved as a damped, box-constrained least
squares problem inside an adaptive trust region.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..geom import Pose, log_se3, se3_left_jacobian_inv
from .chain import KinematicChain

DAMPING = 1e-6
STEP_TOL = 1e-10


def _inv_T(T):
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -(Rt @ T[..., :3, 3, None])[..., 0]
    out[..., 3, 3] = 1.0
    return out


def pose_error(E, T):
    """``(e, J)``: ``e = log(E^-1 T)`` and its derivative w.r.t. a body twist of ``E``.

    Perturbing ``E -> E exp(d)`` gives ``e -> e - Jl^-1(e) d`` to first
    order, so ``J = -Jl^-1(e)`` (SE(3) left Jacobian inverse). Accepts 4x4
    arrays or :class:`Pose` objects and broadcasts over leading axes.
    """
    E = E.matrix() if isinstance(E, Pose) else np.asarray(E, dtype=float)
    T = T.matrix() if isinstance(T, Pose) else np.asarray(T, dtype=float)
    e = log_se3(_inv_T(E) @ T)
    return e, -se3_left_jacobian_inv(e)


def error_twist(E_current, p_target):
    """Twist error towards a position target with the current rotation kept."""
    E = E_current.matrix() if isinstance(E_current, Pose) else np.asarray(E_current, dtype=float)
    T = E.copy()
    T[..., :3, 3] = p_target
    return pose_error(E, T)


def body_jacobian(T, J_geo):
    """Geometric (root-frame) Jacobian -> body-twist Jacobian of frame ``T``."""
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    return np.concatenate([Rt @ J_geo[..., :3, :], Rt @ J_geo[..., 3:, :]], axis=-2)


def task_terms(chain, q, targets):
    """Translational errors ``Lambda e`` (F, 3) and task Jacobians ``J_e`` (F, 3, d)."""
    T, J_geo = chain.fingertip_terms(q)
    e, J_log = error_twist(T, np.asarray(targets, dtype=float))
    J_e = (J_log @ body_jacobian(T, J_geo))[..., :3, :]
    return e[..., :3], J_e


def tip_errors(chain, q, targets):
    """Translational error norms per finger (equals ``|Lambda e|``)."""
    return np.linalg.norm(np.asarray(targets, dtype=float) - chain.fingertip_positions(q), axis=-1)


def rmse(residuals):
    """``sqrt(sum |Lambda e_f|^2 / (3 N_f))`` over per-finger residual vectors."""
    r = np.asarray(residuals, dtype=float).reshape(-1, 3)
    if len(r) == 0:
        raise ValueError("rmse needs at least one residual")
    return float(np.sqrt(np.sum(r * r) / (3 * len(r))))


def _inside(q, dq, lower, upper):
    """Shrink ``dq`` by an ulp where rounding would push ``q + dq`` past a limit."""
    qn = np.clip(q + dq, lower, upper)
    dq = qn - q
    for _ in range(4):
        over, under = q + dq > upper, q + dq < lower
        if not (over.any() or under.any()):
            break
        dq = np.where(over, np.nextafter(dq, -np.inf), dq)
        dq = np.where(under, np.nextafter(dq, np.inf), dq)
    return dq


def retarget_step(chain, q, targets, trust_radius, damping=DAMPING):
    """Damped, box- and trust-region-constrained Gauss-Newton step.

    Minimizes ``|J_e dq + Lambda e|^2 + lam |dq|^2`` subject to
    ``q_l <= q + dq <= q_u`` and ``|dq|_inf <= trust_radius``, where
    ``lam = damping * sigma_max(J_e)^2``. Returns ``(dq, predicted_reduction)``
    with the prediction measured on the undamped squared error.
    """
    q = np.asarray(q, dtype=float)
    r, J_e = task_terms(chain, q, targets)
    A = J_e.reshape(-1, chain.dof)
    b = -r.reshape(-1)
    d = chain.dof
    if not np.any(b):
        return np.zeros(d), 0.0
    AtA = A.T @ A
    smax2 = float(np.linalg.eigvalsh(AtA)[-1]) if d else 0.0
    lam = damping * (smax2 if smax2 > 0 else 1.0)
    lo = np.maximum(chain.lower - q, -trust_radius)
    hi = np.minimum(chain.upper - q, trust_radius)
    dq = np.linalg.solve(AtA + lam * np.eye(d), A.T @ b)
    if np.any(dq < lo) or np.any(dq > hi):
        aug_A = np.vstack([A, np.sqrt(lam) * np.eye(d)])
        aug_b = np.concatenate([b, np.zeros(d)])
        # keep lb < ub for the solver; a pinned joint has zero span anyway
        span = hi - lo
        hi_s = np.where(span > 0, hi, lo + 1e-300)
        dq = lsq_linear(aug_A, aug_b, bounds=(lo, hi_s), method="bvls").x
        dq = np.clip(dq, lo, hi)
    dq = _inside(q, dq, chain.lower, chain.upper)
    pred = float(b @ b - np.sum((A @ dq - b) ** 2))
    return dq, pred


@dataclass(eq=False)
class RetargetResult:
    q: np.ndarray
    residuals: np.ndarray  # (F, 3) Lambda e per finger, fingertip frame
    rmse: float
    iterations: int
    converged: bool
    iterates: list = field(default_factory=list)  # accepted configurations, q0 first
    objective: list = field(default_factory=list)  # sum of per-finger norms per iterate
    starts: list = field(default_factory=lambda: [0])  # index into iterates where each descent begins

    def recompute_rmse(self):
        return rmse(self.residuals)


def _descend(chain, q, targets, tol, budget, trust_radius, max_radius, damping):
    """One trust-region descent from ``q``; returns ``(q, err, steps, iterates, objective)``."""
    err = tip_errors(chain, q, targets)
    iterates, objective = [q.copy()], [float(err.sum())]
    radius = float(trust_radius)
    it = 0
    while err.max() >= tol and it < budget:
        it += 1
        dq, pred = retarget_step(chain, q, targets, radius, damping)
        step = float(np.max(np.abs(dq))) if dq.size else 0.0
        if step < STEP_TOL or pred <= 0:
            break
        q_new = q + dq
        err_new = tip_errors(chain, q_new, targets)
        actual = float(np.sum(err**2) - np.sum(err_new**2))
        ratio = actual / pred
        if ratio < 0.25:
            radius = 0.25 * step
        elif ratio > 0.75 and step > 0.99 * radius:
            radius = min(2.0 * radius, max_radius)
        if ratio > 1e-4 and err_new.sum() <= err.sum():
            q, err = q_new, err_new
            iterates.append(q.copy())
            objective.append(float(err.sum()))
        if radius < STEP_TOL:
            break
    return q, err, it, iterates, objective


def _restart_points(chain):
    """Limit midpoint, then fixed-seed in-limit draws."""
    yield 0.5 * (chain.lower + chain.upper)
    rng = np.random.default_rng(0)
    while True:
        yield rng.uniform(chain.lower, chain.upper)


def retarget(
    chain,
    q0,
    targets,
    tol=1e-6,
    max_iter=100,
    trust_radius=0.5,
    max_radius=np.pi,
    damping=DAMPING,
    restarts=3,
):
    """Solve for joint angles placing every fingertip on its target.

    A descent ends when every finger's error is below ``tol`` (converged)
    or the step or trust region collapses below ``1e-10``. A descent that
    stalls unconverged (Gauss-Newton stops at a straight, limit-pinned
    finger, for instance) is retried from up to ``restarts`` other starts;
    all descents share the ``max_iter`` step budget and the lowest-error
    one is returned. Within a descent accepted steps never increase the sum
    of per-finger error norms, and every iterate respects the joint limits.
    """
    targets = np.asarray(targets, dtype=float).reshape(chain.n_fingers, 3)
    q = chain.check_config(np.asarray(q0, dtype=float).copy())
    starts = _restart_points(chain)
    best = None
    iterates, objective, attempt_starts = [], [], []
    used = 0
    for _ in range(restarts + 1):
        attempt_starts.append(len(iterates))
        q_end, err, steps, its, obj = _descend(
            chain, chain.clamp(q), targets, tol, max_iter - used, trust_radius, max_radius, damping
        )
        used += steps
        iterates += its
        objective += obj
        if best is None or err.sum() < best[1].sum():
            best = (q_end, err)
        if best[1].max() < tol or used >= max_iter:
            break
        q = next(starts)
    q, err = best
    residuals, _ = task_terms(chain, q, targets)
    return RetargetResult(q, residuals, rmse(residuals), used, bool(err.max() < tol), iterates, objective, attempt_starts)


@dataclass(eq=False)
class SequenceResult:
    q: np.ndarray  # (T, d)
    rmse: np.ndarray  # (T,)
    iterations: np.ndarray
    converged: np.ndarray


def retarget_sequence(chain, targets, q0=None, warm_start=True, **kwargs):
    """Retarget a (T, F, 3) target stream, warm-starting each frame."""
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 3 or len(targets) == 0:
        raise ValueError("target stream must be a non-empty (T, F, 3) array")
    start = chain.rest if q0 is None else np.asarray(q0, dtype=float)
    q = start
    Q, E, I, C = [], [], [], []
    for frame in targets:
        res = retarget(chain, q if warm_start else start, frame, **kwargs)
        q = res.q
        Q.append(res.q)
        E.append(res.rmse)
        I.append(res.iterations)
        C.append(res.converged)
    return SequenceResult(np.array(Q), np.array(E), np.array(I), np.array(C))


class Retargeter(BaseEstimator):
    """Estimator wrapper: ``predict`` maps fingertip target frames to joint angles.

    Parameters
    ----------
    chain : KinematicChain
        Robot hand model; its fingertip frames define the target layout.
    tol, max_iter, trust_radius, damping, restarts
        Passed to :func:`retarget`.
    warm_start : bool
        Start each frame from the previous frame's solution.
    """

    def __init__(self, chain=None, tol=1e-6, max_iter=100, trust_radius=0.5, damping=DAMPING, warm_start=True, restarts=3):
        self.chain = chain
        self.tol = tol
        self.max_iter = max_iter
        self.trust_radius = trust_radius
        self.damping = damping
        self.warm_start = warm_start
        self.restarts = restarts

    def fit(self, X=None, y=None):
        if not isinstance(self.chain, KinematicChain):
            raise ValueError("Retargeter needs a KinematicChain")
        if not self.tol > 0 or self.max_iter < 0 or not self.trust_radius > 0 or self.restarts < 0:
            raise ValueError("tol and trust_radius must be positive, max_iter and restarts non-negative")
        self.q_init_ = self.chain.rest
        self.n_fingers_ = self.chain.n_fingers
        return self

    def _targets(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X.reshape(len(X), -1, 3)
        if X.ndim != 3 or X.shape[1:] != (self.n_fingers_, 3):
            raise ValueError(f"targets must have shape (T, {self.n_fingers_}, 3)")
        if not np.all(np.isfinite(X)):
            raise ValueError("targets must be finite")
        return X

    def solve(self, X):
        check_is_fitted(self, "q_init_")
        return retarget_sequence(
            self.chain,
            self._targets(X),
            self.q_init_,
            warm_start=self.warm_start,
            tol=self.tol,
            max_iter=self.max_iter,
            trust_radius=self.trust_radius,
            damping=self.damping,
            restarts=self.restarts,
        )

    def predict(self, X):
        return self.solve(X).q

    def score(self, X, y=None):
        """Negative mean per-frame RMSE (meters)."""
        return -float(np.mean(self.solve(X).rmse))
