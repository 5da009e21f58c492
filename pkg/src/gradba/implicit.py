"""Gradients through the converged solver via the implicit function theorem.

At a stationary point of the robust energy, d(grad_X E)/d theta = 0 links the
sensitivity of the optimum to the observation-model parameters:

    dX*/dtheta = -H^-1 @ d2E/dX dtheta

so for a downstream loss L(X*),

    dL/dtheta = -(dL/dX*) @ H^-1 @ d2E/dX dtheta

realized as one adjoint solve H y = (dL/dX*)^T reusing the forward solver's
Schur elimination; the inverse Hessian is never formed. H is the
Gauss-Newton approximation J^T W J with IRLS weights frozen at the optimum,
and the mixed term is J^T W (d obs/d theta) because the projection jacobian
does not depend on theta. Temporal factors attach to the energy through the
observation model only, so they contribute nothing to either X-derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotAtOptimum
from .solver import (apply_step, exact_hessian_system, linearize,
                     optimize, schur_solve, schur_solve_rhs)


def max_rel_error(a, b, floor=1e-12):
    """max |a - b| over the larger of the two magnitudes (with a floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / denom)


def optimality_residual(problem, state, theta=None):
    """Infinity norm of the energy gradient over the free variables.

    Computed through the same IRLS-weighted linearization the solver uses, so
    the solver's gradient-tolerance termination bounds this quantity.
    """
    return linearize(problem, state, theta).gradient_inf_norm()


@dataclass
class ImplicitGradRequest:
    """Inputs of one implicit-gradient evaluation.

    Deliberately holds only the converged state, never a solver iterate
    history: the gradient depends on the fixed point alone.
    """

    problem: object
    state: object                 # converged state X*
    theta: np.ndarray
    dldx: np.ndarray              # tangent-space row vector over free variables
    gradient_tolerance: float = 1e-8
    linearization: object = None  # optional reuse of the last solver system
    hessian_mode: str = "exact"   # "exact" | "gauss_newton"


@dataclass
class ImplicitGradReport:
    dldtheta: np.ndarray
    solve_residual: float         # ||H y - (dL/dX*)^T||_inf
    hessian_condition: float      # ratio of extreme landmark-block eigenvalues


def implicit_gradient(request):
    """dL/dtheta for a loss with tangent gradient dL/dX* at the optimum.

    ``hessian_mode='exact'`` (the default) augments the Gauss-Newton H with
    the factor-local second-order residual terms; at zero residuals the two
    modes coincide, and at noisy optima only the exact mode tracks the true
    sensitivity of the solution to the oracle tolerances.
    """
    problem = request.problem
    theta = request.theta
    sys_ = request.linearization
    if sys_ is None:
        sys_ = linearize(problem, request.state, theta)
    res = sys_.gradient_inf_norm()
    if res > request.gradient_tolerance:
        raise NotAtOptimum(
            f"optimality residual {res:.3e} > tolerance {request.gradient_tolerance:.3e}")
    dldx = np.asarray(request.dldx, dtype=float).ravel()
    if dldx.shape != (sys_.layout.dim,):
        raise ValueError(f"dL/dX* must have {sys_.layout.dim} entries")

    if request.hessian_mode == "exact":
        hsys = exact_hessian_system(problem, request.state, theta, sys_)
    elif request.hessian_mode == "gauss_newton":
        hsys = sys_
    else:
        raise ValueError(f"unknown hessian_mode {request.hessian_mode!r}")
    y = schur_solve_rhs(hsys, 0.0, dldx)
    solve_residual = float(np.abs(hsys.matvec(y) - dldx).max()) if dldx.size else 0.0

    # dL/dtheta = -y^T J^T W (d obs/d theta), accumulated factor by factor
    np_ = sys_.layout.n_pose_params
    n_rec = len(sys_.rec_factor)
    jy = np.zeros((n_rec, 2))
    has_p = sys_.rec_pose_slot >= 0
    if has_p.any():
        yp = y[:np_].reshape(-1, 6)[sys_.rec_pose_slot[has_p]]
        jy[has_p] += np.einsum("kab,kb->ka", sys_.rec_Jp[has_p], yp)
    has_l = sys_.rec_lm_slot >= 0
    if has_l.any():
        yl = y[np_:].reshape(-1, 3)[sys_.rec_lm_slot[has_l]]
        jy[has_l] += np.einsum("kab,kb->ka", sys_.rec_Jl[has_l], yl)
    v = np.einsum("kab,kb->ka", sys_.rec_W, jy)
    if request.hessian_mode == "exact":
        # rho'' part of the mixed Hessian on the Huber outlier branch
        hub = problem.huber_mask[sys_.rec_factor]
        info = problem.info_stack[sys_.rec_factor]
        ie = np.einsum("kab,kb->ka", info, sys_.residuals)
        s = np.einsum("ka,ka->k", sys_.residuals, ie)
        delta = problem.huber_delta[sys_.rec_factor]
        outl = hub & (s > delta ** 2)
        if outl.any():
            rho2 = np.zeros(n_rec)
            rho2[outl] = -delta[outl] / (2.0 * s[outl] ** 1.5)
            a = np.einsum("ka,ka->k", jy, ie)
            v = v + 2.0 * (rho2 * a)[:, None] * ie
    dldtheta = np.zeros(problem.obs_model.theta_dim)
    for k in range(n_rec):
        K = problem.obs_model.observe_jacobian(
            int(sys_.rec_frame[k]), sys_.rec_track[k], theta)
        dldtheta -= v[k] @ K

    cond = 0.0
    if len(sys_.layout.free_lm_ids):
        eigs = np.linalg.eigvalsh(hsys.Hll)
        lo = float(eigs.min())
        cond = float(eigs.max() / lo) if lo > 0 else np.inf
    return ImplicitGradReport(dldtheta, solve_residual, cond)


# ---------------------------------------------------------------------------
# downstream losses
# ---------------------------------------------------------------------------

def fd_tangent_gradient(value_fn, state, layout, h=1e-6):
    """Central-difference gradient of a state loss in tangent coordinates."""
    g = np.zeros(layout.dim)
    for k in range(layout.dim):
        d = np.zeros(layout.dim)
        d[k] = h
        up = value_fn(apply_step(state, layout, d))
        dn = value_fn(apply_step(state, layout, -d))
        g[k] = (up - dn) / (2.0 * h)
    return g


class LandmarkTargetLoss:
    """L = ||landmark - target||^2 with an analytic tangent gradient."""

    def __init__(self, landmark_index, target):
        self.landmark_index = landmark_index
        self.target = np.asarray(target, dtype=float)

    def value(self, state):
        d = state.landmarks[self.landmark_index] - self.target
        return float(d @ d)

    def grad_tangent(self, state, layout):
        g = np.zeros(layout.dim)
        slot = layout.lm_slot[self.landmark_index]
        o = layout.lm_offset(slot)
        g[o:o + 3] = 2.0 * (state.landmarks[self.landmark_index] - self.target)
        return g


class PoseErrorLoss:
    """Gauge-aligned squared pose error against reference poses.

    Camera centers are similarity-aligned to the reference (Umeyama), then the
    loss sums squared aligned-position error and squared geodesic rotation
    angle. The tangent gradient is taken by central differences; the alignment
    is a smooth closed form, so this is accurate to O(h^2).
    """

    def __init__(self, ref_poses, align_mode="sim", rot_weight=1.0):
        self.ref_poses = [p.copy() for p in ref_poses]
        self.align_mode = align_mode
        self.rot_weight = rot_weight

    def value(self, state):
        from .alignment import align, apply_alignment
        from .geometry import quat_mul, quat_conj, quat_to_rotvec

        est = np.array([p.t for p in state.poses])
        ref = np.array([p.t for p in self.ref_poses])
        s, R, t = align(est, ref, self.align_mode)
        pos = apply_alignment(est, s, R, t)
        total = float(((pos - ref) ** 2).sum())
        if self.rot_weight:
            from .geometry import quat_from_matrix
            q_align = quat_from_matrix(R)
            for p, pref in zip(state.poses, self.ref_poses):
                q_al = quat_mul(q_align, p.q)
                w = quat_to_rotvec(quat_mul(q_al, quat_conj(pref.q)))
                total += self.rot_weight * float(w @ w)
        return total

    def grad_tangent(self, state, layout):
        return fd_tangent_gradient(self.value, state, layout)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def fd_gradient(problem, x0, theta, settings, loss, h=1e-5):
    """Central finite differences of theta -> L(X*(theta)), re-solving fully."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for k in range(theta.size):
        dt = np.zeros_like(theta)
        dt[k] = h
        xp, _ = optimize(problem, x0, theta + dt, settings)
        xm, _ = optimize(problem, x0, theta - dt, settings)
        g[k] = (loss.value(xp) - loss.value(xm)) / (2.0 * h)
    return g


def _fixed_schedule_solve(problem, x0, theta, n_iters, lam):
    """n_iters damped Gauss-Newton updates, every step applied (no gating).

    A smooth map of theta, suitable for numerical differentiation of the
    unrolled solve.
    """
    state = x0.copy()
    for _ in range(n_iters):
        sys_ = linearize(problem, state, theta)
        delta = schur_solve(sys_, lam)
        state = apply_step(state, sys_.layout, delta)
    return state


def unrolled_gradient_oracle(problem, x0, theta, settings, loss,
                             h=1e-5, n_iters=8, lam=1e-12):
    """Differentiate the unrolled solve numerically; test oracle only.

    Runs a fixed iteration schedule per perturbation so the map stays smooth.
    Restricted to small problems.
    """
    if problem.state.n_poses > 10 or problem.state.n_landmarks > 100:
        raise ValueError("unrolled oracle is restricted to small problems")
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for k in range(theta.size):
        dt = np.zeros_like(theta)
        dt[k] = h
        xp = _fixed_schedule_solve(problem, x0, theta + dt, n_iters, lam)
        xm = _fixed_schedule_solve(problem, x0, theta - dt, n_iters, lam)
        g[k] = (loss.value(xp) - loss.value(xm)) / (2.0 * h)
    return g
