from types import SimpleNamespace

import numpy as np
import pytest

import gradba.solver as solver_mod
from gradba.alignment import align, apply_alignment
from gradba.errors import Diverged, SingularSystem
from gradba.geometry import (CameraIntrinsics, Pose, projection_jacobians,
                             se3_exp, se3_retract)
from gradba.problem import (Problem, ReprojectionFactor, RobustKernel,
                            StateVector, StaticModel, total_energy)
from gradba.solver import (SolverSettings, apply_step, exact_hessian_system,
                           linearize, lm_step, optimize, schur_solve)

from conftest import build_ba_problem


def dense_reference(problem, state, theta=None):
    """Naive dense J^T W J / J^T W e assembly straight from the factor list."""
    theta = problem.theta0() if theta is None else theta
    from gradba.problem import residual, robust_weight
    lay_free_p = [i for i in range(state.n_poses) if not state.fixed_poses[i]]
    lay_free_l = [j for j in range(state.n_landmarks) if not state.fixed_landmarks[j]]
    pslot = {i: k for k, i in enumerate(lay_free_p)}
    lslot = {j: k for k, j in enumerate(lay_free_l)}
    dim = 6 * len(lay_free_p) + 3 * len(lay_free_l)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for f in problem.factors:
        e = residual(f, state, problem.intrinsics[f.frame], problem.obs_model, theta)
        Jp, Jx = projection_jacobians(state.poses[f.frame],
                                      problem.intrinsics[f.frame],
                                      state.landmarks[f.landmark])
        w = robust_weight(f.kernel, float(e @ f.info @ e))
        W = w * f.info
        J = np.zeros((2, dim))
        if f.frame in pslot:
            J[:, 6 * pslot[f.frame]:6 * pslot[f.frame] + 6] = -Jp
        if f.landmark in lslot:
            o = 6 * len(lay_free_p) + 3 * lslot[f.landmark]
            J[:, o:o + 3] = -Jx
        H += J.T @ W @ J
        g += J.T @ W @ e
    if problem.scale_prior is not None:
        sp = problem.scale_prior
        Ji, Jj = sp.jacobians(state)
        J = np.zeros((1, dim))
        if sp.i in pslot:
            J[:, 6 * pslot[sp.i]:6 * pslot[sp.i] + 6] = Ji
        if sp.j in pslot:
            J[:, 6 * pslot[sp.j]:6 * pslot[sp.j] + 6] = Jj
        H += sp.weight * (J.T @ J)
        g += sp.weight * sp.residual(state) * J.ravel()
    return H, g


class TestLinearize:
    def test_zero_residuals_zero_gradient(self):
        prob, x0, *_ = build_ba_problem(0, sigma=0.0, pose_noise=0.0,
                                        lm_noise=0.0)
        sys_ = linearize(prob, prob.state)
        assert np.abs(sys_.g).max() < 1e-9

    def test_matches_dense_naive_oracle(self):
        prob, x0, *_ = build_ba_problem(1, sigma=1.0,
                                        kernel=RobustKernel("huber", 2.0))
        sys_ = linearize(prob, x0)
        H_ref, g_ref = dense_reference(prob, x0)
        H = sys_.dense_hessian()
        scale = np.abs(H_ref).max()
        assert np.abs(H - H_ref).max() < 1e-12 * scale
        assert np.abs(sys_.g - g_ref).max() < 1e-12 * max(np.abs(g_ref).max(), 1.0)

    def test_duplicated_factor_doubles_contribution(self):
        prob, x0, *_ = build_ba_problem(2, n_cams=3, n_lms=8, sigma=0.5)
        f = prob.factors[5]
        prob2 = Problem(prob.state, prob.intrinsics,
                        list(prob.factors) + [f], prob.obs_model,
                        scale_prior=prob.scale_prior)
        H1, g1 = dense_reference(prob, x0)
        H2, g2 = dense_reference(prob2, x0)
        sys2 = linearize(prob2, x0)
        np.testing.assert_allclose(sys2.dense_hessian(), H2, atol=1e-9)
        # the difference between the two references is one factor's block
        sys1 = linearize(prob, x0)
        dH = sys2.dense_hessian() - sys1.dense_hessian()
        np.testing.assert_allclose(dH, H2 - H1, atol=1e-9)

    def test_matvec_matches_dense(self, rng):
        prob, x0, *_ = build_ba_problem(3, sigma=0.5)
        sys_ = linearize(prob, x0)
        H = sys_.dense_hessian()
        for _ in range(5):
            y = rng.normal(size=sys_.layout.dim)
            np.testing.assert_allclose(sys_.matvec(y), H @ y, rtol=1e-12,
                                       atol=1e-9)


class TestLmStep:
    def test_gauss_newton_matches_dense_solve(self):
        prob, x0, *_ = build_ba_problem(4, sigma=0.5)
        sys_ = linearize(prob, x0)
        H_ref, g_ref = dense_reference(prob, x0)
        delta = lm_step(sys_, 0.0)
        ref = np.linalg.solve(H_ref, -g_ref)
        assert np.abs(delta - ref).max() < 1e-10 * max(np.abs(ref).max(), 1.0)

    def test_scalar_hand_system(self):
        # J = [2], e = [4], lambda = 1, D = [2]: (4 + 4) d = -8 -> d = -1
        fake = SimpleNamespace(
            dense_hessian=lambda: np.array([[4.0]]),
            damping_scale=lambda: np.array([2.0]),
            g=np.array([8.0]))
        delta = lm_step(fake, 1.0)
        np.testing.assert_allclose(delta, [-1.0])

    def test_huge_damping_kills_step(self):
        prob, x0, *_ = build_ba_problem(5, sigma=0.5)
        sys_ = linearize(prob, x0)
        gn = lm_step(sys_, 0.0)
        tiny = lm_step(sys_, 1e12)
        assert np.linalg.norm(tiny) < 1e-8 * np.linalg.norm(gn)

    def test_negative_lambda_rejected(self):
        prob, x0, *_ = build_ba_problem(5)
        sys_ = linearize(prob, x0)
        with pytest.raises(ValueError):
            lm_step(sys_, -1.0)


class TestSchur:
    @pytest.mark.parametrize("lam", [0.0, 1e-4, 1.0])
    def test_matches_dense_over_seeds(self, lam):
        rng = np.random.default_rng(77)
        for _ in range(12):
            n_cams = int(rng.integers(2, 11))
            n_lms = int(rng.integers(8, 101))
            prob, x0, *_ = build_ba_problem(int(rng.integers(1 << 30)),
                                            n_cams=n_cams, n_lms=n_lms,
                                            sigma=0.5)
            sys_ = linearize(prob, x0)
            np.testing.assert_allclose(schur_solve(sys_, lam),
                                       lm_step(sys_, lam), atol=1e-8)

    def test_zero_coupling_reduces_to_pose_block(self):
        prob, x0, *_ = build_ba_problem(6, sigma=0.5)
        sys_ = linearize(prob, x0)
        sys_.Hpl = np.zeros_like(sys_.Hpl)
        lam = 1e-3
        delta = schur_solve(sys_, lam)
        np_ = sys_.layout.n_pose_params
        d2 = sys_.damping_scale() ** 2
        ref = np.linalg.solve(sys_.Hpp + lam * np.diag(d2[:np_]), -sys_.g[:np_])
        np.testing.assert_allclose(delta[:np_], ref, atol=1e-10)

    def test_two_cameras_one_landmark_dense(self):
        # 15-parameter system: both poses free plus one landmark; damped
        intr = CameraIntrinsics(120.0, 120.0, 0.0, 0.0)
        pa, pb = Pose(t=[-0.4, 0, 0]), Pose(t=[0.4, 0.1, 0])
        lm = np.array([[0.05, -0.1, 2.5]])
        from gradba.geometry import project
        obs = {(0, 0): project(pa, intr, lm[0]) + [0.4, -0.2],
               (1, 0): project(pb, intr, lm[0]) + [-0.1, 0.3]}
        state = StateVector([pa, pb], lm)
        prob = Problem(state, intr,
                       [ReprojectionFactor(0, 0, 0), ReprojectionFactor(1, 0, 0)],
                       StaticModel(obs))
        sys_ = linearize(prob, state)
        assert sys_.layout.dim == 15
        np.testing.assert_allclose(schur_solve(sys_, 0.5), lm_step(sys_, 0.5),
                                   atol=1e-10)

    def test_singular_landmark_block_raises(self):
        prob, x0, *_ = build_ba_problem(7, n_cams=3, n_lms=8)
        sys_ = linearize(prob, x0)
        sys_.Hll[2] = 0.0
        with pytest.raises(SingularSystem):
            schur_solve(sys_, 0.0)


class TestOptimize:
    def test_noise_free_recovery(self):
        prob, x0, gt_poses, gt_lms, _ = build_ba_problem(
            8, n_cams=6, n_lms=50, sigma=0.0)
        xs, rep = optimize(prob, x0)
        est = np.array([p.t for p in xs.poses])
        ref = np.array([p.t for p in gt_poses])
        s, R, t = align(est, ref, "sim")
        ate = np.sqrt(((apply_alignment(est, s, R, t) - ref) ** 2).sum(1).mean())
        assert ate < 1e-6
        assert rep.termination == "converged_gradient"

    def test_already_optimal_stops_immediately(self):
        prob, x0, *_ = build_ba_problem(9, sigma=0.0, pose_noise=0.0,
                                        lm_noise=0.0)
        xs, rep = optimize(prob, prob.state)
        assert rep.iterations <= 1
        assert rep.termination == "converged_gradient"

    def test_energy_monotone_over_20_noisy_solves(self):
        for seed in range(20):
            prob, x0, *_ = build_ba_problem(seed, sigma=1.0,
                                            kernel=RobustKernel("huber", 2.0))
            _, rep = optimize(prob, x0)
            diffs = np.diff(rep.energies)
            assert np.all(diffs <= 0.0), f"seed {seed}: energy increased"

    def test_final_gradient_below_tolerance(self):
        settings = SolverSettings()
        for seed in (0, 5, 11):
            prob, x0, *_ = build_ba_problem(seed, sigma=0.7)
            xs, rep = optimize(prob, x0, settings=settings)
            assert rep.final_gradient_norm <= settings.gradient_tolerance

    def test_gauge_invariance(self):
        prob, x0, gt_poses, gt_lms, _ = build_ba_problem(10, sigma=0.8)
        _, rep_a = optimize(prob, x0)
        g = se3_exp(np.array([0.2, -0.1, 0.3, 1.0, -2.0, 0.5]))
        poses_t = [g.compose(p) for p in gt_poses]
        lms_t = np.array([g.apply(p) for p in gt_lms])
        state_t = StateVector(poses_t, lms_t, fixed_poses=prob.state.fixed_poses)
        # same pixel observations: the projections are invariant under a
        # global transform applied to both cameras and points
        prob_t = Problem(state_t, prob.intrinsics, prob.factors, prob.obs_model,
                         scale_prior=prob.scale_prior)
        poses0_t = [g.compose(p) for p in x0.poses]
        lms0_t = np.array([g.apply(p) for p in x0.landmarks])
        x0_t = StateVector(poses0_t, lms0_t, fixed_poses=x0.fixed_poses)
        _, rep_b = optimize(prob_t, x0_t)
        assert abs(rep_a.final_energy - rep_b.final_energy) <= \
            1e-9 * max(rep_a.final_energy, 1.0)

    def test_divergence_after_persistent_singularity(self, monkeypatch):
        prob, x0, *_ = build_ba_problem(11, n_cams=3, n_lms=8)

        def always_singular(system, lam):
            raise SingularSystem("forced")

        monkeypatch.setattr(solver_mod, "schur_solve", always_singular)
        with pytest.raises(Diverged):
            solver_mod.optimize(prob, x0)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SolverSettings(lambda_up=1.0)
        with pytest.raises(ValueError):
            SolverSettings(gradient_tolerance=0.0)


class TestExactHessian:
    def test_matches_fd_of_gradient(self):
        for kernel in (None, RobustKernel("huber", 1.0)):
            prob, x0, *_ = build_ba_problem(12, n_cams=3, n_lms=10, sigma=1.0,
                                            kernel=kernel)
            sys_ = linearize(prob, x0)
            hsys = exact_hessian_system(prob, x0, prob.theta0(), sys_)
            Ha = hsys.dense_hessian()
            lay = sys_.layout
            h = 1e-6
            Hf = np.zeros((lay.dim, lay.dim))
            for k in range(lay.dim):
                d = np.zeros(lay.dim)
                d[k] = h
                gp = linearize(prob, apply_step(x0, lay, d), prob.theta0()).g
                gm = linearize(prob, apply_step(x0, lay, -d), prob.theta0()).g
                Hf[:, k] = (gp - gm) / (2 * h)
            Hf = 0.5 * (Hf + Hf.T)
            assert np.abs(Ha - Hf).max() / np.abs(Hf).max() < 1e-6
