"""Factor-graph data model: states, reprojection factors, observation models.

The residual convention is ``e = observe(frame, track) - project(pose, point)``:
the parameterized observation model predicts where a track is seen, and the
geometric projection is subtracted from it.

Robust kernels are realized as IRLS weights that multiply the information
matrix inside the normal equations; only the Huber kernel is shipped.

A Problem is immutable once validated; residual and energy evaluation is a
pure map-reduce over factors with a fixed summation order, so results are
reproducible and distinct problems can be evaluated concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import temporal
from .errors import CheiralityViolation
from .geometry import CameraIntrinsics, Pose, project, so3_hat

DEFAULT_HUBER_DELTA = 2.0  # pixels


# ---------------------------------------------------------------------------
# robust kernel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustKernel:
    kind: str = "none"  # "none" | "huber"
    delta: float = DEFAULT_HUBER_DELTA

    def __post_init__(self):
        if self.kind not in ("none", "huber"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "huber" and self.delta <= 0:
            raise ValueError("huber delta must be positive")


def robust_weight(kernel, s):
    """IRLS weight for a squared Mahalanobis residual s; multiplies Sigma^-1."""
    if kernel is None or kernel.kind == "none":
        return 1.0
    root = np.sqrt(s)
    if root <= kernel.delta:
        return 1.0
    return kernel.delta / root


def robust_rho(kernel, s):
    """Robust cost of a squared Mahalanobis residual s."""
    if kernel is None or kernel.kind == "none":
        return float(s)
    if s <= kernel.delta ** 2:
        return float(s)
    return float(2.0 * kernel.delta * np.sqrt(s) - kernel.delta ** 2)


# ---------------------------------------------------------------------------
# state vector
# ---------------------------------------------------------------------------

class StateVector:
    """Poses first, landmarks second, with per-variable gauge-fix flags."""

    def __init__(self, poses, landmarks, fixed_poses=None, fixed_landmarks=None):
        self.poses = [p.copy() for p in poses]
        self.landmarks = np.array(landmarks, dtype=float).reshape(-1, 3)
        n, m = len(self.poses), len(self.landmarks)
        self.fixed_poses = (np.zeros(n, dtype=bool) if fixed_poses is None
                            else np.asarray(fixed_poses, dtype=bool).copy())
        self.fixed_landmarks = (np.zeros(m, dtype=bool) if fixed_landmarks is None
                                else np.asarray(fixed_landmarks, dtype=bool).copy())
        if self.fixed_poses.shape != (n,) or self.fixed_landmarks.shape != (m,):
            raise ValueError("fixed-mask shapes do not match the variables")

    @property
    def n_poses(self):
        return len(self.poses)

    @property
    def n_landmarks(self):
        return len(self.landmarks)

    def copy(self):
        return StateVector(self.poses, self.landmarks,
                           self.fixed_poses, self.fixed_landmarks)


# ---------------------------------------------------------------------------
# factors and priors
# ---------------------------------------------------------------------------

@dataclass
class ReprojectionFactor:
    frame: int
    track: int
    landmark: int
    cov: np.ndarray = None          # 2x2 observation covariance, pixels^2
    kernel: RobustKernel = field(default_factory=RobustKernel)

    def __post_init__(self):
        self.cov = np.eye(2) if self.cov is None else np.asarray(self.cov, dtype=float)
        if self.cov.shape != (2, 2) or np.abs(self.cov - self.cov.T).max() > 1e-12:
            raise ValueError("covariance must be 2x2 symmetric")
        w = np.linalg.eigvalsh(self.cov)
        if w.min() <= 0:
            raise ValueError("covariance must be positive definite")
        self.info = np.linalg.inv(self.cov)


@dataclass
class ScalePrior:
    """Pins the distance between two camera centers (monocular scale gauge).

    The weight is deliberately moderate: the gradient entry of this prior is
    weight * r * dr/dx with rounding noise ~ weight * eps * |t|, so an overly
    stiff prior puts a floor under the reachable stationarity residual.
    """

    i: int
    j: int
    target: float
    weight: float = 1e4  # information of the 1-d residual

    def residual(self, state):
        d = state.poses[self.j].t - state.poses[self.i].t
        return float(np.linalg.norm(d)) - self.target

    def jacobians(self, state):
        """d residual / d tangent for poses i and j (1x6 each)."""
        d = state.poses[self.j].t - state.poses[self.i].t
        norm = np.linalg.norm(d)
        u = d / norm if norm > 0 else np.zeros(3)
        Ji = np.zeros((1, 6))
        Jj = np.zeros((1, 6))
        # translation of a retracted pose: t' = R_d t + V v, so dt/dw = -[t]x, dt/dv = I
        Jj[0, :3] = -u @ so3_hat(state.poses[self.j].t)
        Jj[0, 3:] = u
        Ji[0, :3] = u @ so3_hat(state.poses[self.i].t)
        Ji[0, 3:] = -u
        return Ji, Jj


# ---------------------------------------------------------------------------
# observation models
# ---------------------------------------------------------------------------

class ObservationModel:
    """Differentiable map (frame, track, theta) -> predicted pixel."""

    theta_dim = 0

    def theta0(self):
        return np.zeros(self.theta_dim)

    def observe(self, frame, track, theta):
        raise NotImplementedError

    def observe_jacobian(self, frame, track, theta):
        """2 x theta_dim derivative of observe w.r.t. theta."""
        raise NotImplementedError

    def observe_all(self, frames, tracks, theta):
        """Stacked predictions for parallel (frame, track) arrays."""
        return np.array([self.observe(f, t, theta) for f, t in zip(frames, tracks)])


class StaticModel(ObservationModel):
    """Fixed stored pixels; theta is empty."""

    def __init__(self, observations):
        self.observations = {k: np.asarray(v, dtype=float) for k, v in observations.items()}

    def observe(self, frame, track, theta=None):
        return self.observations[(frame, track)].copy()

    def observe_jacobian(self, frame, track, theta=None):
        return np.zeros((2, 0))


class TrackBiasModel(ObservationModel):
    """Stored pixels plus one learned 2-vector bias per track."""

    def __init__(self, observations, track_ids, theta_init=None):
        self.observations = {k: np.asarray(v, dtype=float) for k, v in observations.items()}
        self.track_ids = list(track_ids)
        self.track_slot = {t: i for i, t in enumerate(self.track_ids)}
        self.theta_dim = 2 * len(self.track_ids)
        self._theta0 = (np.zeros(self.theta_dim) if theta_init is None
                        else np.asarray(theta_init, dtype=float).copy())
        if self._theta0.shape != (self.theta_dim,):
            raise ValueError("theta_init must hold one 2-vector per track")

    def theta0(self):
        return self._theta0.copy()

    def observe(self, frame, track, theta):
        s = self.track_slot[track]
        return self.observations[(frame, track)] + theta[2 * s:2 * s + 2]

    def observe_jacobian(self, frame, track, theta):
        J = np.zeros((2, self.theta_dim))
        s = self.track_slot[track]
        J[0, 2 * s] = 1.0
        J[1, 2 * s + 1] = 1.0
        return J


class DescriptorFieldModel(ObservationModel):
    """Soft-argmax over a similarity map built from learned descriptor grids.

    theta holds one flattened H x W x C descriptor grid per track. The
    predicted pixel is the patch origin plus the similarity-weighted mean cell
    coordinate; the similarity map compares the grid against a fixed reference
    descriptor per track. Temperature is fixed at one: the similarity map is
    already exponential.
    """

    def __init__(self, track_ids, grids, refs, origins):
        self.track_ids = list(track_ids)
        self.grid_shape = {t: np.asarray(grids[t]).shape for t in self.track_ids}
        self.refs = {t: np.asarray(refs[t], dtype=float) for t in self.track_ids}
        self.origins = {k: np.asarray(v, dtype=float) for k, v in origins.items()}
        self._grids0 = {t: np.asarray(grids[t], dtype=float) for t in self.track_ids}
        self._offsets = {}
        off = 0
        for t in self.track_ids:
            size = int(np.prod(self.grid_shape[t]))
            self._offsets[t] = (off, off + size)
            off += size
        self.theta_dim = off

    def theta0(self):
        return np.concatenate([self._grids0[t].ravel() for t in self.track_ids])

    def _grid(self, track, theta):
        a, b = self._offsets[track]
        return theta[a:b].reshape(self.grid_shape[track])

    def _softargmax(self, track, theta):
        grid = self._grid(track, theta)
        sim = temporal.similarity_map(grid, self.refs[track])
        s = sim.sum()
        H, W = sim.shape
        xs = np.arange(W)
        ys = np.arange(H)
        u = float((sim.sum(axis=0) @ xs) / s)
        v = float((sim.sum(axis=1) @ ys) / s)
        return grid, sim, s, u, v

    def observe(self, frame, track, theta):
        _, _, _, u, v = self._softargmax(track, theta)
        return self.origins[(frame, track)] + np.array([u, v])

    def observe_all(self, frames, tracks, theta):
        out = np.empty((len(frames), 2))
        cache = {}
        for k, (f, t) in enumerate(zip(frames, tracks)):
            if t not in cache:
                _, _, _, u, v = self._softargmax(t, theta)
                cache[t] = np.array([u, v])
            out[k] = self.origins[(f, t)] + cache[t]
        return out

    def observe_jacobian(self, frame, track, theta):
        grid, sim, s, u, v = self._softargmax(track, theta)
        H, W, _ = grid.shape
        diff = grid - self.refs[track]
        r = np.linalg.norm(diff, axis=2)
        unit = np.where(r[..., None] > 1e-12, diff / np.where(r > 1e-12, r, 1.0)[..., None], 0.0)
        dsim_dgrid = -sim[..., None] * unit            # dC(y,x)/dG(y,x,c)
        xs = np.arange(W)[None, :, None]
        ys = np.arange(H)[:, None, None]
        du = ((xs - u) / s) * dsim_dgrid               # d u / dG
        dv = ((ys - v) / s) * dsim_dgrid
        J = np.zeros((2, self.theta_dim))
        a, b = self._offsets[track]
        J[0, a:b] = du.ravel()
        J[1, a:b] = dv.ravel()
        return J


# ---------------------------------------------------------------------------
# temporal attachment
# ---------------------------------------------------------------------------

@dataclass
class TemporalObservation:
    """One track inside an attached transition.

    The chained endpoint is produced by the observation model at (frame,
    track); the long-baseline endpoint and any dense descriptor data are
    frozen constants supplied with the scene.
    """

    frame: int
    track: int
    long_endpoint: np.ndarray
    grid: np.ndarray = None     # optional H x W x C patch for the dense losses
    origin: np.ndarray = None   # image pixel of grid cell (0, 0)


@dataclass
class TemporalAttachment:
    terms: temporal.TemporalEnergy
    transitions: list  # list of lists of TemporalObservation

    def build(self, obs_model, theta):
        """Materialize Transition structures with model-predicted endpoints."""
        out = []
        for obs_list in self.transitions:
            pairs = []
            dense = []
            for k, ob in enumerate(obs_list):
                rec = obs_model.observe(ob.frame, ob.track, theta)
                pairs.append(temporal.TrackPair(rec, np.asarray(ob.long_endpoint, float)))
                if ob.grid is not None:
                    dense.append(temporal.build_dense_item(
                        k, ob.grid, ob.origin, ob.long_endpoint))
            out.append(temporal.Transition(pairs, dense))
        return out


# ---------------------------------------------------------------------------
# problem
# ---------------------------------------------------------------------------

class Problem:
    """A reprojection factor graph with optional temporal terms."""

    def __init__(self, state, intrinsics, factors, obs_model,
                 temporal_terms=None, scale_prior=None):
        self.state = state
        if isinstance(intrinsics, CameraIntrinsics):
            intrinsics = [intrinsics] * state.n_poses
        self.intrinsics = list(intrinsics)
        self.factors = list(factors)
        self.obs_model = obs_model
        self.temporal_terms = temporal_terms
        self.scale_prior = scale_prior
        self.validate()

    def validate(self):
        n, m = self.state.n_poses, self.state.n_landmarks
        if len(self.intrinsics) != n:
            raise ValueError("need one intrinsics entry per pose")
        per_track = {}
        free_track = {}
        for f in self.factors:
            if not (0 <= f.frame < n and 0 <= f.landmark < m):
                raise ValueError(f"factor indices out of range: {f.frame}, {f.landmark}")
            per_track.setdefault(f.track, set()).add(f.frame)
            free_track[f.track] = not self.state.fixed_landmarks[f.landmark]
        for track, frames in per_track.items():
            # single-frame tracks are fine when the landmark is held fixed
            # (pose-only problems); a free landmark needs two views
            if free_track[track] and len(frames) < 2:
                raise ValueError(f"track {track} observed in fewer than 2 frames")
        self._build_cache()

    def _build_cache(self):
        """Per-factor arrays; the factor list is immutable after validation."""
        nf = len(self.factors)
        self.frame_idx = np.array([f.frame for f in self.factors], dtype=int)
        self.track_idx = [f.track for f in self.factors]
        self.lm_idx = np.array([f.landmark for f in self.factors], dtype=int)
        self.info_stack = (np.stack([f.info for f in self.factors])
                           if nf else np.zeros((0, 2, 2)))
        self.huber_mask = np.array(
            [f.kernel is not None and f.kernel.kind == "huber" for f in self.factors],
            dtype=bool)
        self.huber_delta = np.array(
            [f.kernel.delta if (f.kernel is not None and f.kernel.kind == "huber") else np.inf
             for f in self.factors])
        self.by_frame = {i: np.flatnonzero(self.frame_idx == i)
                         for i in np.unique(self.frame_idx)}

    def theta0(self):
        return self.obs_model.theta0()


def evaluate_residuals(problem, state, theta):
    """Residuals, squared Mahalanobis norms and cheirality mask, vectorized.

    Inactive rows (landmark behind the camera) have zero residual and are
    excluded via the returned mask.
    """
    from .geometry import DEPTH_EPS, project_many

    nf = len(problem.factors)
    preds = problem.obs_model.observe_all(problem.frame_idx, problem.track_idx, theta)
    e = np.zeros((nf, 2))
    active = np.zeros(nf, dtype=bool)
    for i, idx in problem.by_frame.items():
        pix, c = project_many(state.poses[i], problem.intrinsics[i],
                              state.landmarks[problem.lm_idx[idx]])
        ok = c[:, 2] > DEPTH_EPS
        active[idx] = ok
        e[idx[ok]] = preds[idx[ok]] - pix[ok]
    s = np.einsum("ka,kab,kb->k", e, problem.info_stack, e)
    return e, s, active


def residual(factor, state, intr, obs_model, theta):
    """e = predicted observation - projection, in pixels.

    Raises CheiralityViolation when the landmark is behind the camera; the
    solver soft-deactivates such factors for the current linearization.
    """
    pred = obs_model.observe(factor.frame, factor.track, theta)
    proj = project(state.poses[factor.frame], intr, state.landmarks[factor.landmark])
    return pred - proj


def factor_energy(factor, state, intr, obs_model, theta):
    try:
        e = residual(factor, state, intr, obs_model, theta)
    except CheiralityViolation:
        return 0.0, False
    s = float(e @ factor.info @ e)
    return robust_rho(factor.kernel, s), True


def total_energy(problem, state, theta=None):
    """Robust reprojection energy plus gauge priors plus temporal terms."""
    theta = problem.theta0() if theta is None else theta
    _, s, active = evaluate_residuals(problem, state, theta)
    with np.errstate(invalid="ignore"):
        rho = np.where(problem.huber_mask & (s > problem.huber_delta ** 2),
                       2.0 * problem.huber_delta * np.sqrt(s) - problem.huber_delta ** 2,
                       s)
    total = float(rho[active].sum())
    if problem.scale_prior is not None:
        r = problem.scale_prior.residual(state)
        total += problem.scale_prior.weight * r * r
    if problem.temporal_terms is not None and problem.temporal_terms.transitions:
        terms = problem.temporal_terms.terms
        if terms.lambda_t != 0.0:
            transitions = problem.temporal_terms.build(problem.obs_model, theta)
            total += terms.lambda_t * temporal.temporal_energy(terms, transitions).value
    return total


def temporal_theta_gradient(problem, theta):
    """d(lambda_t * sum phi)/d theta through the model-predicted endpoints."""
    att = problem.temporal_terms
    if att is None or not att.transitions or att.terms.lambda_t == 0.0:
        return np.zeros(problem.obs_model.theta_dim)
    transitions = att.build(problem.obs_model, theta)
    res = temporal.temporal_energy(att.terms, transitions)
    g = np.zeros(problem.obs_model.theta_dim)
    for obs_list, gep in zip(att.transitions, res.grad_endpoints):
        for k, ob in enumerate(obs_list):
            J = problem.obs_model.observe_jacobian(ob.frame, ob.track, theta)
            g += gep[k] @ J
    return att.terms.lambda_t * g
