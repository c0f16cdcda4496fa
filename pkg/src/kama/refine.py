"""First-order refinement of an articulated fit.

Minimises

    L = w2d * L2D + omega1 * L3D + omega3 * L_pose + omega2 * L_shape

over the axis-angle pose, shape coefficients, global scale and translation
with Adam.  Every term depends on the mesh only through the regressed
keypoints, so the objective and its analytic gradient are evaluated on the
``K x J`` reduced model instead of the full mesh.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .articulate import FitState, KeypointSet
from .errors import BehindCamera, NonFinite, SizeMismatch
from .geom3d import CameraIntrinsics, axis_angle_matrix_jacobian, axis_angle_to_matrix
from .model import Pose, SkinnedModel, forward_kinematics_matrices
from .priors import QuadraticPosePrior

log = logging.getLogger(__name__)

MIN_SCALE = 1e-4
TERMS = ("l2d", "l3d", "pose", "shape")


@dataclass(frozen=True)
class RefineConfig:
    omega1: float = 500.0
    omega2: float = 4.78
    omega3: float = 5.0
    weight_2d: float = 1.0
    iterations: int = 100
    step_size: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_pose: bool = False
    freeze_shape: bool = False
    freeze_scale: bool = False
    freeze_translation: bool = False

    def __post_init__(self):
        if min(self.omega1, self.omega2, self.omega3, self.weight_2d) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass
class Params:
    """Flat optimisation variables."""

    rotvecs: np.ndarray
    beta: np.ndarray
    scale: float
    translation: np.ndarray

    @classmethod
    def from_state(cls, state: FitState) -> "Params":
        return cls(state.pose.axis_angle(), state.beta.copy(), float(state.scale),
                   state.translation.copy())

    def to_state(self, template: FitState | None = None) -> FitState:
        sources = template.per_joint_source if template is not None else ()
        return FitState(Pose.from_axis_angle(self.rotvecs), self.beta.copy(), self.scale,
                        self.translation.copy(), sources)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.rotvecs.ravel(), self.beta, [self.scale], self.translation])

    @classmethod
    def unpack(cls, x: np.ndarray, num_joints: int, num_betas: int) -> "Params":
        n = 3 * num_joints
        return cls(x[:n].reshape(num_joints, 3).copy(), x[n:n + num_betas].copy(),
                   float(x[n + num_betas]), x[n + num_betas + 1:].copy())


@dataclass
class Gradient:
    """Gradient with respect to each parameter block."""

    rotvecs: np.ndarray
    beta: np.ndarray
    scale: float
    translation: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.rotvecs.ravel(), self.beta, [self.scale], self.translation])

    def __add__(self, other: "Gradient") -> "Gradient":
        return Gradient(self.rotvecs + other.rotvecs, self.beta + other.beta,
                        self.scale + other.scale, self.translation + other.translation)

    def __mul__(self, c: float) -> "Gradient":
        return Gradient(c * self.rotvecs, c * self.beta, c * self.scale, c * self.translation)

    __rmul__ = __mul__


def _zero_grad(J, B):
    return Gradient(np.zeros((J, 3)), np.zeros(B), 0.0, np.zeros(3))


class Objective:
    """The refinement objective for one frame.

    ``K_cam`` may be ``None``; the reprojection term is then zero.  Targets for
    the reprojection term are ``X.projected_2d`` when present, otherwise the
    projections of ``X.positions``.
    """

    def __init__(self, model: SkinnedModel, X: KeypointSet, K_cam: Optional[CameraIntrinsics],
                 config: RefineConfig | None = None, prior=None):
        if len(X) != model.tree.num_keypoints:
            raise SizeMismatch(f"expected {model.tree.num_keypoints} keypoints, got {len(X)}")
        self.model = model
        self.X = X
        self.K_cam = K_cam
        self.config = config or RefineConfig()
        self.prior = prior if prior is not None else QuadraticPosePrior()
        self.psi = X.confidence
        self.targets_2d = None
        if K_cam is not None:
            if X.projected_2d is not None:
                self.targets_2d = X.projected_2d
            else:
                from .geom3d import perspective_project
                self.targets_2d = perspective_project(K_cam, X.positions)
        self._mass = model._reduced[0]

    @property
    def weights(self) -> dict[str, float]:
        c = self.config
        return {"l2d": c.weight_2d, "l3d": c.omega1, "pose": c.omega3, "shape": c.omega2}

    def _forward(self, p: Params):
        local = axis_angle_to_matrix(p.rotvecs)
        fk = forward_kinematics_matrices(self.model.tree, local)
        q = self.model.keypoint_offsets(p.beta)
        Y = np.einsum("jab,kjb->ka", fk.rotations, q) + self._mass @ fk.positions
        return local, fk, q, Y

    def _l2d(self, xhat, need_grad):
        if self.targets_2d is None:
            return 0.0, np.zeros_like(xhat)
        K = self.K_cam
        z = xhat[:, 2]
        if np.any(~(z > 1e-6)):
            raise BehindCamera("a model keypoint is at or behind the camera plane")
        u = K.fx * xhat[:, 0] / z + K.cx
        v = K.fy * xhat[:, 1] / z + K.cy
        ru = u - self.targets_2d[:, 0]
        rv = v - self.targets_2d[:, 1]
        val = float(np.sum(self.psi * (ru * ru + rv * rv)))
        if not need_grad:
            return val, None
        g = np.empty_like(xhat)
        g[:, 0] = 2 * self.psi * ru * K.fx / z
        g[:, 1] = 2 * self.psi * rv * K.fy / z
        g[:, 2] = -2 * self.psi * (ru * K.fx * xhat[:, 0] + rv * K.fy * xhat[:, 1]) / (z * z)
        return val, g

    def _l3d(self, xhat, need_grad):
        d = xhat - self.X.positions
        val = float(np.sum(self.psi * np.sum(d * d, axis=1)))
        return val, (2 * self.psi[:, None] * d if need_grad else None)

    def _backprop(self, p: Params, local, fk, q, Y, gx) -> Gradient:
        """Pull a keypoint gradient ``dL/dxhat`` back to the parameters."""
        tree = self.model.tree
        gY = p.scale * gx
        GR = np.einsum("ka,kjb->jab", gY, q)
        gP = self._mass.T @ gY
        shape_moment = self.model._reduced[2]
        g_beta = np.einsum("ka,jac,kjcb->b", gY, fk.rotations, shape_moment)
        rest = tree.joint_positions
        d_local = np.empty_like(local)
        for j in range(tree.num_joints - 1, 0, -1):
            par = tree.parents[j]
            d_local[j] = fk.rotations[par].T @ GR[j]
            GR[par] += GR[j] @ local[j].T + np.outer(gP[j], rest[j] - rest[par])
            gP[par] += gP[j]
        d_local[0] = GR[0]
        jac = axis_angle_matrix_jacobian(p.rotvecs)
        g_rot = np.einsum("jab,jiab->ji", d_local, jac)
        return Gradient(g_rot, g_beta, float(np.sum(gx * Y)), gx.sum(axis=0))

    def evaluate(self, p: Params, need_grad: bool = True):
        """Return ``({term: value}, {term: Gradient})`` for the raw, unweighted terms."""
        local, fk, q, Y = self._forward(p)
        xhat = p.scale * Y + p.translation
        J, B = len(p.rotvecs), len(p.beta)
        l2d, g2d = self._l2d(xhat, need_grad)
        l3d, g3d = self._l3d(xhat, need_grad)
        values = {"l2d": l2d, "l3d": l3d, "pose": self.prior.value(p.rotvecs),
                  "shape": float(np.dot(p.beta, p.beta))}
        if not need_grad:
            return values, None
        grads = {
            "l2d": self._backprop(p, local, fk, q, Y, g2d),
            "l3d": self._backprop(p, local, fk, q, Y, g3d),
            "pose": replace(_zero_grad(J, B), rotvecs=self.prior.grad(p.rotvecs)),
            "shape": replace(_zero_grad(J, B), beta=2.0 * p.beta),
        }
        return values, grads

    def total(self, values: dict[str, float]) -> float:
        w = self.weights
        return float(sum(w[t] * values[t] for t in TERMS))

    def value_and_grad(self, p: Params) -> tuple[float, Gradient]:
        """Weighted total and its gradient, with frozen blocks zeroed."""
        local, fk, q, Y = self._forward(p)
        xhat = p.scale * Y + p.translation
        l2d, g2d = self._l2d(xhat, True)
        l3d, g3d = self._l3d(xhat, True)
        w = self.weights
        pose_v = self.prior.value(p.rotvecs)
        total = w["l2d"] * l2d + w["l3d"] * l3d + w["pose"] * pose_v + w["shape"] * float(np.dot(p.beta, p.beta))
        g = self._backprop(p, local, fk, q, Y, w["l2d"] * g2d + w["l3d"] * g3d)
        g.rotvecs = g.rotvecs + w["pose"] * self.prior.grad(p.rotvecs)
        g.beta = g.beta + w["shape"] * 2.0 * p.beta
        return float(total), self.apply_freeze(g)

    def apply_freeze(self, g: Gradient) -> Gradient:
        c = self.config
        if c.freeze_pose:
            g.rotvecs = np.zeros_like(g.rotvecs)
        if c.freeze_shape:
            g.beta = np.zeros_like(g.beta)
        if c.freeze_scale:
            g.scale = 0.0
        if c.freeze_translation:
            g.translation = np.zeros_like(g.translation)
        return g


# Functional surface -------------------------------------------------------

def loss_2d(state: FitState, model: SkinnedModel, X: KeypointSet, K_cam: CameraIntrinsics) -> float:
    return Objective(model, X, K_cam).evaluate(Params.from_state(state), need_grad=False)[0]["l2d"]


def loss_3d(state: FitState, model: SkinnedModel, X: KeypointSet) -> float:
    return Objective(model, X, None).evaluate(Params.from_state(state), need_grad=False)[0]["l3d"]


def prior_pose(state: FitState, prior=None) -> float:
    prior = prior if prior is not None else QuadraticPosePrior()
    return prior.value(state.pose.axis_angle())


def prior_shape(state: FitState) -> float:
    return float(np.dot(state.beta, state.beta))


def total_loss(state: FitState, model: SkinnedModel, X: KeypointSet, K_cam: Optional[CameraIntrinsics],
               config: RefineConfig | None = None, prior=None) -> float:
    obj = Objective(model, X, K_cam, config, prior)
    return obj.total(obj.evaluate(Params.from_state(state), need_grad=False)[0])


def gradient(state: FitState, model: SkinnedModel, X: KeypointSet, K_cam: Optional[CameraIntrinsics],
             config: RefineConfig | None = None, prior=None, term: str | None = None) -> Gradient:
    """Gradient of the weighted total, or of one raw term when ``term`` is given."""
    obj = Objective(model, X, K_cam, config, prior)
    p = Params.from_state(state)
    if term is None:
        _, g = obj.value_and_grad(p)
    else:
        if term not in TERMS:
            raise ValueError(f"unknown loss term {term!r}; expected one of {TERMS}")
        g = obj.apply_freeze(obj.evaluate(p)[1][term])
    if not np.all(np.isfinite(g.pack())):
        raise NonFinite("gradient has non-finite components")
    return g


# Optimiser ----------------------------------------------------------------

@dataclass
class RefineResult:
    state: FitState
    trace: list[float]
    initial_loss: float
    best_loss: float
    best_iteration: int
    diagnostic: str = ""
    terms: dict[str, float] = field(default_factory=dict)


def _wrap_rotvecs(rv: np.ndarray) -> np.ndarray:
    # same rotation, angle folded back into [0, pi]
    ang = np.linalg.norm(rv, axis=1)
    over = ang > np.pi
    if np.any(over):
        rv = rv.copy()
        rv[over] *= (1.0 - 2.0 * np.pi / ang[over])[:, None]
    return rv


def refine(initial: FitState, model: SkinnedModel, X: KeypointSet, K_cam: Optional[CameraIntrinsics],
           config: RefineConfig | None = None, prior=None) -> RefineResult:
    """Adam on the full objective; returns the lowest-loss iterate seen."""
    cfg = config or RefineConfig()
    obj = Objective(model, X, K_cam, cfg, prior)
    J, B = model.tree.num_joints, model.num_betas
    p = Params.from_state(initial)
    x = p.pack()
    loss, g = obj.value_and_grad(p)
    if not np.isfinite(loss):
        raise NonFinite(f"initial loss is not finite ({loss})")
    best_x, best_loss, best_it = x.copy(), loss, 0
    initial_loss = loss
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    trace: list[float] = []
    diagnostic = ""
    for it in range(1, cfg.iterations + 1):
        gv = g.pack()
        m = b1 * m + (1 - b1) * gv
        v = b2 * v + (1 - b2) * gv * gv
        step = cfg.step_size * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + cfg.adam_eps)
        x = x - step
        p = Params.unpack(x, J, B)
        p.rotvecs = _wrap_rotvecs(p.rotvecs)
        p.scale = max(p.scale, MIN_SCALE)
        x = p.pack()
        try:
            loss, g = obj.value_and_grad(p)
        except BehindCamera as exc:
            diagnostic = f"iteration {it}: {exc}"
            break
        if not (np.isfinite(loss) and np.all(np.isfinite(g.pack()))):
            diagnostic = f"iteration {it}: non-finite loss or gradient"
            break
        trace.append(loss)
        if loss < best_loss:
            best_x, best_loss, best_it = x.copy(), loss, it
    if diagnostic:
        log.warning("refinement stopped early: %s", diagnostic)
    best = Params.unpack(best_x, J, B)
    state = best.to_state(initial)
    values, _ = obj.evaluate(best, need_grad=False)
    return RefineResult(state, trace, initial_loss, best_loss, best_it, diagnostic, values)
