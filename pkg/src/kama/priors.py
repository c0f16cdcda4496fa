"""Pose and shape priors for refinement.

A pose prior exposes ``value(rotvecs)`` and ``grad(rotvecs)`` over the full
``(J, 3)`` axis-angle pose.  The root joint carries the global orientation and
is never penalised.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import PriorLoadError
from .model import KinematicTree


class QuadraticPosePrior:
    """Squared axis-angle norm of every non-root joint (pull towards rest)."""

    kind = "quadratic_to_rest"

    def value(self, rotvecs: np.ndarray) -> float:
        rv = rotvecs[1:]
        return float(np.sum(rv * rv))

    def grad(self, rotvecs: np.ndarray) -> np.ndarray:
        g = 2.0 * rotvecs
        g[0] = 0.0
        return g


class GaussianMixturePosePrior:
    """Negative log-density of a Gaussian mixture over stacked joint rotvecs.

    ``precisions_cholesky[g]`` is a lower-triangular ``L`` with precision
    ``L @ L.T`` (or, in 2D form, the diagonal of ``L``).
    """

    kind = "gaussian_mixture"

    def __init__(self, weights, means, precisions_cholesky, joints: Sequence[int]):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        chol = np.asarray(precisions_cholesky, dtype=float)
        G, D = self.means.shape
        if chol.shape == (G, D):
            chol = np.stack([np.diag(c) for c in chol])
        self.chol = chol
        self.joints = np.asarray(joints, dtype=int)
        self.precisions = chol @ np.swapaxes(chol, 1, 2)
        self._log_norm = (np.log(self.weights) - 0.5 * D * np.log(2.0 * np.pi)
                          + np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _log_components(self, rotvecs):
        x = rotvecs[self.joints].reshape(-1)
        diff = x[None] - self.means
        z = np.einsum("gd,gde->ge", diff, self.chol)
        return self._log_norm - 0.5 * np.sum(z * z, axis=1), diff

    def value(self, rotvecs: np.ndarray) -> float:
        logc, _ = self._log_components(rotvecs)
        return float(-logsumexp(logc))

    def grad(self, rotvecs: np.ndarray) -> np.ndarray:
        logc, diff = self._log_components(rotvecs)
        resp = np.exp(logc - logsumexp(logc))
        gx = np.einsum("g,gde,ge->d", resp, self.precisions, diff)
        out = np.zeros_like(rotvecs, dtype=float)
        out[self.joints] = gx.reshape(-1, 3)
        return out


def _fail(path, msg):
    raise PriorLoadError(f"{path}: {msg}")


def load_gmm_prior(path, tree: KinematicTree) -> GaussianMixturePosePrior:
    """Read a mixture prior document.

    Fields: ``weights[G]``, ``means[G][D]``, ``precisions_cholesky[G][D][D]``
    (or ``[G][D]`` for diagonal) and optionally ``joints`` (joint names).
    Without ``joints``, ``D`` selects either every non-root joint or the
    non-root joints that have a keypoint.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise PriorLoadError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise PriorLoadError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        _fail(path, "top level must be an object")
    for key in ("weights", "means", "precisions_cholesky"):
        if key not in doc:
            _fail(path, f"missing field '{key}'")
    try:
        w = np.asarray(doc["weights"], dtype=float)
        mu = np.asarray(doc["means"], dtype=float)
        chol = np.asarray(doc["precisions_cholesky"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise PriorLoadError(f"{path}: arrays must be rectangular numbers ({exc})") from exc
    if w.ndim != 1 or len(w) == 0:
        _fail(path, "weights must be a non-empty list")
    G = len(w)
    if mu.ndim != 2 or mu.shape[0] != G or mu.shape[1] % 3:
        _fail(path, f"means must be [{G}][3*n], got shape {mu.shape}")
    D = mu.shape[1]
    if chol.shape not in ((G, D, D), (G, D)):
        _fail(path, f"precisions_cholesky must be [{G}][{D}][{D}] or [{G}][{D}], got {chol.shape}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(chol))):
        _fail(path, "non-finite values")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-6:
        _fail(path, "weights must be positive and sum to 1")
    if chol.ndim == 3:
        if np.any(np.triu(chol, 1) != 0):
            _fail(path, "precision factors must be lower triangular")
        diag = np.diagonal(chol, axis1=1, axis2=2)
    else:
        diag = chol
    if np.any(diag <= 0):
        _fail(path, "precision factors need a positive diagonal")

    if "joints" in doc:
        try:
            joints = [tree.joint_index(n) for n in doc["joints"]]
        except ValueError as exc:
            raise PriorLoadError(f"{path}: unknown joint in 'joints' ({exc})") from exc
    else:
        all_nonroot = list(range(1, tree.num_joints))
        mapped = [j for j in all_nonroot if tree.keypoint_of_joint[j] >= 0]
        joints = all_nonroot if D == 3 * len(all_nonroot) else mapped
    if 0 in joints:
        _fail(path, "the root joint cannot be part of the pose prior")
    if 3 * len(joints) != D:
        _fail(path, f"dimension {D} does not match {len(joints)} joints")
    return GaussianMixturePosePrior(w, mu, chol, joints)


def save_gmm_prior(prior: GaussianMixturePosePrior, tree: KinematicTree, path) -> None:
    doc = {
        "weights": prior.weights.tolist(),
        "means": prior.means.tolist(),
        "precisions_cholesky": prior.chol.tolist(),
        "joints": [tree.joint_names[j] for j in prior.joints],
    }
    Path(path).write_text(json.dumps(doc))


def shape_prior(beta: np.ndarray) -> float:
    return float(np.dot(beta, beta))
