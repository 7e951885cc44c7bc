"""Levenberg-Marquardt parameter fitting against vertex or 2D keypoint targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.func import jacfwd

from handface.meshcore.model import ParametricModel, PoseState, lbs_forward, regress_keypoints

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass
class FitResult:
    state: PoseState
    rms: float  # RMS point error in target units (m for vertices, px for keypoints)
    iterations: int
    converged: bool
    history: list  # accepted costs, non-increasing


def _residual_fn(model, target_vertices=None, target_keypoints2d=None, camera=None):
    if target_vertices is not None:
        tgt = torch.as_tensor(np.asarray(target_vertices, dtype=np.float64))
        if tgt.shape != (model.num_vertices, 3):
            raise ValueError(f"fit: target has {tuple(tgt.shape)}, model has {model.num_vertices} vertices")

        def f(x):
            v, _ = lbs_forward(model, PoseState.from_vector(x, model))
            return (v - tgt).reshape(-1)

        return f, 3
    if target_keypoints2d is None or camera is None:
        raise ValueError("fit: need target_vertices or target_keypoints2d with a camera")
    from handface.camrender import project

    tgt = torch.as_tensor(np.asarray(target_keypoints2d, dtype=np.float64))
    if tgt.shape != (model.num_keypoints, 2):
        raise ValueError(f"fit: target has {tuple(tgt.shape)}, model has {model.num_keypoints} keypoints")
    reg = torch.as_tensor(model.keypoint_regressor)

    def f(x):
        v, _ = lbs_forward(model, PoseState.from_vector(x, model))
        uv, _, _ = project(camera, regress_keypoints(v, reg))
        return (uv - tgt).reshape(-1)

    return f, 2


def fit_parameters_lm(model: ParametricModel, init: PoseState, target_vertices=None,
                      target_keypoints2d=None, camera=None, max_iter: int = 200,
                      lam: float = 1e-3, step_tol: float = 1e-10,
                      free: np.ndarray | None = None) -> FitResult:
    """Damped Gauss-Newton on the full parameter vector.

    ``free`` optionally masks which entries of the parameter vector may move.
    An iteration is one linear solve; rejected steps raise the damping x10,
    accepted ones lower it /10.
    """
    f, dim = _residual_fn(model, target_vertices, target_keypoints2d, camera)
    x = init.to_vector().detach().clone()
    mask = torch.ones_like(x, dtype=torch.bool) if free is None else torch.as_tensor(free, dtype=torch.bool)
    jac = jacfwd(f)

    r = f(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise FitError("fit: non-finite initial residual")
    history = [cost]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        J = jac(x)[:, mask]
        g = J.T @ r
        H = J.T @ J
        step = torch.linalg.solve(H + lam * torch.eye(H.shape[0]), -g)
        if float(step.norm()) < step_tol:
            converged = True
            break
        x_new = x.clone()
        x_new[mask] += step
        r_new = f(x_new)
        cost_new = float(r_new @ r_new)
        if not np.isfinite(cost_new):
            raise FitError(f"fit: non-finite residual at iteration {it}")
        if cost_new < cost:
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            lam = max(lam / 10, 1e-12)
        else:
            lam = lam * 10
            if lam > 1e12:
                converged = True  # no descent direction left at machine precision
                break
    n_points = r.numel() // dim
    rms = float(np.sqrt(cost / n_points))
    if not converged:
        log.info("LM stopped after %d iterations without meeting the step tolerance", it)
    return FitResult(PoseState.from_vector(x.detach(), model), rms, it, converged, history)
