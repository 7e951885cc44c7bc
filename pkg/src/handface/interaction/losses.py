"""Chamfer distance, penetration detection and the four interaction losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from handface import autodiff as ad
from handface.interaction.geometry import SurfaceIndex, check_closed, winding_numbers

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


def _safe_dist(diff: torch.Tensor) -> torch.Tensor:
    sq = (diff * diff).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def nearest_indices(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Index of the nearest point of B for every point of A; ties go to the lower index."""
    tree = cKDTree(B)
    k = min(2, len(B))
    d, idx = tree.query(A, k=k)
    if k == 1:
        return np.asarray(idx, dtype=np.int64).reshape(-1)
    tie = (d[:, 1] == d[:, 0]) & (idx[:, 1] < idx[:, 0])
    return np.where(tie, idx[:, 1], idx[:, 0]).astype(np.int64)


def chamfer_directed(A, B, with_flag: bool = False):
    """Mean over A of the Euclidean distance to the nearest point of B.

    Nearest neighbours come from a KD-tree; the distance itself is evaluated on
    the tape so gradients reach both point sets.  An empty set yields 0 and,
    with ``with_flag``, ``empty=True``.
    """
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        zero = (A.sum() + B.sum()) * 0.0
        return (zero, True) if with_flag else zero
    idx = nearest_indices(A.detach().numpy(), B.detach().numpy())
    d = _safe_dist(A - ad.gather_rows(B, idx)).mean()
    return (d, False) if with_flag else d


def chamfer_directed_bruteforce(A, B) -> torch.Tensor:
    """O(|A||B|) reference using the lowest-index min reduction."""
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return (A.sum() + B.sum()) * 0.0
    dist = _safe_dist(A[:, None, :] - B[None, :, :])
    m, _ = ad.min_with_argmin(dist, dim=1)
    return m.mean()


@dataclass
class PenetrationReport:
    indices: np.ndarray  # sorted, unique hand vertex indices inside the face
    depths: np.ndarray  # meters, > 0
    nearest_points: np.ndarray  # (n, 3) closest points on the face surface
    winding: np.ndarray  # winding number of every queried vertex


def detect_penetration(hand_vertices, face_vertices, face_triangles,
                       check: bool = True, index: SurfaceIndex | None = None) -> PenetrationReport:
    """Hand vertices whose winding number w.r.t. the face surface exceeds 0.5."""
    hv = np.asarray(_np(hand_vertices), dtype=np.float64).reshape(-1, 3)
    fv = np.asarray(_np(face_vertices), dtype=np.float64)
    tris = np.asarray(face_triangles, dtype=np.int64)
    if check:
        check_closed(fv, tris)
    w = winding_numbers(hv, fv, tris)
    inside = np.flatnonzero(w > 0.5)
    if len(inside) == 0:
        return PenetrationReport(inside, np.zeros(0), np.zeros((0, 3)), w)
    idx = index if index is not None else SurfaceIndex.build(fv, tris)
    d, cp, _ = idx.nearest(hv[inside])
    keep = d > 0
    return PenetrationReport(inside[keep], d[keep], cp[keep], w)


def _np(x):
    return x.detach().numpy() if isinstance(x, torch.Tensor) else x


def touch_loss(prob_hand, prob_face, V_h, V_f, threshold: float = 0.5):
    """Symmetric Chamfer between predicted-contact vertex subsets.

    Returns ``(loss, empty)``; ``empty`` is True when either subset is empty,
    in which case the loss is 0.
    """
    V_h, V_f = ad.as_tensor(V_h), ad.as_tensor(V_f)
    hc = np.flatnonzero(np.asarray(_np(prob_hand)) > threshold)
    fc = np.flatnonzero(np.asarray(_np(prob_face)) > threshold)
    if len(hc) == 0 or len(fc) == 0:
        return (V_h.sum() + V_f.sum()) * 0.0, True
    Hc = ad.gather_rows(V_h, hc)
    Fc = ad.gather_rows(V_f, fc)
    return chamfer_directed(Fc, Hc) + chamfer_directed(Hc, Fc), False


def collision_loss(V_h, V_f, d, face_triangles, report: PenetrationReport | None = None,
                   check: bool = False) -> torch.Tensor:
    """Directed Chamfer from penetrating hand vertices to the vertices of V_f - d."""
    V_h, V_f, d = ad.as_tensor(V_h), ad.as_tensor(V_f), ad.as_tensor(d)
    if report is None:
        report = detect_penetration(V_h, V_f, face_triangles, check=check)
    undeformed = ad.sub(V_f, d)
    if len(report.indices) == 0:
        return (V_h.sum() + undeformed.sum()) * 0.0
    return chamfer_directed(ad.gather_rows(V_h, report.indices), undeformed)


def _bce_one(p, y) -> torch.Tensor:
    p = ad.as_tensor(p)
    y = ad.as_tensor(y)
    if p.shape != y.shape:
        raise ad.ShapeError(f"contact_bce: probs {list(p.shape)} vs labels {list(y.shape)}")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("contact_bce: labels must be 0 or 1")
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def contact_bce(probs, labels) -> torch.Tensor:
    """Mean BCE per mesh, summed over meshes when given sequences (hand, face)."""
    if isinstance(probs, (list, tuple)):
        return sum(_bce_one(p, y) for p, y in zip(probs, labels))
    return _bce_one(probs, labels)


def deformation_loss(pred, gt, mu: float = 5000.0, lam: float = 100.0,
                     threshold: float = 0.03, large_set: str = "pred") -> torch.Tensor:
    """Adaptive-weighted squared error plus a penalty on very large predicted offsets.

    sum_i (1 + mu |gt_i|) |gt_i - pred_i|^2  +  lam * sum_{i in L} |pred_i|,
    L = {i : |pred_i| > threshold} (or |gt_i| with ``large_set="gt"``).
    """
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"deformation_loss: pred {list(pred.shape)} vs gt {list(gt.shape)}")
    gt_norm = _safe_dist(gt)
    diff = pred - gt
    fit = ((1 + mu * gt_norm) * (diff * diff).sum(-1)).sum()
    pred_norm = _safe_dist(pred)
    ref = pred_norm.detach() if large_set == "pred" else gt_norm.detach()
    mask = (ref > threshold).to(pred.dtype)
    return fit + lam * (mask * pred_norm).sum()
