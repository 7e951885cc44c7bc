import numpy as np


class DegenerateError(ValueError):
    pass


def similarity_transform(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares (s, R, t) with gt ~ s * R @ pred + t, det(R) = +1 (Umeyama)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"procrustes: shapes {pred.shape} and {gt.shape} must both be (N, 3)")
    if pred.shape[0] < 3:
        raise DegenerateError("procrustes: need at least 3 points")
    mu_p = pred.mean(0)
    mu_g = gt.mean(0)
    p = pred - mu_p
    g = gt - mu_g
    sv_g = np.linalg.svd(g, compute_uv=False)
    if sv_g[1] <= 1e-12 * max(sv_g[0], 1e-300):
        raise DegenerateError("procrustes: target points are collinear or coincident")
    var_p = (p * p).sum()
    if var_p <= 1e-300:
        raise DegenerateError("procrustes: predicted points are coincident")
    U, S, Vt = np.linalg.svd(g.T @ p)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_p)
    t = mu_g - s * R @ mu_p
    return s, R, t


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    s, R, t = similarity_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ R.T + t
