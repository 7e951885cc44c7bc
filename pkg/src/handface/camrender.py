"""Pinhole camera, z-buffer depth rasterization and the depth / reprojection losses.

Pixel (row i, column j) has its center at image coordinates (u, v) = (j, i).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import torch

from handface import autodiff as ad

log = logging.getLogger(__name__)

NEAR = 1e-6
DEPTH_EPS = 1e-7


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera image size must be at least 1x1")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def resized(self, width: int, height: int) -> "Camera":
        """Same viewing frustum at another resolution."""
        sx = width / self.width
        sy = height / self.height
        return Camera(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
                      width, height, self.rotation.copy(), self.translation.copy())

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy, self.width, self.height],
                               self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_array(cls, a) -> "Camera":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0], a[1], a[2], a[3], int(a[4]), int(a[5]), a[6:15].reshape(3, 3), a[15:18])


def to_camera(camera: Camera, points) -> torch.Tensor:
    p = ad.as_tensor(points)
    R = torch.as_tensor(camera.rotation)
    t = torch.as_tensor(camera.translation)
    return p @ R.T + t


def project(camera: Camera, points):
    """Pinhole projection.  Returns (uv (..., N, 2), depth (..., N), valid (..., N))."""
    pc = to_camera(camera, points)
    z = pc[..., 2]
    valid = z > NEAR
    zs = torch.where(valid, z, torch.ones_like(z))
    u = camera.fx * pc[..., 0] / zs + camera.cx
    v = camera.fy * pc[..., 1] / zs + camera.cy
    return torch.stack([u, v], -1), z, valid


@numba.njit(cache=True)
def _raster(uv, z, tris, width, height, depth, tri_id):
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= 1e-6 or z1 <= 1e-6 or z2 <= 1e-6:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        jmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        jmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
        imin = max(int(np.ceil(min(y0, y1, y2))), 0)
        imax = min(int(np.floor(max(y0, y1, y2))), height - 1)
        for i in range(imin, imax + 1):
            for j in range(jmin, jmax + 1):
                w0 = ((x1 - j) * (y2 - i) - (x2 - j) * (y1 - i)) / area
                w1 = ((x2 - j) * (y0 - i) - (x0 - j) * (y2 - i)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                if d < depth[i, j]:
                    depth[i, j] = d
                    tri_id[i, j] = t


@dataclass
class Raster:
    depth: np.ndarray  # (H, W), +inf background
    tri_id: np.ndarray  # (H, W), -1 background; index into the concatenated triangle list


def rasterize_depth(meshes, camera: Camera) -> Raster:
    """Z-buffer rasterization of one or more (vertices, triangles) meshes."""
    verts, tris = _concat_meshes(meshes)
    uv, z, _ = project(camera, torch.as_tensor(verts))
    depth = np.full((camera.height, camera.width), np.inf)
    tri_id = np.full((camera.height, camera.width), -1, dtype=np.int64)
    if len(tris):
        _raster(np.ascontiguousarray(uv.numpy()), np.ascontiguousarray(z.numpy()),
                np.ascontiguousarray(tris), camera.width, camera.height, depth, tri_id)
    return Raster(depth, tri_id)


def _concat_meshes(meshes):
    verts, tris, off = [], [], 0
    for v, t in meshes:
        v = v.detach().numpy() if isinstance(v, torch.Tensor) else np.asarray(v, dtype=np.float64)
        verts.append(v.reshape(-1, 3))
        tris.append(np.asarray(t, dtype=np.int64).reshape(-1, 3) + off)
        off += len(verts[-1])
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(verts), np.concatenate(tris)


def _bilinear_taps(keypoints2d: np.ndarray, width: int, height: int):
    kp = np.asarray(keypoints2d, dtype=np.float64).reshape(-1, 2)
    u, v = kp[:, 0], kp[:, 1]
    inb = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1) & np.isfinite(u) & np.isfinite(v)
    uc = np.clip(np.nan_to_num(u), 0, width - 1)
    vc = np.clip(np.nan_to_num(v), 0, height - 1)
    j0 = np.minimum(np.floor(uc).astype(np.int64), max(width - 2, 0))
    i0 = np.minimum(np.floor(vc).astype(np.int64), max(height - 2, 0))
    fu = uc - j0
    fv = vc - i0
    j1 = np.minimum(j0 + 1, width - 1)
    i1 = np.minimum(i0 + 1, height - 1)
    rows = np.stack([i0, i0, i1, i1], 1)
    cols = np.stack([j0, j1, j0, j1], 1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], 1)
    return rows, cols, w, inb


def sample_keypoint_depths(depth_map: np.ndarray, keypoints2d) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup over finite neighbours.  Returns (depths, valid)."""
    H, W = depth_map.shape
    rows, cols, w, inb = _bilinear_taps(keypoints2d, W, H)
    vals = depth_map[rows, cols]
    finite = np.isfinite(vals)
    w = np.where(finite, w, 0.0)
    tot = w.sum(1)
    valid = inb & (tot > 1e-12)
    out = np.where(valid, (np.where(finite, vals, 0.0) * w).sum(1) / np.where(valid, tot, 1.0), np.nan)
    return out, valid


def rendered_keypoint_depths(meshes, camera: Camera, keypoints2d, raster: Raster | None = None):
    """Differentiable counterpart of ``sample_keypoint_depths`` on a rendered mesh pair.

    Visibility (which triangle covers each pixel) is taken from the z-buffer and
    held fixed; each tap's depth is re-evaluated on the tape from the covering
    triangle's projected vertices, so gradients reach the vertex positions.
    Returns (depths tensor, valid mask).
    """
    tensors = [ad.as_tensor(v) for v, _ in meshes]
    verts_t = torch.cat([v.reshape(-1, 3) for v in tensors])
    _, tris = _concat_meshes([(v.detach(), t) for v, t in meshes])
    if raster is None:
        raster = rasterize_depth([(verts_t.detach(), tris)], camera)
    H, W = raster.depth.shape
    rows, cols, w, inb = _bilinear_taps(np.asarray(keypoints2d), W, H)
    tid = raster.tri_id[rows, cols]  # (K, 4)
    covered = tid >= 0
    w = np.where(covered, w, 0.0)
    tot = w.sum(1)
    valid = inb & (tot > 1e-12)
    K = len(tot)
    if not valid.any():
        return torch.zeros(K, dtype=torch.float64) + verts_t.sum() * 0.0, valid
    sel = np.flatnonzero(covered.reshape(-1))
    t_sel = tid.reshape(-1)[sel]
    uv, z, _ = project(camera, verts_t)
    tri = torch.as_tensor(tris[t_sel])
    p = uv[tri]  # (n, 3, 2)
    zz = z[tri]  # (n, 3)
    px = torch.as_tensor(cols.reshape(-1)[sel], dtype=torch.float64)
    py = torch.as_tensor(rows.reshape(-1)[sel], dtype=torch.float64)
    x0, y0 = p[:, 0, 0], p[:, 0, 1]
    x1, y1 = p[:, 1, 0], p[:, 1, 1]
    x2, y2 = p[:, 2, 0], p[:, 2, 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
    w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
    w2 = 1.0 - w0 - w1
    tap_depth = 1.0 / (w0 / zz[:, 0] + w1 / zz[:, 1] + w2 / zz[:, 2])
    flat = torch.zeros(K * 4, dtype=torch.float64).index_put((torch.as_tensor(sel),), tap_depth)
    wt = torch.as_tensor(w / np.where(valid, tot, 1.0)[:, None])
    depths = (flat.reshape(K, 4) * wt).sum(1)
    return depths, valid


def silog_depth_loss(K_D, K_hat, valid=None, with_flag: bool = False, eps: float = DEPTH_EPS):
    """sqrt(Var(log(K_D + eps) - log(K_hat + eps))) over valid keypoints (population variance).

    Scale invariance is exact only for eps = 0; with eps > 0 a rescaled K_D shifts
    the loss by roughly eps / K_D.
    """
    K_D, K_hat = ad.as_tensor(K_D).reshape(-1), ad.as_tensor(K_hat).reshape(-1)
    if K_D.shape != K_hat.shape:
        raise ad.ShapeError(f"silog_depth_loss: {list(K_D.shape)} vs {list(K_hat.shape)}")
    if valid is not None:
        idx = np.flatnonzero(np.asarray(valid))
        K_D = K_D[torch.as_tensor(idx)]
        K_hat = K_hat[torch.as_tensor(idx)]
    if K_D.numel() < 2:
        zero = K_D.sum() * 0.0
        return (zero, True) if with_flag else zero
    r = ad.log(K_D + eps) - ad.log(K_hat + eps)
    var = ad.variance(r)
    pos = var > 0
    loss = torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))), torch.zeros_like(var))
    return (loss, False) if with_flag else loss


def l1_per_point(pred, gt) -> torch.Tensor:
    """Mean over points of the coordinate-summed absolute error."""
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"L1: {list(pred.shape)} vs {list(gt.shape)}")
    return (pred - gt).abs().sum(-1).mean(-1)


def apply_correction(uv: torch.Tensor, correction, camera: Camera) -> torch.Tensor:
    """Learned similarity correction (scale about the principal point, then shift)."""
    if correction is None:
        return uv
    s = correction[..., 0:1]
    shift = correction[..., 1:3]
    c = torch.tensor([camera.cx, camera.cy], dtype=uv.dtype)
    return (uv - c) * s[..., None, :] + c + shift[..., None, :]


def reprojection_loss(hand_sets, face_sets, gt_hand2d, gt_face2d, camera: Camera,
                      lam_h: float = 4.0, lam_f: float = 1.0, correction=None) -> torch.Tensor:
    """Weighted L1 between projected 3D keypoint sets and 2D targets.

    ``hand_sets`` / ``face_sets`` are sequences of (K, 3) keypoint sets, typically
    (rough, mesh-regressed, parametric).  Leading batch axes are allowed; the
    result then has the batch shape.
    """
    def term(sets, gt2d, lam):
        total = 0.0
        gt2d = ad.as_tensor(gt2d)
        for k in sets:
            k = ad.as_tensor(k)
            if k.shape[-2] != gt2d.shape[-2]:
                raise ad.ShapeError(f"reprojection_loss: {k.shape[-2]} keypoints vs {gt2d.shape[-2]} targets")
            uv, _, _ = project(camera, k)
            total = total + l1_per_point(apply_correction(uv, correction, camera), gt2d)
        return lam * total

    return term(hand_sets, gt_hand2d, lam_h) + term(face_sets, gt_face2d, lam_f)


def write_pfm(path, image: np.ndarray) -> None:
    """Greyscale PFM, little-endian, rows stored bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("write_pfm expects a 2D array")
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    channels = 1 if parts[0].strip() == b"Pf" else 3
    W, H = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(parts[3], dtype=dtype, count=W * H * channels)
    shape = (H, W) if channels == 1 else (H, W, 3)
    return arr.reshape(shape)[::-1].astype(np.float64)
