"""Parametric hand / face models: blendshapes plus linear blend skinning."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from handface.autodiff import ShapeError, as_tensor
from handface.meshcore.rotation import axis_angle_to_matrix

ASSET_FORMAT = "handface-model/1"


class AssetError(ValueError):
    pass


@dataclass
class ParametricModel:
    name: str
    template_vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (T, 3) int
    joint_regressor: np.ndarray  # (J, V)
    parent: np.ndarray  # (J,), -1 for the root
    skin_weights: np.ndarray  # (V, J)
    shape_basis: np.ndarray  # (V, 3, S)
    expression_basis: np.ndarray  # (V, 3, E)
    keypoint_regressor: np.ndarray  # (K, V), stored dense, mostly zeros
    # name -> (rows, cols) row-stochastic matrix, e.g. "high_to_low", "low_to_high"
    sampling_matrices: dict = field(default_factory=dict)

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parent.shape[0]

    @property
    def num_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def num_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def num_keypoints(self) -> int:
        return self.keypoint_regressor.shape[0]

    def sampling(self, name: str) -> np.ndarray:
        if name not in self.sampling_matrices:
            raise KeyError(f"{self.name}: no sampling matrix {name!r}")
        return self.sampling_matrices[name]

    def resolution(self, level: str) -> int:
        if level == "high":
            return self.num_vertices
        return self.sampling(f"high_to_{level}").shape[0]

    def validate(self) -> None:
        V = self.num_vertices
        J = self.num_joints
        if self.template_vertices.shape != (V, 3):
            raise AssetError(f"{self.name}: template_vertices must be (V, 3)")
        if not np.all(np.isfinite(self.template_vertices)):
            raise AssetError(f"{self.name}: non-finite template vertices")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise AssetError(f"{self.name}: faces must be (T, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise AssetError(f"{self.name}: face index out of range")
        if self.joint_regressor.shape != (J, V):
            raise AssetError(f"{self.name}: joint_regressor must be ({J}, {V})")
        if self.skin_weights.shape != (V, J):
            raise AssetError(f"{self.name}: skin_weights must be ({V}, {J})")
        if np.any(self.skin_weights < 0) or np.max(np.abs(self.skin_weights.sum(1) - 1)) > 1e-9:
            raise AssetError(f"{self.name}: skin weight rows must be nonnegative and sum to 1")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (V, 3):
            raise AssetError(f"{self.name}: shape_basis must be (V, 3, S)")
        if self.expression_basis.ndim != 3 or self.expression_basis.shape[:2] != (V, 3):
            raise AssetError(f"{self.name}: expression_basis must be (V, 3, E)")
        if self.keypoint_regressor.ndim != 2 or self.keypoint_regressor.shape[1] != V:
            raise AssetError(f"{self.name}: keypoint_regressor must be (K, {V})")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise AssetError(f"{self.name}: joint tree needs exactly one root, found {len(roots)}")
        for j in range(J):
            seen = set()
            k = j
            while k >= 0:
                if k in seen or k >= J:
                    raise AssetError(f"{self.name}: joint hierarchy has a cycle at joint {j}")
                seen.add(k)
                k = int(self.parent[k])
        for key, m in self.sampling_matrices.items():
            if m.ndim != 2 or np.any(m < 0) or np.max(np.abs(m.sum(1) - 1)) > 1e-9:
                raise AssetError(f"{self.name}: sampling matrix {key!r} is not row-stochastic")

    def save(self, path) -> None:
        arrays = {f.name: getattr(self, f.name) for f in fields(self)
                  if f.name not in ("name", "sampling_matrices")}
        for k, m in self.sampling_matrices.items():
            arrays[f"sampling/{k}"] = m
        header = {"format": ASSET_FORMAT, "name": self.name,
                  "shapes": {k: list(v.shape) for k, v in arrays.items()}}
        write_npz(path, arrays, header)

    @classmethod
    def load(cls, path) -> "ParametricModel":
        header, arrays = read_npz(path)
        if header.get("format") != ASSET_FORMAT:
            raise AssetError(f"{path}: unsupported model format {header.get('format')!r}")
        for k, shape in header["shapes"].items():
            if k not in arrays or list(arrays[k].shape) != shape:
                raise AssetError(f"{path}: array {k!r} missing or wrong shape")
        sampling = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("sampling/")}
        kw = {k: v for k, v in arrays.items() if not k.startswith("sampling/")}
        model = cls(name=header["name"], sampling_matrices=sampling, **kw)
        model.validate()
        return model


def write_npz(path, arrays: dict, header: dict) -> None:
    """Zip container with a JSON header; fixed timestamps keep bytes reproducible."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for k in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.require(arrays[k], requirements="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def read_npz(path) -> tuple[dict, dict]:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                                 allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise AssetError(f"{path}: unreadable container ({exc})") from exc
    return header, arrays


@dataclass
class PoseState:
    """Pose/shape/expression coefficients; leading batch axes are allowed."""

    joint_rotations: torch.Tensor  # (..., J, 3) axis-angle, radians
    shape: torch.Tensor  # (..., S)
    expression: torch.Tensor  # (..., E)
    root_rotation: torch.Tensor  # (..., 3)
    root_translation: torch.Tensor  # (..., 3) meters

    @classmethod
    def zeros(cls, model: ParametricModel, batch: tuple = ()) -> "PoseState":
        z = lambda *s: torch.zeros(*batch, *s, dtype=torch.float64)  # noqa: E731
        return cls(z(model.num_joints, 3), z(model.num_shape), z(model.num_expression), z(3), z(3))

    def to_vector(self) -> torch.Tensor:
        b = self.shape.shape[:-1]
        return torch.cat([self.joint_rotations.reshape(*b, -1), self.shape, self.expression,
                          self.root_rotation, self.root_translation], -1)

    @classmethod
    def from_vector(cls, vec: torch.Tensor, model: ParametricModel) -> "PoseState":
        J, S, E = model.num_joints, model.num_shape, model.num_expression
        sizes = [3 * J, S, E, 3, 3]
        parts = torch.split(vec, sizes, dim=-1)
        return cls(parts[0].reshape(*vec.shape[:-1], J, 3), parts[1], parts[2], parts[3], parts[4])

    def param_vector(self) -> torch.Tensor:
        """Pose, shape and expression without the root: the discriminator input."""
        b = self.shape.shape[:-1]
        return torch.cat([self.joint_rotations.reshape(*b, -1), self.shape, self.expression], -1)

    def detach(self) -> "PoseState":
        return PoseState(*(getattr(self, f.name).detach().clone() for f in fields(self)))

    def numpy(self) -> dict:
        return {f.name: getattr(self, f.name).detach().numpy().copy() for f in fields(self)}

    @classmethod
    def from_numpy(cls, d: dict) -> "PoseState":
        return cls(**{f.name: torch.as_tensor(np.asarray(d[f.name], dtype=np.float64))
                      for f in fields(cls)})

    def index(self, i) -> "PoseState":
        return PoseState(*(getattr(self, f.name)[i] for f in fields(self)))

    @classmethod
    def stack(cls, states: list) -> "PoseState":
        return cls(*(torch.stack([getattr(s, f.name) for s in states]) for f in fields(cls)))


def _t(a) -> torch.Tensor:
    return torch.as_tensor(a, dtype=torch.float64)


def lbs_forward(model: ParametricModel, state: PoseState) -> tuple[torch.Tensor, torch.Tensor]:
    """Blendshapes, skinning, then the root transform.  Returns (vertices, joints)."""
    S, E, J = model.num_shape, model.num_expression, model.num_joints
    if state.shape.shape[-1] != S or state.expression.shape[-1] != E:
        raise ShapeError(
            f"lbs_forward: {model.name} expects {S} shape / {E} expression coefficients, "
            f"got {state.shape.shape[-1]} / {state.expression.shape[-1]}")
    if tuple(state.joint_rotations.shape[-2:]) != (J, 3):
        raise ShapeError(f"lbs_forward: {model.name} expects ({J}, 3) joint rotations, "
                         f"got {list(state.joint_rotations.shape)}")
    v = _t(model.template_vertices)
    v = v + torch.einsum("vcs,...s->...vc", _t(model.shape_basis), state.shape)
    if E:
        v = v + torch.einsum("vce,...e->...vc", _t(model.expression_basis), state.expression)
    joints_rest = torch.einsum("jv,...vc->...jc", _t(model.joint_regressor), v)

    rots = axis_angle_to_matrix(state.joint_rotations)  # (..., J, 3, 3)
    eye = torch.eye(3, dtype=rots.dtype)
    # track joint displacements rather than positions so the rest pose is exact
    g_rot = [None] * J
    g_disp = [None] * J
    for j in range(J):
        p = int(model.parent[j])
        if p < 0:
            g_rot[j] = rots[..., j, :, :]
            g_disp[j] = torch.zeros_like(joints_rest[..., j, :])
        else:
            g_rot[j] = g_rot[p] @ rots[..., j, :, :]
            offset = joints_rest[..., j, :] - joints_rest[..., p, :]
            g_disp[j] = g_disp[p] + ((g_rot[p] - eye) @ offset[..., None])[..., 0]
    G_R = torch.stack(g_rot, -3)  # (..., J, 3, 3)
    D = torch.stack(g_disp, -2)  # (..., J, 3)
    G_t = joints_rest + D
    # translation of the relative transform, minus the identity part
    A_t = D - ((G_R - eye) @ joints_rest[..., None])[..., 0]
    W = _t(model.skin_weights)
    blend_R = torch.einsum("vj,...jab->...vab", W, G_R - eye)
    blend_t = torch.einsum("vj,...ja->...va", W, A_t)
    posed = v + (blend_R @ v[..., None])[..., 0] + blend_t

    R0 = axis_angle_to_matrix(state.root_rotation)  # (..., 3, 3)
    t0 = state.root_translation[..., None, :]
    verts = posed @ R0.transpose(-1, -2) + t0
    joints = G_t @ R0.transpose(-1, -2) + t0
    return verts, joints


def apply_deformation(undeformed, d) -> torch.Tensor:
    undeformed, d = as_tensor(undeformed), as_tensor(d)
    if undeformed.shape != d.shape:
        raise ShapeError(f"apply_deformation: vertices {list(undeformed.shape)} vs "
                         f"deformation {list(d.shape)}")
    return undeformed + d


def regress_keypoints(vertices, regressor) -> torch.Tensor:
    vertices, regressor = as_tensor(vertices), as_tensor(regressor)
    if regressor.shape[-1] != vertices.shape[-2]:
        raise ShapeError(f"regress_keypoints: regressor {list(regressor.shape)} vs "
                         f"vertices {list(vertices.shape)}")
    return regressor @ vertices


def resample_mesh(vertices, sampling_matrix) -> torch.Tensor:
    vertices, m = as_tensor(vertices), as_tensor(sampling_matrix)
    if m.shape[-1] != vertices.shape[-2]:
        raise ShapeError(f"resample_mesh: matrix {list(m.shape)} vs vertices {list(vertices.shape)}")
    return m @ vertices
