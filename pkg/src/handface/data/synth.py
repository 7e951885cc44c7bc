"""Synthetic hand-on-face samples with contacts, deformations and image proxies."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from handface.camrender import Camera, project, rasterize_depth, sample_keypoint_depths
from handface.interaction.geometry import SurfaceIndex, vertex_normals, winding_numbers
from handface.meshcore.model import ParametricModel, PoseState, lbs_forward
from handface.meshcore.rotation import axis_angle_to_matrix, matrix_to_axis_angle, rotation_between

log = logging.getLogger(__name__)

IMAGE_SIZE = 224
HEAD_DEPTH = 0.6


class SynthesisError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    pose_amplitude: float = 1.0
    contact_threshold: float = 0.004  # tau_c, meters
    penetration_range: tuple = (-0.002, 0.010)  # hand surface depth into the face
    stiffness_min: float = 0.3  # compliance near the skull core; 1.0 on soft tissue
    deformation_sigma: float = 0.008
    deformation_radius: float = 0.025
    deformation_cap: float = 0.05
    camera_rot_jitter: float = 0.03
    camera_trans_jitter: float = 0.01
    keypoint_noise_px: float = 1.0
    depth_scale_range: tuple = (0.5, 2.0)
    depth_noise: float = 0.01
    depth_shift: float = 0.0  # stress test: additive shift on pseudo depths
    max_attempts: int = 100

    def __post_init__(self):
        if self.contact_threshold <= 0:
            raise ValueError("contact_threshold must be positive")
        if self.keypoint_noise_px < 0 or self.depth_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        self.penetration_range = tuple(self.penetration_range)
        self.depth_scale_range = tuple(self.depth_scale_range)

    def to_dict(self) -> dict:
        return asdict(self)


def nominal_camera() -> Camera:
    c = (IMAGE_SIZE - 1) / 2
    return Camera(380.0, 380.0, c, c, IMAGE_SIZE, IMAGE_SIZE)


@dataclass
class Sample:
    kind: str  # "labeled" | "wild"
    image: np.ndarray  # (224, 224, 3) float32
    # labeled-only ground truth
    camera: np.ndarray | None = None  # Camera.to_array()
    hand_state: dict | None = None
    face_state: dict | None = None
    hand_vertices: np.ndarray | None = None  # (Vh, 3)
    face_vertices: np.ndarray | None = None  # undeformed (Vf, 3)
    deformation: np.ndarray | None = None  # (Vf, 3)
    hand_keypoints: np.ndarray | None = None  # (Kh, 3)
    face_keypoints: np.ndarray | None = None  # (Kf, 3), from the undeformed face
    hand_keypoints2d: np.ndarray | None = None
    face_keypoints2d: np.ndarray | None = None
    contact_hand: np.ndarray | None = None  # 0/1 labels
    contact_face: np.ndarray | None = None
    # wild-only pseudo ground truth
    pseudo_hand_keypoints2d: np.ndarray | None = None
    pseudo_face_keypoints2d: np.ndarray | None = None
    pseudo_hand_depth: np.ndarray | None = None  # NaN where the estimator gives nothing
    pseudo_face_depth: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    LABELED_FIELDS = ("camera", "hand_state", "face_state", "hand_vertices", "face_vertices",
                      "deformation", "hand_keypoints", "face_keypoints", "hand_keypoints2d",
                      "face_keypoints2d", "contact_hand", "contact_face")
    WILD_FIELDS = ("pseudo_hand_keypoints2d", "pseudo_face_keypoints2d", "pseudo_hand_depth",
                   "pseudo_face_depth")

    @property
    def deformed_face(self) -> np.ndarray:
        return self.face_vertices + self.deformation

    def get_camera(self) -> Camera:
        return Camera.from_array(self.camera) if self.camera is not None else nominal_camera()


def _posed(model, state: PoseState) -> np.ndarray:
    v, _ = lbs_forward(model, state)
    return v.numpy()


def _random_states(face: ParametricModel, hand: ParametricModel, amp: float, rng):
    fs = PoseState.zeros(face)
    fs.joint_rotations = torch.as_tensor(rng.normal(0, 0.12, (face.num_joints, 3)) * amp)
    fs.shape = torch.as_tensor(rng.normal(0, 0.7, face.num_shape))
    fs.expression = torch.as_tensor(rng.normal(0, 0.7, face.num_expression) * amp)
    fs.root_rotation = torch.as_tensor(rng.normal(0, 0.08, 3) * amp)
    fs.root_translation = torch.as_tensor(np.array([0, 0, HEAD_DEPTH]) + rng.normal(0, 0.015, 3) * amp)
    hs = PoseState.zeros(hand)
    rot = rng.normal(0, 0.05, (hand.num_joints, 3))
    rot[1:, 0] -= rng.uniform(0, 0.5, hand.num_joints - 1)  # curl toward the palm
    rot[0] = 0.0
    hs.joint_rotations = torch.as_tensor(rot * amp)
    hs.shape = torch.as_tensor(rng.normal(0, 0.7, hand.num_shape))
    return fs, hs


def _compliance(face: ParametricModel) -> np.ndarray:
    y = face.template_vertices[:, 1]
    return 0.3 + 0.7 * np.clip((0.04 - y) / 0.08, 0.0, 1.0)


def synth_deformation(face_v, face_tris, hand_v, hand_tris, compliance, cfg: SynthConfig) -> np.ndarray:
    """Push face vertices inside the hand inward along their normals, with smooth falloff."""
    w = winding_numbers(face_v, hand_v, hand_tris)
    inside = np.flatnonzero(w > 0.5)
    d = np.zeros_like(face_v)
    if len(inside) == 0:
        return d
    depth, _, _ = SurfaceIndex.build(hand_v, hand_tris).nearest(face_v[inside])
    normals = vertex_normals(face_v, face_tris)
    r = np.linalg.norm(face_v[:, None, :] - face_v[None, inside, :], axis=2)
    g = np.exp(-r ** 2 / (2 * cfg.deformation_sigma ** 2))
    g[r > cfg.deformation_radius] = 0.0
    mag = (g * depth[None, :]).max(1) * compliance
    mag = np.minimum(mag, cfg.deformation_cap)
    mag[mag < 1e-6] = 0.0
    d = -normals * mag[:, None]
    return d


def contact_labels(points, other_v, other_tris, threshold: float) -> np.ndarray:
    """1 where a vertex lies within ``threshold`` of the other surface or inside it."""
    dist, _, _ = SurfaceIndex.build(other_v, other_tris).nearest(points)
    inside = winding_numbers(points, other_v, other_tris) > 0.5
    return ((dist <= threshold) | inside).astype(np.float64)


def render_image_proxy(hand_v, hand_tris, face_v, face_tris, contact_h, contact_f,
                       camera: Camera) -> np.ndarray:
    """Three channels: normalized inverse depth, part silhouette, contact heat."""
    cam = camera if camera.width == IMAGE_SIZE else camera.resized(IMAGE_SIZE, IMAGE_SIZE)
    raster = rasterize_depth([(hand_v, hand_tris), (face_v, face_tris)], cam)
    fg = raster.tri_id >= 0
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[..., 0] = np.where(fg, np.clip(1.0 - (np.where(fg, raster.depth, 0) - 0.4) / 0.5, 0, 1), 0)
    n_hand = len(hand_tris)
    is_hand = fg & (raster.tri_id < n_hand)
    img[..., 1] = np.where(is_hand, 1.0, np.where(fg, 0.5, 0.0))
    labels = np.concatenate([contact_h, contact_f])
    tris = np.concatenate([hand_tris, face_tris + len(hand_v)])
    tri_heat = labels[tris].mean(1)
    img[..., 2] = np.where(fg, tri_heat[np.maximum(raster.tri_id, 0)], 0.0)
    return img


def _jitter_camera(cfg: SynthConfig, rng) -> Camera:
    cam = nominal_camera()
    rv = rng.normal(0, cfg.camera_rot_jitter, 3)
    cam.rotation = axis_angle_to_matrix(torch.as_tensor(rv)).numpy()
    cam.translation = rng.normal(0, cfg.camera_trans_jitter, 3)
    return cam


def synth_sample(models, config: SynthConfig, rng: np.random.Generator) -> Sample:
    face, hand = models
    amp = config.pose_amplitude
    comp = config.stiffness_min + (1 - config.stiffness_min) * (_compliance(face) - 0.3) / 0.7
    for attempt in range(config.max_attempts):
        fs, hs = _random_states(face, hand, amp, rng)
        cam = _jitter_camera(config, rng)
        face_v = _posed(face, fs)
        hand_local = _posed(hand, hs)
        if amp == 0:
            R = np.eye(3)
            t = fs.root_translation.numpy() + np.array([-0.03, -0.09, -0.15])  # in front, clear of the face
        else:
            normals = vertex_normals(face_v, face.faces)
            toward_cam = -(face_v @ cam.rotation.T + cam.translation)
            toward_cam /= np.linalg.norm(toward_cam, axis=1, keepdims=True)
            facing = np.flatnonzero((normals * toward_cam).sum(1) > 0.45)
            c_idx = int(rng.choice(facing))
            c, n_c = face_v[c_idx], normals[c_idx]
            if rng.random() < 0.5:  # palm against the face
                local_n = np.array([0, 0, -1.0])
                h_local = np.array([0.0, 0.05, -0.0125])
            else:  # a fingertip pressing in
                f = int(rng.choice([0, 1, 1, 2, 3, 4]))
                tip = hand.num_joints + f
                j_dip = 3 + 3 * f
                kp = hand.keypoint_regressor @ hand_local
                local_n = kp[tip] - kp[j_dip]
                h_local = kp[tip]
            R_align = rotation_between(local_n, -n_c)
            twist = axis_angle_to_matrix(torch.as_tensor(n_c * rng.uniform(-np.pi, np.pi))).numpy()
            R = twist @ R_align
            delta = rng.uniform(*config.penetration_range)
            t = c - delta * n_c - R @ h_local
        hs.root_rotation = torch.as_tensor(matrix_to_axis_angle(R))
        hs.root_translation = torch.as_tensor(t)
        hand_v = _posed(hand, hs)
        # placement sanity: in front of the camera, keypoints in view, no gross overlap
        cam_z = np.concatenate([hand_v, face_v]) @ cam.rotation[2] + cam.translation[2]
        if cam_z.min() < 0.1:
            continue
        inside = winding_numbers(hand_v, face_v, face.faces) > 0.5
        if inside.mean() > 0.3:
            continue
        kh = hand.keypoint_regressor @ hand_v
        kf_pre = face.keypoint_regressor @ face_v
        uv, _, _ = project(cam, torch.as_tensor(np.concatenate([kh, kf_pre])))
        uv = uv.numpy()
        if np.any(uv < 0) or np.any(uv > IMAGE_SIZE - 1):
            continue
        break
    else:
        raise SynthesisError(f"no valid hand placement after {config.max_attempts} attempts")

    d = synth_deformation(face_v, face.faces, hand_v, hand.faces, comp, config)
    face_def = face_v + d
    ch = contact_labels(hand_v, face_def, face.faces, config.contact_threshold)
    cf = contact_labels(face_def, hand_v, hand.faces, config.contact_threshold)
    kh = hand.keypoint_regressor @ hand_v
    kf = face.keypoint_regressor @ face_v
    kh2 = project(cam, torch.as_tensor(kh))[0].numpy()
    kf2 = project(cam, torch.as_tensor(kf))[0].numpy()
    image = render_image_proxy(hand_v, hand.faces, face_def, face.faces, ch, cf, cam)
    return Sample(
        kind="labeled", image=image, camera=cam.to_array(), hand_state=hs.numpy(),
        face_state=fs.numpy(), hand_vertices=hand_v, face_vertices=face_v, deformation=d,
        hand_keypoints=kh, face_keypoints=kf, hand_keypoints2d=kh2, face_keypoints2d=kf2,
        contact_hand=ch, contact_face=cf,
    )


def gt_keypoint_depths(sample: Sample, models):
    """Depth of the rendered ground-truth surfaces under each gt 2D keypoint."""
    face, hand = models
    cam = sample.get_camera()
    raster = rasterize_depth([(sample.hand_vertices, hand.faces), (sample.deformed_face, face.faces)], cam)
    dh, vh = sample_keypoint_depths(raster.depth, sample.hand_keypoints2d)
    df, vf = sample_keypoint_depths(raster.depth, sample.face_keypoints2d)
    return np.where(vh, dh, np.nan), np.where(vf, df, np.nan)


def make_wild_sample(labeled: Sample, models, config: SynthConfig, rng: np.random.Generator) -> Sample:
    """Keep only the image plus corrupted 2D keypoints and scale-ambiguous depths."""
    if labeled.kind != "labeled":
        raise ValueError("make_wild_sample needs a labeled sample")
    dh, df = gt_keypoint_depths(labeled, models)
    sigma = config.keypoint_noise_px
    ph = labeled.hand_keypoints2d + rng.normal(0, 1, labeled.hand_keypoints2d.shape) * sigma
    pf = labeled.face_keypoints2d + rng.normal(0, 1, labeled.face_keypoints2d.shape) * sigma
    a = rng.uniform(*config.depth_scale_range)
    nh = 1 + rng.normal(0, 1, dh.shape) * config.depth_noise
    nf = 1 + rng.normal(0, 1, df.shape) * config.depth_noise
    return Sample(
        kind="wild", image=labeled.image.copy(),
        pseudo_hand_keypoints2d=ph, pseudo_face_keypoints2d=pf,
        pseudo_hand_depth=a * dh * nh + config.depth_shift,
        pseudo_face_depth=a * df * nf + config.depth_shift,
    )


def synth_dataset(models, config: SynthConfig, n_labeled: int, n_wild: int) -> list:
    """Labeled samples use seed + index; wild samples corrupt fresh labeled draws."""
    out = []
    for i in range(n_labeled):
        out.append(synth_sample(models, config, np.random.default_rng([config.seed, i])))
    for i in range(n_wild):
        rng = np.random.default_rng([config.seed, 1_000_000 + i])
        out.append(make_wild_sample(synth_sample(models, config, rng), models, config, rng))
    return out


def prior_parameters(models, n: int, rng: np.random.Generator, amplitude: float = 1.0):
    """Draw (face, hand) discriminator inputs from the synthesis pose prior."""
    face, hand = models
    f, h = [], []
    for _ in range(n):
        fs, hs = _random_states(face, hand, amplitude, rng)
        f.append(fs.param_vector())
        h.append(hs.param_vector())
    return torch.stack(f), torch.stack(h)
