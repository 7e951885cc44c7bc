"""Two-branch transformer regressor, IKNet and parameter discriminators (toy scale).

Token layout along the sequence axis: hand keypoints, face keypoints, hand
vertices, face vertices (at the configured face token resolution).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from handface.autodiff import ShapeError
from handface.meshcore.model import AssetError, ParametricModel, PoseState, lbs_forward, read_npz, write_npz
from handface.meshcore.rotation import axis_angle_to_matrix

log = logging.getLogger(__name__)

CKPT_FORMAT = "handface-checkpoint/1"
# nominal scene layout used for the positional coordinates (world frame, meters)
FACE_OFFSET = (0.0, 0.0, 0.6)
HAND_OFFSET = (0.0, -0.05, 0.5)
DEFORM_SCALE = 0.01


@dataclass
class NetConfig:
    hidden: int = 64
    heads: int = 4
    layers: int = 4
    mask_rate: float = 0.30
    mesh_dims: tuple = (64, 32, 16)
    inter_dims: tuple = (64, 32)
    ik_hidden: int = 64
    mix_hidden: int = 256  # global mixing MLP after the conv stack; 0 disables it
    disc_hidden: int = 64
    ffn_mult: int = 2
    face_tokens: str = "low"  # face vertex token resolution: low | mid | high
    fixed_camera: bool = False
    contact_prior: float = 0.03  # initial contact probability of both heads
    image_size: int = 224
    # token counts, filled from the models
    n_hand_kp: int = 21
    n_face_kp: int = 68
    n_hand_v: int = 195
    n_face_v: int = 42

    def __post_init__(self):
        self.mesh_dims = tuple(self.mesh_dims)
        self.inter_dims = tuple(self.inter_dims)
        for d in (self.hidden, *self.mesh_dims, *self.inter_dims):
            if d % self.heads:
                raise ValueError(f"dim {d} not divisible by {self.heads} heads")
        if not 0 <= self.mask_rate < 1:
            raise ValueError("mask_rate must lie in [0, 1)")
        if not 0 < self.contact_prior < 1:
            raise ValueError("contact_prior must lie in (0, 1)")

    @property
    def num_tokens(self) -> int:
        return self.n_hand_kp + self.n_face_kp + self.n_hand_v + self.n_face_v

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mesh_dims"], d["inter_dims"] = list(self.mesh_dims), list(self.inter_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown NetConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_models(cls, models, **kw) -> "NetConfig":
        face, hand = models
        cfg = cls(**kw)
        cfg.n_hand_kp, cfg.n_face_kp = hand.num_keypoints, face.num_keypoints
        cfg.n_hand_v = hand.num_vertices
        cfg.n_face_v = _face_token_count(face, cfg.face_tokens)
        return cfg


def _face_token_count(face: ParametricModel, level: str) -> int:
    if level == "high":
        return face.num_vertices
    return face.sampling(f"high_to_{level}").shape[0]


class Backbone(nn.Module):
    """Strided conv stack: 224x224x3 -> 7x7xH, flattened to 49 tokens.

    A residual MLP over the flattened map gives every cell a global receptive
    field; without it the token path learns far too slowly from scratch.
    """

    def __init__(self, hidden: int, mix_hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=4), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, hidden, 3, stride=2, padding=1),
        )
        self.mix = nn.Sequential(nn.Linear(49 * hidden, mix_hidden), nn.ReLU(),
                                 nn.Linear(mix_hidden, 49 * hidden)) if mix_hidden else None

    def forward(self, image):
        # image: (B, 224, 224, 3)
        if image.dim() != 4 or tuple(image.shape[1:]) != (224, 224, 3):
            raise ShapeError(f"extract_features: expected (B, 224, 224, 3) images, got {list(image.shape)}")
        x = self.net(image.permute(0, 3, 1, 2)).flatten(2).transpose(1, 2)  # (B, 49, H)
        if self.mix is not None:
            x = x + self.mix(x.flatten(1)).view_as(x)
        return x


def _encoder(dim: int, cfg: NetConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(dim, cfg.heads, dim_feedforward=cfg.ffn_mult * dim,
                                       dropout=0.0, batch_first=True)
    return nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)


class Stack(nn.Module):
    """Linear projection into each encoder's width, then the encoder; token count is preserved."""

    def __init__(self, in_dim: int, dims, cfg: NetConfig):
        super().__init__()
        self.proj = nn.ModuleList()
        self.enc = nn.ModuleList()
        prev = in_dim
        for d in dims:
            self.proj.append(nn.Linear(prev, d))
            self.enc.append(_encoder(d, cfg))
            prev = d

    def forward(self, x):
        for p, e in zip(self.proj, self.enc):
            x = e(p(x))
        return x


class MeshNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.stack = Stack(cfg.hidden + 3, cfg.mesh_dims, cfg)
        self.head = nn.Linear(cfg.mesh_dims[-1], 3)
        # start from the template layout
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, tokens, coords):
        """Returns per-token 3D positions as offsets from the template coordinates."""
        return coords + self.head(self.stack(tokens))

    def split(self, xyz):
        c = self.cfg
        a = c.n_hand_kp
        b = a + c.n_face_kp
        d = b + c.n_hand_v
        return {"hand_kp": xyz[:, :a], "face_kp": xyz[:, a:b], "hand_v": xyz[:, b:d], "face_v": xyz[:, d:]}


class InteractionNet(nn.Module):
    def __init__(self, cfg: NetConfig, face_up: np.ndarray):
        super().__init__()
        self.cfg = cfg
        self.stack = Stack(cfg.hidden + 3, cfg.inter_dims, cfg)
        d = cfg.inter_dims[-1]
        self.hand_contact = nn.Linear(d, 1)
        self.face_contact = nn.Linear(d, 1)
        self.deform = nn.Linear(d, 3)
        # contacts are rare: start the heads at the prior rate instead of 0.5
        logit = float(np.log(cfg.contact_prior / (1 - cfg.contact_prior)))
        nn.init.constant_(self.hand_contact.bias, logit)
        nn.init.constant_(self.face_contact.bias, logit)
        self.register_buffer("face_up", torch.as_tensor(face_up, dtype=torch.float64))

    def trunk(self, tokens):
        return self.stack(tokens)

    def heads(self, feats):
        c = self.cfg
        start = c.n_hand_kp + c.n_face_kp
        fh = feats[:, start:start + c.n_hand_v]
        ff = self.face_up @ feats[:, start + c.n_hand_v:]  # up to full face resolution
        return {
            "contact_hand": torch.sigmoid(self.hand_contact(fh)[..., 0]),
            "contact_face": torch.sigmoid(self.face_contact(ff)[..., 0]),
            "deformation": DEFORM_SCALE * self.deform(ff),
        }

    def forward(self, tokens):
        return self.heads(self.trunk(tokens))


class MLPBlock(nn.Module):
    def __init__(self, i: int, o: int):
        super().__init__()
        self.fc = nn.Linear(i, o)
        self.bn = nn.BatchNorm1d(o, momentum=0.1)

    def forward(self, x):
        return torch.relu(self.bn(self.fc(x)))


class IKNet(nn.Module):
    """Five MLP blocks; block 1 feeds block 3's input, block 3 feeds the output layer."""

    def __init__(self, model: ParametricModel, n_in: int, hidden: int, skips: bool = True):
        super().__init__()
        self.model = model
        self.n_in = n_in
        self.skips = skips
        self.blocks = nn.ModuleList([MLPBlock(3 * n_in, hidden)] + [MLPBlock(hidden, hidden) for _ in range(4)])
        self.n_out = 3 * model.num_joints + model.num_shape + model.num_expression + 6
        self.out = nn.Linear(2 * hidden, self.n_out)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, verts) -> PoseState:
        if verts.shape[-2] != self.n_in:
            raise ShapeError(f"iknet_forward({self.model.name}): expected {self.n_in} vertices, "
                             f"got {verts.shape[-2]}")
        center = verts.mean(-2)
        x = (verts - center[..., None, :]).flatten(-2)
        b = self.blocks
        x1 = b[0](x)
        x2 = b[1](x1)
        x3 = b[2](x2 + x1 if self.skips else x2)
        x5 = b[4](b[3](x3))
        y = self.out(torch.cat([x5, x3 if self.skips else torch.zeros_like(x3)], -1))
        st = PoseState.from_vector(y, self.model)
        # translation is predicted relative to the input centroid minus the rotated rest centroid
        rest_c = torch.as_tensor(self.model.template_vertices.mean(0))
        R = axis_angle_to_matrix(st.root_rotation)
        st.root_translation = st.root_translation + center - (R @ rest_c)
        return st


class Discriminator(nn.Module):
    def __init__(self, n_in: int, hidden: int = 64):
        super().__init__()
        self.n_in = n_in
        self.net = nn.Sequential(nn.Linear(n_in, hidden), nn.LeakyReLU(0.2),
                                 nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
                                 nn.Linear(hidden, 1))

    def forward(self, params):
        if params.shape[-1] != self.n_in:
            raise ShapeError(f"discriminator: expected {self.n_in} parameters, got {params.shape[-1]}")
        return torch.sigmoid(self.net(params)[..., 0])


def template_coords(models, cfg: NetConfig) -> np.ndarray:
    """Zero-pose coordinates of every token in the nominal layout, (N, 3)."""
    face, hand = models
    fv = face.template_vertices + np.asarray(FACE_OFFSET)
    hv = hand.template_vertices + np.asarray(HAND_OFFSET)
    if cfg.face_tokens == "high":
        fv_tok = fv
    else:
        fv_tok = face.sampling(f"high_to_{cfg.face_tokens}") @ fv
    return np.concatenate([hand.keypoint_regressor @ hv, face.keypoint_regressor @ fv, hv, fv_tok])


def mask_tokens(tokens, rate: float, rng: np.random.Generator | None, training: bool):
    """Zero the feature part of floor(rate*N) random tokens per sample (training only).

    The last three channels (coordinates) are never touched.  Returns (tokens, mask).
    """
    B, N, _ = tokens.shape
    mask = torch.zeros(B, N, dtype=torch.bool)
    k = int(np.floor(rate * N))
    if not training or k == 0:
        return tokens, mask
    if rng is None:
        rng = np.random.default_rng()
    for b in range(B):
        mask[b, torch.as_tensor(rng.permutation(N)[:k])] = True
    keep = torch.ones_like(tokens)
    keep[..., :-3] = (~mask).to(tokens.dtype)[..., None]
    return tokens * keep, mask


class HandFaceNet(nn.Module):
    def __init__(self, models, cfg: NetConfig | None = None):
        super().__init__()
        face, hand = models
        self.face_model, self.hand_model = face, hand
        self.cfg = cfg if cfg is not None else NetConfig.for_models(models)
        c = self.cfg
        self.backbone = Backbone(c.hidden, c.mix_hidden)
        self.upsample = nn.Linear(49, c.num_tokens)
        self.register_buffer("coords", torch.as_tensor(template_coords(models, c)))
        up = np.eye(face.num_vertices) if c.face_tokens == "high" else face.sampling(f"{c.face_tokens}_to_high")
        self.register_buffer("face_up", torch.as_tensor(up))
        self.meshnet = MeshNet(c)
        self.internet = InteractionNet(c, up)
        self.iknet_hand = IKNet(hand, c.n_hand_v, c.ik_hidden)
        self.iknet_face = IKNet(face, c.n_face_v, c.ik_hidden)
        self.camera_head = nn.Linear(c.hidden, 3)
        nn.init.zeros_(self.camera_head.weight)
        nn.init.zeros_(self.camera_head.bias)

    def extract_features(self, images):
        return self.backbone(images)

    def build_tokens(self, feats, rng=None):
        up = self.upsample(feats.transpose(1, 2)).transpose(1, 2)  # (B, N, H)
        coords = self.coords.expand(feats.shape[0], -1, -1)
        tokens = torch.cat([up, coords], -1)
        return mask_tokens(tokens, self.cfg.mask_rate, rng, self.training)

    def forward(self, images, rng=None) -> dict:
        images = torch.as_tensor(images, dtype=torch.float64)
        feats = self.extract_features(images)
        tokens, mask = self.build_tokens(feats, rng)
        coords = self.coords.expand(images.shape[0], -1, -1)
        rough = self.meshnet.split(self.meshnet(tokens, coords))
        inter = self.internet(tokens)
        hs = self.iknet_hand(rough["hand_v"])
        fs = self.iknet_face(rough["face_v"])
        hv, _ = lbs_forward(self.hand_model, hs)
        fv, _ = lbs_forward(self.face_model, fs)
        hk = torch.as_tensor(self.hand_model.keypoint_regressor)
        fk = torch.as_tensor(self.face_model.keypoint_regressor)
        o = self.camera_head(feats.mean(1))
        out = {
            "rough": rough,
            "mesh_kp_hand": hk @ rough["hand_v"],
            "mesh_kp_face": fk @ (self.face_up @ rough["face_v"]),
            "hand_state": hs,
            "face_state": fs,
            "hand_v": hv,
            "face_v": fv,  # undeformed parametric face
            "param_kp_hand": hk @ hv,
            "param_kp_face": fk @ fv,
            "mask": mask,
            **inter,
        }
        out["face_v_deformed"] = fv + out["deformation"]
        if self.cfg.fixed_camera:
            out["camera_correction"] = None
        else:
            out["camera_correction"] = torch.cat([torch.exp(o[:, :1]), o[:, 1:]], -1)
        return out


def make_discriminators(models, hidden: int = 64):
    face, hand = models
    n_h = 3 * hand.num_joints + hand.num_shape + hand.num_expression
    n_f = 3 * face.num_joints + face.num_shape + face.num_expression
    return Discriminator(n_f, hidden), Discriminator(n_h, hidden)


def state_arrays(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_state_arrays(prefix: str, module: nn.Module, arrays: dict) -> None:
    sd = module.state_dict()
    new = {}
    for k, v in sd.items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise AssetError(f"checkpoint lacks tensor {key}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise AssetError(f"checkpoint tensor {key} has shape {a.shape}, expected {tuple(v.shape)}")
        new[k] = torch.as_tensor(a, dtype=v.dtype)
    module.load_state_dict(new)


def save_checkpoint(path, modules: dict, cfg: NetConfig, extra_arrays: dict | None = None,
                    meta: dict | None = None) -> None:
    """``modules`` maps a prefix ("net", "disc_face", ...) to an nn.Module."""
    arrays = {}
    for name, m in modules.items():
        arrays.update(state_arrays(name, m))
    if extra_arrays:
        arrays.update(extra_arrays)
    header = {"format": CKPT_FORMAT, "net_config": cfg.to_dict(), "modules": sorted(modules)}
    header.update(meta or {})
    write_npz(path, arrays, header)


def load_checkpoint(path, modules: dict | None = None):
    """Validate format and shapes; returns (header, arrays).  Loads into ``modules`` when given."""
    header, arrays = read_npz(path)
    if header.get("format") != CKPT_FORMAT:
        raise AssetError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    NetConfig.from_dict(header["net_config"])
    for name, m in (modules or {}).items():
        load_state_arrays(name, m, arrays)
    return header, arrays
