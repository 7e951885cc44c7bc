"""Loss composition, adversarial alternation, AdamW and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from handface import autodiff as ad
from handface.camrender import Camera, l1_per_point, project, reprojection_loss, rendered_keypoint_depths, silog_depth_loss
from handface.data.synth import Sample, gt_keypoint_depths, prior_parameters
from handface.interaction.losses import (
    BCE_EPS,
    collision_loss,
    contact_bce,
    deformation_loss,
    detect_penetration,
    touch_loss,
)
from handface.meshcore.model import PoseState, read_npz
from handface.network import HandFaceNet, NetConfig, load_checkpoint, make_discriminators, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    mesh: float = 12.5
    interaction: float = 5.0
    depth: float = 2.5
    adv: float = 1.0
    # inside the mesh loss
    reproj: float = 1.0
    vert: float = 4.0
    key: float = 2.0
    params: float = 2.0
    # inside the interaction loss
    touch: float = 0.2
    contact: float = 0.6
    collision: float = 1.0
    deform: float = 6.0
    # inside the vertex / reprojection terms
    vert_hand: float = 3.0
    vert_face: float = 1.0
    mu_nonpara: float = 4.0
    reproj_hand: float = 4.0
    reproj_face: float = 1.0
    reproj_unit: float = 224.0  # pixels per reprojection-loss unit (image width)
    # deformation-loss constants
    deform_mu: float = 5000.0
    deform_lam: float = 100.0
    deform_threshold: float = 0.03
    large_set: str = "pred"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")
        if self.reproj_unit <= 0:
            raise ValueError("reproj_unit must be positive")

    def scaled(self, k: float) -> "LossWeights":
        d = asdict(self)
        for name in ("mesh", "interaction", "depth", "adv"):
            d[name] *= k
        return LossWeights(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    lr: float = 6e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    disc_lr: float = 6e-4
    clip_grad: float | None = None  # global-norm clipping; None disables it
    depth_on_labeled: bool = False
    use_wild: bool = True
    prior_amplitude: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- losses

def _mean_l1(a, b) -> torch.Tensor:
    return (ad.as_tensor(a) - ad.as_tensor(b)).abs().mean(-1)


def param_loss(pred_face, pred_hand, gt_face, gt_hand) -> torch.Tensor:
    """Mean-absolute error per parameter group; face groups averaged over 3, hand over 2."""
    def flat(x):
        return x.reshape(*x.shape[:-2], -1)

    lf = (_mean_l1(pred_face.shape, gt_face.shape) + _mean_l1(pred_face.expression, gt_face.expression)
          + _mean_l1(flat(pred_face.joint_rotations), flat(gt_face.joint_rotations))) / 3
    lh = (_mean_l1(pred_hand.shape, gt_hand.shape)
          + _mean_l1(flat(pred_hand.joint_rotations), flat(gt_hand.joint_rotations))) / 2
    return lf + lh


def compute_mesh_loss(pred: dict, gt: dict, camera: Camera, w: LossWeights | None = None,
                      face_down: np.ndarray | None = None):
    """Mesh loss of one sample.  ``pred`` holds unbatched tensors from the network output;
    ``gt`` holds the labeled ground truth (2D keypoints, vertices, keypoints, PoseStates).

    Returns (total, breakdown) with breakdown keys reproj, vert, key, params.
    """
    w = w or LossWeights()
    for k in ("hand_keypoints2d", "face_keypoints2d", "hand_vertices", "face_vertices",
              "hand_keypoints", "face_keypoints", "hand_state", "face_state"):
        if gt.get(k) is None:
            raise ValueError(f"compute_mesh_loss: labeled ground truth lacks '{k}'")
    reproj = reprojection_loss(
        [pred["rough_hand_kp"], pred["mesh_kp_hand"], pred["param_kp_hand"]],
        [pred["rough_face_kp"], pred["mesh_kp_face"], pred["param_kp_face"]],
        gt["hand_keypoints2d"], gt["face_keypoints2d"], camera,
        w.reproj_hand, w.reproj_face, pred.get("camera_correction")) / w.reproj_unit
    gv_h = ad.as_tensor(gt["hand_vertices"])
    gv_f = ad.as_tensor(gt["face_vertices"])
    gv_f_tok = gv_f if face_down is None else torch.as_tensor(face_down) @ gv_f
    mu = w.mu_nonpara
    vert = (w.vert_hand * (mu * l1_per_point(pred["rough_hand_v"], gv_h) + l1_per_point(pred["hand_v"], gv_h))
            + w.vert_face * (mu * l1_per_point(pred["rough_face_v"], gv_f_tok)
                             + l1_per_point(pred["face_v"], gv_f)))
    gk_h, gk_f = ad.as_tensor(gt["hand_keypoints"]), ad.as_tensor(gt["face_keypoints"])
    key = (mu * (l1_per_point(pred["rough_hand_kp"], gk_h) + l1_per_point(pred["mesh_kp_hand"], gk_h)
                 + l1_per_point(pred["rough_face_kp"], gk_f) + l1_per_point(pred["mesh_kp_face"], gk_f))
           + l1_per_point(pred["param_kp_face"], gk_f) + l1_per_point(pred["param_kp_hand"], gk_h))
    params = param_loss(pred["face_state"], pred["hand_state"], gt["face_state"], gt["hand_state"])
    parts = {"reproj": reproj, "vert": vert, "key": key, "params": params}
    total = w.reproj * reproj + w.vert * vert + w.key * key + w.params * params
    return total, parts


def compute_interaction_loss(pred: dict, gt: dict | None, face_triangles, w: LossWeights | None = None,
                             wild: bool = False):
    """Interaction loss of one sample: 0.2 touch + 0.6 contact + collision + 6 deform.

    ``pred`` needs contact_hand, contact_face, deformation, hand_v and face_v (undeformed).
    For wild samples the contact and deformation terms are multiplied by 0 against
    placeholder targets, keeping the graph shape identical.
    """
    w = w or LossWeights()
    d = pred["deformation"]
    V_h = pred["hand_v"]
    V_f = pred["face_v"] + d
    touch, empty = touch_loss(pred["contact_hand"], pred["contact_face"], V_h, V_f)
    report = detect_penetration(V_h, V_f, face_triangles, check=False)
    coll = collision_loss(V_h, V_f, d, face_triangles, report=report)
    if wild or gt is None:
        lab_h = torch.zeros_like(pred["contact_hand"])
        lab_f = torch.zeros_like(pred["contact_face"])
        gd = torch.zeros_like(d)
        m = 0.0
    else:
        lab_h, lab_f, gd = gt["contact_hand"], gt["contact_face"], gt["deformation"]
        m = 1.0
    contact = m * contact_bce([pred["contact_hand"], pred["contact_face"]], [lab_h, lab_f])
    deform = m * deformation_loss(d, gd, w.deform_mu, w.deform_lam, w.deform_threshold, w.large_set)
    parts = {"touch": touch, "contact": contact, "collision": coll, "deform": deform}
    total = w.touch * touch + w.contact * contact + w.collision * coll + w.deform * deform
    return total, parts, {"touch_empty": empty, "penetrating": len(report.indices)}


def _clampp(p):
    return p.clamp(BCE_EPS, 1 - BCE_EPS)


def adversarial_losses(d_face, d_hand, fake_face, fake_hand, real_face, real_hand):
    """Returns L_adv(E), L_adv(D_F), L_adv(D_H) as batch means.

    L_adv(E)   = mean log(1 - D_F(fake_f)) + mean log(1 - D_H(fake_h))
    L_adv(D_*) = -(mean log(1 - D(fake)) + mean log D(real))

    The generator term sees live fake parameters and frozen discriminators; the
    discriminator terms see detached fakes, so gradients stay on their own side.
    """
    if real_face.shape[0] == 0 or real_hand.shape[0] == 0:
        raise ValueError("adversarial_losses: empty real parameter batch")
    frozen = []
    for D in (d_face, d_hand):
        for p in D.parameters():
            frozen.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        g = (torch.log(1 - _clampp(d_face(fake_face))).mean()
             + torch.log(1 - _clampp(d_hand(fake_hand))).mean())
    finally:
        for p, r in frozen:
            p.requires_grad_(r)
    lf = -(torch.log(1 - _clampp(d_face(fake_face.detach()))).mean()
           + torch.log(_clampp(d_face(real_face))).mean())
    lh = -(torch.log(1 - _clampp(d_hand(fake_hand.detach()))).mean()
           + torch.log(_clampp(d_hand(real_hand))).mean())
    return g, lf, lh


def depth_loss_for_sample(pred: dict, models, camera: Camera, target_hand, target_face):
    """SILog between rendered depths at the projected predicted keypoints and pseudo depths."""
    face, hand = models
    meshes = [(pred["hand_v"], hand.faces), (pred["face_v"] + pred["deformation"], face.faces)]
    kp3 = torch.cat([pred["param_kp_hand"], pred["param_kp_face"]])
    uv, _, ok = project(camera, kp3.detach())
    kd, valid = rendered_keypoint_depths(meshes, camera, uv.numpy())
    target = np.concatenate([np.asarray(target_hand), np.asarray(target_face)])
    valid = valid & ok.numpy() & np.isfinite(target) & (np.nan_to_num(target, nan=-1.0) > 0)
    return silog_depth_loss(kd, np.where(valid, target, 1.0), valid, with_flag=True)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 6e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def optimizer_step(params: dict, state: OptimState) -> None:
    """AdamW with bias correction and decoupled decay: p -= lr * (m_hat/(sqrt(v_hat)+eps) + wd * p).

    ``params`` maps names to tensors carrying ``.grad``; tensors without a gradient
    are left alone.  A non-finite gradient skips that tensor and is logged.
    """
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                state.skipped += 1
                log.warning("optimizer_step: non-finite gradient for %s, update skipped", name)
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(state.lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * p))


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-12))
    return total


# ---------------------------------------------------------------- batches

def collate(samples: list) -> dict:
    """Images plus per-sample 0/1 kind weights."""
    return {
        "images": torch.as_tensor(np.stack([s.image for s in samples]), dtype=torch.float64),
        "labeled": torch.as_tensor([1.0 if s.kind == "labeled" else 0.0 for s in samples]),
    }


def _unbatch(out: dict, b: int) -> dict:
    r = out["rough"]
    p = {
        "rough_hand_kp": r["hand_kp"][b], "rough_face_kp": r["face_kp"][b],
        "rough_hand_v": r["hand_v"][b], "rough_face_v": r["face_v"][b],
        "hand_state": out["hand_state"].index(b), "face_state": out["face_state"].index(b),
        "camera_correction": None if out["camera_correction"] is None else out["camera_correction"][b],
    }
    for k in ("mesh_kp_hand", "mesh_kp_face", "param_kp_hand", "param_kp_face", "hand_v", "face_v",
              "contact_hand", "contact_face", "deformation"):
        p[k] = out[k][b]
    return p


def _placeholder_gt(models, s: Sample) -> dict:
    face, hand = models
    z = lambda *sh: np.zeros(sh)  # noqa: E731
    return {
        "hand_keypoints2d": s.pseudo_hand_keypoints2d, "face_keypoints2d": s.pseudo_face_keypoints2d,
        "hand_vertices": z(hand.num_vertices, 3), "face_vertices": z(face.num_vertices, 3),
        "hand_keypoints": z(hand.num_keypoints, 3), "face_keypoints": z(face.num_keypoints, 3),
        "hand_state": PoseState.zeros(hand), "face_state": PoseState.zeros(face),
    }


def _labeled_gt(s: Sample) -> dict:
    return {
        "hand_keypoints2d": s.hand_keypoints2d, "face_keypoints2d": s.face_keypoints2d,
        "hand_vertices": s.hand_vertices, "face_vertices": s.face_vertices,
        "hand_keypoints": s.hand_keypoints, "face_keypoints": s.face_keypoints,
        "hand_state": PoseState.from_numpy(s.hand_state), "face_state": PoseState.from_numpy(s.face_state),
        "contact_hand": s.contact_hand, "contact_face": s.contact_face, "deformation": s.deformation,
    }


def generator_loss(net: HandFaceNet, samples: list, out: dict, models, weights: LossWeights,
                   cfg: TrainConfig, discs=None, real=None, depth_targets=None):
    """Total generator objective over a batch plus a per-term breakdown.

    Every term is a per-sample loss times a 0/1 applicability weight, averaged over
    the samples it applies to.  Reprojection, touch and collision apply to every
    sample; 3D mesh terms, contact and deformation to labeled samples; depth to wild
    samples (and labeled ones with ``depth_on_labeled``).
    """
    face, hand = models
    face_down = None if net.cfg.face_tokens == "high" else face.sampling(f"high_to_{net.cfg.face_tokens}")
    acc = {k: [] for k in ("reproj", "vert", "key", "params", "touch", "contact", "collision", "deform", "depth")}
    wts = {k: [] for k in acc}
    diag = {"touch_empty": 0, "depth_invalid": 0, "penetrating": 0}
    for b, s in enumerate(samples):
        p = _unbatch(out, b)
        lab = s.kind == "labeled"
        cam = s.get_camera()
        gt = _labeled_gt(s) if lab else _placeholder_gt(models, s)
        _, mparts = compute_mesh_loss(p, gt, cam, weights, face_down)
        m3 = 1.0 if lab else 0.0
        for k in ("vert", "key", "params"):
            acc[k].append(m3 * mparts[k])
            wts[k].append(m3)
        acc["reproj"].append(mparts["reproj"])
        wts["reproj"].append(1.0)
        _, iparts, idiag = compute_interaction_loss(p, gt if lab else None, face.faces, weights, wild=not lab)
        diag["touch_empty"] += int(idiag["touch_empty"])
        diag["penetrating"] += idiag["penetrating"]
        for k in ("touch", "collision"):
            acc[k].append(iparts[k])
            wts[k].append(1.0)
        for k in ("contact", "deform"):
            acc[k].append(iparts[k])  # already multiplied by 0 for wild samples
            wts[k].append(m3)
        use_depth = (not lab) or cfg.depth_on_labeled
        if use_depth:
            if lab:
                th, tf = depth_targets[b] if depth_targets is not None else gt_keypoint_depths(s, models)
            else:
                th, tf = s.pseudo_hand_depth, s.pseudo_face_depth
            dl, flag = depth_loss_for_sample(p, models, cam, th, tf)
            diag["depth_invalid"] += int(flag)
            acc["depth"].append(dl)
            wts["depth"].append(0.0 if flag else 1.0)
    terms = {}
    for k in acc:
        n = max(1.0, sum(wts[k]))
        terms[k] = sum(acc[k]) / n if acc[k] else torch.zeros(())
        if not torch.is_tensor(terms[k]):
            terms[k] = torch.as_tensor(float(terms[k]))
    if diag["depth_invalid"] and sum(wts["depth"]) == 0 and acc["depth"]:
        log.info("depth term is 0: no valid keypoint depths in this batch")
    w = weights
    mesh = w.reproj * terms["reproj"] + w.vert * terms["vert"] + w.key * terms["key"] + w.params * terms["params"]
    inter = (w.touch * terms["touch"] + w.contact * terms["contact"] + w.collision * terms["collision"]
             + w.deform * terms["deform"])
    adv = torch.zeros(())
    if discs is not None and w.adv > 0:
        adv, _, _ = adversarial_losses(discs[0], discs[1], out["face_state"].param_vector(),
                                       out["hand_state"].param_vector(), real[0], real[1])
    total = w.mesh * mesh + w.interaction * inter + w.depth * terms["depth"] + w.adv * adv
    breakdown = {**terms, "mesh": mesh, "interaction": inter, "adv": adv, "total": total}
    return total, breakdown, diag


class Trainer:
    """Owns the network, discriminators, optimizer states and the batch RNG."""

    def __init__(self, models, net_cfg: NetConfig | None = None, train_cfg: TrainConfig | None = None,
                 weights: LossWeights | None = None):
        self.models = models
        self.cfg = train_cfg or TrainConfig()
        self.weights = weights or LossWeights()
        torch.manual_seed(self.cfg.seed)
        self.net = HandFaceNet(models, net_cfg or NetConfig.for_models(models))
        self.d_face, self.d_hand = make_discriminators(models, self.net.cfg.disc_hidden)
        c = self.cfg
        self.opt_g = OptimState(c.lr, c.weight_decay, c.betas, c.eps)
        self.opt_df = OptimState(c.disc_lr, c.weight_decay, c.betas, c.eps)
        self.opt_dh = OptimState(c.disc_lr, c.weight_decay, c.betas, c.eps)
        self.rng = np.random.default_rng([c.seed, 7])
        self.step = 0
        self.epoch = 0
        self._order: list = []

    # -- batching
    def next_batch(self, samples: list) -> list:
        idx = [i for i, s in enumerate(samples) if self.cfg.use_wild or s.kind == "labeled"]
        if not idx:
            raise ValueError("no usable samples in the dataset")
        out = []
        while len(out) < min(self.cfg.batch_size, len(idx)):
            if not self._order:
                self._order = list(self.rng.permutation(idx))
                self.epoch += 1
            out.append(int(self._order.pop(0)))
        return [samples[i] for i in out]

    def train_step(self, batch: list) -> dict:
        """One generator update, then one update each for D_F and D_H."""
        if not batch:
            raise ValueError("train_step: empty batch")
        self.net.train()
        w = self.weights
        data = collate(batch)
        real = prior_parameters(self.models, len(batch), self.rng, self.cfg.prior_amplitude)
        out = self.net(data["images"], rng=self.rng)
        discs = (self.d_face, self.d_hand) if w.adv > 0 else None
        total, parts, diag = generator_loss(self.net, batch, out, self.models, w, self.cfg, discs, real)
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite generator loss at step {self.step + 1}")
        gparams = dict(self.net.named_parameters())
        for p in gparams.values():
            p.grad = None
        total.backward()
        if self.cfg.clip_grad:
            clip_grad_norm(gparams.values(), self.cfg.clip_grad)
        optimizer_step(gparams, self.opt_g)

        ld = lh = torch.zeros(())
        if w.adv > 0:
            _, ld, lh = adversarial_losses(self.d_face, self.d_hand, out["face_state"].param_vector().detach(),
                                           out["hand_state"].param_vector().detach(), real[0], real[1])
            for D, loss, st in ((self.d_face, ld, self.opt_df), (self.d_hand, lh, self.opt_dh)):
                dp = dict(D.named_parameters())
                for p in dp.values():
                    p.grad = None
                loss.backward()
                if self.cfg.clip_grad:
                    clip_grad_norm(dp.values(), self.cfg.clip_grad)
                optimizer_step(dp, st)
        self.step += 1
        rec = {k: float(v.detach()) for k, v in parts.items()}
        rec.update({"step": self.step, "disc_face": float(ld.detach()), "disc_hand": float(lh.detach()), **diag})
        return rec

    def fit(self, samples: list, steps: int, log_path=None, every: int = 1, callback=None) -> list:
        history = []
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                rec = self.train_step(self.next_batch(samples))
                rec["epoch"] = self.epoch
                history.append(rec)
                if fh and (rec["step"] % every == 0):
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        return history

    # -- persistence
    def _modules(self) -> dict:
        return {"net": self.net, "disc_face": self.d_face, "disc_hand": self.d_hand}

    def save(self, path) -> None:
        extra = {}
        opts = {"opt_g": (self.opt_g, self.net), "opt_df": (self.opt_df, self.d_face),
                "opt_dh": (self.opt_dh, self.d_hand)}
        for tag, (st, _) in opts.items():
            for name in st.m:
                extra[f"{tag}/m/{name}"] = st.m[name].numpy().copy()
                extra[f"{tag}/v/{name}"] = st.v[name].numpy().copy()
        meta = {
            "step": self.step,
            "epoch": self.epoch,
            "order": [int(i) for i in self._order],
            "rng_state": self.rng.bit_generator.state,
            "torch_seed": self.cfg.seed,
            "train_config": self.cfg.to_dict(),
            "loss_weights": self.weights.to_dict(),
            "optim_steps": {k: st.step for k, (st, _) in opts.items()},
        }
        save_checkpoint(path, self._modules(), self.net.cfg, extra, meta)

    @classmethod
    def load(cls, path, models) -> "Trainer":
        header, _ = read_npz(path)
        tc = header.get("train_config", {})
        tr = cls(models, NetConfig.from_dict(header["net_config"]), TrainConfig(**tc),
                 LossWeights(**header.get("loss_weights", {})))
        header, arrays = load_checkpoint(path, tr._modules())
        tr.step = int(header.get("step", 0))
        tr.epoch = int(header.get("epoch", 0))
        tr._order = list(header.get("order", []))
        if "rng_state" in header:
            tr.rng.bit_generator.state = header["rng_state"]
        for tag, st in (("opt_g", tr.opt_g), ("opt_df", tr.opt_df), ("opt_dh", tr.opt_dh)):
            st.step = int(header.get("optim_steps", {}).get(tag, 0))
            for k, a in arrays.items():
                if k.startswith(f"{tag}/m/"):
                    st.m[k[len(tag) + 3:]] = torch.as_tensor(a)
                elif k.startswith(f"{tag}/v/"):
                    st.v[k[len(tag) + 3:]] = torch.as_tensor(a)
        return tr


@torch.no_grad()
def predict(net: HandFaceNet, samples: list, batch_size: int = 16) -> list:
    """Evaluation-mode forward; returns per-sample numpy predictions."""
    net.eval()
    res = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        out = net(collate(chunk)["images"])
        for b in range(len(chunk)):
            p = _unbatch(out, b)
            res.append({
                "hand_v": p["hand_v"].numpy(), "face_v": p["face_v"].numpy(),
                "deformation": p["deformation"].numpy(),
                "hand_kp": p["param_kp_hand"].numpy(), "face_kp": p["param_kp_face"].numpy(),
                "contact_hand": p["contact_hand"].numpy(), "contact_face": p["contact_face"].numpy(),
                "hand_state": p["hand_state"].numpy(), "face_state": p["face_state"].numpy(),
            })
    return res
