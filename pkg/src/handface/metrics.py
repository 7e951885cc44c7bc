"""Reconstruction, plausibility and contact-classification metrics.

Distances go in as meters and come out in millimetres; ratios are percentages
except in ``contact_classification``, which reports fractions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from handface.interaction.geometry import SurfaceIndex, winding_numbers
from handface.meshcore.procrustes import procrustes_align

MM = 1000.0


def _arr(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


def _check(pred, gt, name):
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")


def pve(pred, gt) -> float:
    """Mean vertex error (mm) after moving each head centroid to the origin.

    ``pred``/``gt`` are (hand, face) pairs; the face centroid of each is subtracted
    from both of its sets.  A single array is centred on its own centroid.
    """
    if isinstance(pred, (tuple, list)):
        ph, pf = (_arr(a) for a in pred)
        gh, gf = (_arr(a) for a in gt)
        _check(ph, gh, "pve(hand)")
        _check(pf, gf, "pve(face)")
        pc, gc = pf.mean(0), gf.mean(0)
        p = np.concatenate([ph - pc, pf - pc])
        g = np.concatenate([gh - gc, gf - gc])
    else:
        p, g = _arr(pred), _arr(gt)
        _check(p, g, "pve")
        p, g = p - p.mean(0), g - g.mean(0)
    return float(np.linalg.norm(p - g, axis=1).mean() * MM)


def mpjpe(pred, gt) -> float:
    p, g = _arr(pred), _arr(gt)
    _check(p, g, "mpjpe")
    return float(np.linalg.norm(p - g, axis=-1).mean() * MM)


def pampjpe(pred, gt) -> float:
    p, g = _arr(pred), _arr(gt)
    _check(p, g, "pampjpe")
    return mpjpe(procrustes_align(p, g), g)


def penetration_depths(hand_v, face_v, face_tris) -> np.ndarray:
    hv, fv = _arr(hand_v), _arr(face_v)
    w = winding_numbers(hv, fv, np.asarray(face_tris))
    inside = np.flatnonzero(w > 0.5)
    if len(inside) == 0:
        return np.zeros(0)
    d, _, _ = SurfaceIndex.build(fv, np.asarray(face_tris)).nearest(hv[inside])
    return d[d > 0]


def collision_distance(frames, mode: str = "penetrating") -> float:
    """Mean penetration depth (mm): over vertices, then over frames.

    ``frames`` yields (hand_v, face_v, face_tris).  ``mode="penetrating"`` averages
    over penetrating vertices only; ``mode="all"`` divides by every hand vertex.
    Frames without penetration contribute 0.
    """
    if mode not in ("penetrating", "all"):
        raise ValueError(f"unknown collision mode {mode!r}")
    per = []
    for hv, fv, tris in frames:
        d = penetration_depths(hv, fv, tris)
        if len(d) == 0:
            per.append(0.0)
        else:
            n = len(d) if mode == "penetrating" else len(_arr(hv))
            per.append(d.sum() / n * MM)
    return float(np.mean(per)) if per else 0.0


def f_score(a: float, b: float) -> float:
    """Harmonic mean; 0 when both rates are 0."""
    return 0.0 if a + b == 0 else 2 * a * b / (a + b)


def touches(hand_v, face_v, face_tris, tau: float) -> bool:
    """Any hand vertex within ``tau`` of the face surface, or inside it."""
    hv, fv = _arr(hand_v), _arr(face_v)
    tris = np.asarray(face_tris)
    if np.any(winding_numbers(hv, fv, tris) > 0.5):
        return True
    d, _, _ = SurfaceIndex.build(fv, tris).nearest(hv)
    return bool(d.min() <= tau)


def plausibility(frames, gt_contact, tau: float = 0.004) -> dict:
    """Non-collision ratio, touchness and their harmonic mean, in percent.

    ``gt_contact[i]`` tells whether frame i has any ground-truth contact.
    Touchness is None when no frame has ground-truth contact; f_score then too.
    """
    frames = list(frames)
    gt_contact = np.asarray(gt_contact, dtype=bool)
    if len(frames) != len(gt_contact):
        raise ValueError("plausibility: one gt contact flag per frame required")
    clean = [len(penetration_depths(*f)) == 0 for f in frames]
    nc = 100.0 * float(np.mean(clean)) if frames else 0.0
    idx = np.flatnonzero(gt_contact)
    if len(idx) == 0:
        return {"non_col": nc, "touchness": None, "f_score": None}
    t = 100.0 * float(np.mean([touches(*frames[i], tau) for i in idx]))
    return {"non_col": nc, "touchness": t, "f_score": f_score(nc, t)}


def contact_classification(probs, labels, threshold: float = 0.5) -> dict:
    p, y = _arr(probs).ravel(), _arr(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"contact_classification: {p.shape} vs {y.shape}")
    pred = p > threshold
    pos = y > 0.5
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return {"precision": prec, "recall": rec, "f_score": f_score(prec, rec),
            "accuracy": (tp + tn) / max(1, len(p)), "tp": tp, "fp": fp, "fn": fn, "tn": tn}


@dataclass
class EvalReport:
    pve_mm: float
    mpjpe_mm: float
    pampjpe_mm: float
    col_dist_mm: float
    non_col_pct: float
    touchness_pct: float | None
    f_score_pct: float | None
    contact_hand: dict
    contact_face: dict
    frames: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        s = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s + "\n")
        return s

    def table_row(self, name: str = "model") -> str:
        def f(x):
            return "  n/a" if x is None else f"{x:6.2f}"
        return (f"{name:<12} PVE {f(self.pve_mm)}  MPJPE {f(self.mpjpe_mm)}  PAMPJPE {f(self.pampjpe_mm)}  "
                f"ColDist {f(self.col_dist_mm)}  NonCol {f(self.non_col_pct)}  "
                f"Touch {f(self.touchness_pct)}  F {f(self.f_score_pct)}")


def evaluate(predictions: list, samples: list, models, tau: float = 0.004,
             col_mode: str = "penetrating") -> EvalReport:
    """Score per-sample predictions (dicts with hand_v, face_v, deformation, hand_kp,
    face_kp, contact_hand, contact_face) against labeled samples."""
    face, hand = models
    if len(predictions) != len(samples):
        raise ValueError("evaluate: one prediction per sample required")
    per, frames, gt_flags = [], [], []
    for p, s in zip(predictions, samples):
        if s.kind != "labeled":
            raise ValueError("evaluate: labeled samples required")
        pf = _arr(p["face_v"]) + _arr(p.get("deformation", np.zeros_like(_arr(p["face_v"]))))
        kp_p = np.concatenate([_arr(p["hand_kp"]), _arr(p["face_kp"])])
        kp_g = np.concatenate([s.hand_keypoints, s.face_keypoints])
        frames.append((_arr(p["hand_v"]), pf, face.faces))
        gt_flags.append(bool(s.contact_hand.any() or s.contact_face.any()))
        per.append({
            "pve_mm": pve((p["hand_v"], pf), (s.hand_vertices, s.deformed_face)),
            "mpjpe_mm": mpjpe(kp_p, kp_g),
            "pampjpe_mm": pampjpe(kp_p, kp_g),
        })
    pl = plausibility(frames, gt_flags, tau)
    ch = contact_classification(np.concatenate([_arr(p["contact_hand"]) for p in predictions]),
                                np.concatenate([s.contact_hand for s in samples]))
    cf = contact_classification(np.concatenate([_arr(p["contact_face"]) for p in predictions]),
                                np.concatenate([s.contact_face for s in samples]))
    return EvalReport(
        pve_mm=float(np.mean([r["pve_mm"] for r in per])),
        mpjpe_mm=float(np.mean([r["mpjpe_mm"] for r in per])),
        pampjpe_mm=float(np.mean([r["pampjpe_mm"] for r in per])),
        col_dist_mm=collision_distance(frames, col_mode),
        non_col_pct=pl["non_col"], touchness_pct=pl["touchness"], f_score_pct=pl["f_score"],
        contact_hand=ch, contact_face=cf, frames=per,
    )


def oracle_predictions(samples: list) -> list:
    """Ground truth repackaged as predictions (perfect-oracle baseline)."""
    return [{
        "hand_v": s.hand_vertices, "face_v": s.face_vertices, "deformation": s.deformation,
        "hand_kp": s.hand_keypoints, "face_kp": s.face_keypoints,
        "contact_hand": s.contact_hand, "contact_face": s.contact_face,
    } for s in samples]
