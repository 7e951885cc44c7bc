"""Dataset container: one zip of .npy arrays plus a JSON header.

Array keys are ``s<index>/<field>``; pose states are flattened to
``s<index>/hand_state.<name>``.  The header records the schema version, the
per-sample kind tags and the synthesis config.

Field table (Vh/Vf hand/face vertices, Kh/Kf keypoints)::

    field                     kind     shape
    image                     both     224 x 224 x 3 float32
    camera                    labeled  18
    hand_state.*, face_state.* labeled pose-state arrays
    hand_vertices             labeled  Vh x 3
    face_vertices             labeled  Vf x 3   (undeformed)
    deformation               labeled  Vf x 3   (|d| <= 0.05 m)
    hand_keypoints            labeled  Kh x 3
    face_keypoints            labeled  Kf x 3
    hand_keypoints2d          labeled  Kh x 2
    face_keypoints2d          labeled  Kf x 2
    contact_hand              labeled  Vh      (0/1)
    contact_face              labeled  Vf      (0/1)
    pseudo_hand_keypoints2d   wild     Kh x 2
    pseudo_face_keypoints2d   wild     Kf x 2
    pseudo_hand_depth         wild     Kh      (NaN = no estimate)
    pseudo_face_depth         wild     Kf
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from handface.data.synth import IMAGE_SIZE, Sample
from handface.meshcore.model import AssetError, read_npz, write_npz

DATASET_FORMAT = "handface-dataset/1"
STATE_KEYS = ("joint_rotations", "shape", "expression", "root_rotation", "root_translation")
KINDS = ("labeled", "wild")


class DatasetError(ValueError):
    def __init__(self, message: str, index: int | None = None, field: str | None = None):
        where = ""
        if index is not None:
            where = f"sample {index}"
            if field is not None:
                where += f", field '{field}'"
            where += ": "
        super().__init__(where + message)
        self.index = index
        self.field = field


def _check_array(a, index, name, shape=None, finite=True):
    if not isinstance(a, np.ndarray):
        raise DatasetError("missing or not an array", index, name)
    if shape is not None:
        if a.ndim != len(shape) or any(s is not None and s != n for s, n in zip(shape, a.shape)):
            raise DatasetError(f"shape {a.shape}, expected {tuple(shape)}", index, name)
    if finite and not np.all(np.isfinite(a)):
        raise DatasetError("non-finite values", index, name)


def validate_sample(s: Sample, index: int = 0) -> None:
    """Check presence rules and per-field invariants; raise DatasetError on the first problem."""
    if s.kind not in KINDS:
        raise DatasetError(f"unknown kind {s.kind!r}", index, "kind")
    _check_array(s.image, index, "image", (IMAGE_SIZE, IMAGE_SIZE, 3))
    if s.kind == "labeled":
        for name in Sample.WILD_FIELDS:
            if getattr(s, name) is not None:
                raise DatasetError("wild-only field on a labeled sample", index, name)
        for name in Sample.LABELED_FIELDS:
            if getattr(s, name) is None:
                raise DatasetError("missing", index, name)
        _check_array(s.camera, index, "camera", (18,))
        for st in ("hand_state", "face_state"):
            d = getattr(s, st)
            for k in STATE_KEYS:
                if k not in d:
                    raise DatasetError("missing", index, f"{st}.{k}")
                _check_array(np.asarray(d[k]), index, f"{st}.{k}")
        Vh, Vf = len(s.hand_vertices), len(s.face_vertices)
        _check_array(s.hand_vertices, index, "hand_vertices", (None, 3))
        _check_array(s.face_vertices, index, "face_vertices", (None, 3))
        _check_array(s.deformation, index, "deformation", (Vf, 3))
        if np.linalg.norm(s.deformation, axis=1).max(initial=0) > 0.05 + 1e-12:
            raise DatasetError("deformation exceeds 0.05 m", index, "deformation")
        _check_array(s.hand_keypoints, index, "hand_keypoints", (None, 3))
        _check_array(s.face_keypoints, index, "face_keypoints", (None, 3))
        _check_array(s.hand_keypoints2d, index, "hand_keypoints2d", (len(s.hand_keypoints), 2))
        _check_array(s.face_keypoints2d, index, "face_keypoints2d", (len(s.face_keypoints), 2))
        for name, n in (("contact_hand", Vh), ("contact_face", Vf)):
            a = getattr(s, name)
            _check_array(a, index, name, (n,))
            if not np.all((a == 0) | (a == 1)):
                raise DatasetError("labels must be 0 or 1", index, name)
    else:
        for name in Sample.LABELED_FIELDS:
            if getattr(s, name) is not None:
                raise DatasetError("3D/labeled field present on a wild sample", index, name)
        _check_array(s.pseudo_hand_keypoints2d, index, "pseudo_hand_keypoints2d", (None, 2))
        _check_array(s.pseudo_face_keypoints2d, index, "pseudo_face_keypoints2d", (None, 2))
        for name, kp in (("pseudo_hand_depth", s.pseudo_hand_keypoints2d),
                         ("pseudo_face_depth", s.pseudo_face_keypoints2d)):
            a = getattr(s, name)
            _check_array(a, index, name, (len(kp),), finite=False)
            # NaN marks "no estimate"; +-inf is corruption
            if np.any(np.isinf(a)):
                raise DatasetError("infinite depth", index, name)


def _flatten(s: Sample, i: int) -> dict:
    out = {}
    p = f"s{i:05d}/"
    out[p + "image"] = s.image
    names = Sample.LABELED_FIELDS if s.kind == "labeled" else Sample.WILD_FIELDS
    for name in names:
        v = getattr(s, name)
        if name.endswith("_state"):
            for k in STATE_KEYS:
                out[f"{p}{name}.{k}"] = np.asarray(v[k], dtype=np.float64)
        else:
            out[p + name] = v
    return out


def write_dataset(path, samples, config: dict | None = None, extra_header: dict | None = None) -> None:
    for i, s in enumerate(samples):
        validate_sample(s, i)
    arrays = {}
    for i, s in enumerate(samples):
        arrays.update(_flatten(s, i))
    header = {
        "format": DATASET_FORMAT,
        "count": len(samples),
        "kinds": [s.kind for s in samples],
        "config": config or {},
    }
    if extra_header:
        header.update(extra_header)
    path = Path(path)
    if not path.parent.exists():
        raise DatasetError(f"directory {path.parent} does not exist")
    write_npz(path, arrays, header)


def read_dataset(path, with_header: bool = False):
    """Load and validate every sample; errors name the sample index and field."""
    try:
        header, arrays = read_npz(path)
    except AssetError as exc:
        raise DatasetError(str(exc)) from exc
    if header.get("format") != DATASET_FORMAT:
        raise DatasetError(f"unsupported format tag {header.get('format')!r}")
    kinds = header.get("kinds")
    if not isinstance(kinds, list) or len(kinds) != header.get("count"):
        raise DatasetError("header kind tags do not match the sample count")
    samples = []
    for i, kind in enumerate(kinds):
        p = f"s{i:05d}/"
        if kind not in KINDS:
            raise DatasetError(f"unknown kind {kind!r}", i, "kind")
        fields = {"kind": kind, "image": arrays.pop(p + "image", None)}
        allowed = Sample.LABELED_FIELDS if kind == "labeled" else Sample.WILD_FIELDS
        for name in allowed:
            if name.endswith("_state"):
                d = {}
                for k in STATE_KEYS:
                    key = f"{p}{name}.{k}"
                    if key not in arrays:
                        raise DatasetError("missing", i, f"{name}.{k}")
                    d[k] = arrays.pop(key)
                fields[name] = d
            else:
                if p + name not in arrays:
                    raise DatasetError("missing", i, name)
                fields[name] = arrays.pop(p + name)
        stray = sorted(k for k in arrays if k.startswith(p))
        if stray:
            raise DatasetError(f"field not allowed for kind {kind!r}", i, stray[0][len(p):])
        s = Sample(**fields)
        validate_sample(s, i)
        samples.append(s)
    if arrays:
        raise DatasetError(f"unexpected arrays {sorted(arrays)[:3]}")
    return (samples, header) if with_header else samples
