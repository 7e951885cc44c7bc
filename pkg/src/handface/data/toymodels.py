"""Procedural stand-ins for the face and hand parametric models.

Face: level-3 icosphere (642 vertices) shaped into an ellipsoidal head, one root
joint, 5 shape and 5 expression blendshapes.  Lower subdivision levels are
vertex prefixes of higher ones, which gives exact down/up-sampling matrices
(162 and 42 vertices).

Hand: 16 joints in MANO order (wrist, then index, middle, pinky, ring, thumb
with three joints each); a closed palm block plus five closed finger tubes,
195 vertices in total.
"""
from __future__ import annotations

import numpy as np

from handface.meshcore.model import ParametricModel

FACE_RADII = np.array([0.075, 0.10, 0.09])
HAND_KEYPOINTS = 21
FACE_KEYPOINTS = 68


def icosphere(level: int):
    """Unit icosphere; returns (vertices, faces, parents) with parents[i] = (a, b)
    the edge endpoints a new vertex i was created from (or (i, i) for originals)."""
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = np.array(v, dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(f, dtype=np.int64)
    parents = np.stack([np.arange(12), np.arange(12)], 1)
    for _ in range(level):
        n = len(verts)
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        uniq, inv = np.unique(key[:, 0] * n + key[:, 1], return_inverse=True)
        a, b = uniq // n, uniq % n
        mid = verts[a] + verts[b]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        ids = n + inv.reshape(3, -1).T  # (F, 3): midpoints of edges 01, 12, 20
        f0, f1, f2 = faces[:, 0], faces[:, 1], faces[:, 2]
        m01, m12, m20 = ids[:, 0], ids[:, 1], ids[:, 2]
        faces = np.concatenate([np.stack([f0, m01, m20], 1), np.stack([f1, m12, m01], 1),
                                np.stack([f2, m20, m12], 1), np.stack([m01, m12, m20], 1)])
        verts = np.concatenate([verts, mid])
        parents = np.concatenate([parents, np.stack([a, b], 1)])
    return verts, faces, parents


def _upsample(parents: np.ndarray, n_low: int, n_high: int) -> np.ndarray:
    """Row-stochastic (n_high, n_low) matrix: new vertices average their edge parents."""
    M = np.zeros((n_high, n_high))
    for i in range(n_high):
        a, b = parents[i]
        if i < n_low or a == b:
            M[i, i] = 1.0
        else:
            M[i] = 0.5 * (M[a] + M[b])
    return M[:, :n_low]


def _downsample(n_low: int, n_high: int) -> np.ndarray:
    M = np.zeros((n_low, n_high))
    M[np.arange(n_low), np.arange(n_low)] = 1.0
    return M


def _bump(points: np.ndarray, center, sigma: float) -> np.ndarray:
    d2 = ((points - np.asarray(center)) ** 2).sum(1)
    return np.exp(-d2 / (2 * sigma * sigma))


def _farthest_point_sampling(points: np.ndarray, k: int, start: int) -> np.ndarray:
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, np.linalg.norm(points - points[i], axis=1))
    return np.array(chosen)


def make_face_model() -> ParametricModel:
    unit, faces, parents = icosphere(3)
    V = len(unit)  # 642
    verts = unit * FACE_RADII
    normals = unit / FACE_RADII
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    # shape: width, height, depth scaling, nose, chin
    shape = np.zeros((V, 3, 5))
    shape[:, 0, 0] = verts[:, 0] * 0.08
    shape[:, 1, 1] = verts[:, 1] * 0.08
    shape[:, 2, 2] = verts[:, 2] * 0.08
    front = np.array([0, 0, -FACE_RADII[2]])
    shape[:, :, 3] = normals * (0.01 * _bump(verts, front + [0, 0.0, 0], 0.02))[:, None]
    shape[:, :, 4] = normals * (0.008 * _bump(verts, [0, -0.085, -0.04], 0.03))[:, None]

    # expression: jaw open, smile, brow raise, cheek puff, lip pucker
    expr = np.zeros((V, 3, 5))
    jaw = np.clip((-0.02 - verts[:, 1]) / 0.08, 0, 1) * (verts[:, 2] < 0)
    expr[:, 1, 0] = -0.01 * jaw
    for sx in (-1, 1):
        w = _bump(verts, [sx * 0.035, -0.04, -0.075], 0.015)
        expr[:, 0, 1] += sx * 0.006 * w
        expr[:, 1, 1] += 0.004 * w
        expr[:, :, 3] += normals * (0.008 * _bump(verts, [sx * 0.05, -0.02, -0.065], 0.02))[:, None]
    expr[:, 1, 2] = 0.006 * _bump(verts, [0, 0.05, -0.08], 0.03)
    expr[:, 2, 4] = -0.008 * _bump(verts, [0, -0.045, -0.085], 0.012)

    joint_regressor = np.full((1, V), 1.0 / V)  # centroid = origin
    skin = np.ones((V, 1))

    # 68 landmarks spread over the front of the head
    front_ids = np.flatnonzero(normals[:, 2] < -0.35)
    start = int(np.argmin(verts[front_ids, 2]))
    picks = front_ids[_farthest_point_sampling(verts[front_ids], FACE_KEYPOINTS, start)]
    kreg = np.zeros((FACE_KEYPOINTS, V))
    kreg[np.arange(FACE_KEYPOINTS), picks] = 1.0

    n1 = 42
    n2 = 162
    up_2 = _upsample(parents, n2, V)  # 642 x 162
    up_1 = _upsample(parents[:n2], n1, n2)  # 162 x 42
    sampling = {
        "high_to_mid": _downsample(n2, V),
        "mid_to_high": up_2,
        "high_to_low": _downsample(n1, V),
        "low_to_high": up_2 @ up_1,
    }
    return ParametricModel("face", verts, faces, joint_regressor, np.array([-1]), skin,
                           shape, expr, kreg, sampling)


# finger name -> (base position, direction, segment lengths, radius)
_FINGERS = {
    "index": ([0.03, 0.09, 0.0], [0.08, 1, 0], [0.045, 0.025, 0.02], 0.009),
    "middle": ([0.01, 0.092, 0.0], [0.0, 1, 0], [0.048, 0.028, 0.021], 0.0095),
    "pinky": ([-0.032, 0.082, 0.0], [-0.12, 1, 0], [0.035, 0.02, 0.017], 0.0075),
    "ring": ([-0.011, 0.089, 0.0], [-0.05, 1, 0], [0.045, 0.026, 0.02], 0.009),
    "thumb": ([0.038, 0.02, -0.004], [0.8, 0.6, -0.25], [0.04, 0.032, 0.025], 0.01),
}
_RING_SIDES = 5
# positions along the finger as (segment, fraction); 6 rings per finger
_RING_STATIONS = [(0, 0.0), (0, 0.5), (1, 0.0), (1, 0.5), (2, 0.0), (2, 0.6)]
_PALM_SIDES = 11
_PALM_RINGS = (0.0, 0.045, 0.09)


def _frame(direction):
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    ref = np.array([0, 0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0, 0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return d, e1, e2


def _orient_outward(verts, tris, start, stop):
    """Flip a closed component's triangles if its signed volume is negative."""
    comp = tris[start:stop]
    a, b, c = verts[comp[:, 0]], verts[comp[:, 1]], verts[comp[:, 2]]
    vol = np.einsum("ij,ij->i", a, np.cross(b, c)).sum()
    if vol < 0:
        tris[start:stop] = comp[:, ::-1]


def make_hand_model() -> ParametricModel:
    verts, weights, tris = [], [], []
    J = 16
    joints_rest = np.zeros((J, 3))
    parent = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
    joint_rings = {j: [] for j in range(J)}

    def add_vertex(p, w):
        verts.append(np.asarray(p, dtype=np.float64))
        weights.append(w)
        return len(verts) - 1

    def onehot(*pairs):
        w = np.zeros(J)
        for j, a in pairs:
            w[j] += a
        return w

    # palm: three rounded-rectangle rings along y plus two poles (35 vertices)
    hx, hz, ly = 0.042, 0.0125, _PALM_RINGS[-1]
    ang = 2 * np.pi * (np.arange(_PALM_SIDES) + 0.5) / _PALM_SIDES
    c, s_ = np.cos(ang), np.sin(ang)
    sect = np.stack([hx * np.sign(c) * np.abs(c) ** 0.5, hz * np.sign(s_) * np.abs(s_) ** 0.5], 1)
    rings = []
    for y in _PALM_RINGS:
        rings.append([add_vertex([x, y, z], onehot((0, 1.0))) for x, z in sect])
    p_lo = add_vertex([0, -0.012, 0], onehot((0, 1.0)))
    p_hi = add_vertex([0, ly + 0.006, 0], onehot((0, 1.0)))
    joint_rings[0] = rings[0]
    _tube(tris, rings, p_lo, p_hi)
    tips = []
    for f_idx, (name, (base, direction, lengths, radius)) in enumerate(_FINGERS.items()):
        j0 = 1 + 3 * f_idx
        d, e1, e2 = _frame(direction)
        base = np.asarray(base, dtype=np.float64)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        for s in range(3):
            joints_rest[j0 + s] = base + d * cum[s]
        rings = []
        for seg, frac in _RING_STATIONS:
            along = cum[seg] + frac * lengths[seg]
            c = base + d * along
            if frac == 0.0:
                # ring at a joint: blend parent segment and child segment
                par = 0 if seg == 0 else j0 + seg - 1
                w = onehot((par, 0.5), (j0 + seg, 0.5))
            else:
                w = onehot((j0 + seg, 1.0))
            r = radius * (1.0 - 0.25 * along / cum[-1])
            ring = []
            for k in range(_RING_SIDES):
                ang = 2 * np.pi * k / _RING_SIDES
                ring.append(add_vertex(c + r * (np.cos(ang) * e1 + np.sin(ang) * e2), w))
            rings.append(ring)
            if frac == 0.0:
                joint_rings[j0 + seg] = ring
        p_base = add_vertex(base - d * 0.004, onehot((0, 0.5), (j0, 0.5)))
        p_tip = add_vertex(base + d * (cum[-1] + 0.004), onehot((j0 + 2, 1.0)))
        tips.append(p_tip)
        _tube(tris, rings, p_base, p_hi=p_tip)

    verts = np.array(verts)
    weights = np.array(weights)
    tris = np.array(tris, dtype=np.int64)
    # orient each closed component outward
    comp_sizes = ([2 * _PALM_SIDES * len(_PALM_RINGS)]
                  + [2 * _RING_SIDES * len(_RING_STATIONS)] * 5)
    start = 0
    for n in comp_sizes:
        _orient_outward(verts, tris, start, start + n)
        start += n
    V = len(verts)

    joint_regressor = np.zeros((J, V))
    for j in range(J):
        ids = joint_rings[j]
        joint_regressor[j, ids] = 1.0 / len(ids)
    # joint centres coincide with the ring centroids that define them
    kreg = np.zeros((HAND_KEYPOINTS, V))
    kreg[:J] = joint_regressor
    for i, tip in enumerate(tips):
        kreg[J + i, tip] = 1.0

    # shape: global scale, finger length, palm width, thickness, then smooth fields
    rng = np.random.default_rng(1234)
    S = 10
    shape = np.zeros((V, 3, S))
    shape[:, :, 0] = verts * 0.06
    shape[:, 1, 1] = np.clip(verts[:, 1] - ly, 0, None) * 0.12
    shape[:, 0, 2] = verts[:, 0] * 0.08
    shape[:, 2, 3] = verts[:, 2] * 0.15
    for s in range(4, S):
        freq = rng.normal(size=(3, 3)) * 20
        phase = rng.uniform(0, 2 * np.pi, size=3)
        shape[:, :, s] = 0.002 * np.sin(verts @ freq + phase)
    return ParametricModel("hand", verts, tris, joint_regressor, parent, weights, shape,
                           np.zeros((V, 3, 0)), kreg,
                           {"high_to_low": np.eye(V), "low_to_high": np.eye(V)})


def _tube(tris, rings, p_lo, p_hi):
    n = len(rings[0])
    first = rings[0]
    for k in range(n):
        tris.append([p_lo, first[(k + 1) % n], first[k]])
    for a, b in zip(rings[:-1], rings[1:]):
        for k in range(n):
            k1 = (k + 1) % n
            tris.append([a[k], a[k1], b[k1]])
            tris.append([a[k], b[k1], b[k]])
    last = rings[-1]
    for k in range(n):
        tris.append([p_hi, last[k], last[(k + 1) % n]])


def make_toy_models() -> tuple[ParametricModel, ParametricModel]:
    face = make_face_model()
    hand = make_hand_model()
    face.validate()
    hand.validate()
    return face, hand
