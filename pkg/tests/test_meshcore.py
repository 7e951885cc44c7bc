import numpy as np
import pytest
import torch
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from handface.camrender import Camera, project
from handface.meshcore import (
    AssetError,
    DegenerateError,
    ParametricModel,
    PoseState,
    apply_deformation,
    fit_parameters_lm,
    lbs_forward,
    procrustes_align,
    regress_keypoints,
    resample_mesh,
)
from handface.meshcore.rotation import axis_angle_to_matrix, canonicalize, matrix_to_axis_angle


def random_state(model, rng, scale=0.3):
    st = PoseState.zeros(model)
    st.joint_rotations = torch.as_tensor(rng.normal(0, scale, (model.num_joints, 3)))
    st.shape = torch.as_tensor(rng.normal(0, 1, model.num_shape))
    st.expression = torch.as_tensor(rng.normal(0, 1, model.num_expression))
    st.root_rotation = torch.as_tensor(rng.normal(0, scale, 3))
    st.root_translation = torch.as_tensor(rng.normal(0, 0.1, 3))
    return st


def chain_model():
    # root at the origin, child joint at (1, 0, 0); v0 rides the root, v1 the child
    verts = np.array([[0.5, 0, 0], [2.0, 0, 0], [1.5, 0.5, 0]])
    return ParametricModel(
        "chain", verts, np.array([[0, 1, 2]]),
        joint_regressor=np.array([[1.0, 0, 0], [0, 0, 0]]) * 0 + np.array([[0, 0, 0], [0, 0, 0]]),
        parent=np.array([-1, 0]), skin_weights=np.array([[1.0, 0], [0, 1.0], [0, 1.0]]),
        shape_basis=np.zeros((3, 3, 0)), expression_basis=np.zeros((3, 3, 0)),
        keypoint_regressor=np.eye(3))


def test_zero_state_returns_template(models):
    for m in models:
        v, _ = lbs_forward(m, PoseState.zeros(m))
        assert np.array_equal(v.numpy(), m.template_vertices)


def test_two_bone_chain_closed_form():
    m = chain_model()
    # joints: regress root to origin and child to (1,0,0) via explicit weights
    m.template_vertices = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [1.5, 0.5, 0]])
    m.faces = np.array([[0, 1, 2], [1, 2, 3]])
    m.joint_regressor = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    m.skin_weights = np.array([[1.0, 0], [0, 1.0], [0, 1.0], [0, 1.0]])
    m.shape_basis = np.zeros((4, 3, 0))
    m.expression_basis = np.zeros((4, 3, 0))
    m.keypoint_regressor = np.eye(4)
    m.validate()
    st = PoseState.zeros(m)
    st.joint_rotations = torch.tensor([[0, 0, 0], [0, 0, np.pi / 2]])
    v, j = lbs_forward(m, st)
    Rz = Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix()
    pivot = np.array([1.0, 0, 0])
    expect = (m.template_vertices[1:] - pivot) @ Rz.T + pivot
    assert np.allclose(v.numpy()[1:], expect, atol=1e-12)
    assert np.allclose(v.numpy()[0], [0, 0, 0])
    assert np.allclose(j.numpy(), [[0, 0, 0], [1, 0, 0]])


def test_full_fidelity_shape(rng):
    V, J = 778, 16
    w = rng.random((V, J))
    m = ParametricModel("hand778", rng.normal(size=(V, 3)), np.array([[0, 1, 2]]),
                        np.full((J, V), 1 / V), np.array([-1] + [0] * (J - 1)), w / w.sum(1, keepdims=True),
                        rng.normal(size=(V, 3, 10)), np.zeros((V, 3, 0)), np.eye(21, V))
    m.validate()
    v, _ = lbs_forward(m, random_state(m, rng))
    assert v.shape == (778, 3)


def test_lbs_dimension_mismatch(models):
    face, hand = models
    st = PoseState.zeros(hand)
    st.shape = torch.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        lbs_forward(hand, st)


def test_rigid_equivariance(models, rng):
    for m in models:
        st = random_state(m, rng)
        st0 = PoseState(st.joint_rotations, st.shape, st.expression, torch.zeros(3), torch.zeros(3))
        v, _ = lbs_forward(m, st)
        v0, _ = lbs_forward(m, st0)
        R = axis_angle_to_matrix(st.root_rotation)
        assert torch.allclose(v, v0 @ R.T + st.root_translation, atol=1e-10, rtol=0)


def test_batched_lbs_matches_loop(models, rng):
    hand = models[1]
    states = [random_state(hand, rng) for _ in range(3)]
    vb, _ = lbs_forward(hand, PoseState.stack(states))
    for i, s in enumerate(states):
        assert torch.allclose(vb[i], lbs_forward(hand, s)[0], atol=1e-14)


def test_apply_deformation(rng):
    u = rng.normal(size=(50, 3))
    assert torch.equal(apply_deformation(u, np.zeros_like(u)), torch.as_tensor(u))
    shifted = apply_deformation(u, np.tile([0, 0, 0.01], (50, 1))).numpy()
    assert np.allclose(shifted - u, [0, 0, 0.01], atol=1e-15)
    d = rng.normal(size=(50, 3))
    out = apply_deformation(u, d).numpy()
    for i in range(50):
        assert np.array_equal(out[i], u[i] + d[i])
    with pytest.raises(ValueError):
        apply_deformation(u, d[:10])


def test_regress_keypoints(rng):
    v = rng.normal(size=(6, 3))
    onehot = np.zeros((1, 6))
    onehot[0, 4] = 1
    assert np.array_equal(regress_keypoints(v, onehot).numpy()[0], v[4])
    half = np.zeros((1, 6))
    half[0, :2] = 0.5
    assert np.allclose(regress_keypoints(v, half).numpy()[0], (v[0] + v[1]) / 2)
    R = rng.random((5, 6)) * (rng.random((5, 6)) < 0.3)
    assert np.allclose(regress_keypoints(v, R).numpy(), R @ v, atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        regress_keypoints(v, np.ones((2, 5)))


def test_resample_mesh(models, rng):
    face = models[0]
    p = np.array([0.1, -0.2, 0.3])
    const = np.tile(p, (face.num_vertices, 1))
    for name in ("high_to_low", "high_to_mid"):
        assert np.allclose(resample_mesh(const, face.sampling(name)).numpy(), p, atol=1e-15)
    const_low = np.tile(p, (42, 1))
    assert np.allclose(resample_mesh(const_low, face.sampling("low_to_high")).numpy(), p, atol=1e-15)
    v = rng.normal(size=(12, 3))
    assert np.array_equal(resample_mesh(v, np.eye(12)).numpy(), v)
    # 12 -> 4 by averaging consecutive triples
    M = np.kron(np.eye(4), np.full((1, 3), 1 / 3))
    expect = np.stack([v[3 * i:3 * i + 3].sum(0) / 3 for i in range(4)])
    assert np.allclose(resample_mesh(v, M).numpy(), expect, atol=1e-15)
    with pytest.raises(ValueError):
        resample_mesh(v, np.eye(5))


def test_procrustes_identity_and_similarity(rng):
    gt = rng.normal(size=(20, 3))
    assert np.allclose(procrustes_align(gt, gt), gt, atol=1e-12)
    R0 = Rotation.random(random_state=1).as_matrix()
    pred = 2 * gt @ R0.T + np.array([0.3, -1, 2])
    assert np.linalg.norm(procrustes_align(pred, gt) - gt, axis=1).max() < 1e-9


def _brute_residual(pred, gt):
    """Minimize over rotations numerically; scale and translation in closed form."""
    p = pred - pred.mean(0)
    g = gt - gt.mean(0)

    def cost(rv):
        R = Rotation.from_rotvec(rv).as_matrix()
        q = p @ R.T
        s = max((q * g).sum() / (q * q).sum(), 0)
        return ((s * q - g) ** 2).sum()

    grid = [np.array(r) for r in Rotation.create_group("O").as_rotvec()]
    grid += list(Rotation.random(300, random_state=0).as_rotvec())
    best = min(grid, key=cost)
    res = minimize(cost, best, method="BFGS", options={"gtol": 1e-12})
    return res.fun


def test_procrustes_matches_grid_oracle(rng):
    for _ in range(5):
        gt = rng.normal(size=(6, 3))
        R0 = Rotation.random(random_state=int(rng.integers(1e6))).as_matrix()
        pred = 0.7 * gt @ R0.T + rng.normal(0, 0.1, gt.shape) + 1.0
        ours = ((procrustes_align(pred, gt) - gt) ** 2).sum()
        assert abs(ours - _brute_residual(pred, gt)) < 1e-6
        assert ours <= _brute_residual(pred, gt) + 1e-12


def test_procrustes_similarity_invariance(rng):
    gt = rng.normal(size=(15, 3))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    base = np.linalg.norm(procrustes_align(pred, gt) - gt)
    for k in range(5):
        R = Rotation.random(random_state=k).as_matrix()
        moved = 3.5 * pred @ R.T + rng.normal(size=3)
        assert abs(np.linalg.norm(procrustes_align(moved, gt) - gt) - base) < 1e-10


def test_procrustes_degenerate(rng):
    line = np.outer(np.linspace(0, 1, 5), [1, 2, 3])
    with pytest.raises(DegenerateError):
        procrustes_align(rng.normal(size=(5, 3)), line)
    with pytest.raises(DegenerateError):
        procrustes_align(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))


def test_rotation_roundtrip(rng):
    for _ in range(50):
        r = rng.normal(size=3)
        r = canonicalize(r)
        R = axis_angle_to_matrix(torch.as_tensor(r)).numpy()
        assert np.allclose(R, Rotation.from_rotvec(r).as_matrix(), atol=1e-12)
        assert np.allclose(matrix_to_axis_angle(R), r, atol=1e-8)
        assert np.linalg.norm(r) < np.pi


def test_rotation_smooth_at_zero():
    x = torch.zeros(3, requires_grad=True)
    R = axis_angle_to_matrix(x)
    R.sum().backward()
    assert torch.isfinite(x.grad).all()


def test_lm_exact_init_converges_immediately(models, rng):
    hand = models[1]
    st = random_state(hand, rng, 0.2)
    target = lbs_forward(hand, st)[0]
    res = fit_parameters_lm(hand, st, target_vertices=target)
    assert res.converged and res.iterations == 1 and res.rms < 1e-12


def test_lm_monotone_and_recovers(models, rng):
    face = models[0]
    st = random_state(face, rng, 0.2)
    target = lbs_forward(face, st)[0]
    init = PoseState(st.joint_rotations + 0.1, st.shape, st.expression, st.root_rotation, st.root_translation)
    res = fit_parameters_lm(face, init, target_vertices=target)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    v = lbs_forward(face, res.state)[0]
    assert float(torch.sqrt(((v - target) ** 2).sum(-1).mean())) < 1e-6


def test_lm_2d_keypoints_translated_hand(models):
    hand = models[1]
    cam = Camera(380.0, 380.0, 111.5, 111.5, 224, 224)
    st = PoseState.zeros(hand)
    st.root_translation = torch.tensor([0.02, -0.03, 0.5])
    kp = torch.as_tensor(hand.keypoint_regressor) @ lbs_forward(hand, st)[0]
    target, _, _ = project(cam, kp)
    init = PoseState.zeros(hand)
    init.root_translation = torch.tensor([0.0, 0.0, 0.55])
    free = np.zeros(3 * hand.num_joints + hand.num_shape + 6, dtype=bool)
    free[-6:] = True
    res = fit_parameters_lm(hand, init, target_keypoints2d=target, camera=cam, free=free)
    assert res.rms < 0.5


def test_lm_rejects_bad_target(models):
    hand = models[1]
    with pytest.raises(ValueError):
        fit_parameters_lm(hand, PoseState.zeros(hand), target_vertices=np.zeros((10, 3)))


def test_asset_roundtrip(models, tmp_path):
    for m in models:
        path = tmp_path / f"{m.name}.npz"
        m.save(path)
        back = ParametricModel.load(path)
        for name in ("template_vertices", "faces", "joint_regressor", "parent", "skin_weights",
                     "shape_basis", "expression_basis", "keypoint_regressor"):
            assert np.array_equal(getattr(back, name), getattr(m, name))
        assert back.sampling_matrices.keys() == m.sampling_matrices.keys()
        assert np.abs(back.skin_weights.sum(1) - 1).max() <= 1e-9
        m.save(tmp_path / "again.npz")
        assert path.read_bytes() == (tmp_path / "again.npz").read_bytes()


def test_asset_loader_rejects_violations(models, tmp_path):
    hand = models[1]
    bad = ParametricModel(**{**hand.__dict__, "skin_weights": hand.skin_weights * 1.1})
    bad.save(tmp_path / "bad.npz")
    with pytest.raises(AssetError, match="skin weight"):
        ParametricModel.load(tmp_path / "bad.npz")
    cyc = ParametricModel(**{**hand.__dict__, "parent": np.r_[-1, 2, 1, hand.parent[3:]]})
    cyc.save(tmp_path / "cyc.npz")
    with pytest.raises(AssetError, match="cycle"):
        ParametricModel.load(tmp_path / "cyc.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(AssetError):
        ParametricModel.load(tmp_path / "junk.npz")
