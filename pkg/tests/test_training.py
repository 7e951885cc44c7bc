import numpy as np
import pytest
import torch

from handface import training as T
from handface.camrender import project
from handface.interaction import chamfer_directed, contact_bce, deformation_loss
from handface.meshcore import PoseState
from handface.network import Discriminator, HandFaceNet, NetConfig
from handface.training import (
    LossWeights,
    OptimState,
    TrainConfig,
    Trainer,
    adversarial_losses,
    compute_interaction_loss,
    compute_mesh_loss,
    generator_loss,
    optimizer_step,
)
from meshes import sphere

ZERO_INNER = dict(reproj=0, vert=0, key=0, params=0, touch=0, contact=0, collision=0, deform=0)


def perfect_pred(models, s):
    face, hand = models
    down = face.sampling("high_to_low")
    hs, fs = PoseState.from_numpy(s.hand_state), PoseState.from_numpy(s.face_state)
    t = torch.as_tensor
    return {
        "rough_hand_kp": t(s.hand_keypoints), "rough_face_kp": t(s.face_keypoints),
        "mesh_kp_hand": t(s.hand_keypoints), "mesh_kp_face": t(s.face_keypoints),
        "param_kp_hand": t(s.hand_keypoints), "param_kp_face": t(s.face_keypoints),
        "rough_hand_v": t(s.hand_vertices), "rough_face_v": t(down @ s.face_vertices),
        "hand_v": t(s.hand_vertices), "face_v": t(s.face_vertices),
        "hand_state": hs, "face_state": fs, "camera_correction": None,
        "contact_hand": t(s.contact_hand), "contact_face": t(s.contact_face), "deformation": t(s.deformation),
    }


def labeled(small_dataset):
    return [s for s in small_dataset if s.kind == "labeled"]


def test_mesh_loss_examples(models, small_dataset):
    s = labeled(small_dataset)[0]
    gt = T._labeled_gt(s)
    down = models[0].sampling("high_to_low")
    p = perfect_pred(models, s)
    total, parts = compute_mesh_loss(p, gt, s.get_camera(), face_down=down)
    assert float(total) < 1e-8
    p["hand_v"] = p["hand_v"] + torch.tensor([0.001, 0, 0])
    total, parts = compute_mesh_loss(p, gt, s.get_camera(), face_down=down)
    assert abs(float(LossWeights().vert * parts["vert"]) - 0.012) < 1e-12
    doubled, _ = compute_mesh_loss(p, gt, s.get_camera(), LossWeights(reproj=2, vert=8, key=4, params=4), down)
    assert abs(float(doubled) - 2 * float(total)) < 1e-12
    gt.pop("hand_vertices")
    with pytest.raises(ValueError, match="hand_vertices"):
        compute_mesh_loss(p, gt, s.get_camera(), face_down=down)


def test_interaction_loss_floor(models):
    face = models[0]
    v, f = sphere(0.1, level=3)
    assert len(v) == face.num_vertices
    hv = np.array([[0.3, 0.0, 0.0]] * 4) + np.arange(4)[:, None] * 0.01
    d = np.zeros_like(v)
    d[0] = [0.001, 0, 0]
    pred = {"contact_hand": torch.zeros(4), "contact_face": torch.zeros(len(v)), "deformation": torch.as_tensor(d),
            "hand_v": torch.as_tensor(hv), "face_v": torch.as_tensor(v - d)}
    gt = {"contact_hand": np.zeros(4), "contact_face": np.zeros(len(v)), "deformation": d}
    total, parts, diag = compute_interaction_loss(pred, gt, f)
    assert 0 < float(total) <= 2e-7 and diag["touch_empty"]


def test_interaction_loss_composition(models):
    v, f = sphere(0.1, level=3)
    rng = np.random.default_rng(0)
    hv = v[:5] * 0.96  # a few hand vertices just inside the face
    ph, pf = rng.uniform(0.3, 0.9, 5), rng.uniform(0.1, 0.9, len(v))
    d = rng.normal(0, 0.001, v.shape)
    gd = rng.normal(0, 0.001, v.shape)
    yh, yf = (ph > 0.5).astype(float), (rng.random(len(v)) > 0.9).astype(float)
    pred = {"contact_hand": torch.as_tensor(ph), "contact_face": torch.as_tensor(pf), "deformation": torch.as_tensor(d),
            "hand_v": torch.as_tensor(hv), "face_v": torch.as_tensor(v)}
    total, parts, _ = compute_interaction_loss(pred, {"contact_hand": yh, "contact_face": yf, "deformation": gd}, f)
    Vf = v + d
    Hc, Fc = hv[ph > 0.5], Vf[pf > 0.5]
    touch = float(chamfer_directed(Fc, Hc) + chamfer_directed(Hc, Fc))
    coll = float(chamfer_directed(hv, v))  # all five vertices penetrate
    bce = float(contact_bce([ph, pf], [yh, yf]))
    de = float(deformation_loss(d, gd))
    assert abs(float(total) - (0.2 * touch + 0.6 * bce + coll + 6 * de)) < 1e-12
    # wild: contact and deformation carry zero weight
    _, wparts, _ = compute_interaction_loss(pred, None, f, wild=True)
    assert float(wparts["contact"]) == 0 and float(wparts["deform"]) == 0
    assert abs(float(wparts["collision"]) - coll) < 1e-15


def _half_disc(n):
    D = Discriminator(n, 16)
    torch.nn.init.zeros_(D.net[-1].weight)
    torch.nn.init.zeros_(D.net[-1].bias)
    return D


def test_adversarial_examples():
    df, dh = _half_disc(13), _half_disc(58)
    ff = torch.randn(4, 13, requires_grad=True)
    fh = torch.randn(4, 58, requires_grad=True)
    g, lf, lh = adversarial_losses(df, dh, ff, fh, torch.randn(5, 13), torch.randn(5, 58))
    assert abs(g.item() - 2 * np.log(0.5)) < 1e-15
    assert abs(lf.item() + 2 * np.log(0.5)) < 1e-15 and abs(lh.item() + 2 * np.log(0.5)) < 1e-15
    with pytest.raises(ValueError):
        adversarial_losses(df, dh, ff, fh, torch.zeros(0, 13), torch.randn(5, 58))


def test_adversarial_limits():
    torch.manual_seed(0)
    df, dh = Discriminator(3, 16), Discriminator(3, 16)
    real, fake = torch.zeros(8, 3), torch.ones(8, 3) * 3
    for D in (df, dh):
        opt = torch.optim.Adam(D.parameters(), lr=1e-2)
        for _ in range(300):
            loss = -(torch.log(D(real)).mean() + torch.log(1 - D(fake)).mean())
            opt.zero_grad()
            loss.backward()
            opt.step()
    g, lf, lh = adversarial_losses(df, dh, fake, fake, real, real)
    # the generator term saturates at 0 once the discriminators win
    assert lf.item() < 1e-2 and lh.item() < 1e-2 and -1e-2 < g.item() <= 0


def test_adversarial_gradient_isolation():
    torch.manual_seed(0)
    df, dh = Discriminator(13, 16), Discriminator(58, 16)
    enc = torch.nn.Linear(4, 13 + 58)
    fake = enc(torch.randn(6, 4))
    g, lf, lh = adversarial_losses(df, dh, fake[:, :13], fake[:, 13:], torch.randn(6, 13), torch.randn(6, 58))
    g.backward(retain_graph=True)
    assert enc.weight.grad.abs().sum() > 0
    assert all(p.grad is None for p in list(df.parameters()) + list(dh.parameters()))
    enc.zero_grad()
    (lf + lh).backward()
    assert enc.weight.grad is None or enc.weight.grad.abs().sum() == 0
    assert all(p.grad.abs().sum() > 0 for p in df.parameters())


def test_optimizer_examples():
    p = torch.ones(1, requires_grad=True)
    p.grad = torch.ones(1)
    optimizer_step({"p": p}, OptimState())
    assert abs(p.item() - (1 - 6e-4 / (1 + 1e-8) - 6e-8)) < 1e-15
    q = torch.full((3,), 2.0, requires_grad=True)
    q.grad = torch.zeros(3)
    optimizer_step({"q": q}, OptimState(weight_decay=0.0))
    assert torch.equal(q.detach(), torch.full((3,), 2.0))
    r = torch.ones(2, requires_grad=True)
    r.grad = torch.tensor([1.0, float("nan")])
    st = OptimState()
    optimizer_step({"r": r}, st)
    assert torch.equal(r.detach(), torch.ones(2)) and st.skipped == 1


def test_optimizer_matches_torch_adamw(rng):
    x0 = rng.normal(size=(5, 4))
    a = torch.tensor(x0, requires_grad=True)
    b = torch.tensor(x0, requires_grad=True)
    st = OptimState()
    # torch folds decay in as p *= (1 - lr*wd) before the Adam step; same first-order update
    ref = torch.optim.AdamW([b], lr=6e-4, weight_decay=1e-4, eps=1e-8)
    for k in range(5):
        g = torch.as_tensor(rng.normal(size=(5, 4)))
        a.grad, b.grad = g.clone(), g.clone()
        optimizer_step({"a": a}, st)
        ref.step()
    assert torch.allclose(a, b, atol=1e-9)


# -- generator loss on network outputs

@pytest.fixture(scope="module")
def probe_net(models):
    torch.manual_seed(0)
    net = HandFaceNet(models, NetConfig.for_models(models, mask_rate=0.0))
    torch.nn.init.normal_(net.meshnet.head.weight, std=1e-3)
    # push predicted contacts above 0.5 and the hand into the face so every term is live
    torch.nn.init.constant_(net.internet.hand_contact.bias, 3.0)
    torch.nn.init.constant_(net.internet.face_contact.bias, 3.0)
    n_kp = net.cfg.n_hand_kp + net.cfg.n_face_kp
    net.coords[:net.cfg.n_hand_kp, 2] += 0.06
    net.coords[n_kp:n_kp + net.cfg.n_hand_v, 2] += 0.06
    net.eval()
    return net


def _grads(net, loss):
    net.zero_grad()
    loss.backward()
    return [p.grad for p in net.parameters()]


def _probe(net, models, sample, term, cfg=None):
    inner = dict(ZERO_INNER)
    outer = dict(mesh=1.0, interaction=1.0, depth=0.0, adv=0.0)
    if term == "depth":
        outer["depth"] = 1.0
    else:
        inner[term] = 1.0
    w = LossWeights(**inner, **outer)
    imgs = T.collate([sample])["images"]
    out = net(imgs)
    total, parts, diag = generator_loss(net, [sample], out, models, w, cfg or TrainConfig())
    return total, parts, diag


@pytest.mark.parametrize("term", ["vert", "key", "params", "contact", "deform"])
def test_wild_zero_gradient(models, small_dataset, probe_net, term):
    wild = next(s for s in small_dataset if s.kind == "wild")
    total, _, _ = _probe(probe_net, models, wild, term)
    grads = _grads(probe_net, total)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
    lab = labeled(small_dataset)[0]
    total, _, _ = _probe(probe_net, models, lab, term)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in _grads(probe_net, total))


@pytest.mark.parametrize("term", ["reproj", "depth", "touch", "collision"])
def test_wild_nonzero_gradient(models, small_dataset, probe_net, term):
    wild = next(s for s in small_dataset if s.kind == "wild")
    total, parts, diag = _probe(probe_net, models, wild, term)
    assert float(total) > 0
    grads = _grads(probe_net, total)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in grads)


def test_depth_off_for_labeled_by_default(models, small_dataset, probe_net):
    lab = labeled(small_dataset)[0]
    total, parts, _ = _probe(probe_net, models, lab, "depth")
    assert float(parts["depth"]) == 0.0
    total, parts, _ = _probe(probe_net, models, lab, "depth", TrainConfig(depth_on_labeled=True))
    assert float(parts["depth"]) > 0.0


def test_wild_batch_mesh_is_reprojection(models, small_dataset, probe_net):
    wild = [s for s in small_dataset if s.kind == "wild"]
    out = probe_net(T.collate(wild)["images"])
    w = LossWeights()
    _, parts, _ = generator_loss(probe_net, wild, out, models, w, TrainConfig())
    for k in ("vert", "key", "params", "contact", "deform"):
        assert float(parts[k]) == 0.0
    assert float(parts["mesh"]) == pytest.approx(w.reproj * float(parts["reproj"]), abs=0, rel=1e-15)


def test_decomposition_and_linearity(models, small_dataset, probe_net):
    batch = small_dataset[:5]
    out = probe_net(T.collate(batch)["images"])
    w = LossWeights()
    real = T.prior_parameters(models, 5, np.random.default_rng(0))
    d_face, d_hand = T.make_discriminators(models)
    discs = (d_face, d_hand)
    total, p, _ = generator_loss(probe_net, batch, out, models, w, TrainConfig(), discs, real)
    mesh = w.reproj * p["reproj"] + w.vert * p["vert"] + w.key * p["key"] + w.params * p["params"]
    inter = w.touch * p["touch"] + w.contact * p["contact"] + w.collision * p["collision"] + w.deform * p["deform"]
    assert abs(float(mesh - p["mesh"])) < 1e-10 and abs(float(inter - p["interaction"])) < 1e-10
    recon = w.mesh * p["mesh"] + w.interaction * p["interaction"] + w.depth * p["depth"] + w.adv * p["adv"]
    assert abs(float(total - recon)) < 1e-10
    total2, _, _ = generator_loss(probe_net, batch, out, models, w.scaled(2), TrainConfig(), discs, real)
    assert abs(float(total2) - 2 * float(total)) < 1e-9


def test_reprojection_uses_pseudo_keypoints(models, small_dataset, probe_net):
    wild = next(s for s in small_dataset if s.kind == "wild")
    gt = T._placeholder_gt(models, wild)
    assert gt["hand_keypoints2d"] is wild.pseudo_hand_keypoints2d


# -- trainer

def _snapshot(mod):
    return {k: v.detach().clone() for k, v in mod.state_dict().items()}


def test_alternation_isolation(models, small_dataset, monkeypatch):
    tr = Trainer(models, train_cfg=TrainConfig(batch_size=4))
    calls = []
    real_step = T.optimizer_step

    def spy(params, state):
        before = (_snapshot(tr.d_face), _snapshot(tr.d_hand), _snapshot(tr.net))
        real_step(params, state)
        after = (_snapshot(tr.d_face), _snapshot(tr.d_hand), _snapshot(tr.net))
        changed = [any(not torch.equal(a[k], b[k]) for k in a) for a, b in zip(before, after)]
        calls.append(changed)

    monkeypatch.setattr(T, "optimizer_step", spy)
    tr.train_step(tr.next_batch(small_dataset))
    assert calls == [[False, False, True], [True, False, False], [False, True, False]]


def test_training_deterministic_and_resumable(models, small_dataset, tmp_path):
    cfg = TrainConfig(batch_size=4, seed=5)
    a = Trainer(models, train_cfg=cfg)
    a.fit(small_dataset, 2)
    a.save(tmp_path / "a.npz")
    a.fit(small_dataset, 1)
    b = Trainer(models, train_cfg=cfg)
    b.fit(small_dataset, 3)
    for k, v in a.net.state_dict().items():
        assert torch.equal(v, b.net.state_dict()[k]), k
    c = Trainer.load(tmp_path / "a.npz", models)
    c.fit(small_dataset, 1)
    for k, v in a.net.state_dict().items():
        assert torch.equal(v, c.net.state_dict()[k]), k
    for k, v in a.d_hand.state_dict().items():
        assert torch.equal(v, c.d_hand.state_dict()[k]), k


def test_nonfinite_loss_raises(models, small_dataset, monkeypatch):
    tr = Trainer(models, train_cfg=TrainConfig(batch_size=2))
    orig = T.generator_loss

    def bad(*a, **k):
        total, parts, diag = orig(*a, **k)
        return total * float("nan"), parts, diag

    monkeypatch.setattr(T, "generator_loss", bad)
    with pytest.raises(FloatingPointError):
        tr.train_step(tr.next_batch(small_dataset))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(touch=-1)
    assert LossWeights().scaled(3).mesh == 37.5
