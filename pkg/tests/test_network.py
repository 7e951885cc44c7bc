import numpy as np
import pytest
import torch

from handface import autodiff as ad
from handface.data.synth import _random_states
from handface.meshcore import AssetError, PoseState, lbs_forward
from handface.network import (
    Backbone,
    Discriminator,
    HandFaceNet,
    IKNet,
    NetConfig,
    load_checkpoint,
    make_discriminators,
    mask_tokens,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def net(models):
    torch.manual_seed(0)
    return HandFaceNet(models, NetConfig.for_models(models))


@pytest.fixture(scope="module")
def images(small_dataset):
    return torch.as_tensor(np.stack([s.image for s in small_dataset[:4]]), dtype=torch.float64)


def test_config_validation(models):
    with pytest.raises(ValueError):
        NetConfig(hidden=30)
    with pytest.raises(ValueError):
        NetConfig(mask_rate=1.0)
    with pytest.raises(ValueError):
        NetConfig.from_dict({"hidden": 64, "bogus": 1})
    cfg = NetConfig.for_models(models)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.num_tokens == 21 + 68 + 195 + 42


def test_backbone():
    torch.manual_seed(0)
    bb = Backbone(64)
    out = bb(torch.zeros(1, 224, 224, 3))
    assert out.shape == (1, 49, 64) and torch.isfinite(out).all()
    x = torch.rand(2, 224, 224, 3)
    assert torch.equal(bb(x), bb(x))
    with pytest.raises(ad.ShapeError):
        bb(torch.zeros(1, 112, 112, 3))


def test_masking_counts():
    rng = np.random.default_rng(0)
    tok = torch.rand(3, 100, 11)
    same, m = mask_tokens(tok, 0.0, rng, True)
    assert torch.equal(same, tok) and not m.any()
    out, m = mask_tokens(tok, 0.3, rng, True)
    assert m.sum(1).tolist() == [30, 30, 30]
    assert torch.equal(out[..., -3:], tok[..., -3:])
    assert torch.all(out[m][:, :-3] == 0)
    assert torch.equal(out[~m], tok[~m])
    ev, m = mask_tokens(tok, 0.3, rng, False)
    assert torch.equal(ev, tok) and not m.any()


def test_forward_shapes(net, images):
    net.eval()
    with torch.no_grad():
        out = net(images)
    B = len(images)
    assert out["rough"]["hand_v"].shape == (B, 195, 3)
    assert out["rough"]["face_v"].shape == (B, 42, 3)
    assert out["rough"]["hand_kp"].shape == (B, 21, 3) and out["rough"]["face_kp"].shape == (B, 68, 3)
    assert out["hand_v"].shape == (B, 195, 3) and out["face_v"].shape == (B, 642, 3)
    assert out["deformation"].shape == (B, 642, 3)
    for k in ("contact_hand", "contact_face"):
        assert torch.all((out[k] > 0) & (out[k] < 1))
    assert out["contact_hand"].shape == (B, 195) and out["contact_face"].shape == (B, 642)
    assert out["camera_correction"].shape == (B, 3)
    assert not out["mask"].any()


def test_eval_deterministic_and_batch_equivariant(net, images):
    net.eval()
    with torch.no_grad():
        a = net(images)
        b = net(images)
        c = net(images.flip(0))
    assert torch.equal(a["hand_v"], b["hand_v"])
    assert torch.allclose(a["rough"]["face_v"].flip(0), c["rough"]["face_v"], atol=1e-12)
    assert torch.allclose(a["contact_face"].flip(0), c["contact_face"], atol=1e-12)


def test_train_mode_masks(net, images):
    net.train()
    out = net(images, np.random.default_rng(0))
    assert out["mask"].sum(1).tolist() == [int(0.3 * net.cfg.num_tokens)] * len(images)
    net.eval()


def test_meshnet_gradient_reaches_unmasked_tokens(models, images):
    torch.manual_seed(4)
    net = HandFaceNet(models)
    torch.nn.init.normal_(net.meshnet.head.weight, std=0.1)  # the head starts at zero
    net.train()
    feats = net.extract_features(images[:1])
    tokens, mask = net.build_tokens(feats, np.random.default_rng(3))
    tokens = tokens.detach().requires_grad_(True)
    coords = net.coords.expand(1, -1, -1)
    net.meshnet(tokens, coords).sum().backward()
    g = tokens.grad[0, :, :-3].abs().sum(-1)
    assert torch.all(g[~mask[0]] > 0)


def test_zero_trunk_gives_bias(net, images, monkeypatch):
    net.eval()
    inet = net.internet
    monkeypatch.setattr(inet, "trunk", lambda tokens: torch.zeros(*tokens.shape[:2], net.cfg.inter_dims[-1]))
    with torch.no_grad():
        out = net(images)
    assert torch.allclose(out["contact_hand"], torch.sigmoid(inet.hand_contact.bias).expand_as(out["contact_hand"]))
    assert torch.allclose(out["contact_face"], torch.sigmoid(inet.face_contact.bias).expand_as(out["contact_face"]))
    assert torch.allclose(out["deformation"], (0.01 * inet.deform.bias).expand_as(out["deformation"]))


def test_every_output_reaches_the_backbone(models, images):
    torch.manual_seed(1)
    net = HandFaceNet(models)
    net.train()
    for p in list(net.meshnet.head.parameters()) + list(net.iknet_hand.out.parameters()) \
            + list(net.iknet_face.out.parameters()) + list(net.camera_head.parameters()):
        torch.nn.init.normal_(p, std=0.01)
    conv = net.backbone.net[0].weight
    for key in ("hand_v", "face_v", "contact_hand", "contact_face", "deformation", "camera_correction"):
        net.zero_grad()
        out = net(images[:2], np.random.default_rng(0))
        out[key].pow(2).sum().backward()
        assert conv.grad is not None and conv.grad.abs().sum() > 0, key


def test_train_eval_differ_only_by_mask_and_bn(models, images):
    torch.manual_seed(2)
    cfg = NetConfig.for_models(models, mask_rate=0.0)
    net = HandFaceNet(models, cfg)
    for p in net.iknet_hand.out.parameters():
        torch.nn.init.normal_(p, std=0.01)
    net.train()
    with torch.no_grad():
        tr = net(images)
    net.eval()
    with torch.no_grad():
        ev = net(images)
    # no masking and no dropout: everything before IKNet's batch norm agrees
    # (up to the rounding of torch's fused inference path)
    assert torch.allclose(tr["rough"]["hand_v"], ev["rough"]["hand_v"], atol=1e-12)
    assert torch.allclose(tr["contact_face"], ev["contact_face"], atol=1e-12)
    assert not torch.equal(tr["hand_v"], ev["hand_v"])


def test_iknet_counts_and_errors(models):
    face, hand = models
    ik = IKNet(hand, 195, 64)
    st = ik(torch.rand(4, 195, 3))
    assert st.joint_rotations.shape == (4, 16, 3) and st.shape.shape == (4, hand.num_shape)
    assert st.expression.shape == (4, 0)
    sf = IKNet(face, 42, 64)(torch.rand(4, 42, 3))
    assert sf.expression.shape == (4, face.num_expression)
    with pytest.raises(ad.ShapeError):
        ik(torch.rand(2, 194, 3))


def test_iknet_skips_matter(models):
    hand = models[1]
    torch.manual_seed(0)
    ik = IKNet(hand, 195, 64)
    torch.nn.init.normal_(ik.out.weight, std=0.1)
    ik.eval()
    x = torch.rand(3, 195, 3)
    with torch.no_grad():
        a = ik(x).to_vector()
        ik.skips = False
        b = ik(x).to_vector()
    assert not torch.allclose(a, b)


def test_iknet_overfits_256_pairs(models):
    face, hand = models
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    states = []
    for _ in range(256):
        _, hs = _random_states(face, hand, 1.0, rng)
        hs.root_rotation = torch.as_tensor(rng.normal(0, 0.5, 3))
        hs.root_translation = torch.as_tensor(rng.normal(0, 0.05, 3) + [0, 0, 0.5])
        states.append(hs)
    V = lbs_forward(hand, PoseState.stack(states))[0]
    ik = IKNet(hand, 195, 64)
    steps = 800
    opt = torch.optim.Adam(ik.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for _ in range(steps):
        loss = (lbs_forward(hand, ik(V))[0] - V).norm(dim=-1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    ik.eval()
    with torch.no_grad():
        rms = float(((lbs_forward(hand, ik(V))[0] - V) ** 2).sum(-1).mean().sqrt())
    assert rms < 0.005


def test_discriminator(models):
    torch.manual_seed(0)
    d_face, d_hand = make_discriminators(models)
    assert d_face.n_in == 3 + 5 + 5 and d_hand.n_in == 48 + models[1].num_shape
    p = d_hand(torch.randn(10, d_hand.n_in))
    assert torch.all((p > 0) & (p < 1))
    with pytest.raises(ad.ShapeError):
        d_hand(torch.randn(2, 5))


def test_discriminator_separability():
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    D = Discriminator(13, 64)
    opt = torch.optim.Adam(D.parameters(), lr=1e-3)
    for _ in range(200):
        real = torch.randn(64, 13, generator=g) * 0.1
        fake = 1 + torch.randn(64, 13, generator=g) * 0.1
        loss = -(torch.log(D(real)).mean() + torch.log(1 - D(fake)).mean())
        opt.zero_grad()
        loss.backward()
        opt.step()
    real = torch.randn(500, 13, generator=g) * 0.1
    fake = 1 + torch.randn(500, 13, generator=g) * 0.1
    with torch.no_grad():
        acc = (float((D(real) > 0.5).double().mean()) + float((D(fake) < 0.5).double().mean())) / 2
    assert acc > 0.95
    x = np.random.default_rng(0).normal(size=13)
    assert ad.finite_diff_check(lambda v: D(v), x) <= 1e-3


def test_checkpoint_roundtrip(models, net, tmp_path, images):
    d_face, d_hand = make_discriminators(models)
    save_checkpoint(tmp_path / "c.npz", {"net": net, "disc_face": d_face}, net.cfg, meta={"step": 3})
    torch.manual_seed(99)
    other = HandFaceNet(models, net.cfg)
    header, _ = load_checkpoint(tmp_path / "c.npz", {"net": other})
    assert header["step"] == 3
    net.eval()
    other.eval()
    with torch.no_grad():
        assert torch.equal(net(images)["hand_v"], other(images)["hand_v"])
    small = HandFaceNet(models, NetConfig.for_models(models, hidden=32))
    with pytest.raises(AssetError, match="shape"):
        load_checkpoint(tmp_path / "c.npz", {"net": small})
