import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitml.autodiff import Tensor, grad_check
from mitml.losses import (
    LossConfig,
    adv_discriminator_loss,
    adv_encoder_loss,
    baseline_objective,
    cross_entropy,
    id_objective,
    triplet_loss,
)
from mitml.network import BackboneConfig, build_model

import reference as ref

D = 8


def _heads(seed=0, wm_classes=3, zero=False):
    cfg = BackboneConfig(stage_channels=[4, 4, 8, 8, D], embed_dim=D, seq_len=3)
    p = build_model(cfg, num_ids=4, seed=seed, use_tmr=False, wm_classes=wm_classes)
    rng = np.random.default_rng(seed)
    p["w_m.w"].data = np.zeros_like(p["w_m.w"].data) if zero else rng.normal(size=p["w_m.w"].shape)
    p["w_m.b"].data = np.zeros_like(p["w_m.b"].data) if zero else rng.normal(size=p["w_m.b"].shape)
    return p


def test_cross_entropy_values():
    assert abs(cross_entropy(Tensor(np.zeros(3)), 1).item() - math.log(3)) < 1e-12
    expected = -math.log(math.exp(10) / (math.exp(10) + 2))
    assert abs(cross_entropy(Tensor([10.0, 0.0, 0.0]), 0).item() - expected) < 1e-15
    assert abs(expected - 9.0797e-5) < 1e-8
    logits = np.array([0.2, -1.0, 0.7])
    p = np.exp(ref.log_softmax(logits))
    entropy = -(p * np.log(p)).sum()
    assert abs(cross_entropy(Tensor(logits), p).item() - entropy) < 1e-14
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros(3)), 3)


def test_cross_entropy_batch_is_row_mean(rng):
    logits = rng.normal(size=(4, 5))
    tgt = [0, 3, 4, 1]
    expected = np.mean([ref.ce(logits[i], tgt[i]) for i in range(4)])
    assert abs(cross_entropy(Tensor(logits), tgt).item() - expected) < 1e-14


def test_triplet_one_dimensional_example():
    feats = Tensor([[0.0], [0.1], [0.15]])
    ids = [0, 0, 1]
    # anchors 0.0 -> 0.25, 0.1 -> 0.35; the lone id-1 sample has no positive
    expected = ref.triplet_enumeration(feats.data, ids, 0.3)
    assert abs(expected - 0.3) < 1e-12
    assert abs(triplet_loss(feats, ids, 0.3, normalize=False).item() - expected) < 1e-12


def test_triplet_degenerate_cases():
    feats = Tensor([[0.0, 1.0], [0.0, 1.0], [10.0, 0.0], [10.0, 0.0]])
    assert triplet_loss(feats, [0, 0, 1, 1], 0.3, normalize=False).item() == 0.0
    same = Tensor(np.ones((4, 3)))
    assert triplet_loss(same, [0, 0, 1, 1], 0.0).item() == 0.0
    with pytest.raises(ValueError):
        triplet_loss(same, [2, 2, 2, 2])


def test_triplet_matches_enumeration_random_batches():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 17))
        ids = rng.integers(0, 4, n)
        ids[:2] = [0, 1]
        ids[2] = ids[3]
        x = rng.normal(size=(n, 5))
        normed = x / np.linalg.norm(x, axis=1, keepdims=True)
        expected = ref.triplet_enumeration(normed, ids, 0.3)
        assert abs(triplet_loss(Tensor(x), ids, 0.3).item() - expected) <= 1e-12


def test_triplet_gradcheck(rng):
    x = Tensor(rng.uniform(-1, 1, (6, 4)))
    ids = [0, 0, 1, 1, 2, 2]
    assert grad_check(lambda x: triplet_loss(x, ids, 0.3), [x]).passed(1e-4)


def test_adv_encoder_zero_head_and_confusion(rng):
    p = _heads(zero=True)
    fv, fi = Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(2, D)))
    assert abs(adv_encoder_loss(fv, fi, p).item() - 2 * math.log(3)) < 1e-12
    p["w_m.b"].data[:] = [0.0, 0.0, 40.0]
    assert adv_encoder_loss(fv, fi, p).item() < 1e-6
    with pytest.raises(ValueError):
        adv_encoder_loss(fv, fi, p, "bogus")


def test_adv_modes_match_scripted_reference():
    rng = np.random.default_rng(11)
    fv, fi = rng.normal(size=(4, D)), rng.normal(size=(4, D))
    vals = {}
    for mode, k in (("three_class", 3), ("inverse_label", 3), ("uniform_target", 2)):
        p = _heads(seed=5, wm_classes=k)
        w, b = p["w_m.w"].data, p["w_m.b"].data
        unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)
        lv, li = unit(fv) @ w.T + b, unit(fi) @ w.T + b
        if mode == "three_class":
            exp = np.mean([ref.ce(r, 2) for r in lv]) + np.mean([ref.ce(r, 2) for r in li])
        elif mode == "inverse_label":
            exp = np.mean([ref.ce(r, 1) for r in lv]) + np.mean([ref.ce(r, 0) for r in li])
        else:
            exp = np.mean([-ref.log_softmax(r).mean() for r in lv]) + np.mean([-ref.log_softmax(r).mean() for r in li])
        vals[mode] = adv_encoder_loss(Tensor(fv), Tensor(fi), p, mode).item()
        assert abs(vals[mode] - exp) < 1e-12
    assert len({round(v, 10) for v in vals.values()}) == 3


def test_adv_encoder_treats_head_as_constant(rng):
    p = _heads()
    fv = Tensor(rng.normal(size=(2, D)), requires_grad=True)
    adv_encoder_loss(fv, Tensor(rng.normal(size=(2, D))), p).backward()
    assert p["w_m.w"].grad is None and fv.grad is not None


def test_discriminator_loss(rng):
    p = _heads(zero=True)
    fv, fi = Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(3, D)))
    assert abs(adv_discriminator_loss(fv, fi, p).item() - 2 * math.log(3)) < 1e-12
    with pytest.raises(ValueError):
        adv_discriminator_loss(Tensor(fv.data, requires_grad=True), fi, p)
    # separating head: RGB features have +1 in coord 0, IR -1
    p["w_m.w"].data[:] = 0
    p["w_m.w"].data[0, 0], p["w_m.w"].data[1, 0] = 50.0, -50.0
    sv = np.zeros((2, D)); sv[:, 0] = 1
    assert adv_discriminator_loss(Tensor(sv), Tensor(-sv), p).item() < 1e-6


def _batch(rng, n=8):
    labels = np.repeat(np.arange(n // 2), 2)
    mods = np.tile([0, 1], n // 2)
    return Tensor(rng.normal(size=(n, D)), requires_grad=True), labels, mods


def test_id_objective_linearity_in_lambda(rng):
    p = _heads()
    feats, labels, mods = _batch(rng)
    terms = {lam: id_objective(feats, labels, mods, p, LossConfig(lam=lam)) for lam in (0.0, 0.5, 1.0)}
    adv = terms[1.0].adv1.item()
    base = terms[0.0].total.item()
    for lam, t in terms.items():
        assert abs(t.total.item() - (base + lam * adv)) < 1e-10
    t1 = terms[1.0]
    assert abs(t1.total.item() - (t1.adv1.item() + t1.ce.item() + t1.tri.item())) < 1e-12
    plain = id_objective(feats, labels, mods, p, LossConfig(lam=0.0), adversarial=False)
    assert abs(plain.total.item() - base) < 1e-12


def test_loss_config_defaults():
    c = LossConfig()
    assert c.lam == 0.4 and c.triplet_margin == 0.3 and c.adversarial_mode == "three_class"
    with pytest.raises(ValueError):
        LossConfig(lam=-1)


def test_baseline_objective_modes(rng):
    cfg = BackboneConfig(stage_channels=[4, 4, 8, 8, D], embed_dim=D, seq_len=3)
    p = build_model(cfg, num_ids=2, seed=0, use_tmr=False, wm_classes=None)
    frames = rng.uniform(size=(4, 3, 3, 32, 16))
    labels, mods = [0, 0, 1, 1], [0, 1, 0, 1]
    for mode in ("average", "max", "softmax_weighted"):
        assert baseline_objective(frames, mods, labels, p, mode).total.item() >= 0
    with pytest.raises(ValueError):
        baseline_objective(frames, mods, labels, p, "median")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["three_class", "inverse_label", "uniform_target"]))
def test_losses_are_non_negative(seed, mode):
    rng = np.random.default_rng(seed)
    p = _heads(seed % 7, 2 if mode == "uniform_target" else 3)
    fv, fi = Tensor(rng.normal(size=(3, D)) * 3), Tensor(rng.normal(size=(3, D)) * 3)
    assert adv_encoder_loss(fv, fi, p, mode).item() >= 0
    assert adv_discriminator_loss(fv, fi, p).item() >= 0
    assert triplet_loss(Tensor(rng.normal(size=(6, D))), [0, 0, 1, 1, 2, 2]).item() >= 0
