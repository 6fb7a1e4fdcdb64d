import numpy as np
import pytest

from mitml.autodiff import ShapeError, Tensor, grad_check, ops
from mitml.network import BackboneConfig, ModalClass, build_model
from mitml.tmr import encode_batch, encode_tracklet, pool_frames, tmr_aggregate, tmr_attention

import reference as ref

D, T = 8, 3
CFG = BackboneConfig(stage_channels=[4, 4, 8, 8, D], embed_dim=D, seq_len=T, se_reduction=4)


def _model(seed=0, cfg=CFG):
    return build_model(cfg, num_ids=4, seed=seed)


def test_zero_tmr_params_give_half(rng):
    params = _model()
    for n in params.names("tmr"):
        params[n].data[...] = 0.0
    a = tmr_attention(Tensor(rng.normal(size=(T, D))), params)
    np.testing.assert_array_equal(a.data, 0.5)


def test_attention_matches_reference(rng):
    params = _model(1)
    f1, f2 = rng.normal(size=(T, D)), rng.normal(size=(T, D))
    a_ref, F_ref = ref.tmr(f1, f2, {n: params[n].data for n in params.names("tmr")})
    a = tmr_attention(Tensor(f1), params)
    np.testing.assert_allclose(a.data, a_ref, atol=1e-13)
    np.testing.assert_allclose(tmr_aggregate(a, Tensor(f2)).data, F_ref, atol=1e-13)
    assert np.all((a.data > 0) & (a.data < 1))


def test_attention_is_order_sensitive(rng):
    params = _model(0)
    f1 = np.random.default_rng(0).normal(size=(T, D))
    perm = [2, 0, 1]
    a = tmr_attention(Tensor(f1), params).data
    b = tmr_attention(Tensor(f1[perm]), params).data
    assert np.linalg.norm(a - b) > 1e-6


def test_attention_t_mismatch(rng):
    with pytest.raises(ShapeError):
        tmr_attention(Tensor(rng.normal(size=(T + 1, D))), _model())


def test_attention_gradcheck(rng):
    params = _model(2)
    names = params.names("tmr")
    f1 = Tensor(rng.uniform(-1, 1, (T, D)))

    def f(x, *ws):
        for n, w in zip(names, ws):
            params._tensors[n] = w
        return ops.sum(tmr_attention(x, params))

    rep = grad_check(f, [f1] + [params[n] for n in names])
    assert rep.passed(1e-4), rep.max_rel_err


def test_aggregate_degenerate_cases(rng):
    f2 = Tensor(rng.normal(size=(T, D)))
    np.testing.assert_allclose(tmr_aggregate(Tensor(np.zeros((T, D))), f2).data, f2.data.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(tmr_aggregate(Tensor(np.ones((T, D))), f2).data, 2 * f2.data.mean(axis=0), atol=1e-15)
    a1, g1 = rng.uniform(size=(1, D)), rng.normal(size=(1, D))
    np.testing.assert_allclose(tmr_aggregate(Tensor(a1), Tensor(g1)).data, a1[0] * g1[0] + g1[0], atol=1e-15)
    with pytest.raises(ShapeError):
        tmr_aggregate(Tensor(np.ones((T, D))), Tensor(np.ones((T, D + 1))))


def test_aggregate_gradient_wrt_attention(rng):
    a = Tensor(rng.uniform(size=(T, D)), requires_grad=True)
    f2 = rng.normal(size=(T, D))
    ops.sum(tmr_aggregate(a, Tensor(f2))).backward()
    np.testing.assert_allclose(a.grad, f2 / T, atol=1e-15)


def test_pooling_variants():
    f = Tensor([[1.0, 5.0], [3.0, 1.0]])
    np.testing.assert_array_equal(pool_frames(f, "average").data, [2.0, 3.0])
    np.testing.assert_array_equal(pool_frames(f, "max").data, [3.0, 5.0])
    same = Tensor(np.tile([[0.3, -1.0, 2.0]], (4, 1)))
    for mode in ("average", "max", "softmax_weighted"):
        np.testing.assert_allclose(pool_frames(same, mode).data, [0.3, -1.0, 2.0], atol=1e-15)
    eq_scores = Tensor([[1.0, 3.0], [3.0, 1.0], [0.0, 4.0]])
    np.testing.assert_allclose(pool_frames(eq_scores, "softmax_weighted").data, pool_frames(eq_scores, "average").data, atol=1e-15)
    with pytest.raises(ValueError):
        pool_frames(f, "median")


def test_encode_tracklet_default_dim_and_determinism(rng):
    params = build_model(BackboneConfig(), num_ids=4, seed=0)
    frames = rng.uniform(size=(6, 3, 32, 16))
    a = encode_tracklet(frames, ModalClass.IR, params)
    b = encode_tracklet(frames, ModalClass.IR, params)
    assert a.shape == (64,) and a.data.tobytes() == b.data.tobytes()


def test_encode_batch_matches_single_encodes(rng):
    params = _model(3)
    frames = rng.uniform(size=(4, T, 3, 32, 16))
    mods = [1, 0, 1, 0]
    batch = encode_batch(frames, mods, params).data
    for i in range(4):
        np.testing.assert_allclose(batch[i], encode_tracklet(frames[i], mods[i], params).data, atol=1e-13)


def test_zero_attention_equals_average_pooling(rng):
    tmr_model = _model(4)
    base = tmr_model.copy()
    for n in base.names("tmr") + base.names("branch_f1"):
        del base._tensors[n]
    frames = rng.uniform(size=(3, T, 3, 32, 16))
    full = encode_batch(frames, [0, 1, 0], tmr_model, zero_attention=True).data
    avg = encode_batch(frames, [0, 1, 0], base, pooling="average").data
    assert np.max(np.abs(full - avg)) <= 1e-12
