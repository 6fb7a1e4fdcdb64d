"""Seeded finite-difference gradient suite over primitive ops and composed modules."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mitml.autodiff import Tensor, grad_check, ops
from mitml.losses import LossConfig, adv_encoder_loss, cross_entropy, id_objective, triplet_loss
from mitml.network import BackboneConfig, ModalClass, build_model, lstm2_forward, se_gate
from mitml.tmr import pool_frames, tmr_aggregate, tmr_attention

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20
MODULES = ("all", "tmr", "lstm", "conv", "losses")


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, *shape, gap=0.1):
    """Uniform in ±[gap, 1] so a 1e-5 probe never crosses a kink at 0."""
    return Tensor(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(gap, 1.0, size=shape))


def _distinct(rng, *shape, gap=0.05):
    """Entries whose values are at least ``gap`` apart (for max reductions)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap + rng.uniform(0, gap / 4, n)
    return Tensor(rng.permutation(vals).reshape(shape))


def _probe(rng, shape):
    """Fixed random weights turning a tensor output into a scalar with dense gradients."""
    return Tensor(rng.normal(size=shape))


def _contract(y: Tensor, w: Tensor) -> Tensor:
    return ops.sum(ops.mul(y, w))


# each case: rng -> (f, inputs)
Case = Callable[[np.random.Generator], tuple]


def _unary(fn, make=_u):
    def case(rng):
        x = make(rng, 3, 4)
        w = _probe(rng, (3, 4))
        return (lambda a: _contract(fn(a), w)), [x]

    return case


def _binary(fn):
    def case(rng):
        a, b, w = _u(rng, 3, 4), _u(rng, 3, 4), _probe(rng, (3, 4))
        return (lambda x, y: _contract(fn(x, y), w)), [a, b]

    return case


def _positive(rng, *shape):
    return _u(rng, *shape, lo=0.2, hi=2.0)


def _case_matmul(rng):
    a, b, w = _u(rng, 3, 4), _u(rng, 4, 5), _probe(rng, (3, 5))
    return (lambda x, y: _contract(ops.matmul(x, y), w)), [a, b]


def _case_linear(rng):
    x, wt, b, w = _u(rng, 4, 5), _u(rng, 3, 5), _u(rng, 3), _probe(rng, (4, 3))
    return (lambda a, m, c: _contract(ops.linear(a, m, c), w)), [x, wt, b]


def _reduce(kind, axis):
    def case(rng):
        x = _distinct(rng, 3, 4) if kind == "max" else _u(rng, 3, 4)
        w = _probe(rng, (4,) if axis == 0 else (3,))
        fn = {"sum": ops.sum, "mean": ops.mean, "max": ops.max}[kind]
        return (lambda a: _contract(fn(a, axis), w)), [x]

    return case


def _case_softmax(rng):
    x, w = _u(rng, 3, 5, lo=-2, hi=2), _probe(rng, (3, 5))
    return (lambda a: _contract(ops.softmax(a, axis=-1), w)), [x]


def _case_log_softmax(rng):
    x, w = _u(rng, 3, 5, lo=-2, hi=2), _probe(rng, (3, 5))
    return (lambda a: _contract(ops.log_softmax(a, axis=-1), w)), [x]


def _case_l2(rng):
    x, w = _away_from_zero(rng, 3, 4), _probe(rng, (3, 4))
    return (lambda a: _contract(ops.l2_normalize(a, axis=-1), w)), [x]


def _case_shape_ops(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 3)
    w = _probe(rng, (3, 2, 2, 2))

    def f(x, y):
        s = ops.stack([x, ops.scale(y, 2.0)], axis=0)  # 2×2×3
        t = ops.transpose(s, (2, 1, 0))  # 3×2×2
        e = ops.expand(ops.reshape(ops.concat([x, y], axis=1), (2, 6)), 0, 3)  # 3×2×6
        picked = ops.index(e, (slice(None), slice(None), slice(0, 2)))  # 3×2×2
        return _contract(ops.stack([t, picked], axis=3), w)

    return f, [a, b]


def _case_conv(stride, pad):
    def case(rng):
        x, k, b = _u(rng, 2, 3, 7, 6), _u(rng, 4, 3, 3, 3), _u(rng, 4)
        out_shape = ops.conv2d(x, k, b, stride, pad).shape
        w = _probe(rng, out_shape)
        return (lambda a, m, c: _contract(ops.relu(ops.conv2d(a, m, c, stride, pad)), w)), [x, k, b]

    return case


def _case_conv_linear(stride, pad):
    def case(rng):
        x, k, b = _u(rng, 2, 3, 7, 6), _u(rng, 4, 3, 3, 3), _u(rng, 4)
        w = _probe(rng, ops.conv2d(x, k, b, stride, pad).shape)
        return (lambda a, m, c: _contract(ops.conv2d(a, m, c, stride, pad), w)), [x, k, b]

    return case


def _lstm_params(rng, d, scale=0.5):
    return {
        f"{l}.{k}": _u(rng, *shape, lo=-scale, hi=scale)
        for l in range(2)
        for k, shape in (("w_ih", (4 * d, d)), ("w_hh", (4 * d, d)), ("b", (4 * d,)))
    }


def _case_lstm(rng):
    d, steps = 3, 4
    p = _lstm_params(rng, d)
    names = list(p)
    seq = _u(rng, 2, steps, d)
    w = _probe(rng, (2, steps, d))
    return (lambda s, *ws: _contract(lstm2_forward(s, dict(zip(names, ws))), w)), [seq] + [p[n] for n in names]


def _case_se(rng):
    d, r = 8, 4
    u, w = _u(rng, 3, d), _probe(rng, (3, d))
    w1, b1 = _u(rng, d // r, d), _u(rng, d // r)
    w2, b2 = _u(rng, d, d // r), _u(rng, d)
    return (lambda *xs: _contract(se_gate(*xs), w)), [u, w1, b1, w2, b2]


_TMR_CFG = BackboneConfig(stage_channels=[4, 4, 4, 4, 4], embed_dim=4, seq_len=3, se_reduction=2)


def _case_tmr(rng):
    """Attention and aggregation together, w.r.t. both branch features and every TMR weight."""
    params = build_model(_TMR_CFG, num_ids=4, seed=int(rng.integers(1 << 31)))
    names = params.names("tmr")
    steps, d = _TMR_CFG.seq_len, _TMR_CFG.embed_dim
    f1, f2 = _u(rng, 2, steps, d), _u(rng, 2, steps, d)
    w = _probe(rng, (2, d))

    def f(a1, a2, *ws):
        for n, t in zip(names, ws):
            params._tensors[n] = t
        return _contract(tmr_aggregate(tmr_attention(a1, params), a2), w)

    return f, [f1, f2] + [params[n] for n in names]


def _case_pooling(kind):
    def case(rng):
        f = _distinct(rng, 2, 3, 4) if kind == "max" else _u(rng, 2, 3, 4)
        w = _probe(rng, (2, 4))
        return (lambda x: _contract(pool_frames(x, kind), w)), [f]

    return case


def _case_ce_index(rng):
    logits = _u(rng, 5, 4, lo=-2, hi=2)
    tgt = rng.integers(0, 4, 5)
    return (lambda z: cross_entropy(z, tgt)), [logits]


def _case_ce_dist(rng):
    logits = _u(rng, 5, 3, lo=-2, hi=2)
    tgt = rng.dirichlet(np.ones(3), size=5)
    return (lambda z: cross_entropy(z, tgt)), [logits]


def _triplet_batch(rng, d=6):
    """Four ids x two samples with hardest pairs and hinge values kept clear of ties."""
    ids = np.repeat(np.arange(4), 2)
    while True:
        x = rng.normal(size=(ids.size, d))
        xn = x / np.linalg.norm(x, axis=1, keepdims=True)
        dist = np.linalg.norm(xn[:, None] - xn[None], axis=2)
        same = ids[:, None] == ids[None]
        ok = True
        for i in range(ids.size):
            pos = np.sort(dist[i, same[i] & (np.arange(ids.size) != i)])
            neg = np.sort(dist[i, ~same[i]])
            hinge = pos[-1] - neg[0] + 0.3
            gaps = [neg[1] - neg[0], abs(hinge)] + ([pos[-1] - pos[-2]] if pos.size > 1 else [])
            if min(gaps) < 1e-3:
                ok = False
        if ok:
            return Tensor(x), ids


def _case_triplet(rng):
    x, ids = _triplet_batch(rng)
    return (lambda f: triplet_loss(f, ids, 0.3)), [x]


def _case_adv(mode):
    def case(rng):
        k = 2 if mode == "uniform_target" else 3
        cfg = BackboneConfig(stage_channels=[4, 4, 8, 8, 6], embed_dim=6, seq_len=3, se_reduction=3)
        params = build_model(cfg, num_ids=4, seed=int(rng.integers(1 << 31)), use_tmr=False, wm_classes=k)
        params["w_m.w"].data = rng.normal(size=params["w_m.w"].shape)
        fv, fi = _u(rng, 3, 6), _u(rng, 4, 6)
        return (lambda a, b: adv_encoder_loss(a, b, params, mode)), [fv, fi]

    return case


def _case_id_objective(rng):
    """The full weighted objective (adversarial + CE + triplet) w.r.t. features and the id head."""
    cfg = BackboneConfig(stage_channels=[4, 4, 8, 8, 6], embed_dim=6, seq_len=3, se_reduction=3)
    params = build_model(cfg, num_ids=4, seed=int(rng.integers(1 << 31)), use_tmr=False)
    params["w_m.w"].data = rng.normal(size=params["w_m.w"].shape)
    params["w_id.w"].data = rng.normal(size=params["w_id.w"].shape)
    feats, ids = _triplet_batch(rng)
    mods = np.tile([int(ModalClass.RGB), int(ModalClass.IR)], 4)
    conf = LossConfig(lam=float(rng.uniform(0.05, 1.0)))

    def f(x, wid):
        params._tensors["w_id.w"] = wid
        return id_objective(x, ids, mods, params, conf).total

    return f, [feats, params["w_id.w"]]


CASES: dict = {
    "ops": {
        "add": _binary(ops.add),
        "sub": _binary(ops.sub),
        "mul": _binary(ops.mul),
        "scale": _unary(lambda a: ops.scale(a, -1.7)),
        "neg": _unary(ops.neg),
        "relu": _unary(ops.relu, _away_from_zero),
        "sigmoid": _unary(ops.sigmoid),
        "tanh": _unary(ops.tanh),
        "exp": _unary(ops.exp),
        "log": _unary(ops.log, _positive),
        "sqrt": _unary(ops.sqrt, _positive),
        "square": _unary(ops.square),
        "clamp_min": _unary(lambda a: ops.clamp_min(a, 0.0), _away_from_zero),
        "matmul": _case_matmul,
        "linear": _case_linear,
        "sum0": _reduce("sum", 0),
        "mean1": _reduce("mean", 1),
        "max0": _reduce("max", 0),
        "max1": _reduce("max", 1),
        "softmax": _case_softmax,
        "log_softmax": _case_log_softmax,
        "l2_normalize": _case_l2,
        "shape_ops": _case_shape_ops,
    },
    "conv": {
        "conv2d_s1p0": _case_conv_linear(1, 0),
        "conv2d_s2p1": _case_conv(2, 1),
        "conv2d_s2p0": _case_conv_linear(2, 0),
    },
    "lstm": {"lstm2": _case_lstm},
    "tmr": {
        "se_gate": _case_se,
        "tmr_composed": _case_tmr,
        "pool_average": _case_pooling("average"),
        "pool_max": _case_pooling("max"),
        "pool_softmax_weighted": _case_pooling("softmax_weighted"),
    },
    "losses": {
        "cross_entropy_index": _case_ce_index,
        "cross_entropy_dist": _case_ce_dist,
        "triplet": _case_triplet,
        "adv_three_class": _case_adv("three_class"),
        "adv_inverse_label": _case_adv("inverse_label"),
        "adv_uniform_target": _case_adv("uniform_target"),
        "id_objective": _case_id_objective,
    },
}


def cases_for(module: str) -> dict:
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}; expected one of {MODULES}")
    groups = CASES if module == "all" else {module: CASES[module]}
    return {f"{g}.{name}": case for g, table in groups.items() for name, case in table.items()}


@dataclass
class CaseResult:
    name: str
    seeds: int
    max_rel_err: float
    worst_seed: int
    finite: bool

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.finite and self.max_rel_err < tol


def run_case(name: str, case: Case, seeds: Sequence[int]) -> CaseResult:
    worst, worst_seed, finite = 0.0, -1, True
    for s in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([int(s), 0x6AD]))
        f, inputs = case(rng)
        rep = grad_check(f, inputs)
        finite &= rep.finite
        if rep.max_rel_err >= worst:
            worst, worst_seed = rep.max_rel_err, int(s)
    return CaseResult(name, len(seeds), worst, worst_seed, finite)


def run_suite(module: str = "all", seeds: int = DEFAULT_SEEDS) -> tuple:
    """(results, seconds) for every case in ``module`` over seeds ``0..seeds-1``."""
    start = time.perf_counter()
    results = [run_case(n, c, range(seeds)) for n, c in cases_for(module).items()]
    return results, time.perf_counter() - start


def format_results(results: Sequence[CaseResult], tol: float = TOLERANCE) -> str:
    lines = [f"{'case':<34} {'seeds':>5} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<34} {r.seeds:>5} {r.max_rel_err:12.3e}  {'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
