"""Temporal memory refinement and tracklet encoding.

Per-frame channel attention comes from a two-layer LSTM over the attention
branch features, a position-specific affine map and a position-specific SE
gate. The aggregation branch is then averaged over frames with the attention
applied as a residual gain: ``F = mean_t(a_t * f2_t + f2_t)``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from mitml.autodiff import ShapeError, Tensor, ops
from mitml.network import ModalClass, ModelParams, check_frames, lstm2_forward, se_gate, shared_forward, stem

POOLINGS = ("average", "max", "softmax_weighted")


def tmr_seq_len(params: ModelParams) -> int:
    return len([n for n in params.names("tmr") if n.startswith("tmr.fc.") and n.endswith(".w")])


def tmr_attention(f1: Tensor, params: ModelParams) -> Tensor:
    """Attention a (same shape as ``f1``: T×D or B×T×D), every entry in (0, 1)."""
    steps = tmr_seq_len(params)
    single = f1.ndim == 2
    x = ops.reshape(f1, (1,) + f1.shape) if single else f1
    if x.ndim != 3:
        raise ShapeError(f"tmr_attention expects T×D or B×T×D, got {f1.shape}")
    if x.shape[1] != steps:
        raise ShapeError(f"tracklet has {x.shape[1]} frames but the module was built for T={steps}")
    h = lstm2_forward(x, params.sub("tmr.lstm"))
    att = []
    for t in range(steps):
        ft = x[:, t]
        fc = ops.linear(h[:, t], params[f"tmr.fc.{t}.w"], params[f"tmr.fc.{t}.b"])
        u = ops.scale(ops.add(fc, ft), 0.5)
        se = params.sub(f"tmr.se.{t}")
        att.append(se_gate(u, se["w1"], se["b1"], se["w2"], se["b2"]))
    a = ops.stack(att, axis=1)
    return ops.reshape(a, a.shape[1:]) if single else a


def tmr_aggregate(a: Tensor, f2: Tensor) -> Tensor:
    """Sequence feature ``(1/T) sum_t (a_t * f2_t + f2_t)``; T×D -> D or B×T×D -> B×D."""
    if a.shape != f2.shape:
        raise ShapeError(f"attention {a.shape} and features {f2.shape} must match")
    return ops.mean(ops.add(ops.mul(a, f2), f2), axis=-2)


def pool_frames(f: Tensor, pooling: str) -> Tensor:
    """Baseline frame fusion over the T axis of T×D or B×T×D features."""
    axis = f.ndim - 2
    if pooling == "average":
        return ops.mean(f, axis=axis)
    if pooling == "max":
        return ops.max(f, axis=axis)
    if pooling == "softmax_weighted":
        # per-frame score = channel mean, softmaxed over frames
        weights = ops.softmax(ops.mean(f, axis=-1), axis=-1)
        return ops.sum(ops.mul(ops.expand(weights, -1, f.shape[-1]), f), axis=axis)
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def frame_features(frames: np.ndarray, modalities, params: ModelParams, branches) -> list:
    """Run a mixed-modality stack of tracklets (B×T×3×H×W) through the two-stream backbone.

    Each modality goes through its own stem, then all frames share the trunk.
    Returns one B×T×D tensor per requested branch, in input order.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[None]
    bsz, steps = frames.shape[:2]
    modalities = np.asarray(modalities, dtype=np.int64).reshape(-1)
    if modalities.size != bsz:
        raise ShapeError(f"{bsz} tracklets but {modalities.size} modality labels")
    if np.any(modalities == ModalClass.NEITHER) or np.any((modalities < 0) | (modalities > 1)):
        raise ValueError("tracklet modality must be RGB (0) or IR (1)")
    order, stems = [], []
    for mod in (ModalClass.RGB, ModalClass.IR):
        idx = np.flatnonzero(modalities == mod)
        if idx.size == 0:
            continue
        x = Tensor(frames[idx].reshape((-1,) + frames.shape[2:]))
        check_frames(x, params["stem_rgb.w"].shape[1])
        stems.append(stem(x, mod, params))
        order.extend(idx.tolist())
    x = stems[0] if len(stems) == 1 else ops.concat(stems, axis=0)
    outs = shared_forward(x, params, branches)
    inverse = np.argsort(np.asarray(order))
    result = []
    for f in outs:
        f = ops.reshape(f, (bsz, steps, f.shape[-1]))
        if not np.array_equal(inverse, np.arange(bsz)):
            f = ops.index(f, inverse)
        result.append(f)
    return result


def encode_batch(
    frames: np.ndarray,
    modalities,
    params: ModelParams,
    pooling: str = "average",
    zero_attention: bool = False,
) -> Tensor:
    """Sequence features B×D.

    With TMR parameters present this is backbone -> attention -> refined
    aggregation; otherwise the aggregation branch is fused by ``pooling``.
    ``zero_attention`` forces a = 0 (the aggregation then reduces to average pooling).
    """
    if params.has_group("tmr"):
        f1, f2 = frame_features(frames, modalities, params, ("branch_f1", "branch_f2"))
        if zero_attention:
            a = Tensor(np.zeros(f2.shape))
        else:
            a = tmr_attention(f1, params)
        return tmr_aggregate(a, f2)
    (f2,) = frame_features(frames, modalities, params, ("branch_f2",))
    return pool_frames(f2, pooling)


def encode_tracklet(frames: np.ndarray, modality: ModalClass, params: ModelParams, pooling: str = "average") -> Tensor:
    """One tracklet (T×3×H×W) to its D-dimensional sequence feature."""
    feat = encode_batch(np.asarray(frames)[None], [int(modality)], params, pooling)
    return ops.reshape(feat, (feat.shape[-1],))


def shuffled(frames: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Independently permute the frame order of every tracklet in a B×T×... stack."""
    if rng is None:
        return frames
    out = np.empty_like(frames)
    for b in range(frames.shape[0]):
        out[b] = frames[b, rng.permutation(frames.shape[1])]
    return out
