"""Training objectives: identity CE, batch-hard triplet and the modality game."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mitml.autodiff import ShapeError, Tensor, ops
from mitml.network import ModalClass, ModelParams, classify
from mitml.tmr import encode_batch

ADVERSARIAL_MODES = ("three_class", "inverse_label", "uniform_target")


@dataclass
class LossConfig:
    lam: float = 0.4
    triplet_margin: float = 0.3
    adversarial_mode: str = "three_class"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.triplet_margin < 0:
            raise ValueError("triplet margin must be >= 0")
        if self.adversarial_mode not in ADVERSARIAL_MODES:
            raise ValueError(f"unknown adversarial mode {self.adversarial_mode!r}")


def modality_classes(mode: str) -> int:
    """Width of the modality head each adversarial strategy uses."""
    if mode not in ADVERSARIAL_MODES:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    return 2 if mode == "uniform_target" else 3


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of logits (K,) or (B, K).

    ``target`` is a class index, a sequence of indices (one per row), or a float
    array of the logits' shape holding target distributions.
    """
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError("cross-entropy needs at least 2 classes")
    logp = ops.log_softmax(logits, axis=-1)
    tgt = np.asarray(target)
    if tgt.dtype.kind == "f":
        if tgt.shape != logits.shape:
            raise ShapeError(f"target distribution {tgt.shape} vs logits {logits.shape}")
        per_row = ops.sum(ops.mul(logp, Tensor(tgt)), axis=-1)
        return ops.neg(ops.mean(per_row))
    tgt = tgt.astype(np.int64)
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise IndexError(f"target index out of range for {k} classes: {tgt}")
    if logits.ndim == 1:
        if tgt.size != 1:
            raise ShapeError("a single logit vector takes a single target")
        return ops.neg(logp[int(tgt.reshape(-1)[0])])
    tgt = np.broadcast_to(tgt, (logits.shape[0],))
    picked = ops.index(logp, (np.arange(logits.shape[0]), tgt))
    return ops.neg(ops.mean(picked))


def pairwise_distances(x: Tensor) -> Tensor:
    """Euclidean distance matrix of B×D rows, exact zeros carry zero gradient."""
    b = x.shape[0]
    diff = ops.sub(ops.expand(x, 1, b), ops.expand(x, 0, b))
    d2 = ops.sum(ops.square(diff), axis=2)
    zero = (d2.data == 0.0).astype(np.float64)
    return ops.mul(ops.sqrt(ops.add(d2, Tensor(zero * 1e-16))), Tensor(1.0 - zero))


def triplet_loss(features: Tensor, ids, margin: float = 0.3, normalize: bool = True) -> Tensor:
    """Batch-hard triplet loss averaged over anchors that have a positive.

    For each anchor the farthest same-id sample and the nearest other-id
    sample define ``max(0, d_pos - d_neg + margin)``.
    """
    ids = np.asarray(ids).reshape(-1)
    x = features if features.ndim == 2 else ops.reshape(features, (features.shape[0], 1))
    if x.shape[0] != ids.size:
        raise ShapeError(f"{x.shape[0]} features but {ids.size} labels")
    if np.unique(ids).size < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    if normalize:
        x = ops.l2_normalize(x, axis=1)
    dist = pairwise_distances(x)
    same = ids[:, None] == ids[None, :]
    eye = np.eye(ids.size, dtype=bool)
    pos_mask = same & ~eye
    anchors = np.flatnonzero(pos_mask.any(axis=1))
    if anchors.size == 0:
        raise ValueError("triplet loss needs at least one identity with two samples")
    d = dist.data
    hard_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)[anchors]
    hard_neg = np.where(~same, d, np.inf).argmin(axis=1)[anchors]
    dp = ops.index(dist, (anchors, hard_pos))
    dn = ops.index(dist, (anchors, hard_neg))
    return ops.mean(ops.relu(ops.add(ops.sub(dp, dn), float(margin))))


def _frozen_head(params: ModelParams) -> tuple:
    return Tensor(params["w_m.w"].data.copy()), Tensor(params["w_m.b"].data.copy())


def modality_input(features: Tensor) -> Tensor:
    """What the modality head sees: L2-normalised sequence features.

    On raw features the encoder can win the modality game by shrinking or
    inflating feature norms instead of changing their direction.
    """
    return ops.l2_normalize(features, axis=-1)


def adv_encoder_loss(fv: Tensor, fi: Tensor, params: ModelParams, mode: str = "three_class") -> Tensor:
    """Encoder-side modality loss; the modality head is used as a constant."""
    if mode not in ADVERSARIAL_MODES:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    if fv.shape[0] == 0 or fi.shape[0] == 0:
        raise ShapeError("both modality batches must be non-empty")
    w, b = _frozen_head(params)
    k = w.shape[0]
    if k != modality_classes(mode):
        raise ShapeError(f"mode {mode} needs a {modality_classes(mode)}-way modality head, got {k}")
    lv, li = ops.linear(modality_input(fv), w, b), ops.linear(modality_input(fi), w, b)
    if mode == "three_class":
        return ops.add(cross_entropy(lv, int(ModalClass.NEITHER)), cross_entropy(li, int(ModalClass.NEITHER)))
    if mode == "inverse_label":
        return ops.add(cross_entropy(lv, int(ModalClass.IR)), cross_entropy(li, int(ModalClass.RGB)))
    uv = np.full(lv.shape, 1.0 / k)
    ui = np.full(li.shape, 1.0 / k)
    return ops.add(cross_entropy(lv, uv), cross_entropy(li, ui))


def adv_discriminator_loss(fv: Tensor, fi: Tensor, params: ModelParams) -> Tensor:
    """Modality-head loss on detached features: true labels RGB / IR."""
    if fv.requires_grad or fi.requires_grad:
        raise ValueError("discriminator loss takes detached features only")
    lv, li = classify(modality_input(fv), params, "w_m"), classify(modality_input(fi), params, "w_m")
    return ops.add(cross_entropy(lv, int(ModalClass.RGB)), cross_entropy(li, int(ModalClass.IR)))


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    tri: Tensor
    adv1: Optional[Tensor] = None

    def values(self) -> dict:
        return {
            "L_adv1": 0.0 if self.adv1 is None else self.adv1.item(),
            "L_ce": self.ce.item(),
            "L_tri": self.tri.item(),
            "L_total": self.total.item(),
        }


def split_by_modality(features: Tensor, modalities) -> tuple:
    modalities = np.asarray(modalities).reshape(-1)
    iv = np.flatnonzero(modalities == ModalClass.RGB)
    ii = np.flatnonzero(modalities == ModalClass.IR)
    return ops.index(features, iv), ops.index(features, ii)


def id_objective(
    features: Tensor,
    labels,
    modalities,
    params: ModelParams,
    config: LossConfig,
    adversarial: bool = True,
) -> LossTerms:
    """``lam * L_adv1 + CE(W_id) + triplet`` over a mixed-modality batch of sequence features.

    ``adversarial=False`` drops the modality term entirely (baseline and
    baseline+T variants, which have no modality head).
    """
    ce = cross_entropy(classify(features, params, "w_id"), np.asarray(labels))
    tri = triplet_loss(features, labels, config.triplet_margin)
    total = ops.add(ce, tri)
    adv1 = None
    if adversarial:
        fv, fi = split_by_modality(features, modalities)
        adv1 = adv_encoder_loss(fv, fi, params, config.adversarial_mode)
        total = ops.add(ops.scale(adv1, config.lam), total)
    return LossTerms(total, ce, tri, adv1)


def baseline_objective(
    frames: np.ndarray,
    modalities,
    labels,
    params: ModelParams,
    pooling: str = "average",
    margin: float = 0.3,
) -> LossTerms:
    """Identity CE + triplet on pooled frame features (no TMR, no modality head)."""
    if params.has_group("tmr"):
        raise ValueError("baseline objective takes a model without TMR parameters")
    feats = encode_batch(frames, modalities, params, pooling)
    ce = cross_entropy(classify(feats, params, "w_id"), np.asarray(labels))
    tri = triplet_loss(feats, labels, margin)
    return LossTerms(ops.add(ce, tri), ce, tri)
