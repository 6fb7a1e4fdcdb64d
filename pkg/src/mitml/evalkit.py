"""Cross-modal retrieval protocol: cosine ranking, CMC and mAP in both directions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mitml import kernels
from mitml.autodiff import no_grad
from mitml.network import ModalClass, ModelParams
from mitml.synthdata import TrackletStore
from mitml.tmr import encode_batch, shuffled, tmr_seq_len
from mitml.training import eval_frame_indices

RANKS = (1, 5, 10, 20)
DIRECTIONS = {"i2v": "ir_to_vis", "v2i": "vis_to_ir"}
REPORT_HEADER = ["direction", "r1", "r5", "r10", "r20", "map", "num_queries"]


@dataclass
class EvalReport:
    direction: str
    cmc: dict
    map: float
    num_queries: int
    num_excluded: int = 0
    ap: np.ndarray = field(default=None, repr=False)

    def row(self) -> list:
        return [self.direction] + [repr(float(self.cmc[k])) for k in RANKS] + [repr(float(self.map)), self.num_queries]


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarity; rows or columns with zero norm score 0.

    The dot product is taken before dividing by the norms so that exactly
    orthogonal pairs score exactly 0 and genuine ties stay ties.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    denom = np.linalg.norm(q, axis=1)[:, None] * np.linalg.norm(g, axis=1)[None, :]
    dots = q @ g.T
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def evaluate(
    q_feats,
    q_ids,
    q_cams,
    g_feats,
    g_ids,
    g_cams,
    direction: str = "ir_to_vis",
    ranks: Sequence[int] = RANKS,
) -> EvalReport:
    """Rank the gallery for every query and score CMC@ranks and mAP.

    Gallery entries sharing both identity and camera with the query are
    removed before scoring. Ties in similarity keep gallery order. Queries
    left without any relevant entry are excluded and counted in
    ``num_excluded``.
    """
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    sim = similarity_matrix(q_feats, g_feats)
    nq, ng = sim.shape
    junk = (q_ids[:, None] == g_ids[None, :]) & (q_cams[:, None] == g_cams[None, :])
    if junk.all(axis=1).any():
        raise ValueError("a query has an empty gallery after same-camera filtering")
    # invalid entries sort last; stable sort keeps gallery-index tie order
    key = np.where(junk, np.inf, -sim)
    order = np.argsort(key, axis=1, kind="stable")
    relevant = (g_ids[order] == q_ids[:, None]) & ~np.take_along_axis(junk, order, axis=1)
    has_rel = relevant.any(axis=1)
    ap, first = kernels.ranked_hits(np.ascontiguousarray(relevant, dtype=np.uint8))
    ap, first = ap[has_rel], first[has_rel]
    n = int(has_rel.sum())
    cmc = {k: (float(np.mean(first < k)) if n else 0.0) for k in ranks}
    return EvalReport(direction, cmc, float(ap.mean()) if n else 0.0, n, nq - n, ap)


def brute_force_oracle(query: tuple, gallery: list) -> tuple:
    """(AP, 1-based rank of the first hit) for one query by full sort and scan.

    ``query`` is (identity, camera, feature); ``gallery`` a list of the same
    triples. Returns (None, None) when no valid relevant entry exists.
    """
    qid, qcam, qf = query
    qnorm = math.sqrt(sum(float(v) * float(v) for v in qf))
    scored = []
    for idx, (gid, gcam, gf) in enumerate(gallery):
        if gid == qid and gcam == qcam:
            continue
        gnorm = math.sqrt(sum(float(v) * float(v) for v in gf))
        dot = sum(float(a) * float(b) for a, b in zip(qf, gf))
        s = 0.0 if qnorm == 0 or gnorm == 0 else dot / (qnorm * gnorm)
        scored.append((-s, idx, gid == qid))
    scored.sort()
    hits, precisions, first = 0, [], None
    for pos, (_, _, is_rel) in enumerate(scored, 1):
        if is_rel:
            hits += 1
            precisions.append(hits / pos)
            if first is None:
                first = pos
    if not precisions:
        return None, None
    return sum(precisions) / len(precisions), first


def chance_map(num_relevant: Sequence[int], gallery_size: int) -> float:
    """Expected mAP of a uniformly random ranking."""
    g = gallery_size
    harmonic = sum(1.0 / k for k in range(1, g + 1))
    vals = []
    for r in num_relevant:
        if r == 0:
            continue
        vals.append((harmonic + (r - 1) / max(g - 1, 1) * (g - harmonic)) / g)
    return float(np.mean(vals)) if vals else 0.0


# -- model-level evaluation ----------------------------------------------------------


def extract_features(
    params: ModelParams,
    store: TrackletStore,
    records: list,
    n_frames: int,
    pooling: str = "average",
    shuffle_frames: bool = False,
    batch_size: int = 32,
    seed: int = 0,
) -> np.ndarray:
    """Sequence features for ``records`` using the first frame of each of ``n_frames`` chunks."""
    steps = tmr_seq_len(params)
    if steps and steps != n_frames:
        raise ValueError(f"model with temporal refinement needs exactly {steps} frames per tracklet, got {n_frames}")
    rng = np.random.default_rng(seed) if shuffle_frames else None
    out = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            frames = np.stack(
                [store.frames(r.tracklet_id)[eval_frame_indices(store.frames(r.tracklet_id).shape[0], n_frames)] for r in chunk]
            )
            frames = shuffled(frames, rng)
            out.append(encode_batch(frames, [r.modality for r in chunk], params, pooling).data)
    return np.concatenate(out, axis=0)


def evaluate_model(
    params: ModelParams,
    store: TrackletStore,
    n_frames: int,
    pooling: str = "average",
    directions: Sequence[str] = ("i2v", "v2i"),
    split: str = "test",
    shuffle_frames: bool = False,
) -> list:
    rgb = store.records(split, ModalClass.RGB)
    ir = store.records(split, ModalClass.IR)
    f_rgb = extract_features(params, store, rgb, n_frames, pooling, shuffle_frames)
    f_ir = extract_features(params, store, ir, n_frames, pooling, shuffle_frames)
    meta = lambda recs: (np.array([r.identity for r in recs]), np.array([r.camera for r in recs]))
    reports = []
    for d in directions:
        if d == "i2v":
            reports.append(evaluate(f_ir, *meta(ir), f_rgb, *meta(rgb), DIRECTIONS[d]))
        elif d == "v2i":
            reports.append(evaluate(f_rgb, *meta(rgb), f_ir, *meta(ir), DIRECTIONS[d]))
        else:
            raise ValueError(f"unknown direction {d!r}")
    return reports


def n_frames_sweep(
    params: ModelParams, store: TrackletStore, n_values: Sequence[int], pooling: str = "average", split: str = "test"
) -> list:
    """(n, infrared-to-visible report) for each n; a refinement model accepts only its own T."""
    steps = tmr_seq_len(params)
    rows = []
    for n in n_values:
        if steps and n != steps:
            raise ValueError(f"n={n} incompatible with a model built for T={steps}")
        (rep,) = evaluate_model(params, store, n, pooling, ("i2v",), split)
        rows.append((n, rep))
    return rows


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def sweep_csv(rows: Sequence[tuple], key: str = "n") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, "R1", "R5", "R10", "R20", "mAP"])
    for value, rep in rows:
        w.writerow([value] + [f"{rep.cmc[k]:.6f}" for k in RANKS] + [f"{rep.map:.6f}"])
    return buf.getvalue()


def format_table(reports: Sequence[EvalReport], title: Optional[str] = None) -> str:
    lines = [title] if title else []
    lines.append(f"{'direction':<10} {'R1':>7} {'R5':>7} {'R10':>7} {'R20':>7} {'mAP':>7} {'queries':>8}")
    for r in reports:
        vals = " ".join(f"{100 * r.cmc[k]:7.2f}" for k in RANKS)
        lines.append(f"{r.direction:<10} {vals} {100 * r.map:7.2f} {r.num_queries:8d}")
    return "\n".join(lines)
