"""Desk-scale experiment runners: training variants, ablation sweeps and the modality probe."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GroupKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from mitml.evalkit import EvalReport, RANKS, evaluate_model, extract_features
from mitml.losses import ADVERSARIAL_MODES
from mitml.network import ModalClass, ModelParams
from mitml.synthdata import Manifest, TrackletStore, generate_corpus
from mitml.tmr import POOLINGS
from mitml.training import TrainConfig, train

log = logging.getLogger(__name__)

# Settings under which the 30-epoch corpus runs actually learn; the full-scale
# defaults of TrainConfig (lr 0.1, weak decay, crop augmentation) collapse a
# small plain conv stack trained from scratch.
DESK_RECIPE = dict(
    epochs=30,
    base_lr=0.03,
    warmup_start_lr=0.003,
    weight_decay=2e-2,
    stage_channels=[32, 64, 128, 128, 64],
    augment=False,
)
LAMBDAS = (0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
N_FRAMES = (1, 2, 3, 4, 6, 8, 12)
SWEEPS = ("lambda", "pooling", "adv-mode", "n-frames")
SWEEP_HEADER = ["sweep", "value", "direction", "r1", "r5", "r10", "r20", "map", "num_queries"]


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_RECIPE, **overrides})


def corpus_for_seed(root, seed: int, num_ids: int = 20, tracklets: int = 4) -> TrackletStore:
    """Generate (once) and load the corpus for ``seed`` under ``root``."""
    path = Path(root) / f"corpus_seed{seed}"
    if not (path / "manifest.csv").exists():
        generate_corpus(path, num_ids, tracklets, seed=seed)
    return TrackletStore(Manifest.read(path))


@dataclass
class VariantResult:
    name: str
    config: TrainConfig
    reports: list
    params: ModelParams
    seconds: float

    def report(self, direction: str = "ir_to_vis") -> EvalReport:
        for r in self.reports:
            if r.direction == direction:
                return r
        raise KeyError(direction)


def run_variant(store: TrackletStore, cfg: TrainConfig, name: Optional[str] = None, out_dir=None) -> VariantResult:
    """Train one configuration and evaluate it on the test split in both directions."""
    start = time.perf_counter()
    result = train(cfg, store, out_dir)
    seconds = time.perf_counter() - start
    reports = evaluate_model(
        result.params, store, cfg.frames_per_tracklet, cfg.pooling, shuffle_frames=cfg.shuffle_frames
    )
    label = name or cfg.mode + ("/shuffled" if cfg.shuffle_frames else "")
    log.info("%s seed=%d: i2v mAP %.4f (%.1fs)", label, cfg.seed, reports[0].map, seconds)
    return VariantResult(label, cfg, reports, result.params, seconds)


def sweep_configs(sweep: str, base: TrainConfig) -> list:
    """(value, config) pairs for one ablation sweep."""
    if sweep == "lambda":
        return [(lam, replace(base, mode="full", lam=lam)) for lam in LAMBDAS]
    if sweep == "pooling":
        return [(p, replace(base, mode="baseline", pooling=p)) for p in POOLINGS]
    if sweep == "adv-mode":
        return [(m, replace(base, mode="full", adversarial_mode=m)) for m in ADVERSARIAL_MODES]
    if sweep == "n-frames":
        return [(n, replace(base, mode="baseline", frames_per_tracklet=n)) for n in N_FRAMES]
    raise ValueError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def run_sweep(sweep: str, store: TrackletStore, base: TrainConfig) -> list:
    return [(value, run_variant(store, cfg, f"{sweep}={value}")) for value, cfg in sweep_configs(sweep, base)]


def sweep_csv(sweep: str, rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for value, res in rows:
        for rep in res.reports:
            w.writerow([sweep, value, rep.direction] + [repr(float(rep.cmc[k])) for k in RANKS] + [repr(float(rep.map)), rep.num_queries])
    return buf.getvalue()


def sweep_table(sweep: str, rows: Sequence[tuple]) -> str:
    lines = [f"{sweep:<16} {'dir':<10} {'R1':>7} {'R5':>7} {'R10':>7} {'R20':>7} {'mAP':>7}"]
    for value, res in rows:
        for rep in res.reports:
            vals = " ".join(f"{100 * rep.cmc[k]:7.2f}" for k in RANKS)
            lines.append(f"{str(value):<16} {rep.direction:<10} {vals} {100 * rep.map:7.2f}")
    return "\n".join(lines)


# -- modality probe ----------------------------------------------------------------


def modality_probe(features: np.ndarray, modalities, groups, folds: int = 5, seed: int = 0) -> float:
    """Cross-validated accuracy of a logistic-regression modality classifier.

    Folds are split by ``groups`` (identities) so the probe cannot lean on
    identity cues shared between its train and test folds.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(modalities).reshape(-1)
    g = np.asarray(groups).reshape(-1)
    if set(np.unique(y)) != {int(ModalClass.RGB), int(ModalClass.IR)}:
        raise ValueError("probe needs both RGB and IR samples")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    correct = 0
    for train_idx, test_idx in GroupKFold(n_splits=min(folds, np.unique(g).size)).split(x, y, g):
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
        clf.fit(x[train_idx], y[train_idx])
        correct += int((clf.predict(x[test_idx]) == y[test_idx]).sum())
    return correct / y.size


def probe_model(params: ModelParams, store: TrackletStore, n_frames: int, pooling: str = "average") -> float:
    """Modality-probe accuracy on frozen sequence features of every tracklet in the corpus."""
    records = store.records()
    feats = extract_features(params, store, records, n_frames, pooling)
    return modality_probe(feats, [r.modality for r in records], [r.identity for r in records])
