"""Sampling, schedules and the alternating adversarial training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from mitml.losses import LossConfig, adv_discriminator_loss, id_objective, modality_classes, split_by_modality
from mitml.network import BackboneConfig, ModalClass, ModelParams, build_model, load_checkpoint, params_from_checkpoint, save_checkpoint
from mitml.synthdata import FRAMES_PER_TRACKLET, TrackletStore, augment
from mitml.tmr import POOLINGS, encode_batch, shuffled

log = logging.getLogger(__name__)

MODES = ("full", "baseline", "baseline+M", "baseline+T")
LOSS_HEADER = ["epoch", "step", "L_adv1", "L_adv2", "L_ce", "L_tri", "L_total"]
STEM_GROUPS = ("stem_rgb", "stem_ir")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_identities: int = 8
    tracklets_per_identity: int = 2
    frames_per_tracklet: int = 6
    base_lr: float = 0.1
    warmup_start_lr: float = 0.01
    wm_lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    warmup_epochs: int = 10
    lr_drops: dict = field(default_factory=lambda: {35: 0.01, 80: 0.001})
    stem_lr_factor: float = 0.1
    seed: int = 0
    mode: str = "full"
    lam: float = 0.4
    triplet_margin: float = 0.3
    adversarial_mode: str = "three_class"
    pooling: str = "average"
    shuffle_frames: bool = False
    augment: bool = True
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 64])
    checkpoint_every: int = 0

    def __post_init__(self):
        n = self.frames_per_tracklet
        if not 1 <= n <= FRAMES_PER_TRACKLET or FRAMES_PER_TRACKLET % n:
            raise ValueError(f"frames_per_tracklet={n} must divide {FRAMES_PER_TRACKLET}")
        if self.tracklets_per_identity < 2 or self.tracklets_per_identity % 2:
            raise ValueError("tracklets_per_identity must be even (equal RGB and IR counts)")
        if self.batch_identities < 2:
            raise ValueError("a batch needs at least two identities")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        self.lr_drops = {int(k): float(v) for k, v in self.lr_drops.items()}
        self.stage_channels = [int(c) for c in self.stage_channels]
        LossConfig(self.lam, self.triplet_margin, self.adversarial_mode)

    @property
    def use_tmr(self) -> bool:
        return self.mode in ("full", "baseline+T")

    @property
    def adversarial(self) -> bool:
        return self.mode in ("full", "baseline+M")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.triplet_margin, self.adversarial_mode)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            stage_channels=self.stage_channels, embed_dim=self.stage_channels[-1], seq_len=self.frames_per_tracklet
        )


_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def _parse_value(name: str, default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in _BOOL:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, dict):
        out = {}
        for item in filter(None, (p.strip() for p in raw.split(","))):
            k, v = item.split(":")
            out[int(k)] = float(v)
        return out
    if isinstance(default, list):
        return [int(v) for v in raw.split(",") if v.strip()]
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, getattr(defaults, key), raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, dict):
            v = ",".join(f"{k}:{x!r}" for k, x in sorted(v.items()))
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# -- sampling ------------------------------------------------------------------------


def chunk_frame_sampler(tracklet_len: int, n: int, rng: np.random.Generator) -> list:
    """One uniformly drawn index from each of ``n`` equal consecutive chunks."""
    if n < 1 or tracklet_len % n:
        raise ValueError(f"n={n} does not divide tracklet length {tracklet_len}")
    size = tracklet_len // n
    return [k * size + int(rng.integers(0, size)) for k in range(n)]


def eval_frame_indices(tracklet_len: int, n: int) -> list:
    """Deterministic test-time counterpart: the first frame of each chunk."""
    if n < 1 or tracklet_len % n:
        raise ValueError(f"n={n} does not divide tracklet length {tracklet_len}")
    return list(range(0, tracklet_len, tracklet_len // n))


def eligible_identities(records: list) -> list:
    """Identities with at least one RGB and one IR tracklet (others are dropped with a warning)."""
    mods: dict = {}
    for r in records:
        mods.setdefault(r.identity, set()).add(r.modality)
    ok = []
    for ident, m in sorted(mods.items()):
        if m >= {int(ModalClass.RGB), int(ModalClass.IR)}:
            ok.append(ident)
        else:
            log.warning("identity %d lacks one modality; excluded from sampling", ident)
    return ok


def pk_batch_sampler(records: list, P: int, K: int, rng: np.random.Generator) -> Iterator[list]:
    """One epoch of batches: P identities x (K/2 RGB + K/2 IR) tracklets.

    The epoch is a pass over the shuffled IR tracklets, each used at most once;
    RGB tracklets are drawn per identity without replacement and the pool is
    reshuffled when it runs out. Batches list, per identity, its RGB tracklets
    then its IR tracklets.
    """
    if K % 2:
        raise ValueError("K must be even")
    half = K // 2
    ids = eligible_identities(records)
    if len(ids) < P:
        raise ValueError(f"need at least {P} identities with both modalities, have {len(ids)}")
    idset = set(ids)
    rgb = {i: [r for r in records if r.identity == i and r.modality == ModalClass.RGB] for i in ids}
    ir_queue = [r for r in records if r.identity in idset and r.modality == ModalClass.IR]
    ir_queue = [ir_queue[k] for k in rng.permutation(len(ir_queue))]
    rgb_pool: dict = {i: [] for i in ids}

    def draw_rgb(ident):
        if not rgb_pool[ident]:
            pool = rgb[ident]
            rgb_pool[ident] = [pool[k] for k in rng.permutation(len(pool))]
        return rgb_pool[ident].pop()

    while True:
        chosen: dict = {}
        used = []
        for pos, rec in enumerate(ir_queue):
            got = chosen.get(rec.identity)
            if got is None and len(chosen) == P:
                continue
            if got is not None and len(got) == half:
                continue
            chosen.setdefault(rec.identity, []).append(rec)
            used.append(pos)
            if len(chosen) == P and all(len(v) == half for v in chosen.values()):
                break
        if len(chosen) < P or any(len(v) < half for v in chosen.values()):
            return
        used_set = set(used)
        ir_queue = [r for k, r in enumerate(ir_queue) if k not in used_set]
        batch = []
        for ident, irs in chosen.items():
            batch.extend(draw_rgb(ident) for _ in range(half))
            batch.extend(irs)
        yield batch


# -- schedule and optimizer ----------------------------------------------------------


def lr_at(epoch: int, cfg: TrainConfig) -> tuple:
    """(main, stem, modality-head) learning rates for a 1-based epoch."""
    if not 1 <= epoch <= max(cfg.epochs, 1):
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.warmup_epochs:
        frac = 1.0 if cfg.warmup_epochs == 1 else (epoch - 1) / (cfg.warmup_epochs - 1)
        main = cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    else:
        main = cfg.base_lr
    for after, value in sorted(cfg.lr_drops.items()):
        if epoch > after:
            main = value
    return main, main * cfg.stem_lr_factor, cfg.wm_lr


class SGD:
    """SGD with momentum and L2 weight decay, one velocity buffer per parameter name."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: ModelParams, names, lr: float) -> None:
        for name in names:
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - lr * v


def encoder_names(params: ModelParams) -> tuple:
    stems = [n for g in STEM_GROUPS for n in params.names(g)]
    rest = [n for n in params.names() if n.split(".", 1)[0] not in STEM_GROUPS + ("w_m",)]
    return stems, rest


# -- batches and steps -------------------------------------------------------------------


@dataclass
class Batch:
    frames: np.ndarray  # B x n x 3 x H x W
    labels: np.ndarray  # class indices into w_id
    modalities: np.ndarray
    identities: np.ndarray


def assemble_batch(
    records: list, store: TrackletStore, label_of: dict, cfg: TrainConfig, rng: np.random.Generator
) -> Batch:
    clips = []
    for rec in records:
        frames = store.frames(rec.tracklet_id)
        idx = chunk_frame_sampler(frames.shape[0], cfg.frames_per_tracklet, rng)
        clips.append(augment(frames[idx], rng, cfg.augment))
    frames = np.stack(clips)
    if cfg.shuffle_frames:
        frames = shuffled(frames, rng)
    return Batch(
        frames,
        np.array([label_of[r.identity] for r in records]),
        np.array([r.modality for r in records]),
        np.array([r.identity for r in records]),
    )


def _param_norms(params: ModelParams) -> str:
    return ", ".join(f"{n}={np.linalg.norm(t.data):.3g}" for n, t in params.items())


def train_step(batch: Batch, params: ModelParams, opt: SGD, cfg: TrainConfig, lrs: tuple) -> dict:
    """Discriminator update on detached features, then encoder + identity head update.

    Returns the loss components. Without a modality head (baseline modes) the
    first phase is skipped and the adversarial terms are logged as 0.
    """
    main_lr, stem_lr, wm_lr = lrs
    params.zero_grad()
    feats = encode_batch(batch.frames, batch.modalities, params, cfg.pooling)
    adv2 = 0.0
    if cfg.adversarial:
        fv, fi = split_by_modality(feats.detach(), batch.modalities)
        disc = adv_discriminator_loss(fv, fi, params)
        disc.backward()
        adv2 = disc.item()
        opt.step(params, params.names("w_m"), wm_lr)
        params.zero_grad()
    terms = id_objective(feats, batch.labels, batch.modalities, params, cfg.loss_config, cfg.adversarial)
    values = terms.values()
    values["L_adv2"] = adv2
    if not all(np.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss {values}; parameter norms: {_param_norms(params)}")
    terms.total.backward()
    stems, rest = encoder_names(params)
    opt.step(params, stems, stem_lr)
    opt.step(params, rest, main_lr)
    params.zero_grad()
    return values


# -- full runs --------------------------------------------------------------------------


def new_model(cfg: TrainConfig, num_ids: int) -> ModelParams:
    wm = modality_classes(cfg.adversarial_mode) if cfg.adversarial else None
    return build_model(cfg.backbone_config(), num_ids, seed=cfg.seed, use_tmr=cfg.use_tmr, wm_classes=wm)


def checkpoint_entries(params: ModelParams, opt: Optional[SGD], epoch: int, cfg: TrainConfig) -> dict:
    entries = dict(params.items())
    if opt is not None:
        for name in params.names():
            if name in opt.velocity:
                entries[f"opt.{name}"] = opt.velocity[name]
    entries["meta.epoch"] = np.array([float(epoch)])
    entries["meta.frames"] = np.array([float(cfg.frames_per_tracklet)])
    entries["meta.pooling"] = np.array([float(POOLINGS.index(cfg.pooling))])
    entries["meta.shuffle"] = np.array([1.0 if cfg.shuffle_frames else 0.0])
    return entries


@dataclass
class LoadedModel:
    params: ModelParams
    velocity: dict
    epoch: int
    frames: int
    pooling: str
    shuffle_frames: bool


def load_model(path) -> LoadedModel:
    entries = load_checkpoint(path)
    params = params_from_checkpoint(entries)
    velocity = {n[4:]: a for n, a in entries.items() if n.startswith("opt.")}

    def meta(key, default):
        return int(entries[f"meta.{key}"][0]) if f"meta.{key}" in entries else default

    return LoadedModel(
        params, velocity, meta("epoch", 0), meta("frames", 6), POOLINGS[meta("pooling", 0)], bool(meta("shuffle", 0))
    )


@dataclass
class TrainResult:
    params: ModelParams
    losses: list  # dict rows following LOSS_HEADER
    checkpoint: Optional[Path]

    def epoch_means(self, key: str = "L_total") -> dict:
        out: dict = {}
        for row in self.losses:
            out.setdefault(row["epoch"], []).append(row[key])
        return {e: float(np.mean(v)) for e, v in out.items()}


def train(
    cfg: TrainConfig,
    store: TrackletStore,
    out_dir=None,
    resume=None,
    max_epoch: Optional[int] = None,
) -> TrainResult:
    """Run epochs ``start..cfg.epochs`` (or up to ``max_epoch``) on the store's train split.

    With ``out_dir`` the loss CSV, periodic checkpoints (``checkpoint_every``)
    and ``final.mckp`` are written there. ``resume`` is a checkpoint path whose
    parameters, momentum buffers and epoch counter are restored; since every
    epoch draws from its own seeded generator the continuation is exact.
    """
    records = store.records("train")
    train_ids = sorted({r.identity for r in records})
    label_of = {ident: k for k, ident in enumerate(train_ids)}
    opt = SGD(cfg.momentum, cfg.weight_decay)
    start = 1
    if resume is not None:
        loaded = load_model(resume)
        params = loaded.params
        opt.velocity = {k: v.copy() for k, v in loaded.velocity.items()}
        start = loaded.epoch + 1
    else:
        params = new_model(cfg, len(train_ids))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")

    rows: list = []
    last = cfg.epochs if max_epoch is None else min(cfg.epochs, max_epoch)
    for epoch in range(start, last + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), epoch]))
        lrs = lr_at(epoch, cfg)
        batches = pk_batch_sampler(records, cfg.batch_identities, cfg.tracklets_per_identity, rng)
        for step, batch_records in enumerate(batches, 1):
            batch = assemble_batch(batch_records, store, label_of, cfg, rng)
            values = train_step(batch, params, opt, cfg, lrs)
            rows.append({"epoch": epoch, "step": step, **values})
        if rows:
            log.info("epoch %d  lr %.4g  L_total %.4f", epoch, lrs[0], rows[-1]["L_total"])
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            _save(out / f"epoch_{epoch:04d}.mckp", checkpoint_entries(params, opt, epoch, cfg))

    ckpt = None
    if out is not None:
        write_loss_csv(out / "losses.csv", rows)
        ckpt = out / "final.mckp"
        _save(ckpt, checkpoint_entries(params, opt, max(last, start - 1), cfg))
    return TrainResult(params, rows, ckpt)


def _save(path: Path, entries: dict) -> None:
    try:
        save_checkpoint(path, entries)
    except OSError as exc:
        raise RuntimeError(f"checkpoint write failed: {path}: {exc}") from exc


def write_loss_csv(path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["step"]] + [repr(float(r[k])) for k in LOSS_HEADER[2:]])
