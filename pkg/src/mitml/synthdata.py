"""Deterministic synthetic visible/infrared tracklet corpus.

Each identity has a static appearance code (body shape, clothing colours,
torso stripes) and a periodic limb motion. Confusable pairs share appearance
up to a small perturbation and differ only in motion frequency, so a single
frame cannot tell them apart but the frame sequence can. Every tracklet is a
different time window of the walk (its own phase offset), which makes the set
of limb positions nearly frequency-independent; the ordering carries the
frequency.

The infrared transform keeps only luminance, so hue-based cues are lost
across modalities. A quarter of the frames are partly covered by a flat
occluder, so single frames are unreliable and pooling over a tracklet pays.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from mitml.network import ModalClass

log = logging.getLogger(__name__)

FRAMES_PER_TRACKLET = 24
MIN_TRACKLET_FRAMES = 12
NUM_CAMERAS = 12
RGB_CAMERAS = tuple(range(0, 6))
IR_CAMERAS = tuple(range(6, 12))
APPEARANCE_DIM = 10
NOISE_SIGMA = 0.02
OCCLUSION_PROB = 0.25
TRAIN_RATIO = 500 / 927
VCT_MAGIC = b"VCT1"
MANIFEST_HEADER = ["tracklet_id", "identity", "modality", "camera", "frames", "path", "split"]
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class IdentitySpec:
    id: int
    appearance: np.ndarray
    motion_freq: float
    motion_phase: float
    confusable_partner: Optional[int] = None


@dataclass
class Occluder:
    """Axis-aligned flat-coloured block (pixel units) drawn over the person."""

    top: int
    left: int
    height: int
    width: int
    color: tuple


@dataclass
class TrackletStyle:
    """Per-tracklet nuisance: time-window phase, horizontal jitter, brightness gain,
    and the occluder (or None) of every frame."""

    phase_offset: float = 0.0
    dx: int = 0
    gain: float = 1.0
    occluders: tuple = ()

    def occluder_at(self, t: int) -> Optional[Occluder]:
        return self.occluders[t] if t < len(self.occluders) else None


@dataclass
class Tracklet:
    frames: np.ndarray  # frame_count x 3 x H x W
    identity: int
    modality: ModalClass
    camera: int
    tracklet_id: int


@dataclass
class TrackletRecord:
    tracklet_id: int
    identity: int
    modality: int
    camera: int
    frames: int
    path: str
    split: str


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    root: Optional[Path] = None

    def split_ids(self, split: str) -> list:
        return sorted({r.identity for r in self.records if r.split == split})

    def select(self, split: Optional[str] = None, modality: Optional[int] = None) -> list:
        return [
            r
            for r in self.records
            if (split is None or r.split == split) and (modality is None or r.modality == int(modality))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.records:
            w.writerow([r.tracklet_id, r.identity, r.modality, r.camera, r.frames, r.path, r.split])
        return buf.getvalue()

    def path_of(self, rec: TrackletRecord) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    @classmethod
    def read(cls, path: Union[str, Path]) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.csv"
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != MANIFEST_HEADER:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        records = [
            TrackletRecord(int(a), int(b), int(c), int(d), int(e), f, g) for a, b, c, d, e, f, g in rows[1:]
        ]
        man = cls(records, path.parent)
        overlap = set(man.split_ids("train")) & set(man.split_ids("test"))
        if overlap:
            raise ValueError(f"train and test identities overlap: {sorted(overlap)}")
        return man


# -- identities ----------------------------------------------------------------


def make_identities(
    num_ids: int,
    confusable_fraction: float,
    rng: np.random.Generator,
    appearance_eps: float = 0.02,
    freq_gap: float = 0.8,
) -> list:
    """Identity specs; ``round(num_ids * confusable_fraction)`` (rounded down to even) ids form pairs."""
    if not 0.0 <= confusable_fraction <= 1.0:
        raise ValueError("confusable_fraction must lie in [0, 1]")
    if freq_gap <= 0:
        raise ValueError("frequency gap must be positive")
    n_paired = int(round(num_ids * confusable_fraction)) // 2 * 2
    specs = []
    for i in range(num_ids):
        specs.append(
            IdentitySpec(
                id=i,
                appearance=rng.uniform(0.0, 1.0, APPEARANCE_DIM),
                motion_freq=float(rng.uniform(0.5, 2.0)),
                motion_phase=float(rng.uniform(0.0, 2 * np.pi)),
            )
        )
    paired = rng.permutation(num_ids)[:n_paired]
    for a, b in zip(paired[0::2], paired[1::2]):
        sa, sb = specs[a], specs[b]
        sb.appearance = np.clip(sa.appearance + rng.normal(0.0, appearance_eps, APPEARANCE_DIM), 0.0, 1.0)
        low = float(rng.uniform(1.0, 2.0 - freq_gap)) if freq_gap < 1.0 else 0.5
        slow_first = rng.uniform() < 0.5
        sa.motion_freq, sb.motion_freq = (low, low + freq_gap) if slow_first else (low + freq_gap, low)
        sa.confusable_partner, sb.confusable_partner = int(b), int(a)
    return specs


# -- rendering -----------------------------------------------------------------


def _camera_affine(camera: int) -> tuple:
    r = np.random.default_rng(10_007 + camera)
    return float(r.uniform(0.9, 1.1)), float(r.uniform(-0.05, 0.05))


def limb_position(spec: IdentitySpec, t: float, height: int, width: int, phase_offset: float = 0.0) -> tuple:
    """Centre (row, col) of the moving limb blob at frame ``t``."""
    theta = 2 * np.pi * spec.motion_freq * t / FRAMES_PER_TRACKLET + spec.motion_phase + phase_offset
    cy, cx = 0.45 * height, 0.5 * width
    return cy + 0.2 * height * np.cos(theta), cx + 0.3 * width * np.sin(theta)


def render_clean(
    spec: IdentitySpec,
    t: float,
    modality: ModalClass,
    camera: int,
    style: TrackletStyle = TrackletStyle(),
    shape: tuple = (32, 16),
) -> np.ndarray:
    """Noise-free frame 3×H×W."""
    h, w = shape
    app = spec.appearance
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx = xx - style.dx
    cx = 0.5 * w
    img = np.full((3, h, w), 0.12)

    half_w = (0.18 + 0.14 * app[6]) * w
    torso_top, torso_bot = 0.22 * h, (0.55 + 0.1 * app[7]) * h
    torso = (np.abs(xx - cx) <= half_w) & (yy >= torso_top) & (yy < torso_bot)
    stripes = 0.5 + 0.5 * np.cos(2 * np.pi * (1.0 + 3.0 * app[8]) * (yy - torso_top) / h * 2 + 6.0 * app[9])
    torso_color = app[0:3][:, None, None] * (0.55 + 0.45 * stripes[None])
    img = np.where(torso[None], torso_color, img)

    leg_gap = 0.06 * w
    legs = (yy >= torso_bot) & (yy < 0.95 * h) & (np.abs(xx - cx) >= leg_gap) & (np.abs(xx - cx) <= half_w * 0.8)
    img = np.where(legs[None], app[3:6][:, None, None] * 0.9 + 0.05, img)

    head = (yy - 0.12 * h) ** 2 / (0.08 * h) ** 2 + (xx - cx) ** 2 / (0.16 * w) ** 2 <= 1.0
    img = np.where(head[None], 0.75, img)

    ly, lx = limb_position(spec, t, h, w, style.phase_offset)
    blob = np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * 1.4**2))
    img = img * (1 - blob[None]) + 0.95 * blob[None]

    occ = style.occluder_at(int(t))
    if occ is not None:
        img[:, occ.top : occ.top + occ.height, occ.left : occ.left + occ.width] = np.asarray(occ.color)[:, None, None]

    if modality == ModalClass.IR:
        img = np.repeat(np.tensordot(_LUMA, img, axes=1)[None], 3, axis=0)
    elif modality != ModalClass.RGB:
        raise ValueError("frames are rendered as RGB or IR only")
    a, b = _camera_affine(camera)
    return np.clip(style.gain * a * img + b, 0.0, 1.0)


def render_frame(
    spec: IdentitySpec,
    t: int,
    modality: ModalClass,
    camera: int,
    noise_rng,
    style: TrackletStyle = TrackletStyle(),
    shape: tuple = (32, 16),
) -> np.ndarray:
    """Frame ``t`` (3×H×W, values in [0, 1]) with additive Gaussian noise from ``noise_rng``.

    ``noise_rng`` is a Generator or an integer seed.
    """
    if not 0 <= t < FRAMES_PER_TRACKLET:
        raise ValueError(f"frame index {t} outside [0, {FRAMES_PER_TRACKLET})")
    rng = noise_rng if isinstance(noise_rng, np.random.Generator) else np.random.default_rng(noise_rng)
    img = render_clean(spec, t, modality, camera, style, shape)
    return np.clip(img + rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0, 1.0)


def draw_occluders(rng: np.random.Generator, count: int, shape: tuple, prob: float = OCCLUSION_PROB) -> tuple:
    """Independent per-frame occluders covering 40-70% of the height and 60-100% of the width."""
    h, w = shape
    out = []
    for _ in range(count):
        if rng.uniform() >= prob:
            out.append(None)
            continue
        oh, ow = int(h * rng.uniform(0.4, 0.7)), int(w * rng.uniform(0.6, 1.0))
        top, left = int(rng.integers(0, h - oh + 1)), int(rng.integers(0, w - ow + 1))
        out.append(Occluder(top, left, oh, ow, tuple(float(c) for c in rng.uniform(0.0, 1.0, 3))))
    return tuple(out)


def tracklet_seed(corpus_seed: int, tracklet_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(corpus_seed), int(tracklet_id)])


def render_tracklet(
    spec: IdentitySpec,
    modality: ModalClass,
    camera: int,
    tracklet_id: int,
    corpus_seed: int,
    shape=(32, 16),
    occlusion_prob: float = OCCLUSION_PROB,
) -> Tracklet:
    ss = tracklet_seed(corpus_seed, tracklet_id)
    style_ss, noise_ss = ss.spawn(2)
    style_rng = np.random.default_rng(style_ss)
    style = TrackletStyle(
        phase_offset=float(style_rng.uniform(0, 2 * np.pi)),
        dx=int(style_rng.integers(-1, 2)),
        gain=float(style_rng.uniform(0.9, 1.1)),
        occluders=draw_occluders(style_rng, FRAMES_PER_TRACKLET, shape, occlusion_prob),
    )
    noise = np.random.default_rng(noise_ss)
    frames = np.stack([render_frame(spec, t, modality, camera, noise, style, shape) for t in range(FRAMES_PER_TRACKLET)])
    return Tracklet(frames, spec.id, ModalClass(modality), camera, tracklet_id)


# -- VCT1 file format ------------------------------------------------------------

_VCT_HEAD = struct.Struct("<4sIIBBBHH")


def tracklet_bytes(tr: Tracklet) -> bytes:
    n, c, h, w = tr.frames.shape
    if c != 3:
        raise ValueError("tracklet frames must have 3 channels")
    head = _VCT_HEAD.pack(VCT_MAGIC, tr.tracklet_id, tr.identity, int(tr.modality), tr.camera, n, h, w)
    return head + np.ascontiguousarray(tr.frames, dtype="<f4").tobytes()


def parse_tracklet(buf: bytes) -> Tracklet:
    if len(buf) < _VCT_HEAD.size:
        raise ValueError("truncated tracklet header")
    magic, tid, ident, mod, cam, n, h, w = _VCT_HEAD.unpack_from(buf)
    if magic != VCT_MAGIC:
        raise ValueError("not a VCT1 tracklet file")
    count = n * 3 * h * w
    if len(buf) != _VCT_HEAD.size + 4 * count:
        raise ValueError("tracklet payload size does not match header")
    frames = np.frombuffer(buf, dtype="<f4", offset=_VCT_HEAD.size).reshape(n, 3, h, w)
    return Tracklet(frames.astype(np.float32), ident, ModalClass(mod), cam, tid)


def write_tracklet(path, tr: Tracklet) -> None:
    Path(path).write_bytes(tracklet_bytes(tr))


def read_tracklet(path) -> Tracklet:
    return parse_tracklet(Path(path).read_bytes())


# -- corpus ------------------------------------------------------------------------


def split_identities(specs: list, rng: np.random.Generator) -> dict:
    """Identity -> 'train' / 'test' at the 500:427 ratio, never separating a confusable pair."""
    n_train = int(round(len(specs) * TRAIN_RATIO))
    units, seen = [], set()
    for s in specs:
        if s.id in seen:
            continue
        unit = [s.id] if s.confusable_partner is None else [s.id, s.confusable_partner]
        seen.update(unit)
        units.append(unit)
    split = {}
    taken = 0
    for k in rng.permutation(len(units)):
        unit = units[k]
        dest = "train" if taken + len(unit) <= n_train else "test"
        if dest == "train":
            taken += len(unit)
        for i in unit:
            split[i] = dest
    return split


def assign_cameras(rng: np.random.Generator, count: int, pool: tuple) -> list:
    k = int(rng.integers(2, 4))
    cams = rng.choice(pool, size=min(k, len(pool)), replace=False)
    return [int(cams[i % len(cams)]) for i in range(count)]


def generate_corpus(
    out_dir,
    num_ids: int = 20,
    tracklets_per_id_per_modality: int = 4,
    confusable_fraction: float = 0.6,
    seed: int = 0,
    shape: tuple = (32, 16),
    appearance_eps: float = 0.02,
    freq_gap: float = 0.8,
    occlusion_prob: float = OCCLUSION_PROB,
) -> Manifest:
    """Render the corpus into ``out_dir`` (tracklets/*.vct + manifest.csv)."""
    if num_ids < 4:
        raise ValueError("need at least 4 identities")
    if not 0.0 <= occlusion_prob <= 1.0:
        raise ValueError("occlusion probability must lie in [0, 1]")
    if tracklets_per_id_per_modality < 1:
        raise ValueError("need at least one tracklet per identity and modality")
    out = Path(out_dir)
    try:
        (out / "tracklets").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    specs = make_identities(num_ids, confusable_fraction, rng, appearance_eps, freq_gap)
    split = split_identities(specs, rng)
    records = []
    tid = 0
    for spec in specs:
        for modality, pool in ((ModalClass.RGB, RGB_CAMERAS), (ModalClass.IR, IR_CAMERAS)):
            for cam in assign_cameras(rng, tracklets_per_id_per_modality, pool):
                tr = render_tracklet(spec, modality, cam, tid, seed, shape, occlusion_prob)
                rel = f"tracklets/{tid:06d}.vct"
                write_tracklet(out / rel, tr)
                records.append(TrackletRecord(tid, spec.id, int(modality), cam, FRAMES_PER_TRACKLET, rel, split[spec.id]))
                tid += 1
    man = Manifest(records, out)
    (out / "manifest.csv").write_text(man.to_csv(), encoding="utf-8")
    _write_identities(out / "identities.csv", specs)
    log.info("wrote %d tracklets for %d identities to %s", len(records), num_ids, out)
    return man


def _write_identities(path: Path, specs: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["identity", "motion_freq", "motion_phase", "confusable_partner"] + [f"a{i}" for i in range(APPEARANCE_DIM)])
    for s in specs:
        partner = "" if s.confusable_partner is None else s.confusable_partner
        w.writerow([s.id, repr(s.motion_freq), repr(s.motion_phase), partner] + [repr(float(v)) for v in s.appearance])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_identities(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [
        IdentitySpec(int(r[0]), np.array([float(v) for v in r[4:]]), float(r[1]), float(r[2]), int(r[3]) if r[3] else None)
        for r in rows
    ]


class TrackletStore:
    """Loads a manifest's tracklets into memory as float64 arrays."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._frames: dict = {}
        for rec in manifest.records:
            if rec.frames < MIN_TRACKLET_FRAMES:
                log.warning("skipping short tracklet %d (%d frames)", rec.tracklet_id, rec.frames)
                continue
            tr = read_tracklet(manifest.path_of(rec))
            if tr.tracklet_id != rec.tracklet_id or tr.identity != rec.identity:
                raise ValueError(f"tracklet file {rec.path} disagrees with manifest")
            self._frames[rec.tracklet_id] = tr.frames.astype(np.float64)

    def frames(self, tracklet_id: int) -> np.ndarray:
        return self._frames[tracklet_id]

    def records(self, split: Optional[str] = None, modality: Optional[int] = None) -> list:
        return [r for r in self.manifest.select(split, modality) if r.tracklet_id in self._frames]


# -- augmentation --------------------------------------------------------------------


def augment(
    frames: np.ndarray,
    rng: Optional[np.random.Generator],
    enable: bool = True,
    pad: int = 4,
    flip: Optional[bool] = None,
    offset: Optional[tuple] = None,
) -> np.ndarray:
    """Horizontal flip (p=0.5) and zero-pad-then-crop, shared by every frame of the tracklet.

    ``flip`` / ``offset`` override the random draws.
    """
    if not enable:
        return frames
    n, c, h, w = frames.shape
    if flip is None:
        flip = bool(rng.uniform() < 0.5)
    if offset is None:
        offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    out = frames[..., ::-1] if flip else frames
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=frames.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = out
    oy, ox = offset
    return np.ascontiguousarray(padded[:, :, oy : oy + h, ox : ox + w])
