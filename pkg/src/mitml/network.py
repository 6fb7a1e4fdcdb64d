"""Learnable blocks and the two-stream frame encoder.

Parameter names are dotted paths whose first component is the group:
``stem_rgb``, ``stem_ir``, ``trunk``, ``branch_f1``, ``branch_f2``, ``tmr``,
``w_id`` and ``w_m``. Optimizer state and run metadata share the checkpoint
format under the ``opt.`` and ``meta.`` prefixes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from mitml.autodiff import ShapeError, Tensor, ops, read_tensor, tensor_to_bytes
from mitml.autodiff.serialize import FormatError

CKPT_MAGIC = b"MCKP"
GROUPS = ("stem_rgb", "stem_ir", "trunk", "branch_f1", "branch_f2", "tmr", "w_id", "w_m")


class ModalClass(IntEnum):
    RGB = 0
    IR = 1
    NEITHER = 2


@dataclass
class BackboneConfig:
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 64])
    input_shape: tuple = (3, 32, 16)
    embed_dim: int = 64
    seq_len: int = 6
    se_reduction: int = 4

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.stage_channels) != 5 or min(self.stage_channels) <= 0:
            raise ValueError(f"need exactly 5 positive stage widths, got {self.stage_channels}")
        if self.stage_channels[-1] != self.embed_dim:
            raise ValueError(
                f"last stage width {self.stage_channels[-1]} must equal embed_dim {self.embed_dim}"
            )
        if self.input_shape[0] != 3:
            raise ValueError("frames must have 3 channels")
        if self.seq_len <= 0 or self.embed_dim <= 0:
            raise ValueError("seq_len and embed_dim must be positive")
        if self.embed_dim % self.se_reduction:
            raise ValueError(f"SE reduction {self.se_reduction} does not divide D={self.embed_dim}")


class ModelParams:
    """Ordered, named collection of learnable tensors."""

    def __init__(self, tensors: Optional[dict] = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, group: Optional[str] = None) -> list:
        if group is None:
            return list(self._tensors)
        return [n for n in self._tensors if n.split(".", 1)[0] == group]

    def has_group(self, group: str) -> bool:
        return bool(self.names(group))

    def sub(self, prefix: str) -> dict:
        """Tensors under ``prefix.`` keyed by the remaining path."""
        cut = len(prefix) + 1
        return {n[cut:]: t for n, t in self._tensors.items() if n.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, state: dict) -> None:
        for n, arr in state.items():
            if n not in self._tensors:
                raise KeyError(f"unknown parameter {n!r}")
            if arr.shape != self._tensors[n].shape:
                raise ShapeError(f"{n}: checkpoint shape {arr.shape} vs model {self._tensors[n].shape}")
            self._tensors[n].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy()) for n, t in self._tensors.items()})

    def num_ids(self) -> int:
        return self["w_id.w"].shape[0]


# -- initialisation -------------------------------------------------------------


def _conv_init(rng, out_ch, in_ch, k=3):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, (out_ch, in_ch, k, k)), np.zeros(out_ch)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, shape)


def init_backbone(params: ModelParams, cfg: BackboneConfig, rng, dual_branch: bool = True) -> None:
    ch = [cfg.input_shape[0]] + cfg.stage_channels
    for stem in ("stem_rgb", "stem_ir"):
        w, b = _conv_init(rng, ch[1], ch[0])
        params.add(f"{stem}.w", w)
        params.add(f"{stem}.b", b)
    for i in range(3):
        w, b = _conv_init(rng, ch[i + 2], ch[i + 1])
        params.add(f"trunk.{i}.w", w)
        params.add(f"trunk.{i}.b", b)
    for branch in ("branch_f1", "branch_f2") if dual_branch else ("branch_f2",):
        w, b = _conv_init(rng, ch[5], ch[4])
        params.add(f"{branch}.w", w)
        params.add(f"{branch}.b", b)


def init_tmr(params: ModelParams, cfg: BackboneConfig, rng) -> None:
    d, r = cfg.embed_dim, cfg.se_reduction
    bound = 1.0 / np.sqrt(d)
    for layer in range(2):
        params.add(f"tmr.lstm.{layer}.w_ih", _uniform(rng, bound, (4 * d, d)))
        params.add(f"tmr.lstm.{layer}.w_hh", _uniform(rng, bound, (4 * d, d)))
        params.add(f"tmr.lstm.{layer}.b", _uniform(rng, bound, 4 * d))
    for t in range(cfg.seq_len):
        params.add(f"tmr.fc.{t}.w", _uniform(rng, bound, (d, d)))
        params.add(f"tmr.fc.{t}.b", _uniform(rng, bound, d))
        params.add(f"tmr.se.{t}.w1", _uniform(rng, bound, (d // r, d)))
        params.add(f"tmr.se.{t}.b1", np.zeros(d // r))
        params.add(f"tmr.se.{t}.w2", _uniform(rng, 1.0 / np.sqrt(d // r), (d, d // r)))
        params.add(f"tmr.se.{t}.b2", np.zeros(d))


def init_head(params: ModelParams, name: str, classes: int, dim: int, rng) -> None:
    params.add(f"{name}.w", rng.normal(0.0, 0.001, (classes, dim)))
    params.add(f"{name}.b", np.zeros(classes))


def build_model(
    cfg: BackboneConfig,
    num_ids: int,
    seed: int = 0,
    use_tmr: bool = True,
    wm_classes: Optional[int] = 3,
) -> ModelParams:
    """Fresh parameters. ``wm_classes=None`` omits the modality classifier."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    init_backbone(params, cfg, rng, dual_branch=use_tmr)
    if use_tmr:
        init_tmr(params, cfg, rng)
    init_head(params, "w_id", num_ids, cfg.embed_dim, rng)
    if wm_classes is not None:
        init_head(params, "w_m", wm_classes, cfg.embed_dim, rng)
    return params


def config_from_params(params: ModelParams) -> BackboneConfig:
    """Recover the architecture from parameter shapes (used when loading checkpoints)."""
    widths = [params["stem_rgb.w"].shape[0]] + [params[f"trunk.{i}.w"].shape[0] for i in range(3)]
    widths.append(params["branch_f2.w"].shape[0])
    seq_len = len([n for n in params.names("tmr") if n.startswith("tmr.fc.") and n.endswith(".w")])
    kwargs = {}
    if seq_len:
        kwargs["se_reduction"] = widths[-1] // params["tmr.se.0.w1"].shape[0]
    return BackboneConfig(stage_channels=widths, embed_dim=widths[-1], seq_len=seq_len or 6, **kwargs)


# -- blocks ----------------------------------------------------------------------


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor):
    """One step of a standard LSTM on a row batch; gate order i, f, g, o."""
    d = h.shape[1]
    gates = ops.add(ops.linear(x, w_ih, b), ops.linear(h, w_hh))
    i = ops.sigmoid(gates[:, 0:d])
    f = ops.sigmoid(gates[:, d : 2 * d])
    g = ops.tanh(gates[:, 2 * d : 3 * d])
    o = ops.sigmoid(gates[:, 3 * d : 4 * d])
    c_next = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_next = ops.mul(o, ops.tanh(c_next))
    return h_next, c_next


def lstm2_forward(seq: Tensor, lstm: dict) -> Tensor:
    """Two stacked LSTM layers with zero initial states.

    ``seq`` is T×D (one sequence) or B×T×D; the output has the same shape and
    holds every hidden state of the second layer. ``lstm`` maps
    ``"{layer}.w_ih"``, ``"{layer}.w_hh"``, ``"{layer}.b"`` to tensors.
    """
    single = seq.ndim == 2
    if seq.ndim not in (2, 3):
        raise ShapeError(f"lstm2_forward expects T×D or B×T×D, got {seq.shape}")
    x = ops.reshape(seq, (1,) + seq.shape) if single else seq
    bsz, steps, _ = x.shape
    if steps == 0:
        raise ShapeError("empty sequence")
    inputs = [x[:, t] for t in range(steps)]
    for layer in range(2):
        w_ih, w_hh, b = lstm[f"{layer}.w_ih"], lstm[f"{layer}.w_hh"], lstm[f"{layer}.b"]
        hidden = w_hh.shape[1]
        if w_ih.shape[1] != inputs[0].shape[1]:
            raise ShapeError(f"layer {layer}: input width {inputs[0].shape[1]} vs weights {w_ih.shape}")
        h = Tensor(np.zeros((bsz, hidden)))
        c = Tensor(np.zeros((bsz, hidden)))
        outputs = []
        for x_t in inputs:
            h, c = lstm_cell(x_t, h, c, w_ih, w_hh, b)
            outputs.append(h)
        inputs = outputs
    out = ops.stack(inputs, axis=1)
    return ops.reshape(out, out.shape[1:]) if single else out


def se_gate(u: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Bottleneck channel gate ``sigmoid(W2 relu(W1 u + b1) + b2)``, output in (0, 1)."""
    return ops.sigmoid(ops.linear(ops.relu(ops.linear(u, w1, b1)), w2, b2))


def classify(feature: Tensor, params: ModelParams, head: str) -> Tensor:
    """Logits of the ``w_id`` or ``w_m`` head for one feature (D,) or a batch (B×D)."""
    if head not in ("w_id", "w_m"):
        raise ValueError(f"unknown head {head!r}")
    w, b = params[f"{head}.w"], params[f"{head}.b"]
    if feature.shape[-1] != w.shape[1]:
        raise ShapeError(f"{head}: feature dim {feature.shape[-1]} vs head input {w.shape[1]}")
    return ops.linear(feature, w, b)


# pixels in [0, 1] are centred and scaled to roughly unit spread before the stems
PIXEL_MEAN = 0.5
PIXEL_SCALE = 4.0


def _conv(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ops.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=2, zero_pad=1)


def _stage(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ops.relu(_conv(x, params, prefix))


def _global_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.mean(ops.reshape(x, (n, c, h * w)), axis=2)


def stem(frames: Tensor, modality: ModalClass, params: ModelParams) -> Tensor:
    x = ops.scale(ops.add(frames, -PIXEL_MEAN), PIXEL_SCALE)
    if modality == ModalClass.RGB:
        return _stage(x, params, "stem_rgb")
    if modality == ModalClass.IR:
        return _stage(x, params, "stem_ir")
    raise ValueError(f"frames must be RGB or IR, got {ModalClass(modality).name}")


def shared_forward(x: Tensor, params: ModelParams, branches=("branch_f1", "branch_f2")) -> list:
    """Stages 2-4 once, then each requested stage-5 branch, pooled to N×D.

    The stage-5 branches are linear (no ReLU) so sequence features are signed.
    """
    for i in range(3):
        x = _stage(x, params, f"trunk.{i}")
    return [_global_pool(_conv(x, params, br)) for br in branches]


def check_frames(frames: Tensor, expected_channels: int = 3) -> None:
    if frames.ndim != 4 or frames.shape[1] != expected_channels:
        raise ShapeError(f"frames must be N×{expected_channels}×H×W, got {frames.shape}")


def backbone_forward(frames: Tensor, modality: ModalClass, params: ModelParams):
    """Frame-level feature pair (f1, f2), each N×D, for frames of one modality."""
    check_frames(frames, params["stem_rgb.w"].shape[1])
    f1, f2 = shared_forward(stem(frames, modality, params), params)
    return f1, f2


# -- checkpoints ------------------------------------------------------------------


def checkpoint_bytes(tensors: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(tensor_to_bytes(value))
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> dict:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos, out = 8, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = read_tensor(buf, pos)
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return out


def save_checkpoint(path, tensors: dict) -> None:
    """Write ``{name: Tensor or array}``; any ModelParams can pass ``dict(params.items())``."""
    Path(path).write_bytes(checkpoint_bytes(tensors))


def load_checkpoint(path) -> dict:
    return parse_checkpoint(Path(path).read_bytes())


def params_from_checkpoint(entries: dict) -> ModelParams:
    return ModelParams({n: Tensor(a) for n, a in entries.items() if n.split(".", 1)[0] in GROUPS})
