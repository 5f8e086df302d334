"""Deterministic training loop: complex Adam with coupled weight decay,
cosine-annealing warm restarts, global-norm gradient clipping, two-way
gradient accumulation, binary checkpoints with bit-exact resume, and
per-split evaluation in the Unprocessed/Enhanced column layout.

Everything downstream of (seed, config, data) is reproducible: dropout
draws come from per-(step, micro-batch) generators, the data shuffle is
keyed by (seed, epoch), and the optimizer works in the parameter dtype.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core as C
from .core import ComplexTensor
from .dsp import Waveform, istft_graph, stft
from .metrics import MetricReport, aggregate, evaluate_pair
from .model import _reflect_pad_cols
from .objectives import batch_total_loss

__all__ = ["AdamState", "SchedulerState", "TrainConfig", "EvalReport",
           "NanLossError", "CheckpointError", "adam_step", "lr_at",
           "clip_global_norm", "global_grad_norm", "training_loss", "train",
           "evaluate_split", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"CTFTNET1"
_FORMAT_VERSION = 1


class NanLossError(RuntimeError):
    """Raised when the loss or a gradient goes non-finite; carries a
    reference to the last checkpoint known to be good."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)    # name -> (real, imag) moments
    v: dict = field(default_factory=dict)


def _moment_like(param: ComplexTensor):
    return (np.zeros_like(param.real), np.zeros_like(param.imag))


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update, applied independently to real and imaginary parts,
    with classic coupled L2 decay (decay term added to the gradient)."""
    missing = [n for n in params if n not in grads]
    if missing:
        raise ValueError(f"missing gradient for {missing[0]!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        if name not in state.m:
            state.m[name] = _moment_like(param)
            state.v[name] = _moment_like(param)
        for g, p, m, v in zip(grads[name], (param.real, param.imag),
                              state.m[name], state.v[name]):
            if not np.all(np.isfinite(g)):
                raise NanLossError(f"non-finite gradient in {name!r}")
            g = g + state.weight_decay * p
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * np.square(g)
            p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SchedulerState:
    base_lr: float = 1e-4
    t0: int = 10
    t_mult: int = 1
    eta_min: float = 0.0

    def __post_init__(self):
        if self.t0 < 1:
            raise ValueError("t0 must be >= 1")
        if self.t_mult != 1:
            raise ValueError("only t_mult = 1 cycles are supported")


def lr_at(scheduler: SchedulerState, epoch: float) -> float:
    """Cosine annealing with warm restarts every t0 epochs (t_mult = 1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t_cur = math.fmod(epoch, scheduler.t0)
    span = scheduler.base_lr - scheduler.eta_min
    return scheduler.eta_min + span * (1.0 + math.cos(
        math.pi * t_cur / scheduler.t0)) / 2.0


# ---------------------------------------------------------------------------
# gradient clipping
# ---------------------------------------------------------------------------

def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for pair in grads.values():
        for g in pair:
            total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads: dict, max_norm: float = 10.0) -> dict:
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: (gr * scale, gi * scale) for name, (gr, gi) in grads.items()}


# ---------------------------------------------------------------------------
# differentiable training objective
# ---------------------------------------------------------------------------

def training_loss(net, hr: np.ndarray, lr_up: np.ndarray, *, rng,
                  update_stats: bool = True):
    """Loss report for one micro-batch of [b, n] waveforms at the model rate.

    Analysis of the degraded input is constant (no gradient flows into the
    STFT of the input); the network output is resynthesized through the
    differentiable inverse STFT so the objective sees time-domain signals.
    """
    cfg = net.cfg
    dtype = cfg.np_dtype
    b, n = lr_up.shape
    specs = [stft(Waveform(np.asarray(lr_up[i], dtype=dtype),
                           cfg.sample_rate), cfg.stft) for i in range(b)]
    frames = specs[0].data.shape[-1]
    re = np.stack([s.data.real for s in specs])[:, None, :-1, :]
    im = np.stack([s.data.imag for s in specs])[:, None, :-1, :]
    pad = (-frames) % cfg.block_width
    if pad:
        re, im = _reflect_pad_cols(re, pad), _reflect_pad_cols(im, pad)
    out = net.forward(ComplexTensor(re, im), training=True,
                      update_stats=update_stats, rng=rng)
    out = out[:, :, :, :frames]
    nyquist = ComplexTensor(np.zeros((b, 1, 1, frames), dtype=dtype))
    full = C.concat([out, nyquist], axis=2)
    est = C.reshape(istft_graph(full, cfg.stft, n), (b, n))
    return batch_total_loss(hr.astype(dtype, copy=False), est, cfg.loss)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_entry(out, name: str, real: np.ndarray, imag: np.ndarray):
    raw = name.encode("utf-8")
    real = np.ascontiguousarray(real, dtype="<f4")
    imag = np.ascontiguousarray(imag, dtype="<f4")
    if real.shape != imag.shape:
        raise CheckpointError(f"part shapes differ for {name!r}")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)
    out.append(struct.pack("<I", real.ndim))
    out.append(struct.pack(f"<{real.ndim}I", *real.shape))
    out.append(real.tobytes())
    out.append(imag.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def entry(self):
        name = self.take(self.u32()).decode("utf-8")
        shape = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        real = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        imag = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, real, imag


def _model_tensors(net) -> dict:
    tensors = dict(net.named_parameters())
    for name, buf in net.named_buffers():
        tensors[name] = buf
    return tensors


def save_checkpoint(path, net, state: AdamState | None = None,
                    extra: dict | None = None) -> Path:
    """Little-endian container: magic, format version, config digest,
    model-tensor table, optional optimizer table (moments plus scalars)."""
    chunks = [_MAGIC, struct.pack("<I", _FORMAT_VERSION), net.cfg.digest()]
    tensors = _model_tensors(net)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        _write_entry(chunks, name, tensor.real, tensor.imag)

    opt: list[tuple[str, np.ndarray, np.ndarray]] = []
    if state is not None:
        # Hyperparameters (lr, betas, decay, eps) are configuration, not
        # state: storing them in f32 payloads would poison bit-exact resume.
        opt.append(("scalar:t", np.asarray(state.t), np.zeros(())))
        for name in tensors:
            if name in state.m:
                opt.append((f"m:{name}", *state.m[name]))
                opt.append((f"v:{name}", *state.v[name]))
    for key, value in (extra or {}).items():
        opt.append((f"extra:{key}", np.asarray(float(value)), np.zeros(())))
    chunks.append(struct.pack("<I", len(opt)))
    for name, real, imag in opt:
        _write_entry(chunks, name, real, imag)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path, net, state: AdamState | None = None) -> dict:
    """Restore model tensors (and optimizer state if asked for) in place;
    returns the extra scalars stored alongside ({'epoch': ..., ...})."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(8) != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = reader.u32()
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = reader.take(32)
    if digest != net.cfg.digest():
        raise CheckpointError(
            f"{path}: checkpoint was written for a different configuration "
            "(config digest mismatch)")

    tensors = _model_tensors(net)
    seen = set()
    for _ in range(reader.u32()):
        name, real, imag = reader.entry()
        if name not in tensors:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        target = tensors[name]
        if target.shape != real.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"{real.shape} vs {target.shape}")
        target.real[...] = real.astype(target.real.dtype)
        target.imag[...] = imag.astype(target.imag.dtype)
        seen.add(name)
    if seen != set(tensors):
        missing = sorted(set(tensors) - seen)
        raise CheckpointError(f"{path}: missing tensor {missing[0]!r}")

    extras: dict = {}
    moments: dict = {"m": {}, "v": {}}
    scalars: dict = {}
    for _ in range(reader.u32()):
        name, real, imag = reader.entry()
        kind, _, rest = name.partition(":")
        if kind == "scalar":
            scalars[rest] = float(np.ravel(real)[0])
        elif kind == "extra":
            extras[rest] = float(np.ravel(real)[0])
        elif kind in ("m", "v"):
            moments[kind][rest] = (real.astype(tensors[rest].real.dtype),
                                   imag.astype(tensors[rest].imag.dtype))
        else:
            raise CheckpointError(f"{path}: unknown optimizer entry {name!r}")
    if state is not None:
        if "t" not in scalars:
            raise CheckpointError(f"{path}: checkpoint has no optimizer state")
        state.t = int(scalars["t"])
        state.m = {k: (v[0].copy(), v[1].copy())
                   for k, v in moments["m"].items()}
        state.v = {k: (v[0].copy(), v[1].copy())
                   for k, v in moments["v"].items()}
    return extras


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    unprocessed: MetricReport
    enhanced: MetricReport


def evaluate_split(net, pairs, *, with_stoi: bool = True,
                   low_band_copy_hz: float | None = None) -> EvalReport:
    """Enhance every pair and score both columns against the reference."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty split: nothing to evaluate")
    unprocessed, enhanced = [], []
    for i, pair in enumerate(pairs):
        clip_id = pair.clip_id or f"clip{i:04d}"
        estimate = net.enhance(pair.lr_upsampled,
                               low_band_copy_hz=low_band_copy_hz)
        unprocessed.append(evaluate_pair(clip_id, pair.hr, pair.lr_upsampled,
                                         with_stoi=with_stoi))
        enhanced.append(evaluate_pair(clip_id, pair.hr, estimate,
                                      with_stoi=with_stoi))
    return EvalReport(unprocessed=aggregate(unprocessed),
                      enhanced=aggregate(enhanced))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    base_lr: float = 1e-4
    clip_norm: float = 10.0
    accumulation: int = 2
    seed: int = 0
    checkpoint_every: int = 1
    weight_decay: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    t0: int = 10
    t_mult: int = 1
    eta_min: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


def _micro_batches(batch, accumulation):
    bounds = np.array_split(np.arange(len(batch)), accumulation)
    return [[batch[i] for i in idx] for idx in bounds if idx.size]


def train(net, data, cfg: TrainConfig, *, val_pairs=None, log_path=None,
          checkpoint_dir=None, resume=None, max_steps=None) -> list:
    """Run the optimization loop; returns the per-step log entries.

    `data` is a callable epoch -> iterable of batches (lists of examples
    with .hr and .lr_upsampled waveforms).  Checkpoints are written per
    `checkpoint_every` epochs, plus `best.ckpt` whenever validation LSD
    improves and `last.ckpt` at the end.
    """
    params = dict(net.named_parameters())
    scheduler = SchedulerState(base_lr=cfg.base_lr, t0=cfg.t0,
                               t_mult=cfg.t_mult, eta_min=cfg.eta_min)
    state = AdamState(lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      weight_decay=cfg.weight_decay)
    start_epoch, step = 0, 0
    best_lsd = math.inf
    last_good = None
    if resume is not None:
        extras = load_checkpoint(resume, net, state)
        start_epoch = int(extras.get("epoch", -1)) + 1
        step = int(extras.get("step", 0))
        best_lsd = float(extras.get("best_lsd", math.inf))
        last_good = Path(resume)

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if resume else "w", encoding="utf-8")

    def _snapshot(path, epoch):
        return save_checkpoint(path, net, state,
                               extra={"epoch": epoch, "step": step,
                                      "best_lsd": best_lsd})

    history = []
    completed_epoch = start_epoch - 1
    try:
        for epoch in range(start_epoch, cfg.epochs):
            state.lr = lr_at(scheduler, epoch)
            for batch in data(epoch):
                step += 1
                net.zero_grad()
                total = 0.0
                components: dict = {}
                for micro_idx, chunk in enumerate(
                        _micro_batches(batch, cfg.accumulation)):
                    hr = np.stack([p.hr.samples for p in chunk])
                    lr_up = np.stack([p.lr_upsampled.samples for p in chunk])
                    rng = np.random.default_rng((cfg.seed, step, micro_idx))
                    report = training_loss(net, hr, lr_up, rng=rng)
                    weight = len(chunk) / len(batch)
                    C.backward(C.scale(report.graph, weight))
                    total += weight * report.total
                    for key, value in report.components.items():
                        components[key] = components.get(key, 0.0) \
                            + weight * value
                if not math.isfinite(total):
                    raise NanLossError(
                        f"non-finite loss at step {step}; last good "
                        f"checkpoint: {last_good}", last_good)
                grads = {}
                for name, param in params.items():
                    grads[name] = (param.grad if param.grad is not None
                                   else _moment_like(param))
                grads = clip_global_norm(grads, cfg.clip_norm)
                try:
                    adam_step(params, grads, state)
                except NanLossError as err:
                    raise NanLossError(f"{err} at step {step}; last good "
                                       f"checkpoint: {last_good}",
                                       last_good) from err
                entry = {"step": step, "epoch": epoch, "lr": state.lr,
                         "loss": total}
                entry.update({f"loss_{k}": v for k, v in components.items()})
                history.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
                if max_steps is not None and step >= max_steps:
                    break
            else:
                completed_epoch = epoch
            if val_pairs is not None:
                # selection metric is LSD; STOI needs longer clips anyway
                report = evaluate_split(net, val_pairs, with_stoi=False)
                if checkpoint_dir and report.enhanced.lsd < best_lsd:
                    best_lsd = report.enhanced.lsd
                    _snapshot(checkpoint_dir / "best.ckpt", epoch)
                else:
                    best_lsd = min(best_lsd, report.enhanced.lsd)
            if (checkpoint_dir and completed_epoch == epoch
                    and (epoch + 1) % cfg.checkpoint_every == 0):
                last_good = _snapshot(
                    checkpoint_dir / f"epoch{epoch:04d}.ckpt", epoch)
            if max_steps is not None and step >= max_steps:
                break
        if checkpoint_dir:
            _snapshot(checkpoint_dir / "last.ckpt", completed_epoch)
    finally:
        if log_file is not None:
            log_file.close()
    return history
