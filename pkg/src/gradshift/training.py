"""Optimizers and training loops.

Phases: the primary forecaster (which supplies the pre-trained encoder),
the frozen-encoder history decoder, and the AE/MAE reconstruction baselines.
All loops are deterministic under a fixed seed, log one CSV row per epoch,
and keep the best-validation parameters.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .models import (
    Autoencoder, Encoder, EncoderConfig, MaskedAutoencoder, MdnConfig,
    MdnDecoder, ReconConfig, mdn_nll, normalize_history, params_hash,
)
from .trajectory import SplitSpec, Trajectory, resample_linear, split_history

TRAIN_PHASES = ("primary", "past", "ae", "mae")


class EncoderMutated(RuntimeError):
    """The frozen encoder's parameters changed during decoder training."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    patience: int = 5
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


class Adam:
    """Standard Adam with bias-corrected moments, updating params in place."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name!r} shape {p.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, wall_ms):
        self.rows.append({"epoch": epoch, "train_nll": train_loss,
                          "val_nll": val_loss, "wall_ms": wall_ms})

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "train_nll", "val_nll", "wall_ms"])
            writer.writeheader()
            writer.writerows(self.rows)


# ----------------------------------------------------------------------
# dataset assembly
# ----------------------------------------------------------------------

def forecast_arrays(corpus: list[Trajectory], split: SplitSpec):
    """Full (past, future) pairs for the primary forecaster.

    Targets are translated into the same frame as the encoder input (origin
    at the last observed past point).
    """
    need = split.n_past + split.horizon
    past, future, ctx = [], [], []
    for t in corpus:
        if len(t) < need:
            raise ValueError(
                f"trajectory {t.sample_id} has {len(t)} points, primary "
                f"training needs {need}")
        p = t.points[:split.n_past]
        past.append(p)
        future.append(t.points[split.n_past:need] - p[-1])
        if t.context is not None:
            ctx.append(t.context[:split.n_past])
    context = np.stack(ctx) if ctx else None
    if context is not None and len(context) != len(past):
        raise ValueError("corpus mixes trajectories with and without context")
    return np.stack(past), np.stack(future), context


def history_halves(corpus: list[Trajectory], split: SplitSpec):
    """(resampled first half, resampled+shifted second half) pairs."""
    firsts, seconds, ctx = [], [], []
    for t in corpus:
        window = t.head(split.n_past)
        a, b = split_history(window, split)
        ar = resample_linear(a, split.n_past)
        br = resample_linear(b, split.horizon)
        firsts.append(ar.points)
        seconds.append(br.points - ar.points[-1])
        if ar.context is not None:
            ctx.append(ar.context)
    context = np.stack(ctx) if ctx else None
    if context is not None and len(context) != len(firsts):
        raise ValueError("corpus mixes trajectories with and without context")
    return np.stack(firsts), np.stack(seconds), context


def history_windows(corpus: list[Trajectory], split: SplitSpec):
    """First n_past points (and context) per trajectory, for AE/MAE."""
    pts, ctx = [], []
    for t in corpus:
        window = t.head(split.n_past)
        pts.append(window.points)
        if window.context is not None:
            ctx.append(window.context)
    context = np.stack(ctx) if ctx else None
    return np.stack(pts), context


def _train_val_indices(n, cfg: TrainConfig):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xDA7A)))
    order = rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    if n > 1 and cfg.val_fraction > 0:
        n_val = max(1, n_val)
    return order[n_val:], order[:n_val]


def _check_finite(loss_value, epoch, batch):
    if not np.isfinite(loss_value):
        raise RuntimeError(
            f"non-finite training loss {loss_value!r} at epoch {epoch}, "
            f"batch {batch}; check input scaling and learning rate")


def _run_epochs(cfg: TrainConfig, n_train_samples, batch_loss, val_loss,
                params):
    """Shared epoch loop: batching, Adam, early stopping, best restore.

    batch_loss(idx) -> (scalar loss value, grads dict); val_loss() -> float.
    """
    adam = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xBA7C)))
    log = TrainLog()
    best_val = np.inf
    best_params = None
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n_train_samples)
        total, seen = 0.0, 0
        for start in range(0, n_train_samples, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss_value, grads = batch_loss(idx)
            _check_finite(loss_value, epoch, start // cfg.batch_size)
            adam.step(grads)
            total += loss_value * len(idx)
            seen += len(idx)
        train_loss = total / max(seen, 1)
        v = val_loss()
        log.append(epoch, train_loss, v, (time.perf_counter() - t0) * 1e3)
        if v < best_val - 1e-12:
            best_val = v
            best_params = {k: p.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if best_params is not None:
        for k in params:
            params[k][...] = best_params[k]
    return log


# ----------------------------------------------------------------------
# phase drivers
# ----------------------------------------------------------------------

def train_forecaster(corpus, split: SplitSpec, enc_cfg: EncoderConfig,
                     dec_cfg: MdnConfig, cfg: TrainConfig):
    """Train encoder + primary decoder on full (past -> future) pairs."""
    past, future, context = forecast_arrays(corpus, split)
    encoder = Encoder.init(enc_cfg, cfg.seed)
    decoder = MdnDecoder.init(dec_cfg, cfg.seed + 1)
    train_idx, val_idx = _train_val_indices(len(past), cfg)
    params = {f"enc.{k}": v for k, v in encoder.params.items()}
    params.update({f"dec.{k}": v for k, v in decoder.params.items()})

    def forward(tape, idx, trainable):
        ctx = None if context is None else context[idx]
        z, enc_nodes = encoder.encode(tape, past[idx], ctx, trainable)
        out = decoder.decode(tape, z, trainable)
        nll = mdn_nll(tape, out, future[idx])
        loss = tape.mean(nll)
        nodes = {f"enc.{k}": n for k, n in enc_nodes.items()}
        nodes.update({f"dec.{k}": n for k, n in out.params.items()})
        return loss, nodes

    def batch_loss(idx):
        tape = Tape()
        loss, nodes = forward(tape, idx, True)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[n.id] for k, n in nodes.items()}

    def val_loss():
        idx = val_idx if len(val_idx) else train_idx
        tape = Tape()
        loss, _ = forward(tape, idx, False)
        return float(loss.value)

    log = _run_epochs(cfg, len(train_idx), batch_loss, val_loss, params)
    encoder.frozen = True
    return encoder, decoder, log


def train_history_decoder(encoder: Encoder, corpus, split: SplitSpec,
                          dec_cfg: MdnConfig, cfg: TrainConfig):
    """Train the forecast-the-past decoder on top of the frozen encoder.

    The encoder's parameters are never part of the optimized set; a hash
    check enforces bitwise invariance.
    """
    enc_hash = params_hash(encoder.params)
    firsts, seconds, context = history_halves(corpus, split)
    decoder = MdnDecoder.init(dec_cfg, cfg.seed + 2)
    train_idx, val_idx = _train_val_indices(len(firsts), cfg)
    params = dict(decoder.params)

    def forward(tape, idx, trainable):
        ctx = None if context is None else context[idx]
        z, _ = encoder.encode(tape, firsts[idx], ctx, trainable=False)
        out = decoder.decode(tape, z, trainable)
        loss = tape.mean(mdn_nll(tape, out, seconds[idx]))
        return loss, out.params

    def batch_loss(idx):
        tape = Tape()
        loss, nodes = forward(tape, idx, True)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[n.id] for k, n in nodes.items()}

    def val_loss():
        idx = val_idx if len(val_idx) else train_idx
        tape = Tape()
        loss, _ = forward(tape, idx, False)
        return float(loss.value)

    log = _run_epochs(cfg, len(train_idx), batch_loss, val_loss, params)
    if params_hash(encoder.params) != enc_hash:
        raise EncoderMutated(
            "encoder parameters changed during history-decoder training")
    return decoder, log


def train_autoencoder(corpus, split: SplitSpec, recon_cfg: ReconConfig,
                      cfg: TrainConfig):
    pts, context = history_windows(corpus, split)
    model = Autoencoder.init(recon_cfg, cfg.seed + 3)
    train_idx, val_idx = _train_val_indices(len(pts), cfg)
    params = dict(model.all_params)

    def batch_loss(idx):
        tape = Tape()
        ctx = None if context is None else context[idx]
        err, nodes = model.loss(tape, pts[idx], ctx, trainable=True)
        loss = tape.mean(err)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[n.id] for k, n in nodes.items()}

    def val_loss():
        idx = val_idx if len(val_idx) else train_idx
        tape = Tape()
        ctx = None if context is None else context[idx]
        err, _ = model.loss(tape, pts[idx], ctx, trainable=False)
        return float(tape.mean(err).value)

    log = _run_epochs(cfg, len(train_idx), batch_loss, val_loss, params)
    return model, log


def train_masked_autoencoder(corpus, split: SplitSpec,
                             recon_cfg: ReconConfig, cfg: TrainConfig):
    pts, context = history_windows(corpus, split)
    model = MaskedAutoencoder.init(recon_cfg, cfg.seed + 4)
    train_idx, val_idx = _train_val_indices(len(pts), cfg)
    params = dict(model.all_params)
    mask_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x3A5C)))
    val_mask = np.stack([model.random_mask(np.random.default_rng(i))
                         for i in range(len(pts))])

    def batch_loss(idx):
        tape = Tape()
        masks = np.stack([model.random_mask(mask_rng) for _ in idx])
        ctx = None if context is None else context[idx]
        err, nodes = model.loss(tape, pts[idx], masks, ctx, trainable=True)
        loss = tape.mean(err)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[n.id] for k, n in nodes.items()}

    def val_loss():
        idx = val_idx if len(val_idx) else train_idx
        tape = Tape()
        ctx = None if context is None else context[idx]
        err, _ = model.loss(tape, pts[idx], val_mask[idx], ctx,
                            trainable=False)
        return float(tape.mean(err).value)

    log = _run_epochs(cfg, len(train_idx), batch_loss, val_loss, params)
    return model, log
