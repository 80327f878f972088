"""Anomaly score variants.

The detector score is the L2 norm of the forecasting-loss gradient at the
decoder's last-layer input. Ablation variants read the gradient at the
latent instead, over all decoder parameters, or use the raw loss value;
reconstruction models score by (masked) reconstruction error. Scoring is
strictly read-only on every model and uses one tape per sample.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .models import (
    LAST_LAYER_MARK, LATENT_MARK, Autoencoder, MaskedAutoencoder, MdnDecoder,
    Encoder, mdn_nll,
)
from .trajectory import (
    ShiftLabel, SplitSpec, Trajectory, resample_linear, split_history,
)

GRADIENT_VARIANTS = ("grad_last", "grad_latent", "grad_all", "loss")
RECON_VARIANTS = ("recon_ae", "recon_mae")
BASELINE_VARIANTS = ("kde", "iforest")
ALL_VARIANTS = GRADIENT_VARIANTS + RECON_VARIANTS + BASELINE_VARIANTS

MAE_SCORE_MASKS = 8


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    variant: str
    score: float
    label: ShiftLabel | None = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(
                f"non-finite score for sample {self.sample_id!r} "
                f"({self.variant})")
        if self.variant != "loss" and self.score < 0:
            raise ValueError(
                f"norm-based score must be >= 0, got {self.score} for "
                f"{self.sample_id!r}")


def forecast_loss_tape(encoder: Encoder, decoder: MdnDecoder, t: Trajectory,
                       split: SplitSpec):
    """Record the full per-sample pipeline: split, resample, encode, decode,
    mixture NLL. Returns (tape, loss node, mdn output)."""
    window = t.head(split.n_past)
    first, second = split_history(window, split)
    first_r = resample_linear(first, split.n_past)
    second_r = resample_linear(second, split.horizon)
    tape = Tape()
    z, _ = encoder.encode(tape, first_r.points, first_r.context)
    out = decoder.decode(tape, z)
    target = second_r.points - first_r.points[-1]
    loss = mdn_nll(tape, out, target)
    return tape, loss, out


def gradient_scores(encoder, decoder, t: Trajectory, split: SplitSpec,
                    variants=GRADIENT_VARIANTS) -> dict[str, float]:
    """All requested gradient/loss variants from one forward + backward."""
    tape, loss, out = forecast_loss_tape(encoder, decoder, t, split)
    scores = {}
    if "loss" in variants:
        scores["loss"] = float(loss.value)
    grad_variants = [v for v in variants if v != "loss"]
    if grad_variants:
        grads = tape.backward(loss)
        if "grad_last" in variants:
            scores["grad_last"] = float(
                np.linalg.norm(tape.grad_at_mark(loss, LAST_LAYER_MARK)))
        if "grad_latent" in variants:
            scores["grad_latent"] = float(
                np.linalg.norm(tape.grad_at_mark(loss, LATENT_MARK)))
        if "grad_all" in variants:
            total = 0.0
            for node in out.params.values():
                g = grads.get(node.id)
                if g is not None:
                    total += float(np.sum(g * g))
            scores["grad_all"] = float(np.sqrt(total))
    for name, value in scores.items():
        if not np.isfinite(value):
            raise ValueError(
                f"non-finite {name} score for sample {t.sample_id!r}")
    return scores


def score_grad_last(encoder, decoder, t, split) -> float:
    return gradient_scores(encoder, decoder, t, split, ("grad_last",))["grad_last"]


def score_grad_latent(encoder, decoder, t, split) -> float:
    return gradient_scores(encoder, decoder, t, split, ("grad_latent",))["grad_latent"]


def score_grad_all(encoder, decoder, t, split) -> float:
    return gradient_scores(encoder, decoder, t, split, ("grad_all",))["grad_all"]


def score_loss(encoder, decoder, t, split) -> float:
    return gradient_scores(encoder, decoder, t, split, ("loss",))["loss"]


def _sample_mask_seed(t: Trajectory, base_seed: int) -> int:
    # derived from the sample content so scores are independent of batch
    # order and identical for duplicate samples
    digest = hashlib.sha256(
        np.ascontiguousarray(t.points, dtype="<f8").tobytes()).digest()
    return (int.from_bytes(digest[:8], "little") ^ base_seed) & (2 ** 63 - 1)


def score_recon(model, t: Trajectory, split: SplitSpec, *,
                n_masks: int = MAE_SCORE_MASKS, base_seed: int = 0) -> float:
    """Reconstruction error: full-history MSE for the AE, masked-step MSE
    averaged over seeded random masks for the MAE."""
    window = t.head(split.n_past)
    ctx = window.context if model.encoder.config.ctx_channels else None
    if isinstance(model, Autoencoder):
        tape = Tape()
        err, _ = model.loss(tape, window.points, ctx)
        return float(err.value)
    if isinstance(model, MaskedAutoencoder):
        rng = np.random.default_rng(_sample_mask_seed(window, base_seed))
        total = 0.0
        for _ in range(n_masks):
            tape = Tape()
            err, _ = model.loss(tape, window.points, model.random_mask(rng),
                                ctx)
            total += float(err.value)
        return total / n_masks
    raise TypeError(f"cannot reconstruction-score {type(model)}")


# ----------------------------------------------------------------------
# corpus driver
# ----------------------------------------------------------------------

@dataclass
class ScoreRun:
    rows: list
    mean_gradient_ms: float


def score_corpus(corpus, split: SplitSpec, variants, *, encoder=None,
                 decoder=None, ae=None, mae=None,
                 mae_seed: int = 0) -> ScoreRun:
    """Score every trajectory with the requested variants.

    Gradient/loss variants share one tape per sample; per-call wall time of
    that tape (forward + backward) feeds the latency report.
    """
    unknown = set(variants) - set(GRADIENT_VARIANTS) - set(RECON_VARIANTS)
    if unknown:
        raise ValueError(f"unknown score variants: {sorted(unknown)}")
    grad_wanted = tuple(v for v in GRADIENT_VARIANTS if v in variants)
    if grad_wanted and (encoder is None or decoder is None):
        raise ValueError("gradient variants need encoder and decoder")
    if "recon_ae" in variants and ae is None:
        raise ValueError("recon_ae needs a trained autoencoder")
    if "recon_mae" in variants and mae is None:
        raise ValueError("recon_mae needs a trained masked autoencoder")
    rows = []
    grad_time = 0.0
    n_grad = 0
    for t in corpus:
        if grad_wanted:
            t0 = time.perf_counter()
            scores = gradient_scores(encoder, decoder, t, split, grad_wanted)
            grad_time += time.perf_counter() - t0
            n_grad += 1
            for name in grad_wanted:
                rows.append(ScoredSample(t.sample_id, name, scores[name],
                                         t.label))
        if "recon_ae" in variants:
            rows.append(ScoredSample(
                t.sample_id, "recon_ae",
                score_recon(ae, t, split, base_seed=mae_seed), t.label))
        if "recon_mae" in variants:
            rows.append(ScoredSample(
                t.sample_id, "recon_mae",
                score_recon(mae, t, split, base_seed=mae_seed), t.label))
    mean_ms = (grad_time / n_grad * 1e3) if n_grad else 0.0
    return ScoreRun(rows, mean_ms)


# ----------------------------------------------------------------------
# score CSV
# ----------------------------------------------------------------------

def _label_to_cell(label: ShiftLabel | None) -> str:
    if label is None:
        return ""
    if label.value is None:
        return label.kind
    return f"{label.kind}:{label.value!r}"


def _label_from_cell(cell: str) -> ShiftLabel | None:
    if not cell:
        return None
    if ":" in cell:
        kind, value = cell.split(":", 1)
        return ShiftLabel(kind, float(value))
    return ShiftLabel(cell)


def save_scores_csv(path, rows: list[ScoredSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "variant", "score", "label"])
        for r in rows:
            writer.writerow([r.sample_id, r.variant, repr(r.score),
                             _label_to_cell(r.label)])


def load_scores_csv(path) -> list[ScoredSample]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"sample_id", "variant", "score", "label"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"score CSV must have columns {sorted(required)}")
        for rec in reader:
            rows.append(ScoredSample(rec["sample_id"], rec["variant"],
                                     float(rec["score"]),
                                     _label_from_cell(rec["label"])))
    return rows
