"""AUROC, threshold calibration, online monitoring, distribution export.

AUROC uses the Mann-Whitney rank formulation (ties count one half), which is
exactly the probability that a random shifted sample outscores a random
in-distribution sample. The monitor scores a trailing history window per
step and raises an alarm on the first threshold crossing.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .scoring import gradient_scores
from .synthetic import Episode, window_trajectory
from .trajectory import SplitSpec


# ----------------------------------------------------------------------
# AUROC
# ----------------------------------------------------------------------

@dataclass
class RocResult:
    auroc: float
    curve: list          # (fpr, tpr) points from (0,0) to (1,1)
    n_pos: int
    n_neg: int

    def curve_area(self) -> float:
        terms = []
        for (x0, y0), (x1, y1) in zip(self.curve[:-1], self.curve[1:]):
            terms.append((x1 - x0) * (y0 + y1) / 2.0)
        return math.fsum(terms)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged; exact multiples of one half."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(values)]])
    ranks = np.empty(len(values))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0   # average of ranks s+1..e
    return ranks


def auroc(scores_pos, scores_neg) -> RocResult:
    """Probability a positive (shifted) score exceeds a negative one,
    counting ties one half. Positive = higher score = more anomalous."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs non-empty positive and negative sets")
    pooled = np.concatenate([pos, neg])
    ranks = _average_ranks(pooled)
    rank_sum_pos = math.fsum(ranks[: pos.size])
    u = rank_sum_pos - pos.size * (pos.size + 1) / 2.0
    value = u / (pos.size * neg.size)

    # ROC curve swept over descending unique thresholds (predict positive
    # when score >= threshold); ties produce diagonal segments
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-pooled, kind="mergesort")
    sorted_scores = pooled[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1.0 - sorted_labels)
    distinct = np.flatnonzero(np.diff(sorted_scores)) \
        if len(sorted_scores) > 1 else np.array([], dtype=int)
    idx = np.concatenate([distinct, [len(pooled) - 1]])
    curve = [(0.0, 0.0)]
    curve += [(fp[i] / neg.size, tp[i] / pos.size) for i in idx]
    return RocResult(float(value), curve, int(pos.size), int(neg.size))


def auroc_brute_force(scores_pos, scores_neg) -> float:
    """Pairwise oracle: wins + half-ties over all pairs."""
    total = 0.0
    for p in scores_pos:
        for n in scores_neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(scores_pos) * len(scores_neg))


def auroc_from_rows(rows) -> RocResult:
    """AUROC from ScoredSample rows; shifted labels are the positives."""
    pos = [r.score for r in rows if r.label is not None and r.label.is_shifted]
    neg = [r.score for r in rows
           if r.label is not None and not r.label.is_shifted]
    return auroc(pos, neg)


# ----------------------------------------------------------------------
# threshold calibration
# ----------------------------------------------------------------------

def calibrate_threshold(safe_scores, q: float = 0.95,
                        min_scores: int = 20) -> float:
    """Empirical q-quantile of calibration scores, linearly interpolated."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must be strictly between 0 and 1")
    scores = np.asarray(safe_scores, dtype=np.float64)
    if scores.size < min_scores:
        raise ValueError(
            f"threshold calibration needs >= {min_scores} scores, "
            f"got {scores.size}")
    return float(np.quantile(scores, q))


# ----------------------------------------------------------------------
# online monitor
# ----------------------------------------------------------------------

@dataclass
class MonitorConfig:
    quantile: float = 0.95
    lead_seconds: float = 1.0
    min_calibration: int = 20

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must be in (0, 1)")

    def lead_steps(self, rate_hz: float) -> int:
        return int(round(self.lead_seconds * rate_hz))


@dataclass
class MonitorResult:
    episode_id: str
    outcome: str
    collision_step: int | None
    steps: list                 # scored step indices
    scores: list
    alarm_step: int | None
    eval_score: float           # collision: score at impact - lead; safe: max
    verdict: str                # true_alarm | missed | false_alarm | true_negative


def episode_scores(encoder, decoder, episode: Episode, split: SplitSpec):
    """Per-step window scores over one episode (streaming order)."""
    steps, scores = [], []
    for end in range(split.n_past - 1, len(episode)):
        window = window_trajectory(episode, end, split.n_past)
        s = gradient_scores(encoder, decoder, window, split,
                            ("grad_last",))["grad_last"]
        steps.append(end)
        scores.append(s)
    return steps, scores


def monitor_episode(encoder, decoder, episode: Episode, split: SplitSpec,
                    threshold: float, cfg: MonitorConfig) -> MonitorResult:
    """Score the trailing window at every step; alarm on the first score
    above the threshold. Collision episodes are judged on the score captured
    lead_seconds before the impact."""
    if len(episode) < split.n_past:
        raise ValueError(
            f"episode {episode.episode_id} shorter than the window "
            f"({len(episode)} < {split.n_past})")
    steps, scores = episode_scores(encoder, decoder, episode, split)
    alarm_step = None
    for step, s in zip(steps, scores):
        if s > threshold:
            alarm_step = step
            break
    if episode.outcome == "collision":
        eval_step = episode.collision_step - cfg.lead_steps(episode.rate_hz)
        pos = max(eval_step - steps[0], 0)
        eval_score = scores[min(pos, len(scores) - 1)]
        in_time = alarm_step is not None and alarm_step <= episode.collision_step
        verdict = "true_alarm" if in_time else "missed"
    else:
        eval_score = max(scores)
        verdict = "false_alarm" if alarm_step is not None else "true_negative"
    return MonitorResult(episode.episode_id, episode.outcome,
                         episode.collision_step, steps, scores, alarm_step,
                         float(eval_score), verdict)


def calibrate_monitor(encoder, decoder, safe_episodes, split: SplitSpec,
                      cfg: MonitorConfig) -> float:
    """Threshold = q-quantile of per-episode maximum scores on safe data."""
    maxima = []
    for ep in safe_episodes:
        _, scores = episode_scores(encoder, decoder, ep, split)
        maxima.append(max(scores))
    return calibrate_threshold(maxima, cfg.quantile, cfg.min_calibration)


def summarize_monitor(results: list[MonitorResult], threshold: float) -> dict:
    """Detection rate at the early-evaluation point, episode false alarms,
    verdict counts, and the AUROC of eval scores."""
    coll = [r for r in results if r.outcome == "collision"]
    safe = [r for r in results if r.outcome == "safe"]
    verdicts = {}
    for r in results:
        verdicts[r.verdict] = verdicts.get(r.verdict, 0) + 1
    summary = {
        "threshold": threshold,
        "n_collision": len(coll),
        "n_safe": len(safe),
        "verdicts": verdicts,
    }
    if coll:
        summary["detection_rate"] = \
            sum(r.eval_score > threshold for r in coll) / len(coll)
    if safe:
        summary["false_alarm_rate"] = \
            sum(r.alarm_step is not None for r in safe) / len(safe)
    if coll and safe:
        summary["auroc"] = auroc([r.eval_score for r in coll],
                                 [r.eval_score for r in safe]).auroc
    return summary


# ----------------------------------------------------------------------
# score-distribution export
# ----------------------------------------------------------------------

def _freedman_diaconis_bins(values: np.ndarray, fallback: int = 50) -> int:
    iqr = float(np.subtract(*np.percentile(values, [75, 25])))
    if iqr <= 0 or len(values) < 2:
        return fallback
    width = 2.0 * iqr / len(values) ** (1.0 / 3.0)
    span = float(values.max() - values.min())
    if width <= 0 or span <= 0:
        return fallback
    return max(1, min(int(math.ceil(span / width)), 512))


def export_distributions(rows, path) -> None:
    """Per-label histogram densities and smoothed curves as one CSV.

    Columns: label, kind (hist|curve), x, density. Curves are Gaussian KDEs
    renormalized to integrate to one on their grid.
    """
    by_label: dict[str, list] = {}
    for r in rows:
        key = r.label.kind if r.label is not None else "unlabeled"
        by_label.setdefault(key, []).append(r.score)
    out_rows = []
    for label in sorted(by_label):
        values = np.asarray(by_label[label], dtype=np.float64)
        if np.ptp(values) == 0:
            edges = np.array([values[0] - 0.5, values[0] + 0.5])
        else:
            edges = np.histogram_bin_edges(
                values, bins=_freedman_diaconis_bins(values))
        density, edges = np.histogram(values, bins=edges, density=True)
        centers = (edges[:-1] + edges[1:]) / 2.0
        for x, d in zip(centers, density):
            out_rows.append((label, "hist", x, d))

        std = values.std(ddof=1) if len(values) > 1 else 0.0
        h = max(std * len(values) ** (-0.2), 1e-9)
        grid = np.linspace(values.min() - 5 * h, values.max() + 5 * h, 512)
        sq = (grid[:, None] - values[None, :]) ** 2
        curve = np.exp(-0.5 * sq / (h * h)).sum(axis=1) \
            / (len(values) * h * math.sqrt(2 * math.pi))
        area = np.trapezoid(curve, grid)
        if area > 0:
            curve = curve / area
        for x, d in zip(grid, curve):
            out_rows.append((label, "curve", x, d))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "kind", "x", "density"])
        for label, kind, x, d in out_rows:
            writer.writerow([label, kind, repr(float(x)), repr(float(d))])


# ----------------------------------------------------------------------
# results JSON
# ----------------------------------------------------------------------

VOLATILE_RESULT_KEYS = ("mean_score_ms", "wall_s")


def save_results_json(path, results: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)


def load_results_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def strip_volatile(results):
    """Drop timing fields so reproducibility checks compare pure outputs."""
    if isinstance(results, dict):
        return {k: strip_volatile(v) for k, v in results.items()
                if k not in VOLATILE_RESULT_KEYS}
    if isinstance(results, list):
        return [strip_volatile(v) for v in results]
    return results


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start
