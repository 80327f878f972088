"""Trajectory data model, history splitting, resampling and behaviour splits.

Trajectories are ordered 2D positions in meters at a fixed sampling rate.
Behavioural splits label samples by the signed sum of consecutive-displacement
cross products (turn direction) or by maximum instantaneous speed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

LABEL_KINDS = ("in_distribution", "turn_left", "turn_right", "over_speed",
               "collision", "custom")
CLUSTERED_KINDS = ("turn_left", "turn_right", "over_speed")
SPLIT_RULES = ("turn_left", "turn_right", "over_speed")


class EmptySplitError(ValueError):
    """A behaviour rule produced an empty train or OOD side."""


@dataclass(frozen=True)
class ShiftLabel:
    """Ground-truth shift annotation. value carries the clustering statistic
    (total turn score or max velocity) for clustered behaviour kinds."""

    kind: str
    value: float | None = None

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.kind!r}")
        if (self.value is not None) != (self.kind in CLUSTERED_KINDS):
            raise ValueError(
                f"label {self.kind!r}: value must be present iff the kind is "
                f"a clustered behaviour")

    @property
    def is_shifted(self) -> bool:
        return self.kind != "in_distribution"

    def to_json(self):
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_json(cls, obj):
        if obj is None:
            return None
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["kind"], obj.get("value"))


@dataclass
class Trajectory:
    """Ordered 2D positions (meters) with per-step context features.

    context, when present, holds one feature row per point (used for
    neighbour-relative features in simulated scenes).
    """

    points: np.ndarray
    rate_hz: float
    agent_id: str = "0"
    scene_id: str = "0"
    label: ShiftLabel | None = None
    context: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {self.points.shape}")
        if len(self.points) < 2:
            raise ValueError("trajectory needs at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("trajectory coordinates must be finite")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        if self.context is not None:
            self.context = np.asarray(self.context, dtype=np.float64)
            if self.context.ndim != 2 or len(self.context) != len(self.points):
                raise ValueError(
                    f"context must have one row per point, got "
                    f"{self.context.shape} for {len(self.points)} points")

    def __len__(self):
        return len(self.points)

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    @property
    def sample_id(self) -> str:
        return f"{self.scene_id}:{self.agent_id}"

    def replace_points(self, points, context=None) -> "Trajectory":
        return Trajectory(points, self.rate_hz, self.agent_id, self.scene_id,
                          self.label, context)

    def head(self, n: int) -> "Trajectory":
        """First n points (and context rows) as a new trajectory."""
        if len(self) < n:
            raise ValueError(f"trajectory has {len(self)} points, need {n}")
        ctx = None if self.context is None else self.context[:n]
        return self.replace_points(self.points[:n], ctx)


@dataclass(frozen=True)
class SplitSpec:
    """History length n_past, decoder horizon, and the half-split lengths."""

    n_past: int
    horizon: int

    def __post_init__(self):
        if self.n_past < 4:
            raise ValueError("n_past must be >= 4 so both halves can be resampled")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")

    @property
    def first_len(self) -> int:
        return self.n_past // 2

    @property
    def second_len(self) -> int:
        return self.n_past - self.first_len


def split_history(t: Trajectory, spec: SplitSpec) -> tuple[Trajectory, Trajectory]:
    """Partition an n_past-step history into two contiguous segments."""
    if len(t) != spec.n_past:
        raise ValueError(
            f"expected {spec.n_past} points for splitting, got {len(t)}")
    k = spec.first_len
    ctx1 = None if t.context is None else t.context[:k]
    ctx2 = None if t.context is None else t.context[k:]
    first = t.replace_points(t.points[:k], ctx1)
    second = t.replace_points(t.points[k:], ctx2)
    return first, second


def resample_linear(t: Trajectory, m: int) -> Trajectory:
    """Resample to m points by linear interpolation along the index axis.

    Output point j sits at parameter j*(L-1)/(m-1) of the input polyline's
    index axis; endpoints are preserved exactly. Context rows, when present,
    are interpolated the same way.
    """
    length = len(t)
    if length < 2:
        raise ValueError("resampling needs at least 2 input points")
    if m < 2:
        raise ValueError("resampling target must be >= 2 points")
    src = np.arange(length, dtype=np.float64)
    dst = np.arange(m, dtype=np.float64) * (length - 1) / (m - 1)
    pts = np.column_stack([np.interp(dst, src, t.points[:, d]) for d in (0, 1)])
    # keep endpoints bit-exact regardless of float parameterization
    pts[0] = t.points[0]
    pts[-1] = t.points[-1]
    ctx = None
    if t.context is not None:
        ctx = np.column_stack([np.interp(dst, src, t.context[:, d])
                               for d in range(t.context.shape[1])])
        ctx[0] = t.context[0]
        ctx[-1] = t.context[-1]
    return t.replace_points(pts, ctx)


def turn_score(t: Trajectory) -> float:
    """Signed sum of 2D cross products of consecutive displacements.

    Positive totals indicate net left turns, negative net right turns,
    zero straight motion.
    """
    if len(t) < 3:
        raise ValueError("turn score needs at least 3 points")
    d = np.diff(t.points, axis=0)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    return float(cross.sum())


def max_velocity(t: Trajectory) -> float:
    """Maximum instantaneous speed: max over steps of dist(P_i, P_i+1)/dt."""
    d = np.diff(t.points, axis=0)
    speed = np.hypot(d[:, 0], d[:, 1]) * t.rate_hz
    return float(speed.max())


@dataclass
class SplitResult:
    """Outcome of a behaviour split: disjoint train/OOD sets plus labels."""

    rule: str
    threshold: float
    train: list[Trajectory]
    ood: list[Trajectory]
    labels: dict[str, ShiftLabel] = field(default_factory=dict)


def _rule_label(rule: str, threshold: float, t: Trajectory) -> ShiftLabel:
    if rule == "turn_left":
        v = turn_score(t)
        return ShiftLabel("turn_left", v) if v > threshold \
            else ShiftLabel("in_distribution")
    if rule == "turn_right":
        v = turn_score(t)
        return ShiftLabel("turn_right", v) if v < -threshold \
            else ShiftLabel("in_distribution")
    if rule == "over_speed":
        v = max_velocity(t)
        return ShiftLabel("over_speed", v) if v > threshold \
            else ShiftLabel("in_distribution")
    raise ValueError(f"unknown split rule {rule!r}")


def label_corpus(corpus: list[Trajectory], rule: str,
                 threshold: float) -> dict[str, ShiftLabel]:
    """Label every trajectory by the rule at a fixed threshold."""
    return {t.sample_id: _rule_label(rule, threshold, t) for t in corpus}


def apply_labels(corpus: list[Trajectory],
                 labels: dict[str, ShiftLabel]) -> list[Trajectory]:
    """Return trajectories with labels attached (new objects)."""
    out = []
    for t in corpus:
        out.append(Trajectory(t.points, t.rate_hz, t.agent_id, t.scene_id,
                              labels[t.sample_id], t.context))
    return out


def build_split(corpus: list[Trajectory], rule: str,
                turn_threshold: float = 1.0) -> SplitResult:
    """Remove a manoeuvre class from the corpus to form train/OOD sets.

    Turn rules remove trajectories whose total turn score lies beyond the
    signed threshold; over_speed removes those whose max velocity exceeds
    the corpus median. The train side never contains an OOD-labeled sample.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if rule not in SPLIT_RULES:
        raise ValueError(f"unknown split rule {rule!r}; expected one of {SPLIT_RULES}")
    if rule == "over_speed":
        threshold = float(np.median([max_velocity(t) for t in corpus]))
    else:
        threshold = float(turn_threshold)
    labels = label_corpus(corpus, rule, threshold)
    labeled = apply_labels(corpus, labels)
    train = [t for t in labeled if not t.label.is_shifted]
    ood = [t for t in labeled if t.label.is_shifted]
    if not train or not ood:
        raise EmptySplitError(
            f"rule {rule!r} at threshold {threshold:.4g} produced "
            f"{len(train)} train / {len(ood)} OOD trajectories")
    return SplitResult(rule, threshold, train, ood, labels)


# ----------------------------------------------------------------------
# corpus I/O
# ----------------------------------------------------------------------

def save_corpus_jsonl(path, corpus: list[Trajectory]) -> None:
    """One JSON record per trajectory:
    {scene_id, agent_id, rate_hz, points, label?, context?}."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in corpus:
            rec = {
                "scene_id": t.scene_id,
                "agent_id": t.agent_id,
                "rate_hz": t.rate_hz,
                "points": t.points.tolist(),
            }
            if t.label is not None:
                rec["label"] = t.label.to_json()
            if t.context is not None:
                rec["context"] = t.context.tolist()
            fh.write(json.dumps(rec) + "\n")


def load_corpus_jsonl(path) -> list[Trajectory]:
    corpus = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            corpus.append(Trajectory(
                points=rec["points"],
                rate_hz=rec["rate_hz"],
                agent_id=str(rec["agent_id"]),
                scene_id=str(rec["scene_id"]),
                label=ShiftLabel.from_json(rec.get("label")),
                context=rec.get("context"),
            ))
    return corpus


def load_corpus_csv(path, rate_hz: float) -> list[Trajectory]:
    """Ingest the CSV alternative: columns scene_id, agent_id, step, x, y."""
    rows: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"scene_id", "agent_id", "step", "x", "y"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"CSV must have columns {sorted(required)}")
        for row in reader:
            key = (str(row["scene_id"]), str(row["agent_id"]))
            rows.setdefault(key, []).append(
                (int(row["step"]), float(row["x"]), float(row["y"])))
    corpus = []
    for (scene, agent), steps in rows.items():
        steps.sort(key=lambda s: s[0])
        pts = np.array([(x, y) for _, x, y in steps])
        corpus.append(Trajectory(pts, rate_hz, agent, scene))
    return corpus
