"""AUROC oracle equivalence, calibration, monitor logic, exports."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradshift.evaluation import (
    MonitorConfig, auroc, auroc_brute_force, auroc_from_rows,
    calibrate_monitor, calibrate_threshold, export_distributions,
    monitor_episode, strip_volatile, summarize_monitor,
)
from gradshift.models import Encoder, EncoderConfig, MdnConfig, MdnDecoder
from gradshift.scoring import ScoredSample
from gradshift.synthetic import ScenarioConfig, generate_episodes
from gradshift.trajectory import ShiftLabel, SplitSpec


# ----------------------------------------------------------------------
# auroc
# ----------------------------------------------------------------------

def test_auroc_perfect_separation():
    assert auroc([2, 3], [0, 1]).auroc == 1.0


def test_auroc_all_ties():
    assert auroc([5.0] * 4, [5.0] * 6).auroc == 0.5


def test_auroc_hand_case():
    # pairs: (1,2)L (1,4)L (3,2)W (3,4)L -> 1/4
    assert auroc([1, 3], [2, 4]).auroc == 0.25


def test_auroc_empty_class_error():
    with pytest.raises(ValueError, match="non-empty"):
        auroc([], [1.0])
    with pytest.raises(ValueError, match="non-empty"):
        auroc([1.0], [])


def test_auroc_equals_brute_force_exactly():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n_pos = int(rng.integers(1, 101))
        n_neg = int(rng.integers(1, 101))
        if trial % 3 == 0:
            pos = rng.integers(0, 8, n_pos).astype(float)   # heavy ties
            neg = rng.integers(0, 8, n_neg).astype(float)
        else:
            pos = rng.normal(size=n_pos) + 0.3
            neg = rng.normal(size=n_neg)
        assert auroc(pos, neg).auroc == auroc_brute_force(pos, neg)


def test_auroc_curve_endpoints_and_area():
    rng = np.random.default_rng(1)
    for trial in range(20):
        pos = rng.normal(size=40) + rng.uniform(0, 1)
        neg = rng.normal(size=30)
        if trial % 2:
            pos = np.round(pos)     # ties -> diagonal segments
            neg = np.round(neg)
        res = auroc(pos, neg)
        assert res.curve[0] == (0.0, 0.0)
        assert res.curve[-1] == (1.0, 1.0)
        xs = [p[0] for p in res.curve]
        ys = [p[1] for p in res.curve]
        assert all(b >= a for a, b in zip(xs, xs[1:]))
        assert all(b >= a for a, b in zip(ys, ys[1:]))
        assert abs(res.curve_area() - res.auroc) <= 1e-12


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30),
       st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_auroc_complement_for_tie_free(pos, neg):
    pooled = pos + neg
    if len(set(pooled)) != len(pooled):
        return
    a = auroc(pos, neg).auroc
    b = auroc(neg, pos).auroc
    assert a + b == pytest.approx(1.0, abs=1e-12)


grid_floats = st.integers(-2000, 2000).map(lambda k: k / 100.0)


@given(st.lists(grid_floats, min_size=2, max_size=25),
       st.lists(grid_floats, min_size=2, max_size=25),
       st.sampled_from(["exp", "cube_shift", "scale"]))
def test_auroc_invariant_under_increasing_transform(pos, neg, name):
    # grid-spaced inputs keep the transforms strictly increasing in float
    fn = {"exp": lambda x: math.exp(x / 10),
          "cube_shift": lambda x: x ** 3 + 5,
          "scale": lambda x: 3.7 * x + 1}[name]
    base = auroc(pos, neg).auroc
    mapped = auroc([fn(x) for x in pos], [fn(x) for x in neg]).auroc
    assert mapped == pytest.approx(base, abs=1e-12)


def test_auroc_from_rows_uses_shift_labels():
    rows = [
        ScoredSample("a", "grad_last", 3.0, ShiftLabel("turn_left", 2.0)),
        ScoredSample("b", "grad_last", 2.5, ShiftLabel("collision")),
        ScoredSample("c", "grad_last", 1.0, ShiftLabel("in_distribution")),
        ScoredSample("d", "grad_last", 0.5, ShiftLabel("in_distribution")),
    ]
    res = auroc_from_rows(rows)
    assert res.auroc == 1.0 and res.n_pos == 2 and res.n_neg == 2


# ----------------------------------------------------------------------
# threshold calibration
# ----------------------------------------------------------------------

def test_threshold_linear_interpolation():
    scores = np.arange(1.0, 101.0)
    assert calibrate_threshold(scores, 0.95) == pytest.approx(95.05)


def test_threshold_bounded_by_max():
    scores = np.arange(1.0, 101.0)
    assert calibrate_threshold(scores, 0.999999) <= 100.0


def test_threshold_constant_scores():
    assert calibrate_threshold(np.full(30, 7.25), 0.9) == 7.25


def test_threshold_needs_enough_data():
    with pytest.raises(ValueError, match=">= 20"):
        calibrate_threshold(np.ones(10), 0.95)
    with pytest.raises(ValueError, match="quantile"):
        calibrate_threshold(np.ones(30), 1.0)


# ----------------------------------------------------------------------
# monitor
# ----------------------------------------------------------------------

SPLIT = SplitSpec(n_past=15, horizon=5)


@pytest.fixture(scope="module")
def monitor_setup():
    cfg = ScenarioConfig(seed=31, rate_hz=5.0, n_past=15, horizon=5,
                         episode_len=60, fail_window=(16, 28),
                         min_collision_step=24)
    episodes = generate_episodes(cfg, 30, 4)
    enc = Encoder.init(EncoderConfig(n_past=15, ctx_channels=4, hidden=(16,),
                                     latent=8), 0)
    dec = MdnDecoder.init(MdnConfig(latent=8, horizon=5, components=2,
                                    hidden=(16, 8)), 1)
    return enc, dec, episodes


def test_monitor_infinite_threshold_never_alarms(monitor_setup):
    enc, dec, episodes = monitor_setup
    safe = [e for e in episodes if e.outcome == "safe"][0]
    res = monitor_episode(enc, dec, safe, SPLIT, math.inf, MonitorConfig())
    assert res.alarm_step is None
    assert res.verdict == "true_negative"
    assert res.eval_score == max(res.scores)
    assert res.steps[0] == SPLIT.n_past - 1


def test_monitor_zero_threshold_alarms_immediately(monitor_setup):
    enc, dec, episodes = monitor_setup
    coll = [e for e in episodes if e.outcome == "collision"][0]
    res = monitor_episode(enc, dec, coll, SPLIT, -1.0, MonitorConfig())
    assert res.alarm_step == SPLIT.n_past - 1
    assert res.verdict == "true_alarm"         # alarm precedes the impact
    eval_step = coll.collision_step - MonitorConfig().lead_steps(5.0)
    assert res.eval_score == res.scores[res.steps.index(eval_step)]


def test_monitor_alarm_step_nondecreasing_in_threshold(monitor_setup):
    enc, dec, episodes = monitor_setup
    ep = [e for e in episodes if e.outcome == "safe"][1]
    base = monitor_episode(enc, dec, ep, SPLIT, -1.0, MonitorConfig())
    thresholds = np.quantile(base.scores, [0.1, 0.4, 0.7, 0.9])
    last_alarm = -1
    for thr in thresholds:
        res = monitor_episode(enc, dec, ep, SPLIT, float(thr), MonitorConfig())
        step = res.alarm_step if res.alarm_step is not None else 10 ** 9
        assert step >= last_alarm
        last_alarm = step


def test_monitor_short_episode_rejected(monitor_setup):
    enc, dec, episodes = monitor_setup
    from gradshift.synthetic import Episode
    short = Episode("tiny", 5.0, episodes[0].steps[:10], "safe")
    with pytest.raises(ValueError, match="shorter"):
        monitor_episode(enc, dec, short, SPLIT, 1.0, MonitorConfig())


def test_calibrate_monitor_and_summary(monitor_setup):
    enc, dec, episodes = monitor_setup
    safe = [e for e in episodes if e.outcome == "safe"]
    coll = [e for e in episodes if e.outcome == "collision"]
    cfg = MonitorConfig(quantile=0.9)
    thr = calibrate_monitor(enc, dec, safe[:25], SPLIT, cfg)
    results = [monitor_episode(enc, dec, e, SPLIT, thr, cfg)
               for e in safe[25:] + coll]
    summary = summarize_monitor(results, thr)
    assert summary["n_safe"] == 5 and summary["n_collision"] == 4
    assert 0.0 <= summary["false_alarm_rate"] <= 1.0
    assert 0.0 <= summary["detection_rate"] <= 1.0
    assert sum(summary["verdicts"].values()) == 9
    assert 0.0 <= summary["auroc"] <= 1.0


def test_monitor_false_alarm_rate_is_fraction_above_threshold(monitor_setup):
    enc, dec, episodes = monitor_setup
    safe = [e for e in episodes if e.outcome == "safe"][:6]
    cfg = MonitorConfig()
    results = [monitor_episode(enc, dec, e, SPLIT, 0.0, cfg) for e in safe]
    # grad norms are positive, so every safe episode crosses a 0 threshold
    summary = summarize_monitor(results, 0.0)
    assert summary["false_alarm_rate"] == 1.0
    expected = np.mean([max(r.scores) > 0.0 for r in results])
    assert summary["false_alarm_rate"] == expected


# ----------------------------------------------------------------------
# distribution export
# ----------------------------------------------------------------------

def test_export_single_score_one_bin(tmp_path):
    rows = [ScoredSample("a", "grad_last", 2.0, ShiftLabel("in_distribution"))]
    path = tmp_path / "dist.csv"
    export_distributions(rows, path)
    with open(path) as fh:
        recs = list(csv.DictReader(fh))
    hist = [r for r in recs if r["kind"] == "hist"]
    assert len(hist) == 1
    assert float(hist[0]["x"]) == pytest.approx(2.0)


def test_export_two_labels_two_curves(tmp_path):
    rng = np.random.default_rng(2)
    rows = [ScoredSample(f"i{i}", "loss", float(s),
                         ShiftLabel("in_distribution"))
            for i, s in enumerate(rng.normal(size=60))]
    rows += [ScoredSample(f"o{i}", "loss", float(s),
                          ShiftLabel("turn_left", 2.0))
             for i, s in enumerate(rng.normal(size=60) + 3)]
    path = tmp_path / "dist.csv"
    export_distributions(rows, path)
    with open(path) as fh:
        recs = list(csv.DictReader(fh))
    labels = {r["label"] for r in recs}
    assert labels == {"in_distribution", "turn_left"}
    for label in labels:
        xs = np.array([float(r["x"]) for r in recs
                       if r["label"] == label and r["kind"] == "curve"])
        ds = np.array([float(r["density"]) for r in recs
                       if r["label"] == label and r["kind"] == "curve"])
        integral = np.trapezoid(ds, xs)
        assert integral == pytest.approx(1.0, abs=1e-6)
        hist_x = np.array([float(r["x"]) for r in recs
                           if r["label"] == label and r["kind"] == "hist"])
        assert len(hist_x) >= 1


def test_export_deterministic(tmp_path):
    rng = np.random.default_rng(3)
    rows = [ScoredSample(f"s{i}", "loss", float(v),
                         ShiftLabel("in_distribution"))
            for i, v in enumerate(rng.normal(size=40))]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export_distributions(rows, p1)
    export_distributions(rows, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_strip_volatile_removes_timing():
    payload = {"experiment": "x", "mean_score_ms": 3.2,
               "variants": [{"auroc": 0.9, "mean_score_ms": 1.0}],
               "nested": {"wall_s": 5.0, "keep": 1}}
    cleaned = strip_volatile(payload)
    assert cleaned == {"experiment": "x", "variants": [{"auroc": 0.9}],
                       "nested": {"keep": 1}}
