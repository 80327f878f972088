"""Seeded kinematic scenario generator.

Produces desk-scale trajectory corpora mirroring the behaviour-shift taxonomy
(straight / left turn / right turn / over-speed classes from a unicycle
model) and car-following episodes with induced brake-failure collisions for
the online monitor. Everything is reproducible bit-for-bit from the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .trajectory import ShiftLabel, Trajectory, max_velocity, turn_score

TRAJECTORY_CLASSES = ("straight", "weave", "turn_left", "turn_right", "fast")

# context feature scaling: relative neighbour state, clipped to +-CTX_CLIP
CTX_CHANNELS = 4
CTX_DIST_SCALE = 20.0
CTX_SPEED_SCALE = 10.0
CTX_CLIP = 3.0
CTX_PAD = np.array([CTX_CLIP, CTX_CLIP, 0.0, 0.0])


class GenerationError(RuntimeError):
    """An episode class could not be produced within the attempt budget."""


@dataclass
class ScenarioConfig:
    seed: int = 0
    rate_hz: float = 10.0
    n_past: int = 20
    horizon: int = 10
    counts: dict = field(default_factory=lambda: {"straight": 100})

    # unicycle kinematics per class
    speed_range: tuple = (3.0, 13.0)
    fast_speed_range: tuple = (14.0, 22.0)
    turn_speed_range: tuple = (8.0, 13.0)
    straight_yaw_rate: float = 0.03
    turn_yaw_rate_range: tuple = (0.6, 1.2)
    weave_yaw_range: tuple = (0.25, 0.55)
    heading_range: tuple = (-np.pi, np.pi)
    accel_range: tuple = (0.0, 0.0)     # per-trajectory speed drift m/s^2

    # per-trajectory noise levels are drawn uniformly from these ranges
    noise_pos_range: tuple = (0.0, 0.05)
    noise_yaw_range: tuple = (0.0, 0.02)
    noise_speed_range: tuple = (0.0, 0.3)

    # car-following episodes
    episode_len: int = 70
    n_neighbors: int = 2
    collision_radius: float = 2.0
    desired_speed_range: tuple = (8.0, 14.0)
    headway_time: float = 1.5
    accel: float = 2.0
    brake_decel: float = 4.0
    fail_window: tuple = (18, 32)     # step range where braking may cut out
    min_collision_step: int = 24
    max_attempts: int = 60

    def __post_init__(self):
        for name in ("speed_range", "fast_speed_range", "turn_speed_range",
                     "turn_yaw_rate_range", "desired_speed_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-degenerate range")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("class counts must be >= 0")
        for name in ("noise_pos_range", "noise_yaw_range", "noise_speed_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a valid non-negative range")

    @property
    def total_steps(self):
        return self.n_past + self.horizon


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence((seed, *stream)))


# ----------------------------------------------------------------------
# unicycle corpus
# ----------------------------------------------------------------------

def _rollout_unicycle(rng, cfg: ScenarioConfig, v0, omega):
    """omega may be a scalar yaw rate or a per-step array of yaw rates."""
    dt = 1.0 / cfg.rate_hz
    omega = np.broadcast_to(np.asarray(omega, dtype=np.float64),
                            (cfg.total_steps,))
    sigma_pos = rng.uniform(*cfg.noise_pos_range)
    sigma_yaw = rng.uniform(*cfg.noise_yaw_range)
    sigma_v = rng.uniform(*cfg.noise_speed_range)
    accel = rng.uniform(*cfg.accel_range) * (1 if rng.uniform() < 0.5 else -1)
    theta = rng.uniform(*cfg.heading_range)
    pts = np.empty((cfg.total_steps, 2))
    x = y = 0.0
    for i in range(cfg.total_steps):
        pts[i] = (x, y)
        v = max(v0 + accel * i * dt + rng.normal(scale=sigma_v), 0.0)
        theta += (omega[i] + rng.normal(scale=sigma_yaw)) * dt
        x += v * np.cos(theta) * dt
        y += v * np.sin(theta) * dt
    if sigma_pos > 0:
        pts = pts + rng.normal(scale=sigma_pos, size=pts.shape)
    return pts


def _weave_yaw_profile(rng, cfg: ScenarioConfig):
    """Alternating-sign yaw segments: locally curved, near-zero net turn.

    Flip points are uniform over the whole trajectory, so the continuation
    after any step is genuinely ambiguous (keep curving or flip back).
    """
    n = cfg.total_steps
    n_seg = int(rng.integers(2, 5))
    bounds = np.sort(rng.choice(np.arange(1, n - 1), size=n_seg - 1,
                                replace=False))
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    profile = np.empty(n)
    start = 0
    for end in list(bounds) + [n]:
        profile[start:end] = sign * rng.uniform(*cfg.weave_yaw_range)
        sign = -sign
        start = end
    return profile


def _sample_class(rng, cfg: ScenarioConfig, klass):
    if klass == "straight":
        v = rng.uniform(*cfg.speed_range)
        omega = rng.uniform(-cfg.straight_yaw_rate, cfg.straight_yaw_rate)
    elif klass == "fast":
        v = rng.uniform(*cfg.fast_speed_range)
        omega = rng.uniform(-cfg.straight_yaw_rate, cfg.straight_yaw_rate)
    elif klass == "weave":
        v = rng.uniform(*cfg.speed_range)
        omega = _weave_yaw_profile(rng, cfg)
    elif klass == "turn_left":
        v = rng.uniform(*cfg.turn_speed_range)
        omega = rng.uniform(*cfg.turn_yaw_rate_range)
    elif klass == "turn_right":
        v = rng.uniform(*cfg.turn_speed_range)
        omega = -rng.uniform(*cfg.turn_yaw_rate_range)
    else:
        raise ValueError(f"unknown trajectory class {klass!r}; "
                         f"expected one of {TRAJECTORY_CLASSES}")
    return v, omega


def _class_label(klass, traj):
    if klass in ("turn_left", "turn_right"):
        return ShiftLabel(klass, turn_score(traj))
    if klass == "fast":
        return ShiftLabel("over_speed", max_velocity(traj))
    return ShiftLabel("in_distribution")   # straight and weave classes


def generate_trajectories(cfg: ScenarioConfig) -> list[Trajectory]:
    """Unicycle rollouts per class, labeled, reproducible from the seed."""
    corpus = []
    for ci, klass in enumerate(TRAJECTORY_CLASSES):
        for i in range(cfg.counts.get(klass, 0)):
            rng = _rng(cfg.seed, ci, i)
            v, omega = _sample_class(rng, cfg, klass)
            pts = _rollout_unicycle(rng, cfg, v, omega)
            traj = Trajectory(pts, cfg.rate_hz, agent_id="0",
                              scene_id=f"{klass}-{i:05d}")
            traj.label = _class_label(klass, traj)
            corpus.append(traj)
    unknown = set(cfg.counts) - set(TRAJECTORY_CLASSES)
    if unknown:
        raise ValueError(f"unknown trajectory classes in counts: {unknown}")
    return corpus


# ----------------------------------------------------------------------
# car-following episodes
# ----------------------------------------------------------------------

@dataclass
class Episode:
    """Time-indexed states of ego + neighbours: steps[t, agent] = (x, y, vx, vy)."""

    episode_id: str
    rate_hz: float
    steps: np.ndarray
    outcome: str                      # "safe" | "collision"
    collision_step: int | None = None

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.steps.ndim != 3 or self.steps.shape[2] != 4:
            raise ValueError(f"steps must be (T, agents, 4), got {self.steps.shape}")
        if self.outcome not in ("safe", "collision"):
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.outcome == "collision":
            if self.collision_step is None:
                raise ValueError("collision episodes must record collision_step")
            if not 0 <= self.collision_step < len(self.steps):
                raise ValueError("collision_step outside the episode")

    def __len__(self):
        return len(self.steps)

    def min_pairwise_distance(self, step_index) -> float:
        pos = self.steps[step_index, :, :2]
        if len(pos) < 2:
            return np.inf
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        return float(d[np.triu_indices(len(pos), k=1)].min())


def _safe_gap(cfg, v):
    return cfg.collision_radius + cfg.headway_time * v


def _rollout_episode(rng, cfg: ScenarioConfig, fail_step):
    """Roll a following chain; ego (agent 0) loses braking at fail_step."""
    dt = 1.0 / cfg.rate_hz
    n = 1 + cfg.n_neighbors
    v_des = rng.uniform(*cfg.desired_speed_range, size=n)
    v = v_des * rng.uniform(0.85, 1.0, size=n)
    x = np.zeros(n)
    for i in range(1, n):
        x[i] = x[i - 1] + _safe_gap(cfg, v[i - 1]) * rng.uniform(1.3, 2.2)
    y = rng.uniform(-0.3, 0.3, size=n)
    lead_target = v_des[-1]
    steps = np.empty((cfg.episode_len, n, 4))
    collision_step = None
    for t in range(cfg.episode_len):
        obs_noise = rng.normal(scale=0.02, size=(n, 2))
        steps[t, :, 0] = x + obs_noise[:, 0]
        steps[t, :, 1] = y + obs_noise[:, 1]
        steps[t, :, 2] = v
        steps[t, :, 3] = 0.0
        pos = steps[t, :, :2]
        if n > 1:
            dmat = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
            if dmat[np.triu_indices(n, k=1)].min() < cfg.collision_radius:
                collision_step = t
                steps = steps[: t + 1]
                break
        # front-most agent: piecewise target speed with occasional slowdowns
        if rng.uniform() < 0.02 * (dt * cfg.rate_hz):
            lead_target = v_des[-1] * rng.uniform(0.35, 1.0)
        a = np.zeros(n)
        a[-1] = np.clip((lead_target - v[-1]) / dt, -cfg.brake_decel, cfg.accel)
        for i in range(n - 1):
            gap = x[i + 1] - x[i]
            braking_ok = not (i == 0 and fail_step is not None and t >= fail_step)
            target = v_des[i] * (1.25 if not braking_ok else 1.0)
            if gap < _safe_gap(cfg, v[i]) and braking_ok:
                a[i] = -cfg.brake_decel
            elif v[i] < target:
                a[i] = cfg.accel
        v = np.maximum(v + a * dt, 0.0)
        x = x + v * dt
    return steps, collision_step


def _gen_one_episode(cfg: ScenarioConfig, want_collision, index) -> Episode:
    kind = "collision" if want_collision else "safe"
    stream = 1_000_000 if want_collision else 0
    for attempt in range(cfg.max_attempts):
        rng = _rng(cfg.seed, stream, index, attempt)
        fail_step = rng.integers(*cfg.fail_window) if want_collision else None
        steps, collision_step = _rollout_episode(rng, cfg, fail_step)
        if want_collision:
            if collision_step is not None and \
                    collision_step >= cfg.min_collision_step:
                return Episode(f"{kind}-{index:05d}", cfg.rate_hz, steps,
                               "collision", collision_step)
        else:
            if collision_step is None:
                return Episode(f"{kind}-{index:05d}", cfg.rate_hz, steps, "safe")
    raise GenerationError(
        f"could not generate a {kind} episode (index {index}) within "
        f"{cfg.max_attempts} attempts")


def generate_episodes(cfg: ScenarioConfig, n_safe, n_collision) -> list[Episode]:
    episodes = [_gen_one_episode(cfg, False, i) for i in range(n_safe)]
    episodes += [_gen_one_episode(cfg, True, i) for i in range(n_collision)]
    return episodes


# ----------------------------------------------------------------------
# windows and context features
# ----------------------------------------------------------------------

def relative_context(steps: np.ndarray) -> np.ndarray:
    """Nearest-neighbour relative state per time row, scaled and clipped."""
    T, n, _ = steps.shape
    if n < 2:
        return np.tile(CTX_PAD, (T, 1))
    ego = steps[:, 0]
    others = steps[:, 1:]
    delta = others - ego[:, None]
    dist = np.linalg.norm(delta[:, :, :2], axis=-1)
    nearest = dist.argmin(axis=1)
    rel = delta[np.arange(T), nearest]
    feats = np.column_stack([
        rel[:, 0] / CTX_DIST_SCALE, rel[:, 1] / CTX_DIST_SCALE,
        rel[:, 2] / CTX_SPEED_SCALE, rel[:, 3] / CTX_SPEED_SCALE,
    ])
    return np.clip(feats, -CTX_CLIP, CTX_CLIP)


def window_trajectory(episode: Episode, end_step, n_past,
                      horizon=0) -> Trajectory:
    """Ego window ending at end_step (inclusive), plus optional future steps."""
    start = end_step - n_past + 1
    if start < 0 or end_step + horizon >= len(episode):
        raise ValueError(
            f"window [{start}, {end_step + horizon}] outside episode of "
            f"length {len(episode)}")
    sl = episode.steps[start:end_step + 1 + horizon]
    return Trajectory(sl[:, 0, :2], episode.rate_hz,
                      agent_id=f"t{end_step}", scene_id=episode.episode_id,
                      context=relative_context(sl))


def training_windows(episodes: list[Episode], n_past, horizon,
                     stride) -> list[Trajectory]:
    """Sliding ego windows with futures, for training on safe episodes."""
    out = []
    for ep in episodes:
        if ep.outcome != "safe":
            continue
        for end in range(n_past - 1, len(ep) - horizon, stride):
            out.append(window_trajectory(ep, end, n_past, horizon))
    return out


# ----------------------------------------------------------------------
# episode I/O
# ----------------------------------------------------------------------

def save_episodes_jsonl(path, episodes: list[Episode]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            rec = {
                "episode_id": ep.episode_id,
                "rate_hz": ep.rate_hz,
                "outcome": ep.outcome,
                "collision_step": ep.collision_step,
                "steps": ep.steps.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_episodes_jsonl(path) -> list[Episode]:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            episodes.append(Episode(rec["episode_id"], rec["rate_hz"],
                                    np.array(rec["steps"]), rec["outcome"],
                                    rec["collision_step"]))
    return episodes
