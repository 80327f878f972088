"""Experiment configuration: one JSON-serializable tree plus pinned presets.

A config fully determines a run: generator settings, split rule, model
architectures, training hyper-parameters, score variants and monitor policy.
CLI flags override individual fields; the global seed feeds every seeded
component.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .evaluation import MonitorConfig
from .models import EncoderConfig, MdnConfig, ReconConfig
from .synthetic import CTX_CHANNELS, ScenarioConfig
from .trajectory import SPLIT_RULES, SplitSpec
from .training import TrainConfig

OUTPUT_ROOT_ENV = "GRADSHIFT_OUT"

FILES = {
    "manifest": "manifest.json",
    "corpus_train": "corpus_train.jsonl",
    "corpus_eval": "corpus_eval.jsonl",
    "episodes_train": "episodes_train.jsonl",
    "episodes_cal": "episodes_cal.jsonl",
    "episodes_eval": "episodes_eval.jsonl",
    "encoder": "encoder.json",
    "primary_decoder": "primary_decoder.json",
    "past_decoder": "past_decoder.json",
    "ae": "ae.json",
    "mae": "mae.json",
    "scores": "scores.csv",
    "scores_meta": "scores_meta.json",
    "distributions": "distributions.csv",
    "results": "results.json",
    "monitor_results": "monitor_results.json",
    "monitor_episodes": "monitor_episodes.csv",
}


@dataclass
class EpisodePlan:
    n_train_safe: int = 120
    n_cal_safe: int = 60
    n_eval_safe: int = 220
    n_eval_collision: int = 220
    window_stride: int = 4


@dataclass
class ExperimentConfig:
    experiment: str = "turn_left"
    seed: int = 7
    out_dir: str = "runs/turn_left"
    rule: str | None = "turn_left"       # None -> monitor experiment
    turn_threshold: float = 1.0
    eval_counts: dict = field(default_factory=dict)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(20, 10))
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(20))
    decoder: MdnConfig = field(default_factory=lambda: MdnConfig(32, 10))
    recon: ReconConfig = field(default_factory=lambda: ReconConfig(20))
    train: TrainConfig = field(default_factory=TrainConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    episodes: EpisodePlan = field(default_factory=EpisodePlan)
    variants: tuple = ("grad_last", "grad_latent", "grad_all", "loss")
    mae_score_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.rule is not None and self.rule not in SPLIT_RULES:
            raise ValueError(f"unknown split rule {self.rule!r}")
        self.variants = tuple(self.variants)
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @property
    def is_monitor(self) -> bool:
        return self.rule is None

    def resolved_out_dir(self) -> str:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(self.out_dir):
            return os.path.join(root, self.out_dir)
        return self.out_dir

    def path(self, key: str) -> str:
        return os.path.join(self.resolved_out_dir(), FILES[key])


_NESTED = {
    "scenario": ScenarioConfig,
    "split": SplitSpec,
    "encoder": EncoderConfig,
    "decoder": MdnConfig,
    "recon": ReconConfig,
    "train": TrainConfig,
    "monitor": MonitorConfig,
    "episodes": EpisodePlan,
}


def _rebuild(cls, obj):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - fields
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(obj: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in dict(obj).items():
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _rebuild(_NESTED[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(kwargs) - fields
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**kwargs)


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


# ----------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------

def _behaviour_scenario(seed, counts):
    return ScenarioConfig(
        seed=seed, rate_hz=10.0, n_past=20, horizon=10, counts=counts,
        speed_range=(3.0, 13.0), fast_speed_range=(14.0, 22.0),
        turn_speed_range=(8.0, 13.0), straight_yaw_rate=0.03,
        turn_yaw_rate_range=(0.6, 1.2), accel_range=(0.0, 1.5),
        noise_pos_range=(0.0, 0.05), noise_yaw_range=(0.0, 0.02),
        noise_speed_range=(0.0, 0.3),
    )


def _behaviour_preset(name, rule, train_counts, eval_counts, seed=7):
    return ExperimentConfig(
        experiment=name,
        seed=seed,
        out_dir=f"runs/{name}",
        rule=rule,
        eval_counts=eval_counts,
        scenario=_behaviour_scenario(seed, train_counts),
        split=SplitSpec(20, 10),
        encoder=EncoderConfig(n_past=20, hidden=(64,), latent=32),
        decoder=MdnConfig(latent=32, horizon=10, components=3,
                          hidden=(64, 32), var_floor=1e-2),
        recon=ReconConfig(n_past=20, hidden=(64,), latent=32),
        train=TrainConfig(epochs=80, batch_size=128, lr=1e-3, seed=seed,
                          patience=12),
        variants=("grad_last", "grad_latent", "grad_all", "loss",
                  "recon_ae", "recon_mae", "kde", "iforest"),
    )


def preset_turn_left() -> ExperimentConfig:
    return _behaviour_preset(
        "turn_left", "turn_left",
        {"straight": 2600, "weave": 1400, "turn_left": 1000},
        {"straight": 1500, "weave": 750, "turn_left": 650})


def preset_turn_right() -> ExperimentConfig:
    return _behaviour_preset(
        "turn_right", "turn_right",
        {"straight": 2600, "weave": 1400, "turn_right": 1000},
        {"straight": 1500, "weave": 750, "turn_right": 650})


def preset_over_speed() -> ExperimentConfig:
    cfg = _behaviour_preset(
        "over_speed", "over_speed",
        {"straight": 3200, "weave": 1000, "fast": 500},
        {"straight": 3400, "weave": 1000, "fast": 400})
    cfg.variants = ("grad_last", "grad_latent", "grad_all", "loss",
                    "kde", "iforest")
    return cfg


def preset_monitor() -> ExperimentConfig:
    seed = 7
    scenario = ScenarioConfig(
        seed=seed, rate_hz=5.0, n_past=15, horizon=5,
        counts={}, episode_len=60, n_neighbors=2,
        collision_radius=2.0, desired_speed_range=(8.0, 14.0),
        headway_time=1.5, fail_window=(16, 28), min_collision_step=24,
    )
    return ExperimentConfig(
        experiment="monitor",
        seed=seed,
        out_dir="runs/monitor",
        rule=None,
        scenario=scenario,
        split=SplitSpec(15, 5),
        encoder=EncoderConfig(n_past=15, ctx_channels=CTX_CHANNELS,
                              hidden=(64,), latent=32),
        decoder=MdnConfig(latent=32, horizon=5, components=3,
                          hidden=(64, 32)),
        recon=ReconConfig(n_past=15, ctx_channels=CTX_CHANNELS,
                          hidden=(64,), latent=32),
        train=TrainConfig(epochs=30, batch_size=128, lr=1e-3, seed=seed,
                          patience=6),
        monitor=MonitorConfig(quantile=0.95, lead_seconds=1.0),
        episodes=EpisodePlan(),
        variants=("grad_last",),
    )


def preset_smoke() -> ExperimentConfig:
    cfg = _behaviour_preset(
        "smoke", "turn_left",
        {"straight": 60, "turn_left": 24},
        {"straight": 40, "turn_left": 16},
        seed=13)
    cfg.out_dir = "runs/smoke"
    cfg.encoder = EncoderConfig(n_past=20, hidden=(16,), latent=8)
    cfg.decoder = MdnConfig(latent=8, horizon=10, components=2, hidden=(16, 8))
    cfg.recon = ReconConfig(n_past=20, hidden=(16,), latent=8)
    cfg.train = TrainConfig(epochs=2, batch_size=32, lr=1e-3, seed=13)
    cfg.variants = ("grad_last", "loss", "kde")
    return cfg


PRESETS = {
    "turn_left": preset_turn_left,
    "turn_right": preset_turn_right,
    "over_speed": preset_over_speed,
    "monitor": preset_monitor,
    "smoke": preset_smoke,
}


def get_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; "
                         f"available: {sorted(PRESETS)}")
    return PRESETS[name]()
