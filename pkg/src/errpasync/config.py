"""Flat configuration shared by the simulator, the pipeline and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class Config:
    # acquisition and filtering
    sample_rate: float = 500.0
    n_channels: int = 61
    low_cut: float = 1.0
    high_cut: float = 10.0
    filter_order: int = 4

    # classifier
    window: float = 0.450
    leap: float = 0.018
    epoch_offset: float = 0.300
    variance_target: float = 0.99
    outlier_fraction: float = 0.01
    tau0: float = 0.7

    # threshold personalisation and metrics
    grid_step: float = 0.025
    smoothing: int = 7
    adapt_blocks: int = 3
    tp_window: float = 1.5
    far_interval: float = 1.0

    # protocol
    n_blocks: int = 8
    trials_per_block: int = 30
    error_trials_per_block: int = 9
    max_consecutive_errors: int = 2
    max_consecutive_target: int = 3
    robot_speed: float = 8.0            # cm/s
    error_distance_min: float = 6.0     # cm
    error_distance_max: float = 15.0
    marker_delay: float = 0.225         # s from recorded marker to robot motion
    trial_timeout: float = 6.0
    detection_extension: float = 6.0
    correct_duration_mean: float = 2.05
    correct_duration_sd: float = 0.13
    correct_duration_min: float = 1.5
    correct_duration_max: float = 6.0
    resume_duration_mean: float = 1.5   # detection -> target reached
    resume_duration_sd: float = 0.2
    resume_duration_min: float = 0.5
    inter_trial_gap: float = 1.5

    # synthetic EEG
    noise_level: float = 3.0            # uV rms per channel, broadband
    common_fraction: float = 0.6        # share of variance from shared sources
    n_common_sources: int = 10
    source_space_constant: float = 1.5  # electrode spacings
    source_layout_seed: int = 20170     # shared source topography across participants
    template_negative_amplitude: float = -5.5
    template_positive_amplitude: float = 5.8
    template_negative_latency: float = 0.176
    template_positive_latency: float = 0.334
    sci_negative_latency: float = 0.154
    sci_positive_latency: float = 0.332
    sci_amplitude_scale: float = 0.45
    template_lobe_sd: float = 0.040
    template_space_constant: float = 2.0
    latency_jitter: float = 0.010       # between-participant sd, s
    amplitude_jitter: float = 0.10      # between-participant relative sd

    # generic-model corpus
    n_training_participants: int = 15

    def filter_spec(self):
        from .dsp import FilterSpec
        return FilterSpec(self.low_cut, self.high_cut, self.filter_order, self.sample_rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values = {}
        for key, value in data.items():
            kind = known[key].type
            values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


DEFAULT = Config()
