"""Closed-loop synthetic experiment: trial sequencing, EEG synthesis and feedback.

Time is kept on a single session clock in seconds; every block starts with a
freshly reset detector and an inter-trial gap of background EEG. Raw samples
are quantised to float32 before the detector sees them, so the stored
recording replays bit-exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal

from .config import DEFAULT, Config
from .detector import Detector
from .dsp import FilterState, apply_causal, design_butterworth_bandpass
from .evaluation import adapt_threshold, tau_grid, virtual_onsets
from .features import CORRECT, ERROR, EpochSet, extract_epochs
from .session import (CHANNEL_NAMES, CHANNEL_POSITIONS, FCZ, Block,
                      ProbabilityStream, SessionLog, Trial, distance_from)

MAX_PLAN_ATTEMPTS = 10 ** 6


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParticipantProfile:
    participant_id: str
    group: str = "control"
    errp_amplitude_scale: float = 1.0
    negative_latency: float = 0.176
    positive_latency: float = 0.334
    noise_level: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.errp_amplitude_scale < 0:
            raise ValueError("amplitude scale must be non-negative")
        for lat in (self.negative_latency, self.positive_latency):
            if not 0.0 < lat < 0.75:
                raise ValueError(f"peak latency {lat} outside (0, 0.75) s")

    def to_dict(self) -> dict:
        return asdict(self)


def make_profile(participant_id: str, seed: int, group: str = "control",
                 scale: float = 1.0, config: Config = DEFAULT,
                 jitter: bool = True) -> ParticipantProfile:
    """Profile with the control or SCI grand-average latencies, optionally
    jittered between participants by ``config.latency_jitter``."""
    if group == "sci":
        neg, pos = config.sci_negative_latency, config.sci_positive_latency
    else:
        neg, pos = config.template_negative_latency, config.template_positive_latency
    if jitter:
        rng = np.random.default_rng([seed, 7])
        neg += config.latency_jitter * rng.standard_normal()
        pos += config.latency_jitter * rng.standard_normal()
    return ParticipantProfile(participant_id, group, float(scale), float(neg), float(pos),
                              config.noise_level, int(seed))


# --- trial sequencing --------------------------------------------------------

@dataclass(frozen=True)
class TrialPlan:
    kind: str
    target: str
    error_distance: float | None = None


def longest_run(seq, value) -> int:
    best = run = 0
    for item in seq:
        run = run + 1 if item == value else 0
        best = max(best, run)
    return best


def _shuffle_until(rng, items, ok):
    items = np.array(items)
    for _ in range(MAX_PLAN_ATTEMPTS):
        perm = rng.permutation(items)
        if ok(perm):
            return perm.tolist()
    raise PlanningError("could not satisfy sequencing constraints")


def plan_block(rng, config: Config = DEFAULT) -> list:
    """One block of trials: kinds and targets are shuffled independently and
    each reshuffled until its run-length limit holds."""
    n, n_err = config.trials_per_block, config.error_trials_per_block
    kinds = _shuffle_until(
        rng, ["error"] * n_err + ["correct"] * (n - n_err),
        lambda s: longest_run(s, "error") <= config.max_consecutive_errors)
    targets = _shuffle_until(
        rng, ["left"] * (n // 2) + ["right"] * (n - n // 2),
        lambda s: max(longest_run(s, "left"), longest_run(s, "right"))
        <= config.max_consecutive_target)
    plans = []
    for kind, target in zip(kinds, targets):
        dist = None
        if kind == "error":
            dist = float(rng.uniform(config.error_distance_min, config.error_distance_max))
        plans.append(TrialPlan(kind, target, dist))
    return plans


def truncated_normal(rng, mean, sd, lo, hi) -> float:
    while True:
        x = rng.normal(mean, sd)
        if lo <= x <= hi:
            return float(x)


# --- EEG synthesis -------------------------------------------------------------

# 3-pole/3-zero approximation of a 1/f power spectrum.
_PINK_B = np.array([0.049922035, -0.095993537, 0.050612699, -0.004408786])
_PINK_A = np.array([1.0, -2.494956002, 2.017265875, -0.522189400])


def _pink_gain() -> float:
    impulse = np.zeros(200_000)
    impulse[0] = 1.0
    h = signal.lfilter(_PINK_B, _PINK_A, impulse)
    return float(np.sqrt(np.sum(h ** 2)))


_PINK_NORM = _pink_gain()


def template_spatial_weights(config: Config = DEFAULT) -> np.ndarray:
    return np.exp(-distance_from(FCZ) / config.template_space_constant)


def errp_waveform(t: np.ndarray, profile: ParticipantProfile, config: Config = DEFAULT) -> np.ndarray:
    """Biphasic template at FCz (uV) at times ``t`` after the error onset."""
    t = np.asarray(t, dtype=float)
    sd = config.template_lobe_sd
    wave = (config.template_negative_amplitude
            * np.exp(-0.5 * ((t - profile.negative_latency) / sd) ** 2)
            + config.template_positive_amplitude
            * np.exp(-0.5 * ((t - profile.positive_latency) / sd) ** 2))
    return profile.errp_amplitude_scale * np.where((t >= 0) & (t < template_span(profile, config)),
                                                   wave, 0.0)


def template_span(profile: ParticipantProfile, config: Config = DEFAULT) -> float:
    return max(0.75, profile.positive_latency + 5 * config.template_lobe_sd)


class BackgroundEEG:
    """Streaming background activity, ``(channels, samples)`` in uV.

    Each channel is a mix of its own pink noise and a few shared pink sources
    whose scalp maps decay exponentially around random electrodes. Per-channel
    variance equals ``noise_level ** 2``.
    """

    def __init__(self, noise_level: float, rng, config: Config = DEFAULT, block: int = 500):
        self.noise_level = float(noise_level)
        self.rng = rng
        self.n_channels = config.n_channels
        self.n_sources = config.n_common_sources
        self.common = config.common_fraction
        # Background rhythms share their topography across participants.
        layout = np.random.default_rng(config.source_layout_seed)
        centres = layout.choice(self.n_channels, size=self.n_sources, replace=False)
        maps = np.stack([np.exp(-distance_from(c, CHANNEL_POSITIONS) / config.source_space_constant)
                         for c in centres], axis=1)
        self.mixing = maps / np.linalg.norm(maps, axis=1, keepdims=True)
        n_streams = self.n_channels + self.n_sources
        self.zi = np.zeros((n_streams, len(_PINK_A) - 1))
        self.block = block
        self._buffer = np.zeros((self.n_channels, 0))
        # Start from the filter's stationary regime rather than from rest.
        self._draw(4 * 500)

    def _draw(self, n: int) -> np.ndarray:
        white = self.rng.standard_normal((self.n_channels + self.n_sources, n))
        pink, self.zi = signal.lfilter(_PINK_B, _PINK_A, white, axis=1, zi=self.zi)
        pink /= _PINK_NORM
        own, shared = pink[:self.n_channels], pink[self.n_channels:]
        mixed = np.sqrt(1 - self.common) * own + np.sqrt(self.common) * (self.mixing @ shared)
        return self.noise_level * mixed

    def next(self, n: int) -> np.ndarray:
        if self._buffer.shape[1] < n:
            need = max(self.block, n - self._buffer.shape[1])
            self._buffer = np.concatenate([self._buffer, self._draw(need)], axis=1)
        out, self._buffer = self._buffer[:, :n], self._buffer[:, n:]
        return out


def synthesize_eeg(profile: ParticipantProfile, onsets, duration: float,
                   config: Config = DEFAULT, rng=None) -> np.ndarray:
    """Background EEG of ``duration`` seconds with an ErrP at every onset (s).

    Returns ``(channels, samples)`` float64 in uV.
    """
    rng = np.random.default_rng(profile.seed) if rng is None else rng
    n = int(round(duration * config.sample_rate))
    data = BackgroundEEG(profile.noise_level, rng, config).next(n) if profile.noise_level > 0 \
        else np.zeros((config.n_channels, n))
    data = np.array(data)
    _add_templates(data, 0, onsets, profile, config)
    return data


def _add_templates(data: np.ndarray, first_sample: int, onsets, profile, config) -> None:
    if profile.errp_amplitude_scale == 0:
        return
    fs = config.sample_rate
    weights = template_spatial_weights(config)
    span = template_span(profile, config)
    n = data.shape[1]
    for onset in onsets:
        lo = max(int(np.floor(onset * fs)) - first_sample, 0)
        hi = min(int(np.ceil((onset + span) * fs)) + 1 - first_sample, n)
        if hi <= lo:
            continue
        t = (first_sample + np.arange(lo, hi)) / fs - onset
        data[:, lo:hi] += np.outer(weights, errp_waveform(t, profile, config))


# --- closed loop ---------------------------------------------------------------

class _Recorder:
    """Growable float32 frame buffer plus the event list."""

    def __init__(self, n_channels: int, sample_rate: float):
        self.fs = sample_rate
        self.data = np.zeros((1 << 16, n_channels), dtype=np.float32)
        self.n = 0
        self.events = []

    @property
    def now(self) -> float:
        return self.n / self.fs

    def append(self, chunk_ct: np.ndarray) -> np.ndarray:
        m = chunk_ct.shape[1]
        if self.n + m > self.data.shape[0]:
            grown = np.zeros((max(2 * self.data.shape[0], self.n + m), self.data.shape[1]),
                             dtype=np.float32)
            grown[:self.n] = self.data[:self.n]
            self.data = grown
        self.data[self.n:self.n + m] = chunk_ct.T
        quantised = self.data[self.n:self.n + m].T
        self.n += m
        return quantised

    def log(self, t: float, event: str, **payload) -> None:
        self.events.append({"t": float(t), "kind": event, "payload": payload})


class SessionSimulator:
    """Runs the blocks of one synthetic participant.

    With ``model=None`` the session is open loop: no detector runs and error
    trials always time out.
    """

    def __init__(self, profile: ParticipantProfile, model=None, config: Config = DEFAULT,
                 adapt: bool = True, single_event_per_run: bool = True):
        self.profile = profile
        self.model = model
        self.config = config
        self.adapt = adapt
        seeds = np.random.SeedSequence(profile.seed).spawn(3)
        self.plan_rng = np.random.default_rng(seeds[0])
        self.timing_rng = np.random.default_rng(seeds[1])
        self.background = BackgroundEEG(profile.noise_level, np.random.default_rng(seeds[2]),
                                        config)
        self.rec = _Recorder(config.n_channels, config.sample_rate)
        self.active_onsets = []
        self.detector = None
        if model is not None:
            self.detector = Detector(model, tau=config.tau0,
                                     single_event_per_run=single_event_per_run)
        self.trials = []
        self.blocks = []
        self.streams = {}
        self._block_probs = []
        self._block_times = []
        self._block = 0

    # sample generation -------------------------------------------------------
    def _advance(self, n: int) -> list:
        chunk = self.background.next(n).copy() if self.profile.noise_level > 0 \
            else np.zeros((self.config.n_channels, n))
        self.active_onsets = [o for o in self.active_onsets
                              if o + template_span(self.profile, self.config) > self.rec.now]
        _add_templates(chunk, self.rec.n, self.active_onsets, self.profile, self.config)
        raw = self.rec.append(chunk)
        if self.detector is None:
            return []
        probs, times, events = self.detector.push(raw)
        self._block_probs.append(probs)
        self._block_times.append(times)
        for ev in events:
            self.rec.log(ev.time, "detection", block=self._block, probability=ev.probability)
        return events

    def _run_for(self, n_samples: int) -> None:
        step = self.model.stride_samples if self.model is not None else n_samples
        target = self.rec.n + n_samples
        while self.rec.n < target:
            self._advance(min(step, target - self.rec.n))

    # trials ------------------------------------------------------------------
    def simulate_trial(self, plan: TrialPlan, trial_id: int) -> Trial:
        cfg, fs = self.config, self.config.sample_rate
        start_sample = self.rec.n
        start = start_sample / fs
        if self.detector is not None:
            self.detector.rearm()
        self.rec.log(start, "trial_start", trial=trial_id, block=self._block,
                     kind=plan.kind, target=plan.target)
        trial = Trial(trial_id, self._block, plan.kind, plan.target, start, start,
                      distance=plan.error_distance)
        if plan.kind == "error":
            onset = start + plan.error_distance / cfg.robot_speed
            trial.onset = onset
            trial.marker = onset - cfg.marker_delay
            self.rec.log(trial.marker, "error_marker", trial=trial_id)
            self.rec.log(onset, "error_onset", trial=trial_id)
            self.active_onsets.append(onset)
            limit = cfg.trial_timeout
        else:
            limit = truncated_normal(self.timing_rng, cfg.correct_duration_mean,
                                     cfg.correct_duration_sd, cfg.correct_duration_min,
                                     cfg.correct_duration_max)
        end_sample = start_sample + int(round(limit * fs))
        step = self.model.stride_samples if self.model is not None else end_sample - start_sample
        while self.rec.n < end_sample:
            events = self._advance(min(step, end_sample - self.rec.n))
            if plan.kind != "error" or trial.corrected:
                continue
            for ev in events:
                if ev.time > trial.onset:
                    trial.corrected = True
                    resume = truncated_normal(self.timing_rng, cfg.resume_duration_mean,
                                              cfg.resume_duration_sd, cfg.resume_duration_min,
                                              cfg.trial_timeout)
                    stop = min(ev.time - start + resume,
                               cfg.trial_timeout + cfg.detection_extension)
                    end_sample = start_sample + int(round(stop * fs))
                    break
        trial.end = self.rec.n / fs
        trial.feedback = "red" if plan.kind == "error" and not trial.corrected else "green"
        self.rec.log(trial.end, "trial_end", trial=trial_id)
        self.rec.log(trial.end, "feedback", trial=trial_id, colour=trial.feedback)
        self.trials.append(trial)
        return trial

    def run_block(self, number: int, tau: float) -> Block:
        fs = self.config.sample_rate
        self._block = number
        start_sample = self.rec.n
        if self.detector is not None:
            self.detector.tau = tau
            self.detector.reset(start_time=start_sample / fs)
        self._block_probs, self._block_times = [], []
        self.rec.log(start_sample / fs, "block_start", block=number, tau=tau)
        gap = int(round(self.config.inter_trial_gap * fs))
        self._run_for(gap)
        first_id = len(self.trials)
        for i, plan in enumerate(plan_block(self.plan_rng, self.config)):
            self.simulate_trial(plan, first_id + i)
            self._run_for(gap)
        block = Block(number, start_sample, self.rec.n, tau)
        self.rec.log(self.rec.n / fs, "block_end", block=number)
        if self.detector is not None:
            self.streams[number] = ProbabilityStream(
                np.concatenate(self._block_times), np.concatenate(self._block_probs))
        self.blocks.append(block)
        return block

    def run(self, n_blocks: int | None = None) -> SessionLog:
        cfg = self.config
        n_blocks = cfg.n_blocks if n_blocks is None else n_blocks
        tau = cfg.tau0
        grid = tau_grid(cfg.grid_step)
        for b in range(1, n_blocks + 1):
            if b > 1 and self.adapt and self.model is not None and b - 1 <= cfg.adapt_blocks:
                done = list(range(1, b))
                tau, _ = adapt_threshold([self.streams[d] for d in done],
                                         [t for t in self.trials if t.block in done],
                                         grid, cfg.smoothing)
                self.rec.log(self.rec.n / cfg.sample_rate, "threshold", block=b, tau=tau)
            self.run_block(b, tau)
        for tid, t in virtual_onsets(self.trials).items():
            self.rec.log(t, "virtual_onset", trial=tid)
        events = sorted(self.rec.events, key=lambda e: e["t"])
        return SessionLog(
            participant=self.profile.to_dict(),
            sample_rate=cfg.sample_rate,
            channel_names=list(CHANNEL_NAMES),
            eeg=self.rec.data[:self.rec.n].copy(),
            events=events,
            blocks=self.blocks,
            trials=self.trials,
            streams=self.streams,
        )


def run_session(profile: ParticipantProfile, model=None, config: Config = DEFAULT,
                n_blocks: int | None = None, adapt: bool = True) -> SessionLog:
    return SessionSimulator(profile, model, config, adapt).run(n_blocks)


def run_closed_loop_sessions(profiles, model, config: Config = DEFAULT) -> list:
    """Full schedule for every profile: the initial threshold in block 1, a
    re-optimised threshold after each of the first ``adapt_blocks`` blocks,
    fixed afterwards."""
    return [run_session(p, model, config) for p in profiles]


# --- generic-model corpus ------------------------------------------------------

def session_training_epochs(session: SessionLog, config: Config = DEFAULT) -> EpochSet:
    """Causally filtered epochs of an open- or closed-loop session."""
    sos = design_butterworth_bandpass(config.filter_spec())
    vo = virtual_onsets(session.trials)
    sets = []
    for b in session.blocks:
        raw = session.block_raw(b.block)
        sig = apply_causal(FilterState(sos, raw.shape[0]), raw)
        t0 = b.start_sample / session.sample_rate
        trials = session.trials_in([b.block])
        onsets = [(t.onset if t.is_error else vo[t.trial_id]) - t0 for t in trials]
        labels = [ERROR if t.is_error else CORRECT for t in trials]
        ep = extract_epochs(sig, session.sample_rate, onsets, labels,
                            session.participant["participant_id"],
                            [t.trial_id for t in trials], config.epoch_offset, config.window)
        sets.append(ep)
    return EpochSet.concatenate(sets)


def training_profiles(seed: int, config: Config = DEFAULT) -> list:
    rng = np.random.default_rng([seed, 1])
    profiles = []
    for i in range(config.n_training_participants):
        scale = max(0.0, 1.0 + config.amplitude_jitter * rng.standard_normal())
        profiles.append(make_profile(f"T{i + 1:02d}", int(rng.integers(2 ** 31)), "control",
                                     scale, config))
    return profiles


def training_corpus(seed: int, config: Config = DEFAULT) -> EpochSet:
    """Epochs of open-loop synthetic donors for the generic classifier."""
    sets = []
    for profile in training_profiles(seed, config):
        session = run_session(profile, None, config)
        sets.append(session_training_epochs(session, config))
    return EpochSet.concatenate(sets)
