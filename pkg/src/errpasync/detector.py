"""Asynchronous sliding-window ErrP detection.

A window of ``window_samples`` filtered samples is classified every
``stride_samples`` samples. A detection fires when two consecutive windows
have an error probability strictly above the threshold. By default only one
detection is emitted per maximal supra-threshold run; the run must be broken
by a sub-threshold window before the detector re-arms. The closed loop also
re-arms the detector at every trial start.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dsp import FilterState, apply_causal


@dataclass(frozen=True)
class DetectionEvent:
    time: float          # end of the second supra-threshold window, seconds
    probability: float   # error probability of that window
    window: int          # index of that window since the last reset


def pair_events(above: np.ndarray, single_event_per_run: bool = True,
                rearm: np.ndarray | None = None) -> np.ndarray:
    """Window indices at which the two-consecutive-window rule fires.

    ``rearm`` marks windows before which the detector was re-armed; inside
    a supra-threshold run a re-armed detector fires again at that window.
    """
    above = np.asarray(above, dtype=bool)
    if above.size < 2:
        return np.array([], dtype=int)
    pair = np.zeros_like(above)
    pair[1:] = above[1:] & above[:-1]
    if single_event_per_run:
        # fire only on the first pair of a run: window j-2 must be below
        first = pair.copy()
        first[1:] &= ~pair[:-1]
        if rearm is not None:
            first |= pair & np.asarray(rearm, dtype=bool)
        pair = first
    return np.flatnonzero(pair)


def rearm_mask(times, rearm_times) -> np.ndarray:
    """First window ending strictly after each re-arm instant."""
    times = np.asarray(times, dtype=float)
    mask = np.zeros(times.shape, dtype=bool)
    # window ends and re-arm instants both sit on the sample grid
    idx = np.searchsorted(times, np.asarray(rearm_times, dtype=float) + 1e-9, side="right")
    mask[idx[idx < times.size]] = True
    return mask


def events_at_threshold(probabilities, times, tau: float,
                        single_event_per_run: bool = True, rearm_times=None) -> np.ndarray:
    """Detection times for a stored probability sequence at threshold ``tau``."""
    probabilities = np.asarray(probabilities)
    rearm = None if rearm_times is None else rearm_mask(times, rearm_times)
    idx = pair_events(probabilities > tau, single_event_per_run, rearm)
    return np.asarray(times)[idx]


class Detector:
    """Streaming detector for one multichannel stream.

    ``model`` supplies the filter (``sos``), the window geometry
    (``n_channels``, ``window_samples``, ``stride_samples``, ``sample_rate``)
    and ``window_probability(flat_window)`` on a time-major flattened window.
    ``artifact_removal`` is applied to each raw chunk before filtering.
    """

    def __init__(self, model, tau: float | None = None, single_event_per_run: bool = True,
                 artifact_removal=None, start_time: float = 0.0):
        self.model = model
        self.tau = float(model.threshold if tau is None else tau)
        self.single_event_per_run = single_event_per_run
        self.artifact_removal = artifact_removal
        self.n_channels = model.n_channels
        self.window_samples = model.window_samples
        self.stride_samples = model.stride_samples
        self.sample_rate = float(model.sample_rate)
        self.filter = FilterState(model.sos, self.n_channels)
        self._capacity = 8 * self.window_samples
        self._buf = np.zeros((self._capacity, self.n_channels))
        self._scratch = np.zeros((self.window_samples, self.n_channels))
        self.reset(start_time)

    def reset(self, start_time: float | None = None) -> None:
        if start_time is not None:
            self.start_time = float(start_time)
        self.filter.reset()
        self._buf[...] = 0.0
        self._fill = 0             # rows of _buf in use
        self._buf_origin = 0       # absolute sample index of _buf[0]
        self.n_seen = 0
        self.next_end = self.window_samples
        self.n_windows = 0
        self.prev_above = False
        self.fired_in_run = False
        self.events: list[DetectionEvent] = []

    def rearm(self) -> None:
        """Allow a new event inside the current supra-threshold run.

        Called at every trial start, so each trial can register its own
        first detection.
        """
        self.fired_in_run = False

    def _append(self, rows: np.ndarray) -> None:
        n = rows.shape[0]
        if self._fill + n > self._capacity:
            # every window ending before n_seen has been scored already
            keep = min(self._fill, self.window_samples)
            drop = self._fill - keep
            self._buf[:keep] = self._buf[drop:self._fill]
            self._buf_origin += drop
            self._fill = keep
            if keep + n > self._capacity:
                self._capacity = 2 * (keep + n)
                grown = np.zeros((self._capacity, self.n_channels))
                grown[:keep] = self._buf[:keep]
                self._buf = grown
        self._buf[self._fill:self._fill + n] = rows
        self._fill += n
        self.n_seen += n

    def _step(self, p: float) -> DetectionEvent | None:
        above = p > self.tau
        event = None
        if above and self.prev_above and not (self.single_event_per_run and self.fired_in_run):
            event = DetectionEvent(self.start_time + self.next_end / self.sample_rate,
                                   float(p), self.n_windows)
            self.events.append(event)
            self.fired_in_run = True
        if not above:
            self.fired_in_run = False
        self.prev_above = above
        return event

    def push(self, chunk: np.ndarray):
        """Consume a raw ``(channels, samples)`` chunk.

        Returns ``(probabilities, times, events)`` for the windows completed
        by this chunk.
        """
        chunk = np.asarray(chunk, dtype=float)
        if chunk.ndim != 2 or chunk.shape[0] != self.n_channels:
            raise ValueError(
                f"expected {self.n_channels} channels, got chunk of shape {chunk.shape}"
            )
        if self.artifact_removal is not None:
            chunk = self.artifact_removal(chunk)
        filtered = apply_causal(self.filter, chunk)
        self._append(filtered.T)
        probs, times, events = [], [], []
        while self.next_end <= self.n_seen:
            a = self.next_end - self.window_samples - self._buf_origin
            # Fixed scratch buffer: same memory layout for every window.
            self._scratch[...] = self._buf[a:a + self.window_samples]
            p = float(self.model.window_probability(self._scratch.ravel()))
            probs.append(p)
            times.append(self.start_time + self.next_end / self.sample_rate)
            ev = self._step(p)
            if ev is not None:
                events.append(ev)
            self.n_windows += 1
            self.next_end += self.stride_samples
        return np.asarray(probs), np.asarray(times), events


def replay(model, raw_ct: np.ndarray, tau: float | None = None, start_time: float = 0.0,
           single_event_per_run: bool = True, chunk: int | None = None, rearm_at=()):
    """Run a fresh detector over a whole raw recording.

    ``rearm_at`` lists sample offsets at which the detector is re-armed
    before the sample is consumed. Returns ``(probabilities, times,
    events)``; identical to any streamed run over the same samples.
    """
    det = Detector(model, tau=tau, start_time=start_time,
                   single_event_per_run=single_event_per_run)
    raw_ct = np.asarray(raw_ct)
    n = raw_ct.shape[1]
    step = n if chunk is None else chunk
    cuts = set(range(0, n, max(step, 1))) | {int(a) for a in rearm_at if 0 <= a < n}
    rearm = {int(a) for a in rearm_at}
    bounds = sorted(cuts) + [n]
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if a in rearm:
            det.rearm()
        parts.append(det.push(raw_ct[:, a:b]))
    probs = np.concatenate([p[0] for p in parts]) if parts else np.array([])
    times = np.concatenate([p[1] for p in parts]) if parts else np.array([])
    return probs, times, [e for p in parts for e in p[2]]


def batch_window_scores(filtered_ct: np.ndarray, weights: np.ndarray, biases,
                        window_samples: int, stride_samples: int,
                        batch: int = 512) -> np.ndarray:
    """Linear scores of every stride-aligned window for several models at once.

    ``weights`` is ``(n_channels * window_samples, n_models)`` in channel-major
    layout. The windows match those the streaming detector evaluates on the
    same filtered signal; results agree with it up to floating-point
    summation order. Returns ``(n_windows, n_models)``.
    """
    filtered_ct = np.asarray(filtered_ct)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = weights[:, None]
    n_ch, n_t = filtered_ct.shape
    n_win = 0 if n_t < window_samples else (n_t - window_samples) // stride_samples + 1
    out = np.empty((n_win, weights.shape[1]))
    view = np.lib.stride_tricks.sliding_window_view(filtered_ct, window_samples, axis=1)
    # view: (n_ch, n_t - W + 1, W)
    for start in range(0, n_win, batch):
        stop = min(start + batch, n_win)
        idx = np.arange(start, stop) * stride_samples
        block = view[:, idx, :].transpose(1, 0, 2).reshape(stop - start, -1)
        out[start:stop] = block @ weights
    return out + np.asarray(biases, dtype=float)


def window_end_times(n_windows: int, window_samples: int, stride_samples: int,
                     sample_rate: float, start_time: float = 0.0) -> np.ndarray:
    ends = window_samples + stride_samples * np.arange(n_windows)
    return start_time + ends / sample_rate


def probabilities_from_scores(scores):
    return expit(scores)
