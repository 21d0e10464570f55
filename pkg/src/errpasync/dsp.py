"""Butterworth bandpass design and application.

The bandpass of order ``N`` is the cascade of an order-``N`` highpass at the
low cutoff and an order-``N`` lowpass at the high cutoff, so the complete
filter has ``2N`` poles (8 for the default order 4). Both halves come from
the analog Butterworth prototype mapped by the bilinear transform with
frequency pre-warping, which puts the -3 dB point of each half exactly at
its cutoff.

Filters are kept as cascades of second-order sections (rows of
``[b0, b1, b2, 1, a1, a2]``). Sample streams are laid out as
``(channels, samples)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal


class FilterDesignError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    low_cut: float = 1.0
    high_cut: float = 10.0
    order: int = 4
    sample_rate: float = 500.0

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise FilterDesignError(f"order must be a positive integer, got {self.order}")
        nyquist = self.sample_rate / 2.0
        if not (0.0 < self.low_cut < self.high_cut < nyquist):
            raise FilterDesignError(
                f"need 0 < low_cut < high_cut < {nyquist} Hz, "
                f"got low_cut={self.low_cut}, high_cut={self.high_cut}"
            )

    def to_dict(self) -> dict:
        return {
            "low_cut": self.low_cut,
            "high_cut": self.high_cut,
            "order": self.order,
            "sample_rate": self.sample_rate,
        }


def design_butterworth_bandpass(spec: FilterSpec) -> np.ndarray:
    """Second-order sections of the highpass/lowpass Butterworth cascade.

    Returns an array of shape ``(n_sections, 6)``; for order 4 there are
    two highpass sections followed by two lowpass sections.
    """
    high = signal.butter(spec.order, spec.low_cut, btype="highpass",
                         fs=spec.sample_rate, output="sos")
    low = signal.butter(spec.order, spec.high_cut, btype="lowpass",
                        fs=spec.sample_rate, output="sos")
    sos = np.vstack([high, low])
    if not np.all(np.isfinite(sos)):
        raise FilterDesignError("non-finite filter coefficients")
    return sos


def frequency_response(sos: np.ndarray, freqs, sample_rate: float) -> np.ndarray:
    """Complex response of the cascade at ``freqs`` (Hz)."""
    _, h = signal.sosfreqz(sos, worN=np.atleast_1d(np.asarray(freqs, dtype=float)),
                           fs=sample_rate)
    return h


class FilterState:
    """Delay-line memory of a section cascade for a multichannel stream.

    Single owner: one state per stream. The memory has shape
    ``(n_sections, n_channels, 2)``.
    """

    def __init__(self, sos: np.ndarray, n_channels: int):
        self.sos = np.asarray(sos, dtype=float)
        self.n_channels = int(n_channels)
        self.zi = np.zeros((self.sos.shape[0], self.n_channels, 2))

    @property
    def size(self) -> int:
        return self.zi.size

    def reset(self) -> None:
        self.zi[...] = 0.0


def apply_causal(state: FilterState, chunk: np.ndarray) -> np.ndarray:
    """Filter a ``(channels, samples)`` chunk and advance ``state``.

    The recurrence runs sample by sample, so splitting a stream into any
    sequence of chunks gives bit-identical output to a single pass.
    """
    chunk = np.asarray(chunk, dtype=float)
    if chunk.ndim != 2 or chunk.shape[0] != state.n_channels:
        raise ValueError(
            f"expected chunk with {state.n_channels} channels, got shape {chunk.shape}"
        )
    if chunk.shape[1] == 0:
        return chunk.copy()
    out, state.zi = signal.sosfilt(state.sos, chunk, axis=-1, zi=state.zi)
    return out


def apply_zero_phase(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Offline zero-phase filtering along the last axis.

    The signal is reflect-padded by ``3 * order`` samples. The result is the
    mean of the forward-backward and the backward-forward passes, which keeps
    the operator exactly symmetric under time reversal (edge transients of
    the two orderings mirror each other).
    """
    x = np.asarray(x, dtype=float)
    padlen = 3 * spec.order
    if x.shape[-1] <= padlen:
        raise ValueError(
            f"signal of {x.shape[-1]} samples is too short for zero-phase "
            f"filtering (need more than {padlen})"
        )
    sos = design_butterworth_bandpass(spec)
    fb = signal.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen)
    xr = np.flip(x, axis=-1)
    bf = np.flip(signal.sosfiltfilt(sos, xr, axis=-1, padtype="even", padlen=padlen), axis=-1)
    return 0.5 * (fb + bf)
