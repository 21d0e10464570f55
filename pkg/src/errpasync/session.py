"""Session records shared by the simulator, the evaluation code and the archive."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

# 61-electrode 10-10 montage on a schematic grid. Coordinates are in units of
# the inter-electrode spacing: x grows to the right, y towards the nose.
_ROWS = [
    (4, ["Fp1", "Fpz", "Fp2"], [-2, 0, 2]),
    (3, ["AF7", "AF3", "AFz", "AF4", "AF8"], [-4, -2, 0, 2, 4]),
    (2, ["F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8"], list(range(-4, 5))),
    (1, ["FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8"], list(range(-4, 5))),
    (0, ["T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8"], list(range(-4, 5))),
    (-1, ["TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8"], list(range(-4, 5))),
    (-2, ["P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8"], list(range(-4, 5))),
    (-3, ["PO7", "PO3", "POz", "PO4", "PO8"], [-4, -2, 0, 2, 4]),
    (-4, ["O1", "Oz", "O2"], [-2, 0, 2]),
]

CHANNEL_NAMES = [name for _, names, _ in _ROWS for name in names]
CHANNEL_POSITIONS = np.array(
    [(x, y) for y, names, xs in _ROWS for x in xs], dtype=float
)
FCZ = CHANNEL_NAMES.index("FCz")


def distance_from(channel: int, positions: np.ndarray = CHANNEL_POSITIONS) -> np.ndarray:
    return np.hypot(*(positions - positions[channel]).T)


@dataclass
class Trial:
    trial_id: int
    block: int
    kind: str                     # "correct" | "error"
    target: str                   # "left" | "right"
    start: float
    end: float
    distance: float | None = None
    marker: float | None = None   # recorded error marker
    onset: float | None = None    # marker + robot delay
    feedback: str = ""            # "green" | "red"
    corrected: bool = False       # error trial rescued by a post-onset detection

    @property
    def is_error(self) -> bool:
        return self.kind == "error"

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    block: int
    start_sample: int
    end_sample: int
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbabilityStream:
    """Per-window error probabilities of one block, with window end times."""

    times: np.ndarray
    probabilities: np.ndarray


@dataclass
class SessionLog:
    """Raw samples, markers and trial bookkeeping of one participant.

    ``eeg`` is frame-major ``(n_frames, n_channels)`` float32 in microvolts;
    the detector saw exactly these values.
    """

    participant: dict
    sample_rate: float
    channel_names: list
    eeg: np.ndarray
    events: list
    blocks: list
    trials: list
    streams: dict = field(default_factory=dict)   # block -> ProbabilityStream

    @property
    def n_frames(self) -> int:
        return self.eeg.shape[0]

    def block(self, number: int) -> Block:
        for b in self.blocks:
            if b.block == number:
                return b
        raise KeyError(f"no block {number}")

    def block_raw(self, number: int) -> np.ndarray:
        """Raw samples of one block as ``(channels, samples)`` float64."""
        b = self.block(number)
        return np.asarray(self.eeg[b.start_sample:b.end_sample].T, dtype=float)

    def block_start_time(self, number: int) -> float:
        return self.block(number).start_sample / self.sample_rate

    def trials_in(self, blocks=None) -> list:
        if blocks is None:
            return list(self.trials)
        blocks = set(blocks)
        return [t for t in self.trials if t.block in blocks]

    def detection_times(self, block: int | None = None) -> np.ndarray:
        times = [e["t"] for e in self.events if e["kind"] == "detection"
                 and (block is None or e["payload"].get("block") == block)]
        return np.asarray(times, dtype=float)

    def thresholds(self) -> dict:
        return {b.block: b.tau for b in self.blocks}


def parse_blocks(spec: str | None, available) -> list:
    """``"4-8"`` or ``"1,3,5"`` to a sorted list restricted to ``available``."""
    available = sorted(available)
    if not spec:
        return available
    chosen = set()
    for part in str(spec).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            chosen.update(range(int(lo), int(hi) + 1))
        elif part:
            chosen.add(int(part))
    missing = chosen - set(available)
    if missing:
        raise ValueError(f"blocks {sorted(missing)} are not in the session")
    return sorted(chosen)
