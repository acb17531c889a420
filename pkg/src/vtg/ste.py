"""Sequence-time embedding.

Each visual token of frame ``i`` at time ``t`` gets ``W_s[i] + W_t[t]`` added.
``W_s`` is indexed by frame order, ``W_t`` by the timestamp rounded to the
nearest second.  ``W_t`` starts at exactly zero, so a fresh table reduces to a
plain sequence embedding.  At test time, rows that never received a gradient are
replaced by a linear blend of the nearest trained rows on either side.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TIME_ROWS = 8192
DEFAULT_TOKENS_PER_FRAME = 32


@dataclass
class TokenGrid:
    """``values`` has shape (frames, tokens_per_frame, d)."""

    values: np.ndarray
    frame_times: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"token grid must be 3-D (frames, tokens, d), got {self.values.shape}")
        if self.frame_times.shape != (self.values.shape[0],):
            raise ValueError(
                f"{self.values.shape[0]} frames but {self.frame_times.shape[0]} frame times"
            )
        if np.any(np.diff(self.frame_times) < 0):
            raise ValueError("frame_times must be non-decreasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("token grid contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.d)


@dataclass
class SteTable:
    seq_weight: np.ndarray  # W_s, (max_frames, d)
    time_weight: np.ndarray  # W_t, (time_rows, d)
    trained: set = field(default_factory=set)

    @classmethod
    def create(cls, max_frames: int, d: int, time_rows: int = DEFAULT_TIME_ROWS, rng=None, scale=0.02):
        """Random sequence rows, all-zero time rows."""
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, scale, size=(max_frames, d)), np.zeros((time_rows, d)))

    def __post_init__(self):
        self.trained = set(int(t) for t in self.trained)
        self._sorted = None
        if self.seq_weight.shape[1] != self.time_weight.shape[1]:
            raise ValueError("sequence and time tables must share the embedding width")
        bad = [t for t in self.trained if not 0 <= t < self.time_rows]
        if bad:
            raise ValueError(f"trained timestamps outside [0, {self.time_rows}): {bad[:5]}")

    @property
    def time_rows(self) -> int:
        return self.time_weight.shape[0]

    @property
    def max_frames(self) -> int:
        return self.seq_weight.shape[0]

    @property
    def d(self) -> int:
        return self.seq_weight.shape[1]

    def mark_trained(self, rows) -> None:
        self.trained.update(int(r) for r in rows)
        self._sorted = None

    def sorted_trained(self) -> list[int]:
        if self._sorted is None or len(self._sorted) != len(self.trained):
            self._sorted = sorted(self.trained)
        return self._sorted

    def time_row(self, t: float) -> int:
        if not 0 <= t < self.time_rows:
            raise ValueError(f"timestamp {t} outside the time table range [0, {self.time_rows})")
        return min(int(np.floor(t + 0.5)), self.time_rows - 1)

    def time_weights(self, t: float, mode: str = "test") -> list[tuple[int, float]]:
        """Rows of ``W_t`` and their blend weights for timestamp ``t``.

        Train mode always uses the rounded row.  Test mode uses the rounded row
        when it is trained, else interpolates between the trained neighbours
        ``t_l < t < t_r`` (weight (t_r - t)/(t_r - t_l) on ``t_l``), clamping to
        the nearest trained row outside the trained hull.
        """
        row = self.time_row(t)
        if mode == "train" or row in self.trained:
            return [(row, 1.0)]
        if mode != "test":
            raise ValueError(f"unknown mode {mode!r}")
        known = self.sorted_trained()
        if not known:
            return []
        k = bisect.bisect_left(known, t)
        # known[k-1] < t <= known[k]
        if k == 0:
            return [(known[0], 1.0)]
        if k == len(known):
            return [(known[-1], 1.0)]
        lo, hi = known[k - 1], known[k]
        if hi == t:
            return [(hi, 1.0)]
        span = hi - lo
        return [(lo, (hi - t) / span), (hi, (t - lo) / span)]

    def to_dict(self) -> dict:
        return {
            "seq_weight": self.seq_weight.tolist(),
            "time_weight": self.time_weight.tolist(),
            "trained": sorted(self.trained),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SteTable":
        return cls(
            np.asarray(d["seq_weight"], dtype=np.float64),
            np.asarray(d["time_weight"], dtype=np.float64),
            set(d["trained"]),
        )

    def save(self, path) -> None:
        # float repr in json round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SteTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lookup_time(table: SteTable, t: float) -> np.ndarray:
    """Test-time absolute-time embedding for ``t`` (zero vector if nothing is trained)."""
    out = np.zeros(table.d)
    for row, w in table.time_weights(t, "test"):
        out = out + w * table.time_weight[row]
    return out


def time_embeddings(table: SteTable, frame_times, mode: str) -> np.ndarray:
    out = np.zeros((len(frame_times), table.d))
    for i, t in enumerate(frame_times):
        for row, w in table.time_weights(float(t), mode):
            out[i] += w * table.time_weight[row]
    return out


def apply(grid: TokenGrid, table: SteTable, mode: str = "train") -> TokenGrid:
    """Add sequence and absolute-time embeddings to every token of every frame."""
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    if grid.frames > table.max_frames:
        raise ValueError(f"{grid.frames} frames exceed the sequence table size {table.max_frames}")
    if grid.d != table.d:
        raise ValueError(f"grid width {grid.d} != table width {table.d}")
    te = time_embeddings(table, grid.frame_times, mode)
    if mode == "train":
        table.mark_trained(table.time_row(t) for t in grid.frame_times)
    values = grid.values + table.seq_weight[: grid.frames][:, None, :] + te[:, None, :]
    return TokenGrid(values, grid.frame_times.copy())


def apply_sequence_only(grid: TokenGrid, table: SteTable) -> TokenGrid:
    values = grid.values + table.seq_weight[: grid.frames][:, None, :]
    return TokenGrid(values, grid.frame_times.copy())


@dataclass
class SteGrads:
    seq_rows: dict  # frame index -> (d,) gradient
    time_rows: dict  # W_t row -> (d,) gradient
    tokens: np.ndarray  # gradient w.r.t. the input grid values

    def dense(self, table: SteTable) -> tuple[np.ndarray, np.ndarray]:
        gs = np.zeros_like(table.seq_weight)
        gt = np.zeros_like(table.time_weight)
        for i, g in self.seq_rows.items():
            gs[i] += g
        for r, g in self.time_rows.items():
            gt[r] += g
        return gs, gt


def grad_time_rows(table: SteTable, grid: TokenGrid, upstream, mode: str = "train") -> SteGrads:
    """Backward pass of :func:`apply`: each row collects the sum of upstream grads it fed."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != grid.values.shape:
        raise ValueError(f"upstream shape {upstream.shape} != grid shape {grid.values.shape}")
    per_frame = upstream.sum(axis=1)
    seq = {i: per_frame[i].copy() for i in range(grid.frames)}
    time: dict[int, np.ndarray] = {}
    for i, t in enumerate(grid.frame_times):
        for row, w in table.time_weights(float(t), mode):
            time[row] = time.get(row, 0.0) + w * per_frame[i]
    return SteGrads(seq, time, upstream.copy())
