"""Seedable sampling of click records from exact outcome distributions.

Randomness is counter based: trial ``i`` of setting ``s`` always draws the same
uniform for a given master seed, however the trials are split across workers.
Trials are grouped into fixed blocks of ``BLOCK`` draws; block ``k`` of setting
``s`` is a Philox stream keyed by the master seed with counter ``(0, 0, k, s)``.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .measurement import CountsTable, SettingCounts
from .source import ChainConfig, chain_distributions

BLOCK = 1 << 16
CSV_HEADER = ("trial_index", "setting_id", "pattern")


class RecordFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RngSpec:
    master_seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def block_uniforms(self, setting_id: int, block: int, size: int = BLOCK) -> np.ndarray:
        """First ``size`` uniforms of one block stream."""
        bitgen = np.random.Philox(key=int(self.master_seed), counter=[0, 0, block, setting_id])
        return np.random.Generator(bitgen).random(size)

    def uniforms(self, setting_id: int, start: int, stop: int, workers: int = 1) -> np.ndarray:
        """Uniform draws for trials ``start .. stop-1``."""
        if stop <= start:
            return np.empty(0)
        first, last = start // BLOCK, (stop - 1) // BLOCK

        def one(block):
            lo = max(start - block * BLOCK, 0)
            hi = min(stop - block * BLOCK, BLOCK)
            return self.block_uniforms(setting_id, block, hi)[lo:hi]

        blocks = range(first, last + 1)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(one, blocks))
        else:
            parts = [one(b) for b in blocks]
        return np.concatenate(parts)


class ClickRecord(NamedTuple):
    trial_index: int
    setting_id: int
    pattern: int  # 4-bit mask, AS+ AS- S+ S- from most to least significant


@dataclass(frozen=True)
class ClickRecords:
    """Column-oriented batch of :class:`ClickRecord`."""

    trial_index: np.ndarray
    setting_id: np.ndarray
    pattern: np.ndarray

    def __len__(self):
        return len(self.trial_index)

    def __iter__(self) -> Iterator[ClickRecord]:
        for t, s, p in zip(self.trial_index.tolist(), self.setting_id.tolist(), self.pattern.tolist()):
            yield ClickRecord(t, s, p)

    @classmethod
    def empty(cls) -> "ClickRecords":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z.copy(), np.empty(0, dtype=np.uint8))

    @classmethod
    def concat(cls, parts: Sequence["ClickRecords"]) -> "ClickRecords":
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.trial_index for p in parts]),
                   np.concatenate([p.setting_id for p in parts]),
                   np.concatenate([p.pattern for p in parts]))

    def histogram(self, setting_id: int | None = None) -> np.ndarray:
        pat = self.pattern if setting_id is None else self.pattern[self.setting_id == setting_id]
        return np.bincount(pat, minlength=16)

    def setting_ids(self) -> list[int]:
        return sorted(set(self.setting_id.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            if len(self):
                rows = np.column_stack([self.trial_index, self.setting_id, self.pattern.astype(np.int64)])
                buf = io.StringIO()
                np.savetxt(buf, rows, fmt="%d", delimiter=",")
                fh.write(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "ClickRecords":
        text = Path(path).read_text()
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise RecordFormatError("line 1: empty record file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise RecordFormatError(f"line 1: expected header {','.join(CSV_HEADER)}")
        cols: list[list[int]] = [[], [], []]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise RecordFormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                t, s, p = (int(x) for x in row)
            except ValueError:
                raise RecordFormatError(f"line {lineno}: non-integer field") from None
            if t < 0 or s < 0 or not 0 <= p < 16:
                raise RecordFormatError(f"line {lineno}: field out of range")
            cols[0].append(t)
            cols[1].append(s)
            cols[2].append(p)
        return cls(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                   np.array(cols[2], dtype=np.uint8))


def _check_distribution(dist) -> np.ndarray:
    p = np.asarray(dist, dtype=float).ravel()
    if p.size != 16:
        raise ValueError(f"distribution must have 16 entries, got {p.size}")
    if np.any(p < -1e-15) or not np.isfinite(p).all():
        raise ValueError("distribution has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"distribution sums to {p.sum()}, not 1")
    return np.clip(p, 0.0, None)


def sample_trials(dist, n: int, setting_id: int, rng: RngSpec, start: int = 0,
                  workers: int = 1) -> ClickRecords:
    """Draw trials ``start .. start+n-1`` of one setting from a 16-entry table."""
    p = _check_distribution(dist)
    if n < 0:
        raise ValueError("trial count must be >= 0")
    if n == 0:
        return ClickRecords.empty()
    cdf = np.cumsum(p)
    # rounding in the cumulative sum must not leak draws past the last occupied bin
    cdf[np.flatnonzero(p)[-1]:] = np.inf
    u = rng.uniforms(setting_id, start, start + n, workers)
    pattern = np.searchsorted(cdf, u, side="right").astype(np.uint8)
    idx = np.arange(start, start + n, dtype=np.int64)
    return ClickRecords(idx, np.full(n, setting_id, dtype=np.int64), pattern)


def counts_from_records(records: ClickRecords, settings: dict[int, tuple[float, float]]) -> CountsTable:
    """Assemble a counts table; ``settings`` maps setting id to basis angles (rad)."""
    table = CountsTable()
    for sid in records.setting_ids():
        if sid not in settings:
            raise KeyError(f"setting id {sid} has no angle assignment")
        a, b = settings[sid]
        table.settings[sid] = SettingCounts.from_histogram(records.histogram(sid), a, b)
    return table


def run_experiment(cfg: ChainConfig, settings: Sequence[tuple[float, float]], n_per_setting: int,
                   rng: RngSpec, tau: float = 0.5, workers: int = 1,
                   return_records: bool = False):
    """Sample every setting (ids in list order) and tabulate the counts."""
    dists = chain_distributions(cfg, tau, settings)
    parts = [sample_trials(d, n_per_setting, sid, rng, workers=workers) for sid, d in enumerate(dists)]
    records = ClickRecords.concat(parts)
    table = counts_from_records(records, dict(enumerate(settings)))
    return (table, records) if return_records else table
