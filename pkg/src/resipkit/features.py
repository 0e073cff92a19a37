"""Per-flow statistical feature vectors over exponentially spaced packet windows.

For a cap ``N`` the window sizes are ``2, 4, 8, ..., N``. Each window ``i``
summarises the first ``i`` payload packets of a direction. When a direction
has fewer packets than ``i`` the value of the largest window that still fits
is repeated, so every flow yields a vector of the same length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .capture import ALL, DOWN, UP, Flow

DIRECTIONS = (UP, DOWN, ALL)
STATS = ("mean", "min", "max", "std")
MIN_SPAN = 1e-6


def index_sequence(n: int) -> list[int]:
    out, i = [], 2
    while i <= n:
        out.append(i)
        i *= 2
    return out


def _valid_cap(n) -> bool:
    return isinstance(n, int) and not isinstance(n, bool) and (n == 0 or (n >= 2 and n & (n - 1) == 0))


@dataclass(frozen=True)
class FeatureConfig:
    n_up: int = 8
    n_down: int = 8
    n_all: int = 8

    def __post_init__(self):
        for name in ("n_up", "n_down", "n_all"):
            v = getattr(self, name)
            if not _valid_cap(v):
                raise ValueError(f"{name} must be 0 or a power of two >= 2, got {v!r}")

    @classmethod
    def parse(cls, text: str) -> "FeatureConfig":
        """``"8,8,8"`` -> FeatureConfig(8, 8, 8)."""
        parts = [p.strip() for p in text.replace("_", ",").split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated caps, got {text!r}")
        return cls(*(int(p) for p in parts))

    def cap(self, direction: str) -> int:
        return {UP: self.n_up, DOWN: self.n_down, ALL: self.n_all}[direction]

    def as_dict(self) -> dict:
        return {"n_up": self.n_up, "n_down": self.n_down, "n_all": self.n_all}

    def __str__(self):
        return f"{self.n_up},{self.n_down},{self.n_all}"


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    names: tuple[str, ...]
    config: FeatureConfig
    # direction -> had at least one payload packet; not part of model input
    valid: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))


def vector_length(cfg: FeatureConfig) -> int:
    return len(index_sequence(cfg.n_up)) * 11 + len(index_sequence(cfg.n_down)) * 10 + len(index_sequence(cfg.n_all)) * 10


def feature_names(cfg: FeatureConfig) -> list[str]:
    names = [f"UpRatio_{i}" for i in index_sequence(cfg.n_up)]
    for d in DIRECTIONS:
        names += [f"PAT_{d}_{i}_{s}" for i in index_sequence(cfg.cap(d)) for s in STATS]
    for d in DIRECTIONS:
        for i in index_sequence(cfg.cap(d)):
            names += [f"BPS_{d}_{i}", f"PPS_{d}_{i}"]
    for d in DIRECTIONS:
        names += [f"PS_{d}_{i}_{s}" for i in index_sequence(cfg.cap(d)) for s in STATS]
    return names


def effective_window(i: int, available: int) -> int:
    """Number of packets actually summarised for window ``i``.

    Zero means the direction has no packets at all.
    """
    if available >= i:
        return i
    fitting = [k for k in index_sequence(i) if k <= available]
    return fitting[-1] if fitting else available


class _Running:
    """Welford accumulator with min/max."""

    __slots__ = ("n", "mean", "m2", "lo", "hi")

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0
        self.lo, self.hi = math.inf, -math.inf

    def push(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)
        self.lo = min(self.lo, x)
        self.hi = max(self.hi, x)

    def snapshot(self) -> tuple[float, float, float, float]:
        if self.n == 0:
            return (0.0, 0.0, 0.0, 0.0)
        return (self.mean, self.lo, self.hi, math.sqrt(max(self.m2, 0.0) / self.n))


@dataclass
class _Prefix:
    pat: tuple[float, ...]
    bps: float
    pps: float
    ps: tuple[float, ...]


def _prefixes(series: list[tuple[float, int]], upto: int) -> dict[int, _Prefix]:
    """Summaries for every prefix length 1..upto, computed in one pass."""
    out = {}
    gaps, sizes = _Running(), _Running()
    total = 0
    for k, (ts, size) in enumerate(series[:upto], start=1):
        if k > 1:
            gaps.push(float(ts - series[k - 2][0]))
        sizes.push(float(size))
        total += size
        span = max(ts - series[0][0], MIN_SPAN)
        out[k] = _Prefix(gaps.snapshot(), total / span, k / span, sizes.snapshot())
    return out


def _series(flow: Flow, direction: str) -> list[tuple[float, int]]:
    return [(p.timestamp, len(p.payload)) for p in flow.series(direction)]


def up_ratio(flow: Flow, i: int) -> float:
    """Upstream share of bytes seen by the ``i``-th upstream packet (padded)."""
    if i < 1:
        raise ValueError(f"window index must be >= 1, got {i}")
    up = _series(flow, UP)
    if not up:
        return 0.0
    k = effective_window(i, len(up))
    return _up_ratios(up, _series(flow, DOWN), [k])[k]


def _up_ratios(up, down, windows) -> dict[int, float]:
    out = {}
    want = sorted(set(windows))
    up_len, down_len, j = 0, 0, 0
    for k, (ts, size) in enumerate(up[: want[-1]], start=1):
        up_len += size
        while j < len(down) and down[j][0] <= ts:
            down_len += down[j][1]
            j += 1
        if k in want:
            total = up_len + down_len
            out[k] = up_len / total if total else 0.0
    return out


def extract_features(flow: Flow, cfg: FeatureConfig) -> FeatureVector:
    series = {d: _series(flow, d) for d in DIRECTIONS}
    if not series[ALL]:
        raise ValueError(f"flow {flow.flow_id} has no payload packets")
    valid = {d: bool(series[d]) for d in DIRECTIONS}
    windows = {d: [effective_window(i, len(series[d])) for i in index_sequence(cfg.cap(d))] for d in DIRECTIONS}
    prefixes = {d: _prefixes(series[d], max(windows[d], default=0)) for d in DIRECTIONS}

    def at(d, k) -> _Prefix:
        return prefixes[d].get(k) or _Prefix((0.0,) * 4, 0.0, 0.0, (0.0,) * 4)

    values: list[float] = []
    if windows[UP]:
        ratios = _up_ratios(series[UP], series[DOWN], windows[UP]) if series[UP] else {}
        values += [ratios.get(k, 0.0) for k in windows[UP]]
    for d in DIRECTIONS:
        for k in windows[d]:
            values += at(d, k).pat
    for d in DIRECTIONS:
        for k in windows[d]:
            p = at(d, k)
            values += [p.bps, p.pps]
    for d in DIRECTIONS:
        for k in windows[d]:
            values += at(d, k).ps
    return FeatureVector(tuple(values), tuple(feature_names(cfg)), cfg, valid)


# -- CSV matrix ----------------------------------------------------------------


def write_feature_csv(rows: Iterable[tuple[str, FeatureVector, int | None]], fh: IO[str], cfg: FeatureConfig) -> int:
    """Rows of ``(flow_id, vector, label)``; label may be None. Returns row count."""
    names = feature_names(cfg)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["flow_id", "label", *names])
    n = 0
    for flow_id, fv, label in rows:
        if list(fv.names) != names:
            raise ValueError(f"vector for {flow_id} was built under {fv.config}, not {cfg}")
        w.writerow([flow_id, "" if label is None else int(label), *(repr(float(v)) for v in fv.values)])
        n += 1
    return n


@dataclass
class FeatureMatrix:
    ids: list[str]
    X: np.ndarray
    y: np.ndarray | None
    names: list[str]
    config: FeatureConfig


def config_from_names(names: list[str]) -> FeatureConfig:
    caps = {}
    for d in DIRECTIONS:
        sizes = [int(n.split("_")[2]) for n in names if n.startswith(f"PS_{d}_")]
        caps[d] = max(sizes, default=0)
    cfg = FeatureConfig(caps[UP], caps[DOWN], caps[ALL])
    if feature_names(cfg) != list(names):
        raise ValueError("feature columns do not follow the canonical layout")
    return cfg


def read_feature_csv(fh: IO[str]) -> FeatureMatrix:
    r = csv.reader(fh)
    header = next(r, None)
    if not header or header[:2] != ["flow_id", "label"]:
        raise ValueError("feature CSV must start with flow_id,label columns")
    names = header[2:]
    cfg = config_from_names(names)
    ids, rows, labels = [], [], []
    for lineno, row in enumerate(r, start=2):
        if len(row) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        labels.append(row[1])
        rows.append([float(v) for v in row[2:]])
    X = np.asarray(rows, dtype=float).reshape(len(rows), len(names))
    y = None
    if labels and all(lab != "" for lab in labels):
        y = np.asarray([int(lab) for lab in labels], dtype=int)
    return FeatureMatrix(ids, X, y, names, cfg)
