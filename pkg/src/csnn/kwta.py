"""k-winner-take-all activation sparsification.

Three interchangeable selectors are provided:

* ``global_kwta_histogram`` — the 256-bin histogram threshold search used
  after linear layers, with an optional lane count emulating parallel
  histogram builds (lanes never change the result, histograms add),
* ``local_kwta`` — independent exact-k per fixed-size partition, used along
  the channel dimension after convolutions,
* ``topk_fifo_merge`` — a faithful emulation of the 64-element hardware
  path: eight sorted 8-element sub-vectors feeding FIFOs merged through a
  three-level comparator tree.

All selectors compare signed int8 values and break ties lowest-index-first,
so exact-k output is identical across them (and equal to a naive stable
sort); the hardware-style threshold mode, which may pass more than k values,
is available behind ``KwtaConfig.mode = "threshold"``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import INT8_MIN


@dataclass(frozen=True, eq=False)
class SparseActivation:
    """Top-k winners of an activation vector: indices (ascending) + values."""

    length: int
    indices: np.ndarray
    values: np.ndarray
    k: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.int8)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices/values must be matching 1-D arrays")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.length:
                raise ValueError("winner index out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("winner indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def n_winners(self) -> int:
        return int(self.indices.size)

    @property
    def winners(self) -> list[tuple[int, int]]:
        return [(int(i), int(v)) for i, v in zip(self.indices, self.values)]

    def densify(self) -> np.ndarray:
        out = np.zeros(self.length, dtype=np.int8)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class KwtaConfig:
    """Winner count plus selection flavor.

    ``mode="exact"`` returns exactly min(k, length) winners; ``"threshold"``
    mirrors the hardware comparator stage and passes every value >= the
    histogram threshold, which can exceed k on ties.  ``partition`` switches
    to local per-partition competition.
    """

    k: int
    mode: str = "exact"
    partition: int | None = None
    tie_policy: str = "lowest_index"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.mode not in ("exact", "threshold"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tie_policy != "lowest_index":
            raise ValueError("only lowest_index tie policy is supported")
        if self.partition is not None:
            if self.partition <= 0:
                raise ValueError("partition size must be positive")
            if self.k > self.partition:
                raise ValueError("k cannot exceed the partition size")


@dataclass
class SparseMap:
    """Channel-sparse feature map: one SparseActivation per spatial site."""

    height: int
    width: int
    channels: int
    acts: list[SparseActivation] = field(default_factory=list)

    def at(self, y: int, x: int) -> SparseActivation:
        return self.acts[y * self.width + x]

    def densify(self) -> np.ndarray:
        out = np.zeros((self.height, self.width, self.channels), dtype=np.int8)
        for y in range(self.height):
            for x in range(self.width):
                out[y, x] = self.at(y, x).densify()
        return out

    @property
    def total_winners(self) -> int:
        return sum(a.n_winners for a in self.acts)


def _as_int8_vector(values) -> np.ndarray:
    v = np.asarray(values)
    if v.ndim != 1:
        raise ValueError("expected a 1-D activation vector")
    if v.dtype != np.int8:
        if v.size and (v.min() < -128 or v.max() > 127):
            raise ValueError("activation values outside int8 range")
        v = v.astype(np.int8)
    return v


def _histogram_threshold(values: np.ndarray, k: int, lanes: int) -> int:
    """Scan per-lane histograms from the top bin down until k values pass."""
    counts = np.zeros(256, dtype=np.int64)
    bins = values.astype(np.int64) - INT8_MIN
    lane_edges = np.linspace(0, values.size, lanes + 1, dtype=np.int64)
    for lane in range(lanes):
        block = bins[lane_edges[lane] : lane_edges[lane + 1]]
        counts += np.bincount(block, minlength=256)
    accum = 0
    for b in range(255, -1, -1):
        accum += int(counts[b])
        if accum >= k:
            return b + INT8_MIN
    return INT8_MIN  # k exceeds the element count; everything passes


def _exact_k_from_threshold(values: np.ndarray, k: int, threshold: int) -> np.ndarray:
    above = np.flatnonzero(values.astype(np.int64) > threshold)
    at = np.flatnonzero(values.astype(np.int64) == threshold)
    take = k - above.size
    return np.sort(np.concatenate([above, at[:take]]))


def global_kwta_histogram(
    values, cfg: KwtaConfig, lanes: int = 1
) -> SparseActivation:
    """Histogram-search top-k over a whole activation vector.

    A 256-entry histogram of the int8 values is accumulated (``lanes`` > 1
    builds partial histograms over contiguous blocks and merges them, which
    cannot change the result) and read largest-bin-first until the running
    count reaches k; that bin value is the threshold.  Exact mode resolves
    threshold ties lowest-index-first; threshold mode passes every value >=
    the threshold.
    """
    if cfg.partition is not None:
        raise ValueError("global k-WTA takes no partition; use local_kwta")
    if lanes < 1:
        raise ValueError("lanes must be >= 1")
    v = _as_int8_vector(values)
    n = v.size
    if cfg.k == 0:
        return SparseActivation(n, np.empty(0, np.int64), np.empty(0, np.int8), cfg.k)
    if cfg.k >= n:
        if cfg.k > n:
            warnings.warn(
                f"k={cfg.k} exceeds vector length {n}; returning all elements",
                RuntimeWarning,
                stacklevel=2,
            )
        idx = np.arange(n, dtype=np.int64)
        return SparseActivation(n, idx, v, cfg.k)
    threshold = _histogram_threshold(v, cfg.k, lanes)
    if cfg.mode == "threshold":
        idx = np.flatnonzero(v.astype(np.int64) >= threshold)
    else:
        idx = _exact_k_from_threshold(v, cfg.k, threshold)
    return SparseActivation(n, idx.astype(np.int64), v[idx], cfg.k)


def _exact_topk_rows(rows: np.ndarray, k: int) -> np.ndarray:
    """Per-row exact-k column indices, lowest-index tie-break, sorted."""
    n_rows, m = rows.shape
    if k == 0:
        return np.empty((n_rows, 0), dtype=np.int64)
    if k >= m:
        return np.tile(np.arange(m, dtype=np.int64), (n_rows, 1))
    # value*m - column orders by (value desc, column asc) with distinct keys
    keys = rows.astype(np.int64) * m - np.arange(m, dtype=np.int64)
    part = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    return np.sort(part.astype(np.int64), axis=1)


def local_kwta(values, cfg: KwtaConfig) -> SparseActivation:
    """Exact-k independently inside each fixed-size partition.

    Equivalent to concatenating per-partition global k-WTA results; winner
    indices are reported in the coordinates of the full vector.
    """
    if cfg.partition is None:
        raise ValueError("local k-WTA needs a partition size")
    v = _as_int8_vector(values)
    m = cfg.partition
    if v.size % m != 0:
        raise ValueError(f"length {v.size} not divisible by partition {m}")
    rows = v.reshape(-1, m)
    if cfg.mode == "threshold":
        parts = []
        sub_cfg = KwtaConfig(cfg.k, mode="threshold")
        for r, row in enumerate(rows):
            sub = global_kwta_histogram(row, sub_cfg)
            parts.append(sub.indices + r * m)
        idx = np.concatenate(parts) if parts else np.empty(0, np.int64)
    else:
        cols = _exact_topk_rows(rows, cfg.k)
        idx = (cols + (np.arange(rows.shape[0], dtype=np.int64) * m)[:, None]).reshape(-1)
    return SparseActivation(v.size, idx, v[idx], cfg.k)


def kwta_map(feature_map: np.ndarray, k: int) -> SparseMap:
    """Local k-WTA along channels at every spatial site of an (H, W, C) map."""
    fm = np.asarray(feature_map)
    if fm.ndim != 3:
        raise ValueError("expected an (H, W, C) feature map")
    if fm.dtype != np.int8:
        if fm.size and (fm.min() < -128 or fm.max() > 127):
            raise ValueError("feature map values outside int8 range")
        fm = fm.astype(np.int8)
    h, w, c = fm.shape
    flat = fm.reshape(h * w, c)
    cols = _exact_topk_rows(flat, min(k, c))
    acts = [
        SparseActivation(c, cols[i], flat[i, cols[i]].astype(np.int8), k)
        for i in range(h * w)
    ]
    return SparseMap(h, w, c, acts)


def topk_fifo_merge(values, k: int) -> SparseActivation:
    """Emulate the 64-element hardware top-k path.

    The vector is cut into eight 8-element sub-vectors; each goes through a
    sorting network (emulated as a stable descending sort) into a FIFO,
    largest value first.  k rounds of a 3-level comparator tree then pick the
    maximum of the eight FIFO heads (lowest FIFO index on ties) and pop it.
    The output equals exact-k global selection under the same tie policy.
    """
    v = _as_int8_vector(values)
    if v.size != 64:
        raise ValueError("topk_fifo_merge expects a 64-element vector")
    k_eff = min(k, 64)
    # stable descending sort == the 19-comparator depth-6 sorting network
    fifos = []
    for f in range(8):
        sub = v[f * 8 : (f + 1) * 8].astype(np.int64)
        order = np.argsort(-sub, kind="stable")
        fifos.append([(int(sub[j]), f * 8 + int(j)) for j in order])
    heads = [0] * 8
    picked: list[tuple[int, int]] = []
    for _ in range(k_eff):
        # 3-level comparator tree over the 8 FIFO heads
        contenders = [
            (fifos[f][heads[f]], f) for f in range(8) if heads[f] < len(fifos[f])
        ]
        level = contenders
        while len(level) > 1:
            nxt = []
            for i in range(0, len(level) - 1, 2):
                (va, fa), (vb, fb) = level[i], level[i + 1]
                nxt.append((va, fa) if va[0] >= vb[0] else (vb, fb))
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
        (value, index), fifo = level[0]
        picked.append((index, value))
        heads[fifo] += 1
    picked.sort()
    return SparseActivation(
        64,
        np.array([i for i, _ in picked], dtype=np.int64),
        np.array([val for _, val in picked], dtype=np.int8),
        k,
    )
