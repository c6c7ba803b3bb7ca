"""Point-cloud driven block seeding and the Chamfer point-fitting experiment.

The seeding heuristic widens the cloud's bounding box about its center,
bins the points into a regular 3D histogram and places blocks in every bin
holding more than ``lam`` points, one extra block for every further ``N^3``
points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .factors import FactorSetCP, expand_cp_coordinates, expand_multi_set
from .optim import AdamState, NumericalError, adam_step

__all__ = [
    "HistogramGrid",
    "build_histogram",
    "seed_blocks",
    "blocks_per_bin",
    "random_blocks",
    "nearest_neighbors",
    "chamfer_distance",
    "chamfer_distance_grad",
    "farthest_point_sampling",
    "FitResult",
    "seed_blocks_exact",
    "fit_coordinates_chamfer",
]


@dataclass
class HistogramGrid:
    """Regular bins of width ``interval`` starting at the widened lower bound."""

    lo: np.ndarray
    hi: np.ndarray
    interval: float
    nbins: tuple
    counts: dict
    colors: dict = field(default_factory=dict)

    def bin_bounds(self, key):
        lo = self.lo + np.asarray(key) * self.interval
        return lo, lo + self.interval

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))


def build_histogram(points, interval=0.026, expand_factor=1.2, colors=None) -> HistogramGrid:
    """3D histogram of ``points`` over the box widened by ``expand_factor``.

    Bins are half-open ``[e_i, e_{i+1})`` with the last bin along each axis
    closed. ``colors`` (``(K, 3)`` in [0, 1]) are averaged per bin when given.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError("expected a non-empty (K, 3) point array")
    if not np.all(np.isfinite(points)):
        raise ValueError("point cloud contains non-finite coordinates")
    if interval <= 0:
        raise ValueError("interval must be positive")
    pmin, pmax = points.min(axis=0), points.max(axis=0)
    center = 0.5 * (pmin + pmax)
    half = 0.5 * (pmax - pmin) * expand_factor
    lo, hi = center - half, center + half
    nbins = np.maximum(1, np.ceil(expand_factor * (pmax - pmin) / interval).astype(np.int64))
    idx = np.floor((points - lo) / interval).astype(np.int64)
    idx = np.clip(idx, 0, nbins - 1)
    keys, inverse, cnt = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    counts = {tuple(int(v) for v in k): int(c) for k, c in zip(keys, cnt)}
    mean_colors = {}
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64)
        sums = np.zeros((len(keys), 3))
        np.add.at(sums, inverse.reshape(-1), colors)
        mean_colors = {tuple(int(v) for v in k): sums[i] / cnt[i] for i, k in enumerate(keys)}
    return HistogramGrid(lo, hi, float(interval), tuple(int(n) for n in nbins), counts, mean_colors)


def blocks_per_bin(count, n, lam=5) -> int:
    """Blocks allocated to a bin holding ``count`` points."""
    if count <= lam:
        return 0
    return math.ceil(count / n**3)


def _attribute_factors(n, d, extent, rng, feature_std, rotation_noise, color=None, dtype=np.float32):
    s = np.full((n, 3), np.cbrt(extent / (2.0 * n)))
    qs, fs = [], []
    for _ in range(3):
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        q[:, 1:] = rng.normal(0.0, rotation_noise, (n, 3))
        qs.append(q)
        f = rng.normal(0.0, feature_std, (n, d))
        if color is not None and d >= 3:
            f[:, :3] = np.cbrt(np.asarray(color) - 0.5)
        fs.append(f)
    return [a.astype(dtype) for a in (s, s.copy(), s.copy(), *qs, *fs)]


def seed_blocks(hist: HistogramGrid, lam=5, n=5, d=16, seed=0, feature_std=0.5,
                rotation_noise=0.1, dtype=np.float32):
    """Blocks for every bin with more than ``lam`` points, in bin-key order.

    Each block spans its bin with ``n`` cell-centered coordinates per axis;
    overfull bins receive ``ceil(count / n^3)`` blocks with identical spans.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    for key in sorted(hist.counts):
        reps = blocks_per_bin(hist.counts[key], n, lam)
        if reps == 0:
            continue
        lo, _ = hist.bin_bounds(key)
        step = hist.interval / n
        coords = [lo[a] + (np.arange(n) + 0.5) * step for a in range(3)]
        for _ in range(reps):
            attrs = _attribute_factors(n, d, hist.interval, rng, feature_std, rotation_noise,
                                       hist.colors.get(key), dtype)
            blocks.append(FactorSetCP(*(c.astype(dtype) for c in coords), *attrs))
    return blocks


def random_blocks(num_blocks, n, d, lo, hi, seed=0, feature_std=0.5, rotation_noise=0.1,
                  dtype=np.float32):
    """Blocks with coordinates drawn uniformly inside ``[lo, hi]``."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    extent = float(np.max(hi - lo)) / max(1.0, np.cbrt(num_blocks))
    blocks = []
    for _ in range(num_blocks):
        coords = [np.sort(rng.uniform(lo[a], hi[a], n)) for a in range(3)]
        attrs = _attribute_factors(n, d, extent, rng, feature_std, rotation_noise, None, dtype)
        blocks.append(FactorSetCP(*(c.astype(dtype) for c in coords), *attrs))
    return blocks


# --- nearest neighbours -------------------------------------------------------------


def _sqdist_pairs(q, p):
    diff = q - p
    return np.sum(diff * diff, axis=-1)


def _brute_nn(queries, points, chunk=2048):
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.float64)
    for s in range(0, len(queries), chunk):
        d2 = _sqdist_pairs(queries[s:s + chunk, None, :], points[None, :, :])
        i = np.argmin(d2, axis=1)
        idx[s:s + chunk] = i
        dist[s:s + chunk] = d2[np.arange(len(i)), i]
    return idx, dist


def _grid_nn(queries, points, cell=None):
    lo = np.minimum(queries.min(axis=0), points.min(axis=0))
    hi = np.maximum(queries.max(axis=0), points.max(axis=0))
    if cell is None:
        vol = float(np.prod(np.maximum(hi - lo, 1e-12)))
        cell = (0.5 * vol / len(points)) ** (1.0 / 3.0)
        cell = max(cell, 1e-9, float(np.max(hi - lo)) / 1024.0)
    dims = np.floor((hi - lo) / cell).astype(np.int64) + 3

    def keys_of(x):
        c = np.floor((x - lo) / cell).astype(np.int64) + 1
        return (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]

    pkeys = keys_of(points)
    porder = np.argsort(pkeys, kind="stable")
    ukeys, starts, counts = np.unique(pkeys[porder], return_index=True, return_counts=True)
    qkeys = keys_of(queries)
    nq = len(queries)
    off = np.array([(a * dims[1] + b) * dims[2] + c
                    for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)
    nk = (qkeys[:, None] + off[None, :]).ravel()
    pos = np.searchsorted(ukeys, nk)
    pos_c = np.minimum(pos, len(ukeys) - 1)
    hit = ukeys[pos_c] == nk
    cnt = np.where(hit, counts[pos_c], 0)
    st = np.where(hit, starts[pos_c], 0)
    total = int(cnt.sum())
    qid = np.repeat(np.repeat(np.arange(nq), 27), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    pid = porder[np.repeat(st, cnt) + local]
    d2 = _sqdist_pairs(queries[qid], points[pid])
    idx = np.full(nq, -1, dtype=np.int64)
    dist = np.full(nq, np.inf)
    if total:
        # candidates are grouped by query already; segmented min, ties to lowest index
        per_q = cnt.reshape(nq, 27).sum(axis=1)
        best_q = np.flatnonzero(per_q)
        seg = (np.cumsum(per_q) - per_q)[best_q]
        best_d = np.minimum.reduceat(d2, seg)
        owner = np.repeat(np.arange(len(best_q)), per_q[best_q])
        tied = np.where(d2 == best_d[owner], pid, np.iinfo(np.int64).max)
        idx[best_q], dist[best_q] = np.minimum.reduceat(tied, seg), best_d
    unresolved = np.flatnonzero(~(dist < cell * cell))
    if len(unresolved):
        bi, bd = _brute_nn(queries[unresolved], points)
        idx[unresolved], dist[unresolved] = bi, bd
    return idx, dist


def nearest_neighbors(queries, points, method="grid"):
    """Exact nearest neighbour of each query: ``(index, squared distance)``.

    Ties go to the lowest point index. ``method="grid"`` uses a uniform-grid
    spatial hash with a brute-force fallback; ``"brute"`` is the O(QK) scan.
    """
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if len(queries) == 0 or len(points) == 0:
        raise ValueError("nearest neighbour search needs non-empty sets")
    if method == "brute":
        return _brute_nn(queries, points)
    if method == "grid":
        return _grid_nn(queries, points)
    raise ValueError(f"unknown method {method!r}")


def chamfer_distance(A, B, method="grid") -> float:
    """Symmetric squared Chamfer distance with per-side mean aggregation."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    _, da = nearest_neighbors(A, B, method)
    _, db = nearest_neighbors(B, A, method)
    return float(da.mean() + db.mean())


def chamfer_distance_grad(A, B, method="grid"):
    """Chamfer distance and its gradient w.r.t. ``A``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    ia, da = nearest_neighbors(A, B, method)
    ib, db = nearest_neighbors(B, A, method)
    grad = 2.0 * (A - B[ia]) / len(A)
    np.add.at(grad, ib, 2.0 * (A[ib] - B) / len(B))
    return float(da.mean() + db.mean()), grad


def farthest_point_sampling(points, k, start=0) -> np.ndarray:
    """Indices of ``k`` farthest-point samples, beginning at ``start``."""
    points = np.asarray(points, dtype=np.float64)
    k = min(int(k), len(points))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((points - points[chosen[i]]) ** 2, axis=1))
    return chosen


# --- chamfer fitting ----------------------------------------------------------------


@dataclass
class FitResult:
    blocks: list
    losses: list
    interval: float

    @property
    def points(self):
        return np.concatenate([expand_cp_coordinates(b) for b in self.blocks])


def seed_blocks_exact(points, num_blocks, n, lam=5, interval=None, shrink=0.95, colors=None,
                      **kwargs):
    """Seed exactly ``num_blocks`` blocks from ``points``.

    Without an explicit ``interval`` the bin width starts at the cloud's
    extent and shrinks geometrically until at least ``num_blocks`` blocks are
    allocated; the blocks of the most populated bins are kept.
    """
    points = np.asarray(points, dtype=np.float64)
    extent = float(np.max(points.max(axis=0) - points.min(axis=0)))
    candidates = [interval] if interval is not None else [
        extent * shrink**i for i in range(400) if extent * shrink**i > extent * 1e-3
    ]
    for iv in candidates:
        hist = build_histogram(points, iv, colors=colors)
        total = sum(blocks_per_bin(c, n, lam) for c in hist.counts.values())
        if total >= num_blocks:
            break
    else:
        raise ValueError(f"could not allocate {num_blocks} blocks from {len(points)} points")
    blocks = seed_blocks(hist, lam, n, **kwargs)
    # bin of every block in seed order, then keep the most populated ones
    owners = []
    for key in sorted(hist.counts):
        owners += [hist.counts[key]] * blocks_per_bin(hist.counts[key], n, lam)
    rank = sorted(range(len(blocks)), key=lambda b: (-owners[b], b))[:num_blocks]
    return [blocks[b] for b in sorted(rank)], hist.interval


def fit_coordinates_chamfer(target, num_blocks=30, n=3, steps=2000, lr=0.005, seed=0,
                            lam=5, interval=None, method="grid", log_every=0, blocks=None):
    """Fit factorized coordinate blocks to a point cloud under Chamfer distance.

    Only coordinates are optimized (Adam). Blocks are seeded from ``target``
    unless starting ``blocks`` are given (they are copied). Returns a
    :class:`FitResult` whose ``losses`` holds the loss before each step plus
    the final loss.
    """
    target = np.asarray(target, dtype=np.float64)
    if blocks is None:
        blocks, iv = seed_blocks_exact(target, num_blocks, n, lam=lam, interval=interval,
                                       d=1, seed=seed, dtype=np.float64)
    else:
        blocks, iv = [b.copy() for b in blocks], interval
    params = {}
    for b, blk in enumerate(blocks):
        for name in ("p_x", "p_y", "p_z"):
            params[f"{b}.{name}"] = getattr(blk, name)
    state = AdamState()
    losses = []
    for step in range(steps + 1):
        pts = expand_multi_set(blocks).positions
        loss, g = chamfer_distance_grad(pts, target, method)
        if not math.isfinite(loss):
            raise NumericalError(f"chamfer loss diverged at step {step}")
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  chamfer {loss:.6g}")
        if step == steps:
            break
        grads = {}
        offset = 0
        for b, blk in enumerate(blocks):
            m = blk.n**3
            gb = g[offset:offset + m].reshape(blk.n, blk.n, blk.n, 3)
            offset += m
            grads[f"{b}.p_x"] = gb[..., 0].sum(axis=(1, 2))
            grads[f"{b}.p_y"] = gb[..., 1].sum(axis=(0, 2))
            grads[f"{b}.p_z"] = gb[..., 2].sum(axis=(0, 1))
        adam_step(params, grads, state, lr)
    return FitResult(blocks, losses, iv)
