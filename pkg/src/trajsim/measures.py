"""Non-learned trajectory distance measures and ground-truth targets.

DTW and discrete Frechet run as numba DP kernels (the inner loops are
pure arithmetic, so JIT buys ~3 orders of magnitude over the Python
interpreter when filling all-pairs matrices). EDwP is a memoized
recursion over edge split points. Each measure has an un-memoized
recursive twin in :func:`naive_measure` used as a test oracle; the two
code paths share nothing beyond point distance.

Distances convert to similarities in (0, 1] via y = exp(-dist / s)
where s is the sampled mean measure value over random training pairs.
"""

from __future__ import annotations

import enum
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import FormatError, VersionError
from .geo import Trajectory

GT_MAGIC = b"TSIM"
GT_VERSION = 1


class MeasureKind(enum.Enum):
    DTW = "dtw"
    DISCRETE_FRECHET = "frechet"
    EDWP = "edwp"

    @classmethod
    def parse(cls, name):
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown measure {name!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


@dataclass(frozen=True)
class SimilarityScale:
    """Distance scale s (meters-ish) for y = exp(-dist / s)."""

    s: float

    def __post_init__(self):
        if not (self.s > 0):
            raise ValueError(f"similarity scale must be positive, got {self.s}")


@dataclass
class GroundTruthMatrix:
    """Symmetric all-pairs similarity targets with unit diagonal."""

    values: np.ndarray  # (n, n) float32

    @property
    def n(self):
        return len(self.values)


def _points(t):
    pts = t.points if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64)
    return np.ascontiguousarray(pts, dtype=np.float64)


@njit(cache=True, nogil=True)
def _dtw_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    if m > n:
        a, b = b, a
        n, m = m, n
    prev = np.empty(m)
    cur = np.empty(m)
    for j in range(m):
        dx = a[0, 0] - b[j, 0]
        dy = a[0, 1] - b[j, 1]
        d = math.sqrt(dx * dx + dy * dy)
        prev[j] = d if j == 0 else prev[j - 1] + d
    for i in range(1, n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if j == 0:
                cur[0] = prev[0] + d
            else:
                best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                if prev[j - 1] < best:
                    best = prev[j - 1]
                cur[j] = best + d
        prev, cur = cur, prev
    return prev[m - 1]


@njit(cache=True, nogil=True)
def _frechet_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    if m > n:
        a, b = b, a
        n, m = m, n
    prev = np.empty(m)
    cur = np.empty(m)
    for j in range(m):
        dx = a[0, 0] - b[j, 0]
        dy = a[0, 1] - b[j, 1]
        d = math.sqrt(dx * dx + dy * dy)
        if j == 0:
            prev[0] = d
        else:
            prev[j] = d if d > prev[j - 1] else prev[j - 1]
    for i in range(1, n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if j == 0:
                reach = prev[0]
            else:
                reach = prev[j]
                if cur[j - 1] < reach:
                    reach = cur[j - 1]
                if prev[j - 1] < reach:
                    reach = prev[j - 1]
            cur[j] = d if d > reach else reach
        prev, cur = cur, prev
    return prev[m - 1]


def dtw(a, b):
    """Dynamic time warping with Euclidean point cost, sum of costs."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("dtw requires non-empty trajectories")
    return float(_dtw_kernel(pa, pb))


def discrete_frechet(a, b):
    """Discrete Frechet distance (minimax over monotone couplings)."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("discrete_frechet requires non-empty trajectories")
    return float(_frechet_kernel(pa, pb))


# ---------------------------------------------------------------------------
# EDwP: edit distance with projections.
#
# Segment-based edit distance. At a state, each side exposes its current
# first point (possibly a projection created by an earlier insert) and
# the remaining original points. Three moves:
#   replace          rep(e1, e2) * cov(e1, e2), both sides advance;
#   insert-into-T2   match e1 against the sub-segment (q, proj) where
#                    proj is the closest point to T1's next point on
#                    T2's current first segment; T1 advances;
#   insert-into-T1   symmetric.
# rep(e, f) = d(e.start, f.start) + d(e.end, f.end); cov(e, f) = |e| + |f|.
# A side reduced to a single point p pays (d(e.start, p) + d(e.end, p)) * |e|
# for each remaining segment e of the other side.


def _dist(p, q):
    return math.hypot(p[0] - q[0], p[1] - q[1])


def _project_onto_segment(p, a, b):
    """Closest point to p on the segment a-b."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    l2 = dx * dx + dy * dy
    if l2 == 0.0:
        return a
    t = ((p[0] - ax) * dx + (p[1] - ay) * dy) / l2
    if t <= 0.0:
        return a
    if t >= 1.0:
        return (bx, by)
    return (ax + t * dx, ay + t * dy)


def _tail_cost(p, first, pts, j):
    """One side is the single point p; pts[j:] with ``first`` spliced in
    front is the other side."""
    total = 0.0
    prev = first
    for k in range(j + 1, len(pts)):
        cur = pts[k]
        total += (_dist(prev, p) + _dist(cur, p)) * _dist(prev, cur)
        prev = cur
    return total


def _edwp_rec(i, j, p0, q0, pa, pb, memo):
    last_a = len(pa) - 1
    last_b = len(pb) - 1
    if i == last_a and j == last_b:
        return 0.0
    if i == last_a:
        return _tail_cost(p0, q0, pb, j)
    if j == last_b:
        return _tail_cost(q0, p0, pa, i)
    key = (i, j, p0, q0)
    hit = memo.get(key)
    if hit is not None:
        return hit
    p1 = pa[i + 1]
    q1 = pb[j + 1]
    len_e1 = _dist(p0, p1)
    len_e2 = _dist(q0, q1)

    # replace: both first edges matched in full
    rep = _dist(p0, q0) + _dist(p1, q1)
    best = rep * (len_e1 + len_e2) + _edwp_rec(i + 1, j + 1, p1, q1, pa, pb, memo)

    # insert into T2: e1 vs sub-segment (q0, proj)
    proj = _project_onto_segment(p1, q0, q1)
    rep_b = _dist(p0, q0) + _dist(p1, proj)
    cost_b = rep_b * (len_e1 + _dist(q0, proj)) + _edwp_rec(i + 1, j, p1, proj, pa, pb, memo)
    if cost_b < best:
        best = cost_b

    # insert into T1: e2 vs sub-segment (p0, proj)
    proj = _project_onto_segment(q1, p0, p1)
    rep_c = _dist(q0, p0) + _dist(q1, proj)
    cost_c = rep_c * (len_e2 + _dist(p0, proj)) + _edwp_rec(i, j + 1, proj, q1, pa, pb, memo)
    if cost_c < best:
        best = cost_c

    memo[key] = best
    return best


def edwp(a, b):
    """Edit distance with projections (distance x coverage units)."""
    pa = [tuple(p) for p in _points(a)]
    pb = [tuple(p) for p in _points(b)]
    if len(pa) < 2 or len(pb) < 2:
        raise ValueError("edwp requires at least 2 points per trajectory")
    return _edwp_rec(0, 0, pa[0], pb[0], pa, pb, {})


# ---------------------------------------------------------------------------
# Naive oracles: the same definitions as literal, un-memoized recursions.

NAIVE_MAX_POINTS = 16


def _naive_dtw(pa, pb, i, j):
    d = _dist(pa[i], pb[j])
    if i == 0 and j == 0:
        return d
    best = math.inf
    if i > 0:
        best = min(best, _naive_dtw(pa, pb, i - 1, j))
    if j > 0:
        best = min(best, _naive_dtw(pa, pb, i, j - 1))
    if i > 0 and j > 0:
        best = min(best, _naive_dtw(pa, pb, i - 1, j - 1))
    return d + best


def _naive_frechet(pa, pb, i, j):
    d = _dist(pa[i], pb[j])
    if i == 0 and j == 0:
        return d
    best = math.inf
    if i > 0:
        best = min(best, _naive_frechet(pa, pb, i - 1, j))
    if j > 0:
        best = min(best, _naive_frechet(pa, pb, i, j - 1))
    if i > 0 and j > 0:
        best = min(best, _naive_frechet(pa, pb, i - 1, j - 1))
    return max(d, best)


def _naive_edwp(t1, t2):
    if len(t1) == 1 and len(t2) == 1:
        return 0.0
    if len(t1) == 1:
        p = t1[0]
        return sum((_dist(t2[k], p) + _dist(t2[k + 1], p)) * _dist(t2[k], t2[k + 1])
                   for k in range(len(t2) - 1))
    if len(t2) == 1:
        return _naive_edwp(t2, t1)
    p0, p1 = t1[0], t1[1]
    q0, q1 = t2[0], t2[1]
    len_e1 = _dist(p0, p1)
    len_e2 = _dist(q0, q1)

    rep = _dist(p0, q0) + _dist(p1, q1)
    best = rep * (len_e1 + len_e2) + _naive_edwp(t1[1:], t2[1:])

    proj = _project_onto_segment(p1, q0, q1)
    rep_b = _dist(p0, q0) + _dist(p1, proj)
    best = min(best, rep_b * (len_e1 + _dist(q0, proj)) + _naive_edwp(t1[1:], [proj] + t2[1:]))

    proj = _project_onto_segment(q1, p0, p1)
    rep_c = _dist(q0, p0) + _dist(q1, proj)
    best = min(best, rep_c * (len_e2 + _dist(p0, proj)) + _naive_edwp([proj] + t1[1:], t2[1:]))
    return best


def naive_measure(kind, a, b):
    """Literal recursive evaluation; exponential, capped at 16 points total."""
    pa = [tuple(p) for p in _points(a)]
    pb = [tuple(p) for p in _points(b)]
    if len(pa) + len(pb) > NAIVE_MAX_POINTS:
        raise ValueError(f"naive_measure caps combined length at {NAIVE_MAX_POINTS} points")
    if kind == MeasureKind.DTW:
        return _naive_dtw(pa, pb, len(pa) - 1, len(pb) - 1)
    if kind == MeasureKind.DISCRETE_FRECHET:
        return _naive_frechet(pa, pb, len(pa) - 1, len(pb) - 1)
    if kind == MeasureKind.EDWP:
        return _naive_edwp(pa, pb)
    raise ValueError(f"unknown measure kind {kind}")


def measure_fn(kind):
    return {MeasureKind.DTW: dtw,
            MeasureKind.DISCRETE_FRECHET: discrete_frechet,
            MeasureKind.EDWP: edwp}[kind]


# ---------------------------------------------------------------------------
# Similarity targets


def distance_to_similarity(dist, scale):
    """y = exp(-dist / s), mapping [0, inf) onto (0, 1]."""
    if dist < 0:
        raise ValueError(f"distance must be non-negative, got {dist}")
    return math.exp(-dist / scale.s)


def estimate_scale(trajs, kind, max_pairs=10000, seed=0):
    """Mean measure value over up to ``max_pairs`` random distinct pairs."""
    n = len(trajs)
    if n < 2:
        raise ValueError("need at least 2 trajectories to estimate a scale")
    rng = np.random.default_rng(seed)
    fn = measure_fn(kind)
    total_pairs = n * (n - 1) // 2
    k = min(max_pairs, total_pairs)
    seen = set()
    total = 0.0
    count = 0
    while count < k:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        total += fn(trajs[i], trajs[j])
        count += 1
    mean = total / count
    if mean <= 0:
        mean = 1.0  # all sampled pairs identical; any positive scale works
    return SimilarityScale(s=mean)


class MeasureError(Exception):
    def __init__(self, id_a, id_b, cause):
        super().__init__(f"measure failed on pair ({id_a!r}, {id_b!r}): {cause}")
        self.pair = (id_a, id_b)


def build_gt_matrix(trajs, kind, scale, workers=1, progress=None):
    """All-pairs similarity matrix; upper triangle computed, mirrored.

    ``workers`` > 1 splits rows across threads (the DTW/Frechet kernels
    release the GIL); the result is bit-identical to the serial one.
    ``progress``, when given, is called as progress(done_rows, total_rows).
    """
    n = len(trajs)
    fn = measure_fn(kind)
    pts = [_points(t) for t in trajs]
    values = np.ones((n, n), dtype=np.float32)
    floor = float(np.finfo(np.float32).tiny)  # keeps entries in (0, 1] after rounding

    def fill_row(i):
        for j in range(i + 1, n):
            try:
                d = fn(pts[i], pts[j])
            except Exception as exc:  # propagate with the offending ids
                raise MeasureError(trajs[i].id, trajs[j].id, exc) from exc
            values[i, j] = np.float32(max(distance_to_similarity(d, scale), floor))

    if workers <= 1:
        for i in range(n):
            fill_row(i)
            if progress:
                progress(i + 1, n)
    else:
        done = 0
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for _ in pool.map(fill_row, range(n)):
                done += 1
                if progress:
                    progress(done, n)
    upper = np.triu_indices(n, k=1)
    values[(upper[1], upper[0])] = values[upper]
    return GroundTruthMatrix(values=values)


# ---------------------------------------------------------------------------
# TSIM file format: magic 'TSIM', u32 version, u32 n, n*n float32 row-major,
# little-endian throughout.


def save_gt_matrix(gt, path):
    data = np.ascontiguousarray(gt.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(GT_MAGIC)
        fh.write(struct.pack("<II", GT_VERSION, gt.n))
        fh.write(data.tobytes())


def load_gt_matrix(path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: truncated header")
        magic, version, n = head[:4], *struct.unpack("<II", head[4:12])
        if magic != GT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {GT_MAGIC!r}")
        if version != GT_VERSION:
            raise VersionError(f"{path}: unsupported version {version}, expected {GT_VERSION}")
        payload = fh.read(4 * n * n + 1)
        if len(payload) != 4 * n * n:
            raise FormatError(f"{path}: expected {4 * n * n} payload bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(n, n).copy()
    return GroundTruthMatrix(values=values)
