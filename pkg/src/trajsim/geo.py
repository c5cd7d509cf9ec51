"""Trajectory data types, cleaning, projection and feature preparation.

Coordinates enter as lon/lat degrees, get projected onto a local planar
frame in meters, and each point is augmented to a 7-feature row:

    [x, y, len(in-seg), len(out-seg), angle(x-axis, in-seg),
     angle(x-axis, out-seg), interior angle]

Boundary rows zero the entries of the missing segment. All operations
here are pure and safe to call from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ParseError

EARTH_RADIUS_M = 6371000.0

# columns of the feature matrix
FEATURE_DIM = 7


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Trajectory:
    """An ordered sequence of planar points with an identifier."""

    id: str
    points: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"trajectory {self.id!r}: points must be (n, 2), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return len(self.points)

    def point(self, i):
        return Point(float(self.points[i, 0]), float(self.points[i, 1]))


@dataclass
class NormStats:
    """Per-column z-score statistics, computed on the training split only."""

    mean: np.ndarray  # (7,)
    std: np.ndarray   # (7,), zero-variance columns stored as 1.0

    @classmethod
    def from_features(cls, feature_matrices):
        rows = np.concatenate([np.asarray(f, dtype=np.float64) for f in feature_matrices], axis=0)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std[std == 0.0] = 1.0
        return cls(mean=mean, std=std)


@dataclass
class SynthConfig:
    """Random-walk generator settings; deterministic under a fixed seed."""

    count: int = 1000
    n_min: int = 20
    n_max: int = 50
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 10000.0, 10000.0)  # meters
    heading_noise_std: float = 0.25   # radians per step
    step_log_mu: float = math.log(100.0)
    step_log_sigma: float = 0.4
    seed: int = 0

    def validate(self):
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.n_min < 20:
            raise ValueError(f"n_min must be >= 20, got {self.n_min}")
        if self.n_max < self.n_min:
            raise ValueError("n_max must be >= n_min")
        if self.count < 0:
            raise ValueError("count must be >= 0")


def clean_trajectory(raw, min_len=20, max_len=200):
    """Collapse consecutive duplicate points; reject bad lengths.

    Returns the cleaned trajectory, or None when the deduplicated length
    falls outside [min_len, max_len] (rejection is a normal outcome).
    Non-finite coordinates raise.
    """
    pts = raw.points
    if len(pts) < 1:
        raise ValueError(f"trajectory {raw.id!r} has no points")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"trajectory {raw.id!r} has non-finite coordinates")
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    cleaned = pts[keep]
    if not (min_len <= len(cleaned) <= max_len):
        return None
    return Trajectory(id=raw.id, points=cleaned)


def project_to_local_plane(traj, ref_lat_deg):
    """Equirectangular projection of lon/lat degrees about ``ref_lat_deg``.

    x = R * lon_rad * cos(ref_lat), y = R * lat_rad. Adequate at city
    scale and trivially invertible.
    """
    lonlat = traj.points
    lon, lat = lonlat[:, 0], lonlat[:, 1]
    if np.any((lon < -180) | (lon > 180)):
        raise ValueError(f"trajectory {traj.id!r}: longitude out of [-180, 180]")
    if np.any((lat <= -90) | (lat >= 90)):
        raise ValueError(f"trajectory {traj.id!r}: latitude out of (-90, 90)")
    k = EARTH_RADIUS_M * math.cos(math.radians(ref_lat_deg))
    x = np.radians(lon) * k
    y = np.radians(lat) * EARTH_RADIUS_M
    return Trajectory(id=traj.id, points=np.stack([x, y], axis=1))


def unproject_from_local_plane(traj, ref_lat_deg):
    """Inverse of :func:`project_to_local_plane` up to float error."""
    k = EARTH_RADIUS_M * math.cos(math.radians(ref_lat_deg))
    lon = np.degrees(traj.points[:, 0] / k)
    lat = np.degrees(traj.points[:, 1] / EARTH_RADIUS_M)
    return Trajectory(id=traj.id, points=np.stack([lon, lat], axis=1))


def mean_latitude(trajs):
    """Mean latitude over all points of a lon/lat dataset."""
    total = 0.0
    count = 0
    for t in trajs:
        total += float(t.points[:, 1].sum())
        count += t.n
    if count == 0:
        raise ValueError("empty dataset")
    return total / count


def augment_features(traj):
    """Per-point 7-feature rows for a cleaned trajectory (n >= 2).

    Boundary rule: the first point zeroes the incoming-segment entries
    (cols 3, 5, 7), the last point zeroes the outgoing ones (cols 4, 6, 7).
    """
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("augment_features requires at least 2 points")
    seg = pts[1:] - pts[:-1]                      # (n-1, 2)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])      # (n-1,)
    seg_ang = np.arctan2(seg[:, 1], seg[:, 0])    # in (-pi, pi]

    f = np.zeros((n, FEATURE_DIM), dtype=np.float64)
    f[:, 0] = pts[:, 0]
    f[:, 1] = pts[:, 1]
    f[1:, 2] = seg_len        # incoming segment length
    f[:-1, 3] = seg_len       # outgoing segment length
    f[1:, 4] = seg_ang
    f[:-1, 5] = seg_ang

    if n >= 3:
        a = seg[:-1]  # incoming direction at interior points
        b = seg[1:]   # outgoing direction
        denom = seg_len[:-1] * seg_len[1:]
        cosang = np.einsum("ij,ij->i", a, b) / np.where(denom > 0, denom, 1.0)
        f[1:-1, 6] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return f


def normalize_features(features, stats):
    """Column-wise z-score with train-split stats; apply exactly once."""
    return (np.asarray(features, dtype=np.float64) - stats.mean) / stats.std


def synth_generate(cfg):
    """Random-walk trajectories: uniform start in the bbox, Gaussian
    heading increments, log-normal step lengths."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    x0, y0, x1, y1 = cfg.bbox
    out = []
    for i in range(cfg.count):
        n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
        start = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        heading = rng.uniform(-math.pi, math.pi)
        steps = rng.lognormal(cfg.step_log_mu, cfg.step_log_sigma, size=n - 1)
        turns = rng.normal(0.0, cfg.heading_noise_std, size=n - 1)
        headings = heading + np.cumsum(turns)
        deltas = steps[:, None] * np.stack([np.cos(headings), np.sin(headings)], axis=1)
        pts = np.concatenate([start[None, :], start + np.cumsum(deltas, axis=0)], axis=0)
        out.append(Trajectory(id=f"synth-{cfg.seed}-{i}", points=pts))
    return out


def mask_points(traj, ratio, seed=0):
    """Remove floor(ratio * n) interior points uniformly; endpoints kept.

    Evaluation-only: the result may fall below the cleaning min length.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n = traj.n
    k = min(int(ratio * n), max(n - 2, 0))
    if k == 0:
        return Trajectory(id=traj.id, points=traj.points.copy())
    rng = np.random.default_rng(seed)
    interior = np.arange(1, n - 1)
    drop = rng.choice(interior, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return Trajectory(id=traj.id, points=traj.points[keep])


def shift_points(traj, max_dist, seed=0):
    """Displace every point by a uniform-in-disk offset of radius <= max_dist."""
    if max_dist < 0:
        raise ValueError(f"max_dist must be >= 0, got {max_dist}")
    if max_dist == 0:
        return Trajectory(id=traj.id, points=traj.points.copy())
    rng = np.random.default_rng(seed)
    n = traj.n
    r = max_dist * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(-math.pi, math.pi, size=n)
    offsets = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Trajectory(id=traj.id, points=traj.points + offsets)


# ---------------------------------------------------------------------------
# Text dataset format: one trajectory per line,
#   <id>\t<lon>,<lat>;<lon>,<lat>;...
# Blank lines and lines starting with '#' are ignored.


def format_trajectory_line(traj):
    coords = ";".join(f"{p[0]:.9f},{p[1]:.9f}" for p in traj.points)
    return f"{traj.id}\t{coords}"


def save_trajectories(trajs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(format_trajectory_line(t) + "\n")


def load_trajectories(path):
    trajs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected '<id>\\t<coords>'", lineno)
            tid, coord_str = parts
            pts = []
            for token in coord_str.split(";"):
                pieces = token.split(",")
                if len(pieces) != 2:
                    raise ParseError(f"bad coordinate pair {token!r}", lineno)
                try:
                    pts.append((float(pieces[0]), float(pieces[1])))
                except ValueError:
                    raise ParseError(f"bad coordinate pair {token!r}", lineno) from None
            if not pts:
                raise ParseError("empty coordinate list", lineno)
            trajs.append(Trajectory(id=tid, points=np.array(pts, dtype=np.float64)))
    return trajs
