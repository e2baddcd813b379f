"""Point-cloud containers, sequence time mapping and exact nearest-neighbour search.

Points are stored as ``(n, 3)`` float64 arrays rather than lists of point
objects; every helper here accepts anything ``np.asarray`` can turn into that
shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

TIME_TOLERANCE = 1e-9

# exact-distance slack used when deciding whether the kd-tree candidate set
# provably contains every tie for the nearest point
_CANDIDATES = 4
_SLACK = 1e-6


def as_points(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    elif arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame_index: int = 0
    timestamp: float = 0.0
    gt_flow: Optional[np.ndarray] = None
    class_id: Optional[np.ndarray] = None
    is_dynamic: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points).copy())
        n = len(self.points)
        if self.gt_flow is not None:
            gt = as_points(np.array(self.gt_flow, dtype=np.float64).reshape(-1, 3), "gt_flow")
            if len(gt) != n:
                raise ValueError(f"gt_flow has {len(gt)} rows for {n} points")
            object.__setattr__(self, "gt_flow", gt)
        if self.class_id is not None:
            cls = np.array(self.class_id, dtype=np.int64).reshape(-1)
            if len(cls) != n:
                raise ValueError(f"class_id has {len(cls)} entries for {n} points")
            object.__setattr__(self, "class_id", cls)
        if self.is_dynamic is not None:
            dyn = np.array(self.is_dynamic, dtype=bool).reshape(-1)
            if len(dyn) != n:
                raise ValueError(f"is_dynamic has {len(dyn)} entries for {n} points")
            object.__setattr__(self, "is_dynamic", dyn)
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        for arr in (self.points, self.gt_flow, self.class_id, self.is_dynamic):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: Sequence[PointCloud]
    frame_interval: float = 0.1

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if not self.frame_interval > 0:
            raise ValueError("frame_interval must be positive")
        for i, frame in enumerate(frames):
            if frame.frame_index != i:
                raise ValueError(f"frame {i} carries frame_index {frame.frame_index}")
            if i:
                step = frame.timestamp - frames[i - 1].timestamp
                if abs(step - self.frame_interval) > TIME_TOLERANCE:
                    raise ValueError(
                        f"timestamps of frames {i - 1} and {i} are {step} s apart, "
                        f"expected {self.frame_interval}"
                    )
        object.__setattr__(self, "frames", frames)

    @property
    def num_intervals(self) -> int:
        """N, the index of the last frame."""
        return len(self.frames) - 1

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> PointCloud:
        return self.frames[i]

    @property
    def has_gt(self) -> bool:
        return all(f.gt_flow is not None for f in self.frames)

    @property
    def has_classes(self) -> bool:
        return all(f.class_id is not None for f in self.frames)


@dataclass(frozen=True, eq=False)
class FlowVectors:
    residuals: np.ndarray
    source_frame: int
    target_frame: int

    def __post_init__(self):
        if self.source_frame == self.target_frame:
            raise ValueError("source_frame and target_frame must differ")
        res = np.asarray(self.residuals, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "residuals", res)

    def __len__(self) -> int:
        return len(self.residuals)


def make_sequence(clouds: Sequence, frame_interval: float = 0.1, **per_frame) -> FrameSequence:
    """Build a sequence from raw point arrays, assigning indices and timestamps.

    Extra keyword arguments are per-frame lists (``gt_flow=[...]``,
    ``class_id=[...]``) forwarded to each :class:`PointCloud`.
    """
    frames = []
    for i, pts in enumerate(clouds):
        extra = {k: v[i] for k, v in per_frame.items() if v is not None}
        frames.append(PointCloud(pts, frame_index=i, timestamp=i * frame_interval, **extra))
    return FrameSequence(frames, frame_interval)


def normalized_time(seq: FrameSequence, frame_index: int) -> float:
    n = seq.num_intervals
    if not 0 <= frame_index <= n:
        raise ValueError(f"frame {frame_index} outside sequence range [0, {n}]")
    return -1.0 + 2.0 * frame_index / n


def _squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    # spelled out so the index and the brute-force oracle round identically
    d = points - query
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _as_query(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape != (3,):
        raise ValueError(f"query must be a 3-vector, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query contains non-finite coordinates")
    return q


class NearestIndex:
    """Exact nearest-neighbour index; ties go to the lowest point index.

    A kd-tree proposes a few candidates per query; distances are then
    recomputed exactly and, whenever the candidate set cannot be proven to
    hold every tie, the query falls back to a ball search. The answers are
    therefore identical to :func:`nearest_bruteforce`.
    """

    def __init__(self, points):
        pts = as_points(points)
        if len(pts) == 0:
            raise ValueError("empty point set")
        self.points = pts.copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indices and squared distances for an ``(m, 3)`` query array."""
        q = as_points(queries, "queries")
        n = len(self.points)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        k = min(_CANDIDATES, n)
        _, cand = self._tree.query(q, k=k)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), k)
        d2 = _squared_distances(self.points[cand], q[:, None, :])

        best = d2.min(axis=1)
        tied = np.where(d2 == best[:, None], cand, n)
        idx = tied.min(axis=1)

        if k < n:
            worst = d2.max(axis=1)
            unsure = np.flatnonzero(worst <= best * (1.0 + _SLACK) + 1e-300)
            for i in unsure:
                radius = np.sqrt(best[i]) * (1.0 + _SLACK) + 1e-12
                members = np.asarray(self._tree.query_ball_point(q[i], radius), dtype=np.int64)
                md2 = _squared_distances(self.points[members], q[i])
                m = md2.min()
                idx[i] = members[md2 == m].min()
                best[i] = m
        return idx, best


def build_index(cloud) -> NearestIndex:
    points = cloud.points if isinstance(cloud, PointCloud) else cloud
    return NearestIndex(points)


def nearest(index: NearestIndex, query) -> tuple[int, float]:
    idx, d2 = index.query(_as_query(query)[None, :])
    return int(idx[0]), float(d2[0])


def nearest_bruteforce(cloud, query) -> tuple[int, float]:
    points = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
    if len(points) == 0:
        raise ValueError("empty point set")
    d2 = _squared_distances(points, _as_query(query))
    i = int(np.argmin(d2))
    return i, float(d2[i])


def nearest_bruteforce_all(points, queries) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised O(n·m) oracle, used where the per-query loop would be slow."""
    pts = as_points(points)
    q = as_points(queries, "queries")
    if len(pts) == 0:
        raise ValueError("empty point set")
    d2 = _squared_distances(pts[None, :, :], q[:, None, :])
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(q)), idx]
