"""Synthetic lidar-like sequences with analytic ground-truth motion.

Moving surfaces are resampled from scratch every frame, so their points keep
no identity across frames. Static surfaces (the ground and a parked box) are
scanned once and re-observed with fresh sensor noise, as a sensor at rest
would see them. Ground truth for a point is the exact displacement of the
surface point it was drawn from over the next frame interval.

Scenes sit on a ground plane (class 0). Objects are numbered from 1 and use
their number as class id:

* ``static``: one parked box.
* ``translate``: one box driving along +x at ``speed``.
* ``orbit``: a small spherical cluster circling a fixed centre.
* ``crossing``: two boxes in adjacent lanes moving in opposite directions.
* ``occlusion``: the translate box, unobserved during ``occlusion_window``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geom import FrameSequence, PointCloud

KINDS = ("static", "translate", "orbit", "crossing", "occlusion")
DYNAMIC_THRESHOLD = 0.05

BOX_SIZE = np.array([1.6, 0.8, 0.8])
CLUSTER_RADIUS = 0.25
ORBIT_CENTER = np.array([0.0, 0.0, 1.5])
GROUND_HALF_EXTENT = (7.0, 4.0)


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "translate"
    num_frames: int = 20
    points_per_object: int = 96
    background_points: int = 160
    speed: float = 0.5
    orbit_radius: float = 2.0
    occlusion_window: tuple[int, int] = (8, 11)
    noise_sigma: float = 0.005
    seed: int = 0
    frame_interval: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if self.points_per_object < 1 or self.background_points < 0:
            raise ValueError("point counts must be positive")
        if self.speed < 0 or self.noise_sigma < 0:
            raise ValueError("speed and noise_sigma must be >= 0")
        if self.kind == "orbit" and not self.orbit_radius > 0:
            raise ValueError("orbit_radius must be > 0")
        first, last = self.occlusion_window
        if first > last:
            raise ValueError("occlusion_window must be (first_hidden, last_hidden)")
        if not self.frame_interval > 0:
            raise ValueError("frame_interval must be > 0")

    @property
    def num_objects(self) -> int:
        return 2 if self.kind == "crossing" else 1

    @property
    def angular_rate(self) -> float:
        """Orbit angle swept per frame, radians."""
        return self.speed / self.orbit_radius


def _box_start(spec: SceneSpec, object_id: int) -> np.ndarray:
    """Minimum corner of a box at frame 0."""
    travel = spec.speed * (spec.num_frames - 1)
    half = BOX_SIZE / 2
    if spec.kind == "static":
        return np.array([-half[0], -half[1], 0.0])
    if spec.kind in ("translate", "occlusion"):
        return np.array([-travel / 2 - half[0], -half[1], 0.0])
    # crossing: lane 1 heads +x from the left, lane 2 heads -x from the right
    lane_y = 0.6 if object_id == 1 else -0.6 - BOX_SIZE[1]
    x0 = -travel / 2 - half[0] if object_id == 1 else travel / 2 - half[0]
    return np.array([x0, lane_y, 0.0])


def _velocity(spec: SceneSpec, object_id: int) -> np.ndarray:
    if spec.kind == "static":
        return np.zeros(3)
    direction = -1.0 if (spec.kind == "crossing" and object_id == 2) else 1.0
    return np.array([direction * spec.speed, 0.0, 0.0])


def _rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orbit_center_path(spec: SceneSpec, frame: int) -> np.ndarray:
    """Centre of the orbiting cluster at ``frame``."""
    return analytic_position(spec, 1, cluster_center0(spec), frame)


def cluster_center0(spec: SceneSpec) -> np.ndarray:
    return ORBIT_CENTER + np.array([spec.orbit_radius, 0.0, 0.0])


def analytic_position(spec: SceneSpec, object_id: int, surface_point, frame: int) -> np.ndarray:
    """Where a frame-0 surface point of ``object_id`` is at ``frame``.

    Accepts a single point or an ``(n, 3)`` array. ``frame`` may range over
    ``0..num_frames``; the extra frame past the end defines the last frame's
    ground-truth flow. Background (``object_id == 0``) never moves.
    """
    if not 0 <= frame <= spec.num_frames:
        raise ValueError(f"frame {frame} outside [0, {spec.num_frames}]")
    if not 0 <= object_id <= spec.num_objects:
        raise ValueError(f"scene has no object {object_id}")
    p = np.asarray(surface_point, dtype=np.float64)
    if object_id == 0:
        return p.copy()
    if spec.kind == "orbit":
        rot = _rotation_z(frame * spec.angular_rate)
        return (p - ORBIT_CENTER) @ rot.T + ORBIT_CENTER
    return p + frame * _velocity(spec, object_id)


def _sample_box_surface(rng, corner: np.ndarray, count: int) -> np.ndarray:
    """Uniform samples on the five visible faces (no bottom)."""
    sx, sy, sz = BOX_SIZE
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.random((count, 3))
    pts = u * BOX_SIZE
    pts[face == 0, 2] = sz
    pts[face == 1, 1] = 0.0
    pts[face == 2, 1] = sy
    pts[face == 3, 0] = 0.0
    pts[face == 4, 0] = sx
    return corner + pts


def _sample_sphere(rng, center: np.ndarray, count: int) -> np.ndarray:
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + CLUSTER_RADIUS * v


def _sample_ground(rng, count: int) -> np.ndarray:
    hx, hy = GROUND_HALF_EXTENT
    pts = np.zeros((count, 3))
    pts[:, 0] = rng.uniform(-hx, hx, count)
    pts[:, 1] = rng.uniform(-hy, hy, count)
    return pts


def _canonical_samples(spec: SceneSpec, rng, object_id: int) -> np.ndarray:
    """Fresh frame-0 surface samples for one object."""
    if spec.kind == "orbit":
        return _sample_sphere(rng, cluster_center0(spec), spec.points_per_object)
    return _sample_box_surface(rng, _box_start(spec, object_id), spec.points_per_object)


def _hidden(spec: SceneSpec, frame: int) -> bool:
    first, last = spec.occlusion_window
    return spec.kind == "occlusion" and first <= frame <= last


def generate(spec: SceneSpec) -> FrameSequence:
    # separate streams keep the sampled geometry independent of the noise level
    static_seed, moving_seed, noise_seed = np.random.SeedSequence(spec.seed).spawn(3)
    rng, noise_rng = np.random.default_rng(moving_seed), np.random.default_rng(noise_seed)
    static_rng = np.random.default_rng(static_seed)

    # a sensor at rest re-hits static surfaces at the same spots every sweep
    ground = _sample_ground(static_rng, spec.background_points)
    parked = {obj: _canonical_samples(spec, static_rng, obj) for obj in range(1, spec.num_objects + 1)} if spec.kind == "static" else {}

    frames = []
    for frame in range(spec.num_frames):
        chunks, flows, classes = [ground], [np.zeros_like(ground)], [np.zeros(len(ground), dtype=np.int64)]
        for obj in range(1, spec.num_objects + 1):
            canon = parked[obj] if parked else _canonical_samples(spec, rng, obj)
            if _hidden(spec, frame):
                continue
            here = analytic_position(spec, obj, canon, frame)
            there = analytic_position(spec, obj, canon, frame + 1)
            chunks.append(here)
            flows.append(there - here)
            classes.append(np.full(len(here), obj, dtype=np.int64))
        clean = np.concatenate(chunks)
        gt = np.concatenate(flows)
        noisy = clean + noise_rng.normal(scale=spec.noise_sigma, size=clean.shape) if spec.noise_sigma else clean
        speed = np.linalg.norm(gt, axis=1)
        frames.append(
            PointCloud(
                noisy,
                frame_index=frame,
                timestamp=frame * spec.frame_interval,
                gt_flow=gt,
                class_id=np.concatenate(classes),
                is_dynamic=speed >= DYNAMIC_THRESHOLD,
            )
        )
    return FrameSequence(frames, spec.frame_interval)


def object_points(cloud: PointCloud, object_id: int) -> Optional[np.ndarray]:
    if cloud.class_id is None:
        return None
    return cloud.points[cloud.class_id == object_id]
