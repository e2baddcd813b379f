"""Explicit Euler integration over the learned flow field.

One Euler step spans exactly one frame interval: the field is evaluated at
the step's source frame time and its output (already a per-interval
displacement) is added to the points. Backward steps query the field with
direction -1 instead of negating the forward output.

Anything callable as ``field(points, t_norm, direction) -> displacements``
can stand in for :class:`PriorParams` in the non-differentiable routines,
which is how analytic stub fields are tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Union

import numpy as np

from .geom import FlowVectors, FrameSequence, as_points, normalized_time
from .prior import PriorParams, Tape, backward, forward_with_tape, make_batch

Field = Callable[[np.ndarray, float, int], np.ndarray]

T_GUARD = 1.001


class PriorDiverged(FloatingPointError):
    pass


@dataclass
class Trajectory:
    positions: np.ndarray  # (num_frames, 3), ordered from start_frame to end_frame
    start_frame: int
    end_frame: int

    @property
    def frames(self) -> np.ndarray:
        step = 1 if self.end_frame >= self.start_frame else -1
        return np.arange(self.start_frame, self.end_frame + step, step)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class RolloutTape:
    params: PriorParams
    tapes: list[Tape] = dc_field(default_factory=list)
    states: list[np.ndarray] = dc_field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.tapes)


def _check_time(t_norm: float) -> float:
    if not np.isfinite(t_norm) or abs(t_norm) > T_GUARD:
        raise ValueError(f"normalised time {t_norm} outside [-{T_GUARD}, {T_GUARD}]")
    return min(max(t_norm, -1.0), 1.0)


def _check_direction(direction: int) -> int:
    if direction not in (-1, 1):
        raise ValueError("direction must be +1 or -1")
    return int(direction)


def _displacement(fld, points: np.ndarray, t_norm: float, direction: int) -> np.ndarray:
    if isinstance(fld, PriorParams):
        out, _ = forward_with_tape(fld, make_batch(points, t_norm, direction))
    else:
        out = np.asarray(fld(points, t_norm, direction), dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(out)):
        raise PriorDiverged("prior diverged: non-finite displacement")
    return out


def euler_step(fld: Union[PriorParams, Field], points, t_norm: float, direction: int) -> np.ndarray:
    pts = as_points(points)
    t = _check_time(t_norm)
    d = _check_direction(direction)
    return pts + _displacement(fld, pts, t, d)


def _check_range(seq: FrameSequence, source_frame: int, k: int) -> int:
    if k == 0:
        raise ValueError("k must be non-zero")
    n = seq.num_intervals
    if not 0 <= source_frame <= n:
        raise ValueError(f"source frame {source_frame} outside [0, {n}]")
    if not 0 <= source_frame + k <= n:
        raise ValueError(f"target frame {source_frame + k} outside [0, {n}]")
    return 1 if k > 0 else -1


def euler_rollout(fld: Union[PriorParams, Field], seq: FrameSequence, source_frame: int, points, k: int) -> np.ndarray:
    """``|k|`` Euler steps from ``source_frame`` towards ``source_frame + k``."""
    sign = _check_range(seq, source_frame, k)
    pts = as_points(points)
    for j in range(abs(k)):
        pts = euler_step(fld, pts, normalized_time(seq, source_frame + j * sign), sign)
    return pts


def extract_flow(fld: Union[PriorParams, Field], seq: FrameSequence, source_frame: int, k: int) -> FlowVectors:
    """Residuals from ``source_frame`` to ``source_frame + k``.

    The residual is the sum of the per-step displacements, so for ``|k| == 1``
    adding it back to the source points reproduces the rollout exactly.
    """
    sign = _check_range(seq, source_frame, k)
    pts = seq.frames[source_frame].points
    total = np.zeros_like(pts)
    for j in range(abs(k)):
        t = _check_time(normalized_time(seq, source_frame + j * sign))
        disp = _displacement(fld, pts, t, sign)
        total = total + disp
        pts = pts + disp
    return FlowVectors(total, source_frame, source_frame + k)


def extract_trajectory(
    fld: Union[PriorParams, Field], seq: FrameSequence, start_frame: int, start_points, end_frame: int
) -> list[Trajectory]:
    """Track each start point through every integer frame up to ``end_frame``.

    ``end_frame < start_frame`` integrates backward in time.
    """
    n = seq.num_intervals
    for f in (start_frame, end_frame):
        if not 0 <= f <= n:
            raise ValueError(f"frame {f} outside [0, {n}]")
    pts = as_points(start_points)
    path = [pts.copy()]
    sign = 1 if end_frame >= start_frame else -1
    for frame in range(start_frame, end_frame, sign):
        pts = euler_step(fld, pts, normalized_time(seq, frame), sign)
        path.append(pts)
    stacked = np.stack(path, axis=1)  # (points, frames, 3)
    return [Trajectory(stacked[i], start_frame, end_frame) for i in range(len(pts))]


def euler_rollout_with_grad(
    params: PriorParams, seq: FrameSequence, source_frame: int, points, k: int
) -> tuple[np.ndarray, RolloutTape]:
    sign = _check_range(seq, source_frame, k)
    pts = as_points(points)
    tape = RolloutTape(params, states=[pts])
    for j in range(abs(k)):
        t = _check_time(normalized_time(seq, source_frame + j * sign))
        disp, step_tape = forward_with_tape(params, make_batch(pts, t, sign))
        if not np.all(np.isfinite(disp)):
            raise PriorDiverged("prior diverged: non-finite displacement")
        pts = pts + disp
        tape.tapes.append(step_tape)
        tape.states.append(pts)
    return pts, tape


def backprop_states(
    params: PriorParams, tape: RolloutTape, state_grads: dict[int, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate gradients attached to any rollout states.

    ``state_grads[j]`` is the loss gradient with respect to the points after
    ``j`` steps (``j = 0`` is the initial condition). Returns the parameter
    gradient and the gradient with respect to the initial points.
    """
    if tape.params is not params:
        raise ValueError("rollout tape was recorded with different parameters")
    n = len(tape.states[0])
    for j, g in state_grads.items():
        if not 0 <= j <= tape.steps:
            raise ValueError(f"state {j} outside rollout of {tape.steps} steps")
        if np.shape(g) != (n, 3):
            raise ValueError(f"state gradient must have shape ({n}, 3), got {np.shape(g)}")
    grads = np.zeros(params.values.size)
    g = np.zeros((n, 3))
    for j in range(tape.steps, 0, -1):
        if j in state_grads:
            g = g + state_grads[j]
        pg, ig = backward(params, tape.tapes[j - 1], g)
        grads += pg
        # p' = p + theta(p, ...): identity path plus the network's input gradient
        g = g + ig[:, :3]
    if 0 in state_grads:
        g = g + state_grads[0]
    return grads, g


def rollout_backward(params: PriorParams, tape: RolloutTape, output_grads) -> np.ndarray:
    """Parameter gradient of ``sum(output_grads * final_positions)``."""
    g = np.asarray(output_grads, dtype=np.float64)
    return backprop_states(params, tape, {tape.steps: g})[0]
