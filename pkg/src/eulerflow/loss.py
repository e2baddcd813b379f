"""Multi-frame reconstruction objective with cycle consistency.

For an anchor frame ``t`` the objective sums a truncated Chamfer distance
between the ``k``-step Euler rollout of ``P_t`` and ``P_{t+k}`` for every
``k`` in ``{-W..W} \\ {0}`` that stays inside the sequence, plus
``alpha`` times the mean distance between ``P_t`` and its one-step
forward-then-backward round trip.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import FrameSequence, NearestIndex, PointCloud, as_points
from .ode import backprop_states, euler_rollout_with_grad
from .prior import PriorParams


@dataclass(frozen=True)
class LossConfig:
    window: int = 3
    cycle_weight: float = 0.01
    truncation_radius: float = 2.0
    no_multi_k: bool = False
    no_cycle: bool = False
    max_points_per_frame: Optional[int] = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.cycle_weight < 0:
            raise ValueError("cycle_weight must be >= 0")
        if not self.truncation_radius > 0:
            raise ValueError("truncation_radius must be > 0")
        if self.max_points_per_frame is not None and self.max_points_per_frame < 1:
            raise ValueError("max_points_per_frame must be >= 1")


@dataclass
class LossBreakdown:
    """Objective value split by term.

    ``cycle_term`` already includes the ``alpha`` weight, so ``total`` is the
    plain sum of ``chamfer_terms`` and ``cycle_term``.
    """

    total: float = 0.0
    chamfer_terms: dict[int, float] = field(default_factory=dict)
    cycle_term: float = 0.0

    def __iadd__(self, other: "LossBreakdown") -> "LossBreakdown":
        self.total += other.total
        for k, v in other.chamfer_terms.items():
            self.chamfer_terms[k] = self.chamfer_terms.get(k, 0.0) + v
        self.cycle_term += other.cycle_term
        return self


def _trunc(d2: np.ndarray, radius: float) -> np.ndarray:
    return np.sqrt(d2) <= radius


def truncated_chamfer(pred, target_index: NearestIndex, target, radius: float) -> tuple[float, np.ndarray]:
    """Bidirectional mean squared NN distance, zeroing pairs farther than ``radius``.

    Gradients are with respect to ``pred`` and hold the nearest-neighbour
    assignments fixed.
    """
    p = as_points(pred, "pred")
    q = target.points if isinstance(target, PointCloud) else as_points(target, "target")
    if len(p) == 0 or len(q) == 0:
        raise ValueError("truncated_chamfer needs non-empty point sets")
    if len(target_index) != len(q):
        raise ValueError("target_index was not built over target")

    grads = np.zeros_like(p)

    idx, d2 = target_index.query(p)
    keep = _trunc(d2, radius)
    forward = float(np.mean(np.where(keep, d2, 0.0)))
    grads += (2.0 / len(p)) * keep[:, None] * (p - q[idx])

    idx_back, d2_back = NearestIndex(p).query(q)
    keep_back = _trunc(d2_back, radius)
    reverse = float(np.mean(np.where(keep_back, d2_back, 0.0)))
    contrib = (2.0 / len(q)) * keep_back[:, None] * (p[idx_back] - q)
    np.add.at(grads, idx_back, contrib)

    return forward + reverse, grads


def cycle_consistency(params: PriorParams, seq: FrameSequence, t_idx: int) -> tuple[float, np.ndarray]:
    """Unweighted forward-then-backward round-trip error and its gradient."""
    if not 0 <= t_idx < seq.num_intervals:
        raise ValueError(f"cycle needs frames {t_idx} and {t_idx + 1} inside [0, {seq.num_intervals}]")
    pts = seq.frames[t_idx].points
    _, fwd = euler_rollout_with_grad(params, seq, t_idx, pts, 1)
    value, pgrad, g1 = _cycle(params, seq, t_idx, pts, fwd.states[1], 1.0)
    grads, _ = backprop_states(params, fwd, {1: g1})
    return value, grads + pgrad


def _cycle(params, seq, t_idx, pts, moved, weight, need_grad=True):
    back, btape = euler_rollout_with_grad(params, seq, t_idx + 1, moved, -1)
    diff = back - pts
    norms = np.sqrt(np.sum(diff * diff, axis=1))
    value = float(np.mean(norms))
    if not need_grad:
        return value, 0.0, np.zeros_like(pts)
    safe = np.where(norms > 0.0, norms, 1.0)
    g_back = (weight / len(pts)) * np.where(norms[:, None] > 0.0, diff / safe[:, None], 0.0)
    pgrad, g_moved = backprop_states(params, btape, {1: g_back})
    return value, pgrad, g_moved


_index_cache: "weakref.WeakKeyDictionary[FrameSequence, dict]" = weakref.WeakKeyDictionary()


def _frame_index(seq: FrameSequence, frame: int) -> NearestIndex:
    cache = _index_cache.setdefault(seq, {})
    if frame not in cache:
        cache[frame] = NearestIndex(seq.frames[frame].points)
    return cache[frame]


def _subsample(points: np.ndarray, cap: Optional[int], rng) -> np.ndarray:
    if cap is None or len(points) <= cap:
        return points
    keep = np.sort(rng.choice(len(points), size=cap, replace=False))
    return points[keep]


def _horizons(cfg: LossConfig, t_idx: int, n: int) -> tuple[int, int]:
    w = 1 if cfg.no_multi_k else cfg.window
    return min(w, n - t_idx), min(w, t_idx)


def frame_objective(
    params: PriorParams,
    seq: FrameSequence,
    t_idx: int,
    cfg: LossConfig = LossConfig(),
    rng: Optional[np.random.Generator] = None,
    need_grad: bool = True,
) -> tuple[LossBreakdown, Optional[np.ndarray]]:
    """Objective anchored at frame ``t_idx`` and its exact parameter gradient.

    With ``cfg.max_points_per_frame`` set, source and target clouds are
    uniformly subsampled using ``rng`` (a generator seeded from ``t_idx``
    when none is given, so repeated evaluations see the same subset).
    """
    n = seq.num_intervals
    if not 0 <= t_idx <= n:
        raise ValueError(f"anchor frame {t_idx} outside [0, {n}]")
    cap = cfg.max_points_per_frame
    if cap is not None and rng is None:
        rng = np.random.default_rng(t_idx)

    pts = _subsample(seq.frames[t_idx].points, cap, rng)
    ahead, behind = _horizons(cfg, t_idx, n)
    use_cycle = not cfg.no_cycle and t_idx + 1 <= n

    out = LossBreakdown()
    grads = np.zeros(params.values.size)

    for sign, steps in ((1, ahead), (-1, behind)):
        if steps == 0:
            continue
        _, tape = euler_rollout_with_grad(params, seq, t_idx, pts, sign * steps)
        state_grads = {}
        for j in range(1, steps + 1):
            target_frame = t_idx + sign * j
            if cap is None:
                target = seq.frames[target_frame].points
                index = _frame_index(seq, target_frame)
            else:
                target = _subsample(seq.frames[target_frame].points, cap, rng)
                index = NearestIndex(target)
            value, g = truncated_chamfer(tape.states[j], index, target, cfg.truncation_radius)
            out.chamfer_terms[sign * j] = value
            state_grads[j] = g
        if sign == 1 and use_cycle:
            value, pgrad, g1 = _cycle(
                params, seq, t_idx, pts, tape.states[1], cfg.cycle_weight, need_grad
            )
            out.cycle_term = cfg.cycle_weight * value
            grads += pgrad
            state_grads[1] = state_grads[1] + g1
        if need_grad:
            grads += backprop_states(params, tape, state_grads)[0]

    out.total = sum(out.chamfer_terms[k] for k in sorted(out.chamfer_terms)) + out.cycle_term
    if not np.isfinite(out.total):
        raise FloatingPointError("objective is not finite")
    return out, (grads if need_grad else None)


def total_objective(params: PriorParams, seq: FrameSequence, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    total = LossBreakdown()
    for t in range(len(seq)):
        part, _ = frame_objective(params, seq, t, cfg, need_grad=False)
        total += part
    return total
