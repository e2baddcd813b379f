"""Adam fitting loop and checkpoint persistence."""

from __future__ import annotations

import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .geom import FrameSequence
from .loss import LossBreakdown, LossConfig, frame_objective, total_objective
from .ode import PriorDiverged
from .prior import PriorConfig, PriorParams, init_params

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EULF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHHHQ")


class TrainingDiverged(RuntimeError):
    """Raised when the objective or its gradient stops being finite.

    ``best_params`` and ``last_good_epoch`` describe the last state that was
    still finite.
    """

    def __init__(self, message: str, best_params: PriorParams, last_good_epoch: int, history: "TrainHistory"):
        super().__init__(message)
        self.best_params = best_params
        self.last_good_epoch = last_good_epoch
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    patience: int = 100
    min_delta: float = 1e-6
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: PriorParams,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[PriorParams, AdamState]:
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape or state.v.shape != g.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("diverged: non-finite gradient")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return PriorParams.like(params, values), AdamState(m, v, step)


@dataclass
class EpochRecord:
    epoch: int
    total: float
    chamfer_terms: dict[int, float]
    cycle_term: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def totals(self) -> list[float]:
        return [e.total for e in self.epochs]

    def __len__(self) -> int:
        return len(self.epochs)


def _record(epoch: int, br: LossBreakdown, started: float) -> EpochRecord:
    return EpochRecord(epoch, br.total, dict(sorted(br.chamfer_terms.items())), br.cycle_term, time.perf_counter() - started)


def fit(
    seq: FrameSequence,
    prior_cfg: PriorConfig = PriorConfig(),
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    progress_callback: Optional[Callable[[EpochRecord], None]] = None,
    init: Optional[PriorParams] = None,
) -> tuple[PriorParams, TrainHistory]:
    """Fit the flow prior to a sequence.

    Each epoch visits every anchor frame once in a seeded random order and
    takes one Adam step on that frame's objective. The full objective is
    evaluated after every epoch (epoch 0 is the initialisation) and the best
    parameters seen are returned. Training stops once the best value has not
    improved by ``min_delta`` for ``patience`` epochs.
    """
    params = init if init is not None else init_params(prior_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState.zeros(len(params))
    history = TrainHistory()
    started = time.perf_counter()

    def evaluate(epoch: int) -> EpochRecord:
        rec = _record(epoch, total_objective(params, seq, loss_cfg), started)
        history.epochs.append(rec)
        if progress_callback is not None:
            progress_callback(rec)
        return rec

    try:
        rec = evaluate(0)
    except (FloatingPointError, PriorDiverged) as exc:
        raise TrainingDiverged(f"diverged at initialisation ({exc})", params, 0, history) from exc
    if not np.isfinite(rec.total):
        raise TrainingDiverged("diverged at initialisation", params, 0, history)
    best, best_params, stale = rec.total, params, 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        try:
            for t in rng.permutation(len(seq)):
                _, grads = frame_objective(params, seq, int(t), loss_cfg, rng=rng)
                params, state = adam_step(
                    params, grads, state, train_cfg.learning_rate,
                    train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps,
                )
            rec = evaluate(epoch)
        except (FloatingPointError, PriorDiverged, ValueError) as exc:
            last = history.epochs[-1].epoch if history.epochs else 0
            raise TrainingDiverged(
                f"diverged during epoch {epoch} ({exc}); last good epoch {last}", best_params, last, history
            ) from exc

        if rec.total < best - train_cfg.min_delta:
            best, best_params, stale = rec.total, params, 0
            history.best_epoch = epoch
        else:
            if rec.total < best:
                best, best_params = rec.total, params
                history.best_epoch = epoch
            stale += 1
            if stale >= train_cfg.patience:
                history.stopped_early = True
                log.info("early stop at epoch %d (best epoch %d)", epoch, history.best_epoch)
                break
    return best_params, history


def save_checkpoint(params: PriorParams, prior_cfg: PriorConfig, path) -> None:
    """Write ``params`` atomically in the little-endian EULF format."""
    if (params.depth, params.width) != (prior_cfg.depth, prior_cfg.width):
        raise ValueError("params do not match prior_cfg")
    path = Path(path)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, prior_cfg.depth, prior_cfg.width, len(params))
    payload = header + params.values.astype("<f8").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[PriorParams, PriorConfig]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header ({len(data)} bytes)")
    magic, version, depth, width, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = PriorConfig(depth, width)
    if count != cfg.param_count():
        raise ValueError(f"{path}: depth {depth} width {width} needs {cfg.param_count()} parameters, header says {count}")
    body = data[_HEADER.size :]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {8 * count} bytes of parameters, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return PriorParams(values, depth, width), cfg
