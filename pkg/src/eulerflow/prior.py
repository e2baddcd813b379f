"""Coordinate-network flow prior.

A ReLU MLP maps rows of ``(x, y, z, t, d)``, with positions in metres, ``t``
the sequence-normalised time in [-1, 1] and ``d`` the integration direction
(+1 forward, -1 backward), to the displacement a point undergoes over one
frame interval in that direction.

All parameters live in one flat float64 vector so the optimiser and the
checkpoint format never need to know about layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INPUT_DIM = 5
OUTPUT_DIM = 3


@dataclass(frozen=True)
class PriorConfig:
    depth: int = 8
    width: int = 128
    seed: int = 0
    # scales the output layer's initial weights so the untrained field moves
    # points by centimetres rather than metres
    output_gain: float = 0.01

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if not (np.isfinite(self.output_gain) and 0.0 <= self.output_gain <= 1.0):
            raise ValueError("output_gain must lie in [0, 1]")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) for every affine layer, input to output."""
        shapes = [(self.width, INPUT_DIM)]
        shapes += [(self.width, self.width)] * (self.depth - 1)
        shapes.append((OUTPUT_DIM, self.width))
        return shapes

    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


class PriorParams:
    """Flat parameter vector plus the views that slice it into layers."""

    def __init__(self, values, depth: int, width: int):
        self.depth = int(depth)
        self.width = int(width)
        shapes = PriorConfig(self.depth, self.width).layer_shapes()
        values = np.array(values, dtype=np.float64).reshape(-1)
        expected = sum(o * i + o for o, i in shapes)
        if values.size != expected:
            raise ValueError(
                f"parameter vector has {values.size} entries, depth={depth} "
                f"width={width} needs {expected}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters contain non-finite values")
        values.setflags(write=False)
        self.values = values
        self.shapes = shapes
        self.layers = _split(values, shapes)

    @classmethod
    def like(cls, other: "PriorParams", values) -> "PriorParams":
        return cls(values, other.depth, other.width)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"PriorParams(depth={self.depth}, width={self.width}, n={self.values.size})"


def _split(flat: np.ndarray, shapes) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    pos = 0
    for out_dim, in_dim in shapes:
        w = flat[pos : pos + out_dim * in_dim].reshape(out_dim, in_dim)
        pos += out_dim * in_dim
        b = flat[pos : pos + out_dim]
        pos += out_dim
        layers.append((w, b))
    return layers


def init_params(config: PriorConfig) -> PriorParams:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases.

    The output layer's weights are further multiplied by
    ``config.output_gain``.
    """
    rng = np.random.default_rng(config.seed)
    chunks = []
    shapes = config.layer_shapes()
    for i, (out_dim, in_dim) in enumerate(shapes):
        bound = np.sqrt(6.0 / in_dim)
        w = rng.uniform(-bound, bound, size=out_dim * in_dim)
        chunks.append(w * config.output_gain if i == len(shapes) - 1 else w)
        chunks.append(np.zeros(out_dim))
    return PriorParams(np.concatenate(chunks), config.depth, config.width)


def zero_params(config: PriorConfig) -> PriorParams:
    return PriorParams(np.zeros(config.param_count()), config.depth, config.width)


def make_batch(points, t_norm: float, direction: int) -> np.ndarray:
    """Stack positions with a shared time and direction into ``(n, 5)`` rows."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    batch = np.empty((len(pts), INPUT_DIM))
    batch[:, :3] = pts
    batch[:, 3] = t_norm
    batch[:, 4] = direction
    return batch


def _check_batch(batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.size == 0:
        return x.reshape(0, INPUT_DIM)
    if x.ndim != 2 or x.shape[1] != INPUT_DIM:
        raise ValueError(f"query batch must have shape (n, {INPUT_DIM}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("query batch contains non-finite values")
    d = x[:, 4]
    if not np.all((d == 1.0) | (d == -1.0)):
        raise ValueError("direction flag must be exactly +1 or -1")
    return x


@dataclass
class Tape:
    """Inputs and pre-activations of one forward pass."""

    params: PriorParams
    inputs: np.ndarray
    preacts: list
    consumed: bool = False


def forward_with_tape(params: PriorParams, batch) -> tuple[np.ndarray, Tape]:
    x = _check_batch(batch)
    preacts = []
    h = x
    for w, b in params.layers[:-1]:
        z = h @ w.T + b
        preacts.append(z)
        h = np.maximum(z, 0.0)
    w, b = params.layers[-1]
    out = h @ w.T + b
    return out, Tape(params, x, preacts)


def forward(params: PriorParams, batch) -> np.ndarray:
    return forward_with_tape(params, batch)[0]


def backward(params: PriorParams, tape: Tape, output_grads) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(output_grads * outputs)``.

    Returns the flat parameter gradient and the ``(n, 5)`` input gradient.
    The ReLU derivative at exactly zero is taken as zero.
    """
    if tape.params is not params:
        raise ValueError("tape was recorded with different parameters")
    if tape.consumed:
        raise ValueError("tape has already been consumed by a backward pass")
    g = np.asarray(output_grads, dtype=np.float64)
    n = len(tape.inputs)
    if g.shape != (n, OUTPUT_DIM):
        raise ValueError(f"output_grads must have shape ({n}, {OUTPUT_DIM}), got {g.shape}")
    tape.consumed = True

    grads = np.zeros(params.values.size)
    views = _split(grads, params.shapes)

    for layer in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[layer]
        gw, gb = views[layer]
        if layer == 0:
            h = tape.inputs
        else:
            h = np.maximum(tape.preacts[layer - 1], 0.0)
        gw[...] = g.T @ h
        gb[...] = g.sum(axis=0)
        g = g @ w
        if layer > 0:
            g = g * (tape.preacts[layer - 1] > 0.0)
    return grads, g
