"""Dense tensor primitives and the deterministic random number source.

Tensors are plain C-contiguous ``numpy`` arrays of ``float64``; the helpers
here enforce the project-wide conventions (row-major layout, rank-4
``(batch, channel, height, width)`` for image data, explicit shape checks)
and give the reductions a documented accumulation order.  Operations return
new arrays and never mutate their inputs, so values can be shared freely.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AxisError, SizeError

Tensor = np.ndarray


def create(shape, fill: float = 0.0, data=None) -> Tensor:
    """Build a float64 tensor of `shape`, either constant-filled or from `data`.

    `data` is consumed in row-major order and must match the shape's element
    count exactly.
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise SizeError(f"dimensions must be >= 1, got {shape}")
    n = math.prod(shape)
    if data is None:
        return np.full(shape, float(fill), dtype=np.float64)
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != n:
        raise SizeError(f"data length {flat.size} does not match shape {shape} ({n} elements)")
    return flat.reshape(shape).copy()


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise SizeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return a - b


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a tensor of equal shape or a scalar."""
    if np.isscalar(b):
        return a * float(b)
    _check_same_shape(a, b)
    return a * b


def scale(a: Tensor, s: float) -> Tensor:
    return a * float(s)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    return np.maximum(a, float(floor))


def reduce_sum(t: Tensor, axes=None) -> Tensor:
    """Sum over `axes` (all axes when None), removing the reduced dims.

    Accumulation is a strict left-to-right linear scan in row-major order of
    the reduced elements, so the result is bitwise-equal to a sequential
    accumulator oracle.  Reducing every axis yields a shape-() scalar tensor.
    """
    t = np.asarray(t, dtype=np.float64)
    if axes is None:
        axes = tuple(range(t.ndim))
    else:
        axes = tuple(sorted({int(a) for a in axes}))
    for a in axes:
        if a < 0 or a >= t.ndim:
            raise AxisError(f"axis {a} out of range for rank-{t.ndim} tensor")
    if not axes:
        return t.copy()
    keep = tuple(i for i in range(t.ndim) if i not in axes)
    moved = np.transpose(t, keep + axes)
    flat = np.ascontiguousarray(moved).reshape(
        tuple(t.shape[i] for i in keep) + (-1,)
    )
    # cumsum is defined as the sequential recurrence r[i] = r[i-1] + x[i],
    # which pins the accumulation order.
    return np.cumsum(flat, axis=-1)[..., -1]


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two rank-4 (B, C, H, W) tensors along the channel axis, `a` first."""
    if a.ndim != 4 or b.ndim != 4:
        raise SizeError(f"expected rank-4 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise SizeError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


class Rng:
    """Splittable deterministic random stream.

    A stream is identified by a 64-bit seed plus a tuple of integer stream
    indices; `child(i, ...)` derives an independent stream by extending the
    tuple.  Streams are backed by numpy's PCG64 keyed via SeedSequence, so
    the same (seed, path, draw sequence) reproduces identical values on any
    platform.  An Rng instance is a value object: never share one across
    threads, split children instead.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(i) for i in path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self.path))
        )

    def child(self, *indices: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(indices))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> Tensor:
        # mean + std * z rather than Generator.normal(mean, std) so that
        # std=0 is exact and never rejected.
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        return mean + std * self._gen.standard_normal(size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> Tensor:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def seeded_normal(shape, rng: Rng, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """Draw a normal tensor from `rng`; std=0 yields a constant tensor."""
    out = rng.normal(tuple(int(d) for d in shape), mean=mean, std=std)
    return np.asarray(out, dtype=np.float64)
