"""Parameterized building blocks with equalized learning-rate scaling.

Weights are stored at unit variance (uniform on [-sqrt(3), sqrt(3)]) and
multiplied by gain / sqrt(fan_in) at use time, so the optimizer sees every
tensor at the same scale while activations keep calibrated variance. Biases
are stored raw and start at zero unless stated otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine as eng
from .engine import Tensor
from .rng import Xoshiro256StarStar

_SQRT3 = math.sqrt(3.0)


def unit_uniform(rng: Xoshiro256StarStar, shape, dtype=np.float32) -> np.ndarray:
    """Unit-variance uniform init: U(-sqrt(3), sqrt(3))."""
    n = int(np.prod(shape)) if shape else 1
    flat = (rng.uniforms(n) * 2.0 - 1.0) * _SQRT3
    return flat.reshape(shape).astype(dtype)


class Affine:
    """y = (x @ w) * (gain / sqrt(fan_in)) + b, acting on the last axis."""

    def __init__(self, w: Tensor, b: Tensor | None, gain: float = 1.0):
        self.w = w
        self.b = b
        self.scale = float(gain) / math.sqrt(w.shape[0])

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        rng: Xoshiro256StarStar,
        gain: float = 1.0,
        bias_init: float | None = 0.0,
        dtype=np.float32,
    ) -> "Affine":
        w = eng.param(unit_uniform(rng, (d_in, d_out), dtype))
        b = None
        if bias_init is not None:
            b = eng.param(np.full(d_out, bias_init, dtype=dtype))
        return cls(w, b, gain)

    def __call__(self, x: Tensor) -> Tensor:
        out = eng.matmul(x, self.w) * self.scale
        if self.b is not None:
            out = out + self.b
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv3x3:
    """3x3 same-padding convolution with equalized scaling."""

    def __init__(self, w: Tensor, b: Tensor | None, gain: float = 1.0):
        self.w = w
        self.b = b
        fan_in = w.shape[1] * 9
        self.scale = float(gain) / math.sqrt(fan_in)

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        rng: Xoshiro256StarStar,
        gain: float = 1.0,
        dtype=np.float32,
    ) -> "Conv3x3":
        w = eng.param(unit_uniform(rng, (c_out, c_in, 3, 3), dtype))
        b = eng.param(np.zeros(c_out, dtype=dtype))
        return cls(w, b, gain)

    def __call__(self, x: Tensor) -> Tensor:
        out = eng.conv2d(x, self.w) * self.scale
        if self.b is not None:
            out = out + eng.reshape(self.b, (1, self.b.shape[0], 1, 1))
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv1x1:
    """Pointwise channel mix, used for RGB adapters and skip projections."""

    def __init__(self, w: Tensor, b: Tensor | None, gain: float = 1.0):
        self.w = w  # [C_in, C_out]
        self.b = b
        self.scale = float(gain) / math.sqrt(w.shape[0])

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        rng: Xoshiro256StarStar,
        gain: float = 1.0,
        bias: bool = True,
        dtype=np.float32,
    ) -> "Conv1x1":
        w = eng.param(unit_uniform(rng, (c_in, c_out), dtype))
        b = eng.param(np.zeros(c_out, dtype=dtype)) if bias else None
        return cls(w, b, gain)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        flat = eng.reshape(eng.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
        out = eng.matmul(flat, self.w) * self.scale
        if self.b is not None:
            out = out + self.b
        return eng.transpose(eng.reshape(out, (n, h, w, self.w.shape[1])), (0, 3, 1, 2))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out
