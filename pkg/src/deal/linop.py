"""Forward operators with exact adjoints.

All operators act on batched images of shape ``(B, C, H, W)`` and are built
for a fixed image shape ``(C, H, W)``. Convolutions are circular.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

__all__ = [
    "OperatorError",
    "ForwardOperator",
    "Identity",
    "ConvDownsample",
    "FourierMask",
    "make_operator",
    "load_operator_spec",
    "estimate_spectral_norm",
    "kernel_symbol",
]

DTYPE = torch.float64


class OperatorError(ValueError):
    """Raised on inconsistent operator descriptors or tensor shapes."""


def as_batch(x, ndim: int = 4) -> tuple[torch.Tensor, bool]:
    """Return ``x`` as a float64 tensor with a leading batch axis."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.dim() == ndim - 1:
        return t.unsqueeze(0), True
    if t.dim() != ndim:
        raise OperatorError(f"expected {ndim - 1}- or {ndim}-d input, got shape {tuple(t.shape)}")
    return t, False


def kernel_symbol(kernel: torch.Tensor, shape: tuple[int, int], center: tuple[int, int]) -> torch.Tensor:
    """DFT (rfft2 layout) of a kernel wrapped onto a periodic grid.

    Tap ``kernel[..., a, b]`` is placed at offset ``(a - center[0], b - center[1])``
    modulo the grid, so that multiplying by the returned symbol in Fourier space
    is circular convolution with the kernel. Leading axes are kept.
    """
    h, w = shape
    kh, kw = kernel.shape[-2:]
    rows = (torch.arange(kh) - center[0]) % h
    cols = (torch.arange(kw) - center[1]) % w
    idx = (rows[:, None] * w + cols[None, :]).reshape(-1)
    lead = kernel.shape[:-2]
    flat = kernel.reshape(*lead, kh * kw)
    grid = torch.zeros(*lead, h * w, dtype=kernel.dtype)
    grid = grid.index_add(-1, idx, flat)
    return torch.fft.rfft2(grid.reshape(*lead, h, w))


@dataclass(frozen=True)
class ForwardOperator:
    """Base class. ``in_shape`` is ``(C, H, W)``."""

    in_shape: tuple[int, int, int]

    kind = "abstract"

    @property
    def out_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def in_dim(self) -> int:
        return math.prod(self.in_shape)

    @property
    def out_dim(self) -> int:
        return math.prod(self.out_shape)

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _adjoint(self, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def apply(self, x):
        x, squeeze = as_batch(x)
        if tuple(x.shape[1:]) != tuple(self.in_shape):
            raise OperatorError(f"{self.kind}: input shape {tuple(x.shape[1:])} != {self.in_shape}")
        out = self._forward(x)
        return out[0] if squeeze else out

    def adjoint(self, y):
        y, squeeze = as_batch(y, ndim=len(self.out_shape) + 1)
        if tuple(y.shape[1:]) != tuple(self.out_shape):
            raise OperatorError(f"{self.kind}: measurement shape {tuple(y.shape[1:])} != {self.out_shape}")
        out = self._adjoint(y)
        return out[0] if squeeze else out

    def gram(self, x: torch.Tensor) -> torch.Tensor:
        """HᵀH x on a batch."""
        return self._adjoint(self._forward(x))

    def norm(self, tol: float = 1e-8, max_iter: int = 2000, seed: int = 0) -> float:
        return estimate_spectral_norm(self.apply, self.adjoint, self.in_shape, tol=tol, max_iter=max_iter, seed=seed)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Identity(ForwardOperator):
    kind = "identity"

    @property
    def out_shape(self):
        return tuple(self.in_shape)

    def _forward(self, x):
        return x

    def _adjoint(self, y):
        return y

    def gram(self, x):
        return x

    def to_dict(self):
        return {"kind": "identity"}


@dataclass(frozen=True)
class ConvDownsample(ForwardOperator):
    """Circular convolution with ``kernel`` followed by keeping every ``stride``-th pixel.

    ``(k * x)[i, j] = sum_{a,b} k[a, b] x[i - a + ci, j - b + cj]`` with the kernel
    origin ``(ci, cj) = (kh // 2, kw // 2)``; the same kernel is applied to each
    channel. ``stride == 1`` is plain deblurring.
    """

    kernel: np.ndarray = field(default=None)
    stride: int = 1

    kind = "conv_downsample"

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim == 1:
            k = k[None, :]
        if k.ndim != 2 or k.size == 0:
            raise OperatorError("conv_downsample kernel must be a nonempty 2-D array")
        if int(self.stride) < 1:
            raise OperatorError(f"stride must be >= 1, got {self.stride}")
        _, h, w = self.in_shape
        if k.shape[0] > h or k.shape[1] > w:
            raise OperatorError(f"kernel {k.shape} larger than image grid {(h, w)}")
        if h % self.stride or w % self.stride:
            raise OperatorError(f"image grid {(h, w)} not divisible by stride {self.stride}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "stride", int(self.stride))
        # Convolution origin at (kh//2, kw//2); wrap the flipped taps for the rfft symbol.
        kt = torch.as_tensor(k, dtype=DTYPE)
        sym = kernel_symbol(kt, (h, w), (k.shape[0] // 2, k.shape[1] // 2))
        object.__setattr__(self, "_symbol", sym)

    @property
    def out_shape(self):
        c, h, w = self.in_shape
        return (c, h // self.stride, w // self.stride)

    def _conv(self, x, conj=False):
        sym = self._symbol.conj() if conj else self._symbol
        h, w = x.shape[-2:]
        return torch.fft.irfft2(torch.fft.rfft2(x) * sym, s=(h, w))

    def _forward(self, x):
        s = self.stride
        return self._conv(x)[..., ::s, ::s]

    def _adjoint(self, y):
        s = self.stride
        c, h, w = self.in_shape
        up = torch.zeros(y.shape[0], c, h, w, dtype=y.dtype)
        up[..., ::s, ::s] = y
        return self._conv(up, conj=True)

    def to_dict(self):
        return {"kind": "conv_downsample", "kernel": self.kernel.tolist(), "stride": self.stride}


@dataclass(frozen=True)
class FourierMask(ForwardOperator):
    """Unitary 2-D DFT restricted to the frequencies where ``mask`` is 1.

    Measurements have shape ``(C, 2, m)``: real and imaginary parts of the
    ``m`` retained coefficients in row-major order.
    """

    mask: np.ndarray = field(default=None)

    kind = "fourier_mask"

    def __post_init__(self):
        m = np.asarray(self.mask)
        _, h, w = self.in_shape
        if m.shape != (h, w):
            raise OperatorError(f"fourier mask shape {m.shape} does not match image grid {(h, w)}")
        if not np.all((m == 0) | (m == 1)):
            raise OperatorError("fourier mask must be binary")
        m = m.astype(bool)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "_index", torch.as_tensor(np.flatnonzero(m.ravel())))

    @property
    def out_shape(self):
        return (self.in_shape[0], 2, int(self.mask.sum()))

    def _forward(self, x):
        f = torch.fft.fft2(x, norm="ortho").flatten(-2)[..., self._index]
        return torch.stack([f.real, f.imag], dim=-2)

    def _adjoint(self, y):
        c, h, w = self.in_shape
        z = torch.zeros(y.shape[0], c, h * w, dtype=torch.complex128)
        z[..., self._index] = torch.complex(y[..., 0, :], y[..., 1, :])
        return torch.fft.ifft2(z.reshape(-1, c, h, w), norm="ortho").real

    def to_dict(self):
        return {"kind": "fourier_mask", "mask": self.mask.astype(int).tolist()}


def make_operator(spec: dict, in_shape: tuple[int, int, int]) -> ForwardOperator:
    """Instantiate an operator from a descriptor dict for images of shape ``(C, H, W)``."""
    in_shape = tuple(int(v) for v in in_shape)
    if len(in_shape) != 3:
        raise OperatorError(f"image shape must be (C, H, W), got {in_shape}")
    kind = spec.get("kind")
    if kind == "identity":
        return Identity(in_shape)
    if kind == "conv_downsample":
        if "kernel" not in spec:
            raise OperatorError("conv_downsample requires a kernel")
        return ConvDownsample(in_shape, kernel=spec["kernel"], stride=spec.get("stride", 1))
    if kind == "fourier_mask":
        if "mask" not in spec:
            raise OperatorError("fourier_mask requires a mask")
        return FourierMask(in_shape, mask=spec["mask"])
    raise OperatorError(f"unknown operator kind {kind!r}")


def load_operator_spec(path) -> dict:
    with open(Path(path)) as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict) or "kind" not in spec:
        raise OperatorError(f"{path}: operator spec must be a JSON object with a 'kind'")
    return spec


def estimate_spectral_norm(
    apply: Callable,
    adjoint: Callable,
    shape,
    tol: float = 1e-6,
    max_iter: int = 500,
    seed: int = 0,
    v0: torch.Tensor | None = None,
    return_vector: bool = False,
):
    """Largest singular value of a linear map by power iteration on its Gram map.

    ``shape`` is the input shape (an int is treated as a 1-D length). Iteration
    stops once successive estimates agree to ``tol`` relative.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be > 0 and max_iter >= 1")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if v0 is None:
        gen = torch.Generator().manual_seed(seed)
        v = torch.randn(shape, generator=gen, dtype=DTYPE)
    else:
        v = v0.detach().clone().to(DTYPE)
    v = v / torch.linalg.vector_norm(v)
    est = 0.0
    for _ in range(max_iter):
        g = adjoint(apply(v))
        ng = float(torch.linalg.vector_norm(g))
        if not math.isfinite(ng):
            raise FloatingPointError("non-finite value in power iteration")
        if ng == 0.0:
            est = 0.0
            break
        new = math.sqrt(ng)
        v = g / ng
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return (est, v) if return_vector else est
