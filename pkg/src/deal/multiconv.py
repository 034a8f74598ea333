"""Multi-Conv block: three stacked bias-free 9x9 convolutions acting as one filter bank.

Each layer is a circular cross-correlation (the ``torch.nn.functional.conv2d``
convention with the tap origin at the kernel center). The composite operator
is applied through its per-frequency transfer matrix, which is exact for
circular boundaries and much cheaper than three spatial convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.signal import convolve2d

from .linop import DTYPE, estimate_spectral_norm, kernel_symbol

__all__ = ["MultiConv", "layer_shapes"]

KERNEL_SIZE = 9
ZERO_MEAN_ATOL = 1e-14


def layer_shapes(n_in: int, n_filters: int, ksize: int = KERNEL_SIZE):
    return [
        (4 * n_in, n_in, ksize, ksize),
        (8 * n_in, 4 * n_in, ksize, ksize),
        (n_filters, 8 * n_in, ksize, ksize),
    ]


@dataclass
class MultiConv:
    """Composite linear map ``W = gamma * K3 K2 K1`` from ``n_in`` to ``n_filters`` channels."""

    kernels: list
    gamma: float = 1.0
    zero_mean: bool = True
    _power_vec: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kernels = [torch.as_tensor(k, dtype=DTYPE) for k in self.kernels]
        if len(self.kernels) != 3:
            raise ValueError("a Multi-Conv block has exactly three layers")
        for a, b in zip(self.kernels[:-1], self.kernels[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError(f"layer channel mismatch: {tuple(a.shape)} -> {tuple(b.shape)}")

    @classmethod
    def random(cls, n_in: int = 1, n_filters: int = 128, seed: int = 0, zero_mean: bool = True,
               shape=(64, 64)) -> "MultiConv":
        rng = np.random.default_rng(seed)
        kernels = []
        for s in layer_shapes(n_in, n_filters):
            fan_in = s[1] * s[2] * s[3]
            kernels.append(rng.standard_normal(s) / np.sqrt(fan_in))
        block = cls(kernels, zero_mean=zero_mean)
        if zero_mean:
            block = block.project_zero_mean()
        return block.normalize(shape, tol=1e-8)

    @property
    def n_in(self) -> int:
        return self.kernels[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.kernels[-1].shape[0]

    @property
    def receptive_field(self) -> int:
        return sum(k.shape[-1] for k in self.kernels) - len(self.kernels) + 1

    def symbol(self, shape) -> torch.Tensor:
        """Transfer matrices on the rfft grid, shape ``(H, W//2+1, n_out, n_in)``."""
        h, w = shape
        mats = None
        for k in self.kernels:
            c = (k.shape[-2] // 2, k.shape[-1] // 2)
            # Cross-correlation has the conjugate symbol of convolution.
            s = kernel_symbol(k, (h, w), c).conj().permute(2, 3, 0, 1)
            mats = s if mats is None else s @ mats
        return self.gamma * mats

    def full_symbol(self, shape) -> torch.Tensor:
        """Transfer matrices on the full fft2 grid, shape ``(H, W, n_out, n_in)``."""
        h, w = shape
        mats = None
        for k in self.kernels:
            c = (k.shape[-2] // 2, k.shape[-1] // 2)
            rows = (torch.arange(k.shape[-2]) - c[0]) % h
            cols = (torch.arange(k.shape[-1]) - c[1]) % w
            grid = torch.zeros(*k.shape[:2], h, w, dtype=DTYPE)
            for a in range(k.shape[-2]):
                for b in range(k.shape[-1]):
                    grid[..., rows[a], cols[b]] += k[..., a, b]
            s = torch.fft.fft2(grid).conj().permute(2, 3, 0, 1)
            mats = s if mats is None else s @ mats
        return self.gamma * mats

    def apply(self, x: torch.Tensor, sym: torch.Tensor | None = None) -> torch.Tensor:
        """``Wx`` for a batch ``(B, n_in, H, W)`` -> ``(B, n_out, H, W)``."""
        if x.shape[-3] != self.n_in:
            raise ValueError(f"Multi-Conv expects {self.n_in} input channels, got {x.shape[-3]}")
        h, w = x.shape[-2:]
        if sym is None:
            sym = self.symbol((h, w))
        xf = torch.fft.rfft2(x)
        uf = torch.einsum("hwoi,bihw->bohw", sym, xf)
        return torch.fft.irfft2(uf, s=(h, w))

    def adjoint(self, u: torch.Tensor, sym: torch.Tensor | None = None) -> torch.Tensor:
        """``Wᵀu`` for a batch ``(B, n_out, H, W)`` -> ``(B, n_in, H, W)``."""
        if u.shape[-3] != self.n_out:
            raise ValueError(f"Multi-Conv adjoint expects {self.n_out} channels, got {u.shape[-3]}")
        h, w = u.shape[-2:]
        if sym is None:
            sym = self.symbol((h, w))
        uf = torch.fft.rfft2(u)
        xf = torch.einsum("hwoi,bohw->bihw", sym.conj(), uf)
        return torch.fft.irfft2(xf, s=(h, w))

    def project_zero_mean(self) -> "MultiConv":
        first = self.kernels[0].detach()
        mean = first.mean(dim=(-2, -1), keepdim=True)
        # Leave round-off-level means alone so the projection is idempotent bit for bit.
        tiny = ZERO_MEAN_ATOL * first.abs().amax(dim=(-2, -1), keepdim=True)
        first = torch.where(mean.abs() > tiny, first - mean, first)
        out = replace(self, kernels=[first] + [k.detach().clone() for k in self.kernels[1:]])
        out._power_vec = dict(self._power_vec)
        return out

    def spectral_norm(self, shape, tol: float = 1e-4, max_iter: int = 30, warm: bool = True) -> float:
        """Power-iteration estimate of ``||W||_2`` on an ``H x W`` grid."""
        h, w = shape
        with torch.no_grad():
            sym = self.symbol((h, w))
            key = (h, w)
            v0 = self._power_vec.get(key) if warm else None
            est, v = estimate_spectral_norm(
                lambda v: self.apply(v[None], sym)[0],
                lambda u: self.adjoint(u[None], sym)[0],
                (self.n_in, h, w), tol=tol, max_iter=max_iter, v0=v0, return_vector=True,
            )
            self._power_vec[key] = v
        return est

    def normalize(self, shape, tol: float = 1e-4, max_iter: int | None = None) -> "MultiConv":
        """Rescale ``gamma`` so that ``||W||_2 = 1`` on the given grid; kernels are untouched."""
        if tol <= 0:
            raise ValueError("tol must be positive")
        if max_iter is None:
            max_iter = 30 if tol >= 1e-4 else 5000
        est = self.spectral_norm(shape, tol=tol, max_iter=max_iter)
        if not np.isfinite(est) or est <= 0:
            raise FloatingPointError(f"spectral norm estimate is {est}")
        out = replace(self, kernels=[k.detach().clone() for k in self.kernels], gamma=self.gamma / est)
        out._power_vec = dict(self._power_vec)
        return out

    def exact_norm(self, shape) -> float:
        """``||W||_2`` from the per-frequency singular values (no iteration)."""
        with torch.no_grad():
            return float(torch.linalg.matrix_norm(self.full_symbol(shape), ord=2).max())

    def effective_kernels(self) -> np.ndarray:
        """Impulse responses of the block, shape ``(n_out, n_in, 25, 25)``.

        Entry ``[c, i]`` is output channel ``c`` for a unit impulse in input
        channel ``i``, centered. Applying them as centered circular
        convolutions reproduces :meth:`apply`.
        """
        ks = [k.detach().numpy() for k in self.kernels]
        eff = ks[0]
        for k in ks[1:]:
            size = eff.shape[-1] + k.shape[-1] - 1
            nxt = np.zeros((k.shape[0], eff.shape[1], size, size))
            for o in range(k.shape[0]):
                for m in range(k.shape[1]):
                    for i in range(eff.shape[1]):
                        nxt[o, i] += convolve2d(eff[m, i], k[o, m])
            eff = nxt
        # The layers correlate, so the impulse response is the flipped composite kernel.
        return self.gamma * eff[..., ::-1, ::-1].copy()

    def gram_eigenvalues(self, shape) -> np.ndarray:
        """Eigenvalues of ``WᵀW`` on an ``H x W`` grid, shape ``(H, W, n_in)`` (ascending per frequency)."""
        with torch.no_grad():
            s = self.full_symbol(shape)
            g = s.conj().transpose(-2, -1) @ s
            return torch.linalg.eigvalsh(g).numpy()

    def gram_impulse(self, shape) -> np.ndarray:
        """Impulse response of ``WᵀW`` at the grid center, shape ``(n_in, n_in, H, W)``."""
        h, w = shape
        out = []
        with torch.no_grad():
            for c in range(self.n_in):
                delta = torch.zeros(1, self.n_in, h, w, dtype=DTYPE)
                delta[0, c, h // 2, w // 2] = 1.0
                out.append(self.adjoint(self.apply(delta))[0].numpy())
        return np.stack(out)

    def parameters(self) -> list:
        return list(self.kernels)

    def detached(self) -> "MultiConv":
        out = replace(self, kernels=[k.detach().clone() for k in self.kernels])
        out._power_vec = dict(self._power_vec)
        return out
