"""Attention network producing per-channel spatial weights in ``[eps_mask, 1]``."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .linop import DTYPE, estimate_spectral_norm
from .multiconv import MultiConv
from .spline import NONDECREASING, NONINCREASING, LinearSpline

__all__ = ["MaskNet", "alpha_scaling", "phi_sigma", "mix_conv", "mix_conv_adjoint"]

SPLINE_RANGE = 3.0
SPLINE_KNOTS = 31
SCALE_KNOTS = 14
SCALE_RANGE = (-1.0, 51.0)
SCALE_INIT = 3.0
ALPHA_OFFSET = 1e-5


def alpha_scaling(scales: LinearSpline, sigma, unit: float = 1.0) -> torch.Tensor:
    """Per-channel input scaling ``exp(s_c(sigma)) / (sigma / unit + 1e-5)``.

    The splines read ``sigma`` as given; ``unit`` converts it to image
    intensity units in the denominator (255 for 0-255 noise levels on
    ``[0, 1]`` images). ``sigma`` is a scalar or a batch ``(B,)``; the result
    has shape ``(B, N_C)`` (``(N_C,)`` for a scalar).
    """
    sig = torch.as_tensor(sigma, dtype=DTYPE)
    scalar = sig.dim() == 0
    sig = sig.reshape(-1, 1)
    k = scales.values.shape[0]
    s = scales(sig.expand(-1, k))
    alpha = torch.exp(s) / (sig / unit + ALPHA_OFFSET)
    return alpha[0] if scalar else alpha


def phi_sigma(phi3: LinearSpline, alpha, t, eps_mask: float) -> torch.Tensor:
    """``clamp(phi3(alpha * t), eps_mask, 1)``; ``alpha`` broadcasts against ``t``."""
    return torch.clamp(phi3(alpha * t), min=eps_mask, max=1.0)


def mix_conv(u: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Circular 3x3 cross-correlation mixing ``N_C`` channels."""
    p = kernel.shape[-1] // 2
    return F.conv2d(F.pad(u, (p, p, p, p), mode="circular"), kernel)


def mix_conv_adjoint(v: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    p = kernel.shape[-1] // 2
    k = kernel.flip(-2, -1).transpose(0, 1)
    return F.conv2d(F.pad(v, (p, p, p, p), mode="circular"), k)


@dataclass
class MaskNet:
    """``phi_sigma ∘ mix2 ∘ phi2 ∘ mix1 ∘ phi1 ∘ W_mask``."""

    w_mask: MultiConv
    mix1: torch.Tensor
    mix2: torch.Tensor
    phi1: LinearSpline
    phi2: LinearSpline
    phi3: LinearSpline
    scales: LinearSpline
    eps_mask: float = 1e-3
    sigma_unit: float = 255.0

    def __post_init__(self):
        if not 0.0 < self.eps_mask < 1.0:
            raise ValueError(f"eps_mask must lie in (0, 1), got {self.eps_mask}")
        self.mix1 = torch.as_tensor(self.mix1, dtype=DTYPE)
        self.mix2 = torch.as_tensor(self.mix2, dtype=DTYPE)
        nc = self.w_mask.n_out
        for name in ("mix1", "mix2"):
            if tuple(getattr(self, name).shape[:2]) != (nc, nc):
                raise ValueError(f"{name} must map {nc} channels to {nc}")
        if self.scales.values.shape[0] != nc:
            raise ValueError("need one scaling spline per channel")

    @classmethod
    def initialize(cls, n_in: int = 1, n_filters: int = 128, eps_mask: float = 1e-3, seed: int = 1,
                   mix_noise: float = 0.01, shape=(64, 64)) -> "MaskNet":
        """Splines start at ``|x|``, ``|x|``, ``exp(-x^2)`` and ``s_c = 3``; the mixing layers
        start near the channel identity so the initial mask is a pointwise edge stop."""
        rng = np.random.default_rng(seed)
        w_mask = MultiConv.random(n_in, n_filters, seed=seed, shape=shape)
        eye = np.zeros((n_filters, n_filters, 3, 3))
        eye[np.arange(n_filters), np.arange(n_filters), 1, 1] = 1.0
        mix1 = eye + mix_noise * rng.standard_normal(eye.shape)
        mix2 = eye + mix_noise * rng.standard_normal(eye.shape)
        sym = dict(symmetric=True)
        phi1 = LinearSpline.from_function(np.abs, SPLINE_KNOTS, 0.0, SPLINE_RANGE, monotone=NONDECREASING, **sym)
        phi2 = LinearSpline.from_function(np.abs, SPLINE_KNOTS, 0.0, SPLINE_RANGE, monotone=NONDECREASING, **sym)
        phi3 = LinearSpline.from_function(lambda x: np.exp(-x**2), SPLINE_KNOTS, 0.0, SPLINE_RANGE,
                                          monotone=NONINCREASING, **sym)
        scales = LinearSpline.from_function(lambda x: SCALE_INIT, SCALE_KNOTS, *SCALE_RANGE, channels=n_filters)
        return cls(w_mask, mix1, mix2, phi1, phi2, phi3, scales, eps_mask)

    @property
    def n_filters(self) -> int:
        return self.w_mask.n_out

    def __call__(self, x: torch.Tensor, sigma, w_sym: torch.Tensor | None = None) -> torch.Tensor:
        """Mask for a batch ``(B, N_in, H, W)``; ``sigma`` is a scalar or ``(B,)``."""
        return self.forward(x, sigma, w_sym)[-1]

    def forward(self, x, sigma, w_sym=None) -> list:
        """All intermediate activations, last entry is the mask ``(B, N_C, H, W)``."""
        feats = self.w_mask.apply(x, w_sym)
        a1 = self.phi1(feats)
        a2 = self.phi2(mix_conv(a1, self.mix1))
        t = mix_conv(a2, self.mix2)
        alpha = alpha_scaling(self.scales, sigma, self.sigma_unit)
        if alpha.dim() == 1:
            alpha = alpha.expand(x.shape[0], -1)
        m = phi_sigma(self.phi3, alpha[:, :, None, None], t, self.eps_mask)
        return [feats, a1, a2, t, m]

    def lipschitz_bound(self, shape, sigma) -> float:
        """Upper bound on the Lipschitz constant of the mask map on an ``H x W`` grid.

        Product of the layer norms, the largest spline slopes and the largest
        channel scaling; the clamp is 1-Lipschitz.
        """
        h, w = shape
        nc = self.n_filters
        norms = [self.w_mask.exact_norm((h, w))]
        for k in (self.mix1, self.mix2):
            kd = k.detach()
            norms.append(estimate_spectral_norm(
                lambda u: mix_conv(u[None], kd)[0],
                lambda v: mix_conv_adjoint(v[None], kd)[0],
                (nc, h, w), tol=1e-10, max_iter=5000,
            ))
        alpha = float(alpha_scaling(self.scales.detached(), sigma, self.sigma_unit).max())
        slopes = [s.max_abs_slope() for s in (self.phi1, self.phi2, self.phi3)]
        return math.prod(norms) * math.prod(slopes) * alpha

    def splines(self) -> dict:
        return {"phi1": self.phi1, "phi2": self.phi2, "phi3": self.phi3, "scales": self.scales}

    def project(self, shape, tol: float = 1e-4) -> "MaskNet":
        w = self.w_mask
        if w.zero_mean:
            w = w.project_zero_mean()
        return replace(
            self,
            w_mask=w.normalize(shape, tol=tol),
            mix1=self.mix1.detach().clone(),
            mix2=self.mix2.detach().clone(),
            phi1=self.phi1.project(),
            phi2=self.phi2.project(),
            phi3=self.phi3.project(),
            scales=self.scales.project(),
        )
