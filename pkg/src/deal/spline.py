"""Linear splines on uniform knots with optional symmetry and monotonicity."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

__all__ = ["LinearSpline", "NONE", "NONDECREASING", "NONINCREASING"]

NONE = "none"
NONDECREASING = "nondecreasing"
NONINCREASING = "nonincreasing"
_MONOTONE = (NONE, NONDECREASING, NONINCREASING)
TV2_DEADZONE = 1e-12


@dataclass
class LinearSpline:
    """Piecewise-linear function through ``values`` at equispaced knots.

    ``values`` has shape ``(n,)`` or ``(k, n)``; in the second case the spline
    is a bank of ``k`` functions sharing the knots, and :meth:`__call__` maps
    ``x[..., j]`` through row ``j``. Outside ``[knot_min, knot_max]`` the first
    and last segments are extended linearly. With ``symmetric=True`` the spline
    is evaluated at ``|x|``.
    """

    values: torch.Tensor
    knot_min: float
    knot_max: float
    symmetric: bool = False
    monotone: str = NONE

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=torch.float64)
        if not self.knot_max > self.knot_min:
            raise ValueError("knot_max must exceed knot_min")
        if self.monotone not in _MONOTONE:
            raise ValueError(f"monotone must be one of {_MONOTONE}")
        if self.values.shape[-1] < 2:
            raise ValueError("a spline needs at least two knots")

    @classmethod
    def from_function(cls, fn, num_knots: int, knot_min: float, knot_max: float, channels=None, **kw):
        knots = np.linspace(knot_min, knot_max, num_knots)
        vals = np.asarray(fn(knots), dtype=np.float64) * np.ones_like(knots)
        if channels is not None:
            vals = np.tile(vals, (channels, 1))
        return cls(torch.as_tensor(vals), knot_min, knot_max, **kw)

    @property
    def num_knots(self) -> int:
        return self.values.shape[-1]

    @property
    def spacing(self) -> float:
        return (self.knot_max - self.knot_min) / (self.num_knots - 1)

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(self.knot_min, self.knot_max, self.num_knots)

    def _locate(self, x: torch.Tensor):
        t = x.abs() if self.symmetric else x
        u = (t - self.knot_min) / self.spacing
        idx = torch.clamp(torch.floor(u.detach()), 0, self.num_knots - 2).long()
        return u - idx, idx

    def __call__(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float64)
        frac, idx = self._locate(x)
        v = self.values
        if v.dim() == 1:
            lo, hi = v[idx], v[idx + 1]
        else:
            # Row j of the bank handles x[..., j].
            k = v.shape[0]
            row = torch.arange(k).expand_as(idx)
            lo, hi = v[row, idx], v[row, idx + 1]
        # This form keeps flat segments exactly flat.
        return lo + frac * (hi - lo)

    def slopes(self) -> torch.Tensor:
        return torch.diff(self.values, dim=-1) / self.spacing

    def max_abs_slope(self) -> float:
        return float(self.slopes().abs().max())

    def grad(self, x):
        """Slope at ``x`` and the two knot indices/weights each output depends on.

        At a knot the right segment's slope is used (the last segment at and
        beyond ``knot_max``). Under symmetry the slope carries ``sign(x)``.
        Returns ``(slope, idx, weights)`` where ``out = w0*v[idx] + w1*v[idx+1]``.
        """
        x = torch.as_tensor(x, dtype=torch.float64)
        frac, idx = self._locate(x)
        s = self.slopes()
        seg = s[idx] if s.dim() == 1 else s[torch.arange(s.shape[0]).expand_as(idx), idx]
        if self.symmetric:
            seg = torch.where(x < 0, -seg, seg)
        weights = torch.stack([1.0 - frac, frac], dim=-1)
        return seg, idx, weights

    def project(self) -> "LinearSpline":
        """Feasible copy under the monotonicity flag (running max or min of the knot values)."""
        v = self.values.detach()
        if self.monotone == NONDECREASING:
            v = torch.cummax(v, dim=-1).values
        elif self.monotone == NONINCREASING:
            v = torch.cummin(v, dim=-1).values
        else:
            v = v.clone()
        return replace(self, values=v)

    def is_feasible(self) -> bool:
        d = torch.diff(self.values.detach(), dim=-1)
        if self.monotone == NONDECREASING:
            return bool((d >= 0).all())
        if self.monotone == NONINCREASING:
            return bool((d <= 0).all())
        return True

    def tv2(self) -> torch.Tensor:
        """Second-order total variation: summed absolute slope changes.

        For symmetric splines the kink at the reflection point is included.
        Differentiable in ``values``; summed over a bank.
        """
        v = self.values
        if self.symmetric:
            v = torch.cat([v[..., 1:2], v], dim=-1)
        d2 = v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2]
        # Round-off kinks get the zero subgradient.
        scale = float(v.detach().abs().max()) if v.numel() else 0.0
        d2 = torch.where(d2.abs() > TV2_DEADZONE * max(scale, 1.0), d2, torch.zeros_like(d2))
        return d2.abs().sum() / self.spacing

    def detached(self) -> "LinearSpline":
        return replace(self, values=self.values.detach().clone())

    def meta(self) -> dict:
        return {
            "knot_min": self.knot_min,
            "knot_max": self.knot_max,
            "symmetric": self.symmetric,
            "monotone": self.monotone,
        }
