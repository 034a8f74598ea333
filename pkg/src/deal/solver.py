"""Reconstruction engine: normal-equation operator, batched CG, and the outer refinement loop.

Conventions: images live in ``[0, 1]``; noise levels ``sigma`` are quoted on
the 0-255 scale and feed the scaling splines and ``kappa`` directly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import torch

from .linop import DTYPE, ForwardOperator, Identity, OperatorError, as_batch
from .maskgen import MaskNet
from .multiconv import MultiConv
from .spline import LinearSpline

__all__ = [
    "DealModel",
    "SolveConfig",
    "SolveReport",
    "CGResult",
    "CGError",
    "normal_apply",
    "cg_solve",
    "deal_step",
    "deal_reconstruct",
    "equivalent_row",
    "psnr",
]

KAPPA_KNOTS = 52
KAPPA_RANGE = (-1.0, 51.0)
KAPPA_FLOOR = 1e-4
REL_FLOOR = 1e-12


class CGError(FloatingPointError):
    def __init__(self, message: str, sample: int):
        super().__init__(message)
        self.sample = sample


@dataclass
class DealModel:
    """Learnable state: filter block ``W``, mask network, and the ``sigma -> lambda`` spline."""

    W: MultiConv
    masknet: MaskNet
    kappa: LinearSpline

    @classmethod
    def initialize(cls, n_in: int = 1, n_filters: int = 128, eps_mask: float = 1e-3, seed: int = 0,
                   shape=(64, 64), zero_mean: bool = True) -> "DealModel":
        W = MultiConv.random(n_in, n_filters, seed=seed, zero_mean=zero_mean, shape=shape)
        masknet = MaskNet.initialize(n_in, n_filters, eps_mask=eps_mask, seed=seed + 1, shape=shape)
        kappa = LinearSpline.from_function(lambda s: s, KAPPA_KNOTS, *KAPPA_RANGE)
        return cls(W, masknet, kappa).project(shape, tol=1e-8)

    @property
    def n_in(self) -> int:
        return self.W.n_in

    @property
    def n_filters(self) -> int:
        return self.W.n_out

    @property
    def eps_mask(self) -> float:
        return self.masknet.eps_mask

    def lam(self, sigma) -> torch.Tensor:
        """``lambda = kappa(sigma)``."""
        return self.kappa(torch.as_tensor(sigma, dtype=DTYPE))

    def named_arrays(self) -> dict:
        """Every learnable array by name (shared tensors, not copies)."""
        mn = self.masknet
        out = {f"W.{i}": k for i, k in enumerate(self.W.kernels)}
        out.update({f"mask.W.{i}": k for i, k in enumerate(mn.w_mask.kernels)})
        out.update({
            "mask.mix1": mn.mix1,
            "mask.mix2": mn.mix2,
            "mask.phi1": mn.phi1.values,
            "mask.phi2": mn.phi2.values,
            "mask.phi3": mn.phi3.values,
            "mask.scales": mn.scales.values,
            "kappa": self.kappa.values,
        })
        return out

    def with_arrays(self, arrays: dict) -> "DealModel":
        """Copy of the model with the given arrays swapped in (missing names are kept)."""
        cur = self.named_arrays()
        a = {k: arrays.get(k, v) for k, v in cur.items()}
        mn = self.masknet
        W = replace(self.W, kernels=[a[f"W.{i}"] for i in range(3)])
        W._power_vec = dict(self.W._power_vec)
        wm = replace(mn.w_mask, kernels=[a[f"mask.W.{i}"] for i in range(3)])
        wm._power_vec = dict(mn.w_mask._power_vec)
        masknet = replace(
            mn, w_mask=wm, mix1=a["mask.mix1"], mix2=a["mask.mix2"],
            phi1=replace(mn.phi1, values=a["mask.phi1"]),
            phi2=replace(mn.phi2, values=a["mask.phi2"]),
            phi3=replace(mn.phi3, values=a["mask.phi3"]),
            scales=replace(mn.scales, values=a["mask.scales"]),
        )
        return DealModel(W, masknet, replace(self.kappa, values=a["kappa"]))

    def detached(self) -> "DealModel":
        return self.with_arrays({k: v.detach().clone() for k, v in self.named_arrays().items()})

    def splines(self) -> dict:
        out = dict(self.masknet.splines())
        out["kappa"] = self.kappa
        return out

    def project(self, shape, tol: float = 1e-4) -> "DealModel":
        """Enforce all constraints: zero-mean first layers, unit spectral norms, spline
        monotonicity, and ``kappa >= KAPPA_FLOOR``."""
        W = self.W.project_zero_mean() if self.W.zero_mean else self.W.detached()
        kv = torch.clamp(self.kappa.values.detach(), min=KAPPA_FLOOR)
        return DealModel(
            W.normalize(shape, tol=tol),
            self.masknet.project(shape, tol=tol),
            replace(self.kappa, values=kv),
        )


@dataclass
class SolveConfig:
    k_in: int = 1000
    k_out: int = 1000
    eps_in: float = 1e-8
    eps_out: float = 1e-5
    x0: str = "zero"
    x0_value: object = None
    lam: float | None = None
    sigma: float | None = None
    freeze_mask: bool = False

    def __post_init__(self):
        if self.k_in < 1 or self.k_out < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.eps_in <= 0 or self.eps_out <= 0:
            raise ValueError("tolerances must be positive")
        if self.x0 not in ("zero", "adjoint", "given"):
            raise ValueError(f"x0 must be zero, adjoint or given, got {self.x0!r}")
        if self.x0 == "given" and self.x0_value is None:
            raise ValueError("x0='given' requires x0_value")

    @classmethod
    def training(cls, **kw) -> "SolveConfig":
        return cls(**{"k_in": 50, "eps_in": 1e-4, "eps_out": 1e-4, **kw})


@dataclass
class SolveReport:
    rel_change: list = field(default_factory=list)
    cg_iters: list = field(default_factory=list)
    cg_residual: list = field(default_factory=list)
    psnr: list | None = None
    converged: bool = False
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.rel_change)

    def rows(self):
        """``(k, rel_change, cg_iters, psnr)`` tuples, ``k`` counted from 1."""
        for i, (r, c) in enumerate(zip(self.rel_change, self.cg_iters)):
            p = self.psnr[i] if self.psnr is not None else None
            yield i + 1, r, c, p


@dataclass
class CGResult:
    x: torch.Tensor
    iterations: torch.Tensor
    residual: torch.Tensor
    history: list | None = None


def _dot(a, b):
    return (a * b).flatten(1).sum(1)


def _bshape(v: torch.Tensor, ndim: int) -> torch.Tensor:
    return v.reshape(-1, *([1] * (ndim - 1)))


def normal_apply(H: ForwardOperator, W: MultiConv, m, lam, x, w_sym=None) -> torch.Tensor:
    """``HᵀH x + lam Wᵀ(m² ⊙ Wx)`` on a batch; ``lam`` is a scalar or ``(B,)``."""
    x, squeeze = as_batch(x)
    lam = torch.as_tensor(lam, dtype=DTYPE)
    if torch.any(lam < 0):
        raise ValueError("lambda must be nonnegative")
    m = torch.as_tensor(m, dtype=DTYPE)
    if m.dim() == 3:
        m = m.unsqueeze(0)
    out = H.gram(x)
    if torch.any(lam != 0):
        reg = W.adjoint(m * m * W.apply(x, w_sym), w_sym)
        lam = lam if lam.dim() == 0 else _bshape(lam, x.dim())
        out = out + lam * reg
    return out[0] if squeeze else out


def cg_solve(apply_A, b, x_init=None, eps_in: float = 1e-8, k_in: int = 1000,
             record_history: bool = False) -> CGResult:
    """Batched conjugate gradients with per-sample stopping.

    Sample ``i`` stops once ``||A x_i - b_i||_2^2 <= eps_in`` or after ``k_in``
    iterations. ``apply_A`` maps a batch to a batch and must be symmetric
    positive definite on every sample.
    """
    if eps_in <= 0:
        raise ValueError("eps_in must be positive")
    x = torch.zeros_like(b) if x_init is None else x_init.clone()
    r = b - apply_A(x)
    p = r.clone()
    rs = _dot(r, r)
    active = rs > eps_in
    iters = torch.zeros(b.shape[0], dtype=torch.long)
    hist = [rs.sqrt().clone()] if record_history else None
    for _ in range(k_in):
        if not bool(active.any()):
            break
        Ap = apply_A(p)
        pAp = _dot(p, Ap)
        bad = active & ~(torch.isfinite(pAp) & (pAp > 0))
        if bool(bad.any()):
            i = int(torch.nonzero(bad)[0])
            raise CGError(f"CG breakdown in sample {i}: p^T A p = {float(pAp[i])}", i)
        alpha = torch.where(active, rs / torch.where(active, pAp, torch.ones_like(pAp)), torch.zeros_like(rs))
        x = x + _bshape(alpha, x.dim()) * p
        r = r - _bshape(alpha, x.dim()) * Ap
        rs_new = _dot(r, r)
        if not bool(torch.isfinite(rs_new).all()):
            i = int(torch.nonzero(~torch.isfinite(rs_new))[0])
            raise CGError(f"non-finite CG residual in sample {i}", i)
        iters += active.long()
        beta = torch.where(active, rs_new / torch.where(active, rs, torch.ones_like(rs)), torch.zeros_like(rs))
        p = torch.where(_bshape(active, x.dim()), r + _bshape(beta, x.dim()) * p, p)
        rs = torch.where(active, rs_new, rs)
        active = active & (rs_new > eps_in)
        if record_history:
            hist.append(rs.sqrt().clone())
    return CGResult(x, iters, rs.sqrt(), hist)


def _per_sample(v, batch: int) -> torch.Tensor:
    t = torch.as_tensor(v, dtype=DTYPE).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise ValueError(f"expected a scalar or {batch} values, got {t.numel()}")
    return t


class _Workspace:
    """Per-grid quantities that stay fixed during a reconstruction."""

    def __init__(self, model: DealModel, shape):
        self.w_sym = model.W.symbol(shape)
        self.mask_sym = model.masknet.w_mask.symbol(shape)


def _step(model, H, b, z, sigma, lam, cfg, ws, mask=None):
    if mask is None:
        if cfg.freeze_mask:
            mask = torch.ones(z.shape[0], model.n_filters, *z.shape[-2:], dtype=DTYPE)
        else:
            mask = model.masknet(z, sigma, ws.mask_sym)
    lam_b = _bshape(lam, z.dim())

    def A(v):
        return H.gram(v) + lam_b * model.W.adjoint(mask * mask * model.W.apply(v, ws.w_sym), ws.w_sym)

    res = cg_solve(A, b, z, cfg.eps_in, cfg.k_in)
    return res, mask


def _resolve(model, sigma, cfg, batch):
    sig = cfg.sigma if cfg.sigma is not None else sigma
    if sig is None:
        raise ValueError("a model noise level sigma is required")
    sig = _per_sample(sig, batch)
    lam = _per_sample(cfg.lam, batch) if cfg.lam is not None else model.lam(sig)
    if torch.any(lam < 0):
        raise ValueError("lambda must be nonnegative")
    return sig, lam


def deal_step(model: DealModel, H: ForwardOperator, y, z, sigma, lam=None, cfg: SolveConfig | None = None):
    """One refinement update: solve ``A(z) x = Hᵀy`` by CG warm-started at ``z``.

    Returns ``(x_next, CGResult)``. ``lam=None`` uses ``kappa(sigma)``.
    """
    cfg = cfg or SolveConfig()
    z, squeeze = as_batch(z)
    y_b = torch.as_tensor(y, dtype=DTYPE)
    if y_b.dim() == len(H.out_shape):
        y_b = y_b.unsqueeze(0)
    if lam is not None:
        cfg = replace(cfg, lam=lam)
    sig, lam_t = _resolve(model, sigma, cfg, z.shape[0])
    ws = _Workspace(model, z.shape[-2:])
    with torch.no_grad():
        b = H.adjoint(y_b)
        res, _ = _step(model, H, b, z, sig, lam_t, cfg, ws)
    x = res.x[0] if squeeze else res.x
    return x, res


def _initial(H, y, cfg, shape):
    if cfg.x0 == "zero":
        return torch.zeros(shape, dtype=DTYPE)
    if cfg.x0 == "adjoint":
        # Identity.adjoint returns its argument; the loop updates x in place.
        return H.adjoint(y).clone()
    x0 = torch.as_tensor(cfg.x0_value, dtype=DTYPE)
    if x0.dim() == 3:
        x0 = x0.unsqueeze(0)
    return x0.expand(shape).clone()


def deal_reconstruct(model: DealModel, H: ForwardOperator, y, sigma=None, cfg: SolveConfig | None = None,
                     x_true=None, callback=None, record_iterates: bool = False):
    """Iterate the refinement map from ``x0`` until the relative change drops below ``eps_out``.

    Works on a single measurement or a batch; each sample stops on its own.
    Returns ``(x_hat, report)`` for a single input and ``(x_hat, [reports])``
    for a batch. Hitting ``k_out`` is not an error: the report says
    ``converged=False``. With ``record_iterates`` each report gets an
    ``iterates`` list (``x_0`` first).
    """
    cfg = cfg or SolveConfig()
    y_b = torch.as_tensor(y, dtype=DTYPE)
    squeeze = y_b.dim() == len(H.out_shape)
    if squeeze:
        y_b = y_b.unsqueeze(0)
    if tuple(y_b.shape[1:]) != tuple(H.out_shape):
        raise OperatorError(f"measurement shape {tuple(y_b.shape[1:])} != operator output {H.out_shape}")
    batch = y_b.shape[0]
    shape = (batch, *H.in_shape)
    sig, lam = _resolve(model, sigma, cfg, batch)
    if x_true is not None:
        xt, _ = as_batch(x_true)
        xt = xt.expand(shape)
    reports = [SolveReport(psnr=[] if x_true is not None else None) for _ in range(batch)]
    t0 = time.perf_counter()
    with torch.no_grad():
        ws = _Workspace(model, H.in_shape[-2:])
        b = H.adjoint(y_b)
        x = _initial(H, y_b, cfg, shape)
        if record_iterates:
            for i, rep in enumerate(reports):
                rep.iterates = [x[i].clone()]
        active = torch.arange(batch)
        for k in range(cfg.k_out):
            xa = x[active]
            try:
                res, _ = _step(model, H, b[active], xa, sig[active], lam[active], cfg, ws)
            except CGError as err:
                raise CGError(f"outer iteration {k + 1}: {err}", int(active[err.sample])) from err
            num = torch.linalg.vector_norm((res.x - xa).flatten(1), dim=1)
            den = torch.clamp(torch.linalg.vector_norm(xa.flatten(1), dim=1), min=REL_FLOOR)
            rel = num / den
            x[active] = res.x
            done = torch.zeros(len(active), dtype=torch.bool)
            for j, i in enumerate(active.tolist()):
                rep = reports[i]
                rep.rel_change.append(float(rel[j]))
                rep.cg_iters.append(int(res.iterations[j]))
                rep.cg_residual.append(float(res.residual[j]))
                if x_true is not None:
                    rep.psnr.append(psnr(x[i], xt[i]))
                if record_iterates:
                    rep.iterates.append(x[i].clone())
                if rel[j] <= cfg.eps_out:
                    rep.converged = True
                    done[j] = True
            if callback is not None:
                callback(k + 1, x, active)
            active = active[~done]
            if len(active) == 0:
                break
    wall = time.perf_counter() - t0
    for rep in reports:
        rep.wall_time = wall
    if squeeze:
        return x[0], reports[0]
    return x, reports


def equivalent_row(model: DealModel, H: ForwardOperator, mask, lam: float, n, eps_in: float = 1e-20,
                   k_in: int = 10000) -> torch.Tensor:
    """``A⁻¹ e_n`` for the denoising system ``A = I + lam Wᵀ diag(m²) W``.

    ``n`` is a flat pixel index or a ``(channel, row, col)`` tuple. Since ``A``
    is symmetric, ``<row, y>`` is pixel ``n`` of ``A⁻¹ y``.
    """
    if not isinstance(H, Identity):
        raise OperatorError("equivalent rows are only defined for the denoising operator")
    c, h, w = H.in_shape
    e = torch.zeros(1, c, h, w, dtype=DTYPE)
    if isinstance(n, (tuple, list)):
        e[(0, *n)] = 1.0
    else:
        e.view(-1)[int(n)] = 1.0
    m = torch.as_tensor(mask, dtype=DTYPE)
    if m.dim() == 3:
        m = m.unsqueeze(0)
    with torch.no_grad():
        sym = model.W.symbol((h, w))
        res = cg_solve(lambda v: normal_apply(H, model.W, m, lam, v, sym), e, None, eps_in, k_in)
    return res.x[0]


def psnr(x, ref, peak: float = 1.0, cap: float = 200.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``cap`` when the images coincide."""
    x = torch.as_tensor(x, dtype=DTYPE)
    ref = torch.as_tensor(ref, dtype=DTYPE)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(ref.shape)}")
    mse = float(torch.mean((x - ref) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak**2 / mse))
