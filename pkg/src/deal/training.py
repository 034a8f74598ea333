"""Desk-scale training with Jacobian-free implicit gradients.

Only the last refinement step is differentiated. For ``x+ = A(z)⁻¹ b`` with
the previous iterate ``z`` frozen, the parameter gradient of a loss with
upstream ``g = dL/dx+`` is ``-uᵀ (dA/dθ) x+`` where ``A u = g``; the
bilinear form is differentiated with autograd.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .linop import DTYPE, ForwardOperator, Identity
from .solver import DealModel, SolveConfig, cg_solve, deal_reconstruct, psnr

__all__ = [
    "TrainConfig",
    "TrainResult",
    "StepInstance",
    "add_noise",
    "loss_eval",
    "tracked_step",
    "step_loss",
    "implicit_backward",
    "loss_gradients",
    "finite_diff_check",
    "train",
    "psnr",
    "PARAM_FAMILIES",
]

log = logging.getLogger(__name__)

PARAM_FAMILIES = {
    "W": ("W.0", "W.1", "W.2"),
    "W_mask": ("mask.W.0", "mask.W.1", "mask.W.2"),
    "W_mix": ("mask.mix1", "mask.mix2"),
    "phi1": ("mask.phi1",),
    "phi2": ("mask.phi2",),
    "phi3": ("mask.phi3",),
    "scales": ("mask.scales",),
    "kappa": ("kappa",),
}


def add_noise(x, sigma_n: float, seed=None) -> torch.Tensor:
    """``x + (sigma_n / 255) n`` with ``n`` standard normal from a seeded generator."""
    if sigma_n < 0:
        raise ValueError("sigma_n must be nonnegative")
    x = torch.as_tensor(x, dtype=DTYPE)
    rng = np.random.default_rng(seed)
    n = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
    return x + (sigma_n / 255.0) * n


def _spline_tv2(model: DealModel) -> torch.Tensor:
    return sum(s.tv2() for s in model.splines().values())


def loss_eval(x_k, x_prev_unused, x_clean, masks_k, masks_prev, model: DealModel, gamma: float = 1e-4,
              terms: bool = False):
    """Training loss on a batch.

    ``mean_b ||x_K - x||² + (gamma / N_C) mean_b ||M_K - M_{K-1}||² + gamma TV²``.
    ``x_prev_unused`` is accepted for symmetry with the update pair. With
    ``terms=True`` returns ``(total, t1, t2, t3)``.
    """
    x_k = torch.as_tensor(x_k, dtype=DTYPE)
    x_clean = torch.as_tensor(x_clean, dtype=DTYPE)
    if x_k.dim() == 3:
        x_k, x_clean = x_k[None], x_clean[None]
        masks_k, masks_prev = masks_k[None], masks_prev[None]
    t1 = ((x_k - x_clean) ** 2).flatten(1).sum(1).mean()
    t2 = (gamma / model.n_filters) * ((masks_k - masks_prev) ** 2).flatten(1).sum(1).mean()
    t3 = gamma * _spline_tv2(model)
    total = t1 + t2 + t3
    return (total, t1, t2, t3) if terms else total


@dataclass
class StepInstance:
    """Frozen inputs of the tracked refinement step."""

    H: ForwardOperator
    y: torch.Tensor
    z: torch.Tensor
    x_clean: torch.Tensor
    sigma: torch.Tensor
    lam: torch.Tensor | None = None
    masks_prev: torch.Tensor | None = None
    gamma: float = 1e-4
    eps_in: float = 1e-24
    k_in: int = 5000


def _lam(model, inst):
    if inst.lam is not None:
        return torch.as_tensor(inst.lam, dtype=DTYPE).reshape(-1).expand(inst.z.shape[0])
    return model.kappa(inst.sigma)


def tracked_step(model: DealModel, inst: StepInstance):
    """Solve ``A(z) x = Hᵀy`` (no graph). Returns ``(x_plus, mask_z, lam, apply_A)``;
    ``mask_z`` and ``lam`` carry the graph to the model parameters."""
    shape = inst.z.shape[-2:]
    w_sym = model.W.symbol(shape)
    m = model.masknet(inst.z, inst.sigma)
    lam = _lam(model, inst)
    with torch.no_grad():
        md, ld, sd = m.detach(), lam.detach().reshape(-1, 1, 1, 1), w_sym.detach()

        def A(v):
            return inst.H.gram(v) + ld * model.W.adjoint(md * md * model.W.apply(v, sd), sd)

        b = inst.H.adjoint(inst.y)
        x_plus = cg_solve(A, b, inst.z, inst.eps_in, inst.k_in).x
    return x_plus, m, lam, A


def step_loss(model: DealModel, inst: StepInstance, terms: bool = False):
    """Loss of the tracked step as a function of the parameters (no gradients)."""
    with torch.no_grad():
        x_plus, m, _, _ = tracked_step(model, inst)
        masks_k = model.masknet(x_plus, inst.sigma)
        prev = inst.masks_prev if inst.masks_prev is not None else m.detach()
        return loss_eval(x_plus, inst.z, inst.x_clean, masks_k, prev, model, inst.gamma, terms=terms)


def _leaf_model(model: DealModel):
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in model.named_arrays().items()}
    return model.with_arrays(leaves), leaves


def implicit_backward(model: DealModel, inst: StepInstance, x_plus, upstream, apply_A=None,
                      leaves=None) -> dict:
    """Parameter gradient of ``<upstream, x_plus(θ)>`` through the tracked step.

    Solves ``A u = upstream`` by CG, then differentiates
    ``-lam <W u, m(z)² W x_plus>`` with ``u`` and ``x_plus`` held fixed. Memory
    does not depend on the number of outer or CG iterations.
    """
    if leaves is None:
        model, leaves = _leaf_model(model)
    shape = inst.z.shape[-2:]
    w_sym = model.W.symbol(shape)
    m = model.masknet(inst.z, inst.sigma)
    lam = _lam(model, inst)
    if apply_A is None:
        md, ld, sd = m.detach(), lam.detach().reshape(-1, 1, 1, 1), w_sym.detach()

        def apply_A(v):
            return inst.H.gram(v) + ld * model.W.adjoint(md * md * model.W.apply(v, sd), sd)

    with torch.no_grad():
        u = cg_solve(apply_A, upstream.detach(), None, inst.eps_in, inst.k_in).x
    xp = x_plus.detach()
    wu = model.W.apply(u, w_sym)
    wx = model.W.apply(xp, w_sym)
    s = -(lam.reshape(-1, 1, 1, 1) * wu * m * m * wx).sum()
    names = list(leaves)
    grads = torch.autograd.grad(s, [leaves[k] for k in names], allow_unused=True) if s.requires_grad else [None] * len(names)
    return {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)}


def loss_gradients(model: DealModel, inst: StepInstance):
    """Loss value, its terms and the full gradient bundle for one tracked step."""
    gmodel, leaves = _leaf_model(model)
    x_plus, m, _, A = tracked_step(gmodel, inst)
    xk = x_plus.detach().requires_grad_(True)
    masks_k = gmodel.masknet(xk, inst.sigma)
    prev = inst.masks_prev if inst.masks_prev is not None else m.detach()
    total, t1, t2, t3 = loss_eval(xk, inst.z, inst.x_clean, masks_k, prev, gmodel, inst.gamma, terms=True)
    names = list(leaves)
    direct = torch.autograd.grad(total, [xk] + [leaves[k] for k in names], allow_unused=True)
    upstream = direct[0]
    implicit = implicit_backward(gmodel, inst, x_plus, upstream, A, leaves)
    grads = {}
    for k, d in zip(names, direct[1:]):
        grads[k] = implicit[k] + (0.0 if d is None else d.detach())
    terms = tuple(float(t.detach()) for t in (total, t1, t2, t3))
    return terms, grads


def finite_diff_check(model: DealModel, inst: StepInstance, eps: float = 1e-7, coords: int | None = None,
                      seed: int = 0, grads: dict | None = None) -> dict:
    """Central differences of :func:`step_loss` against the implicit gradient.

    Compares ``coords`` random entries per array (all entries when ``None``)
    and reports, per parameter family, ``||g_fd - g|| / max(||g_fd||, tiny)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    if inst.masks_prev is None:
        # The previous mask is a constant of the loss, so freeze it before perturbing.
        with torch.no_grad():
            inst = replace(inst, masks_prev=model.masknet(inst.z, inst.sigma))
    if grads is None:
        _, grads = loss_gradients(model, inst)
    rng = np.random.default_rng(seed)
    arrays = model.named_arrays()
    fd, an = {}, {}
    for name, arr in arrays.items():
        flat = arr.detach().reshape(-1)
        n = flat.numel()
        idx = np.arange(n) if coords is None or coords >= n else rng.choice(n, coords, replace=False)
        vals = []
        for i in idx:
            out = []
            for sgn in (1.0, -1.0):
                pert = flat.clone()
                pert[i] += sgn * eps
                out.append(float(step_loss(model.with_arrays({name: pert.reshape(arr.shape)}), inst)))
            vals.append((out[0] - out[1]) / (2 * eps))
        fd[name] = np.asarray(vals)
        an[name] = grads[name].reshape(-1).numpy()[idx]
    report = {}
    for fam, names in PARAM_FAMILIES.items():
        f = np.concatenate([fd[k] for k in names])
        a = np.concatenate([an[k] for k in names])
        denom = max(np.linalg.norm(f), 1e-300)
        report[fam] = 0.0 if np.linalg.norm(f - a) == 0 else float(np.linalg.norm(f - a) / denom)
    report["max"] = max(report.values())
    return report


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    patch_size: int = 32
    n_filters: int = 8
    n_in: int = 1
    eps_mask: float = 1e-3
    sigma_range: tuple = (0.0, 50.0)
    k_out_range: tuple = (15, 60)
    gamma: float = 1e-4
    # (steps, lr_start, lr_end) per cosine-annealed phase; the last phase absorbs leftover steps
    phases: tuple = ((400, 5e-3, 4e-3), (100, 2e-3, 1e-6))
    k_in: int = 50
    eps_in: float = 1e-4
    eps_out: float = 1e-4
    val_interval: int = 100
    val_sigma: float = 25.0
    val_images: int = 4
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not lo <= hi or lo < 0:
            raise ValueError("sigma_range must be a nonempty interval in [0, inf)")
        klo, khi = self.k_out_range
        if not 1 <= klo <= khi:
            raise ValueError("k_out_range must be a nonempty interval of positive integers")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def lr(self, step: int) -> float:
        start = 0
        for i, (n, lr0, lr1) in enumerate(self.phases):
            last = i == len(self.phases) - 1
            if step < start + n or last:
                n = max(n, 1)
                t = min(step - start, n) / n
                return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * t))
            start += n
        return 0.0


@dataclass
class TrainResult:
    model: DealModel
    history: list = field(default_factory=list)
    best_step: int = 0
    best_psnr: float = float("-inf")
    final_model: DealModel | None = None

    def loss_curve(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])


def _sample_patches(dataset, size, batch, rng, n_in):
    out = np.empty((batch, n_in, size, size))
    for b in range(batch):
        img = dataset[int(rng.integers(len(dataset)))]
        img = img if img.ndim == 3 else img[None]
        h, w = img.shape[-2:]
        if h < size or w < size:
            raise ValueError(f"training image {img.shape} smaller than patch size {size}")
        i, j = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
        out[b] = img[:, i:i + size, j:j + size]
    return torch.from_numpy(out)


def validate(model: DealModel, images, sigma_n: float, seed: int = 12345, cfg: SolveConfig | None = None):
    """Mean PSNR of reconstructions and of the noisy inputs on a held-out set."""
    cfg = cfg or SolveConfig(k_in=100, eps_in=1e-6, k_out=100, eps_out=1e-4)
    gains = []
    for i, img in enumerate(images):
        x = torch.as_tensor(img if img.ndim == 3 else img[None], dtype=DTYPE)
        y = add_noise(x, sigma_n, seed + i)
        xh, _ = deal_reconstruct(model, Identity(tuple(x.shape)), y, sigma=sigma_n, cfg=cfg)
        gains.append((psnr(xh, x), psnr(y, x)))
    g = np.array(gains)
    return float(g[:, 0].mean()), float(g[:, 1].mean())


def train(dataset, cfg: TrainConfig, model: DealModel | None = None, val_set=None, callback=None) -> TrainResult:
    """Adam on the three-part loss with projections after every step.

    Each step samples patches, noise levels and an outer-iteration budget,
    runs the refinement without gradients, then differentiates one extra
    update. The checkpoint with the best validation PSNR is returned.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.patch_size, cfg.patch_size)
    if model is None:
        model = DealModel.initialize(cfg.n_in, cfg.n_filters, cfg.eps_mask, seed=cfg.seed, shape=shape)
    else:
        model = model.project(shape)
    if val_set is None:
        from .data import piecewise_dataset
        val_set = piecewise_dataset(cfg.val_images, cfg.patch_size, seed=cfg.seed + 7919, channels=cfg.n_in)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in model.named_arrays().items()}
    opt = torch.optim.Adam(list(leaves.values()), lr=cfg.lr(0), betas=(0.9, 0.999), eps=1e-8)
    result = TrainResult(model=model.detached())

    def evaluate(step, model):
        val, _ = validate(model, val_set, cfg.val_sigma)
        if val > result.best_psnr:
            result.best_psnr, result.best_step, result.model = val, step, model.detached()
        return val

    for step in range(cfg.steps):
        x = _sample_patches(dataset, cfg.patch_size, cfg.batch_size, rng, cfg.n_in)
        sig = torch.from_numpy(rng.uniform(*cfg.sigma_range, size=cfg.batch_size))
        k_out = int(rng.integers(cfg.k_out_range[0], cfg.k_out_range[1] + 1))
        noise = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
        y = x + (sig / 255.0).reshape(-1, 1, 1, 1) * noise
        H = Identity(tuple(x.shape[1:]))
        if k_out > 1:
            z, _ = deal_reconstruct(model, H, y, sigma=sig, cfg=SolveConfig(
                k_in=cfg.k_in, eps_in=cfg.eps_in, eps_out=cfg.eps_out, k_out=k_out - 1))
        else:
            z = torch.zeros_like(x)
        inst = StepInstance(H, y, z, x, sig, gamma=cfg.gamma, eps_in=cfg.eps_in, k_in=cfg.k_in)
        (total, t1, t2, t3), grads = loss_gradients(model, inst)
        if not all(math.isfinite(v) for v in (total, t1, t2, t3)):
            raise FloatingPointError(f"non-finite loss at step {step}")
        lr = cfg.lr(step)
        for g in opt.param_groups:
            g["lr"] = lr
        for k, leaf in leaves.items():
            leaf.grad = grads[k]
        opt.step()
        model = model.with_arrays({k: v.detach().clone() for k, v in leaves.items()}).project(shape)
        with torch.no_grad():
            for k, v in model.named_arrays().items():
                leaves[k].copy_(v)
        rec = {"step": step, "loss": total, "term1": t1, "term2": t2, "term3": t3, "psnr_val": float("nan"),
               "lr": lr}
        if cfg.val_interval and ((step + 1) % cfg.val_interval == 0 or step + 1 == cfg.steps):
            rec["psnr_val"] = evaluate(step + 1, model)
        result.history.append(rec)
        if callback is not None:
            callback(rec)
        log.debug("step %d loss %.5g", step, total)
    if cfg.steps == 0 or not result.history:
        result.model = model.detached()
    result.final_model = model.detached()
    return result
