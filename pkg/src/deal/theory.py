"""Dense numerical checks of the stability and convergence guarantees.

Every check materializes small operators column by column and uses dense
symmetric eigensolvers, so problem sizes are capped (``DENSE_CAP`` unknowns).

Conventions used throughout:

* The clamp keeps every mask entry in ``[eps_M, 1]``, so ``M² ⪰ eps_M² Id`` and
  ``A(x) ⪰ HᵀH + lam eps_M² WᵀW``. The reported ``lambda_eps`` is the smallest
  eigenvalue of that lower bound (``eps_floor = lam * eps_M**2``).
* ``M²`` is Lipschitz with constant ``2 L`` when ``M`` has constant ``L``, so
  the Lipschitz estimate of the refinement map is ``2 lam L ||Hᵀy|| / lambda_eps²``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .linop import DTYPE, ForwardOperator
from .multiconv import MultiConv
from .solver import DealModel, SolveConfig, deal_reconstruct, deal_step

__all__ = [
    "DENSE_CAP",
    "dense_materialize",
    "normal_matrix",
    "lambda_eps",
    "check_prop1",
    "refine",
    "check_lemma2",
    "check_range",
    "estimate_contraction",
    "check_theorem4",
    "TheoryReport",
    "theory_report",
]

DENSE_CAP = 4096
PD_THRESHOLD = 1e-12
TIGHT = dict(eps_in=1e-24, k_in=5000)


def dense_materialize(apply, shape, cap: int = DENSE_CAP, chunk: int = 256) -> np.ndarray:
    """Matrix whose column ``j`` is ``apply(e_j)``, flattened.

    ``shape`` is the input shape without batch axis (an int means a flat
    vector). ``apply`` must accept a leading batch axis.
    """
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    dim = math.prod(shape)
    if dim > cap:
        raise ValueError(f"dense materialization of {dim} unknowns exceeds the cap of {cap}")
    cols = []
    eye = torch.eye(dim, dtype=DTYPE)
    with torch.no_grad():
        for s in range(0, dim, chunk):
            e = eye[s:s + chunk].reshape(-1, *shape)
            cols.append(torch.as_tensor(apply(e)).reshape(e.shape[0], -1))
    return torch.cat(cols).T.contiguous().numpy()


def symmetry_defect(mat: np.ndarray) -> float:
    scale = max(np.abs(mat).max(), 1e-300)
    return float(np.abs(mat - mat.T).max() / scale)


def normal_matrix(H: ForwardOperator, W: MultiConv, weights_sq=None, lam: float = 1.0) -> np.ndarray:
    """Dense ``HᵀH + lam Wᵀ diag(weights_sq) W`` (``weights_sq=None`` means ones)."""
    shape = H.in_shape
    sym = W.symbol(shape[-2:])
    w2 = None if weights_sq is None else torch.as_tensor(weights_sq, dtype=DTYPE)

    def apply(v):
        wv = W.apply(v, sym)
        if w2 is not None:
            wv = w2 * wv
        return H.gram(v) + lam * W.adjoint(wv, sym)

    mat = dense_materialize(apply, shape)
    return 0.5 * (mat + mat.T)


def lambda_eps(H: ForwardOperator, W: MultiConv, eps: float) -> float:
    """Smallest eigenvalue of ``HᵀH + eps WᵀW``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return float(np.linalg.eigvalsh(normal_matrix(H, W, None, eps))[0])


def check_prop1(H: ForwardOperator, W: MultiConv, mask, lam: float = 1.0):
    """``(is_pd, min_eig)`` for ``HᵀH + lam Wᵀ M² W`` at a given mask."""
    m = torch.as_tensor(mask, dtype=DTYPE)
    min_eig = float(np.linalg.eigvalsh(normal_matrix(H, W, m * m, lam))[0])
    return min_eig > PD_THRESHOLD, min_eig


def _lam_of(model, sigma, lam):
    return float(model.lam(torch.tensor([float(sigma)]))[0]) if lam is None else float(lam)


def refine(model: DealModel, H: ForwardOperator, x, y, sigma, lam=None) -> torch.Tensor:
    """One application of the refinement map ``T(x, y)`` solved to tight tolerance."""
    cfg = SolveConfig(**TIGHT)
    out, _ = deal_step(model, H, y, torch.as_tensor(x, dtype=DTYPE), sigma, lam=lam, cfg=cfg)
    return out


def _floor_eig(model, H, lam):
    return lambda_eps(H, model.W, lam * model.eps_mask ** 2)


def check_lemma2(model: DealModel, H: ForwardOperator, x_fixed, y1, y2, sigma, lam=None,
                 lam_eps: float | None = None, h_norm: float | None = None):
    """``(lhs, bound)`` with ``lhs = ||T(x, y1) - T(x, y2)||`` and ``bound = ||H|| / lambda_eps ||y1 - y2||``."""
    lam = _lam_of(model, sigma, lam)
    lam_eps = _floor_eig(model, H, lam) if lam_eps is None else lam_eps
    h_norm = H.norm() if h_norm is None else h_norm
    y1, y2 = torch.as_tensor(y1, dtype=DTYPE), torch.as_tensor(y2, dtype=DTYPE)
    t1 = refine(model, H, x_fixed, y1, sigma, lam)
    t2 = refine(model, H, x_fixed, y2, sigma, lam)
    lhs = float(torch.linalg.vector_norm(t1 - t2))
    return lhs, h_norm / lam_eps * float(torch.linalg.vector_norm(y1 - y2))


def check_range(iterates, radius: float, rtol: float = 1e-6):
    """Largest ``||x_k|| / r`` over ``k >= 1`` and whether it stays below ``1 + rtol``."""
    worst = max((float(torch.linalg.vector_norm(x)) / radius for x in iterates[1:]), default=0.0)
    return worst <= 1.0 + rtol, worst


def estimate_contraction(model: DealModel, H: ForwardOperator, y, sigma, lam=None, trials: int = 8,
                         radius: float | None = None, anchors=(), pairs=(), seed: int = 0) -> float:
    """Empirical Lipschitz constant of ``T(·, y)``.

    Takes the largest ratio ``||T(x1) - T(x2)|| / ||x1 - x2||`` over ``trials``
    random pairs in the ball of radius ``radius``, ``trials`` pairs at three
    relative scales around each anchor point (typically iterates or the fixed
    point), and the explicit ``pairs``. Iterates of runs started from different
    points make good explicit pairs: two distinct fixed points give a ratio
    of one. This is a lower estimate of the true constant.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lam = _lam_of(model, sigma, lam)
    y = torch.as_tensor(y, dtype=DTYPE)
    if radius is None:
        radius = float(torch.linalg.vector_norm(H.adjoint(y))) / _floor_eig(model, H, lam)
    rng = np.random.default_rng(seed)
    shape = H.in_shape

    def rand_dir():
        g = torch.from_numpy(rng.standard_normal(shape))
        return g / torch.linalg.vector_norm(g)

    pairs_ = []
    for _ in range(trials):
        pairs_.append((radius * rng.uniform() * rand_dir(), radius * rng.uniform() * rand_dir()))
    for a in anchors:
        a = torch.as_tensor(a, dtype=DTYPE)
        scale = max(float(torch.linalg.vector_norm(a)), 1e-12)
        for rel in (1e-3, 1e-2, 1e-1):
            for _ in range(trials):
                pairs_.append((a, a + rel * scale * rand_dir()))
    pairs_ += [(torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE)) for a, b in pairs]
    q = 0.0
    for x1, x2 in pairs_:
        d = float(torch.linalg.vector_norm(x1 - x2))
        if d == 0.0:
            continue
        t = refine(model, H, torch.stack([x1, x2]), torch.stack([y, y]), sigma, lam)
        q = max(q, float(torch.linalg.vector_norm(t[0] - t[1])) / d)
    return q


@dataclass
class Theorem4Verdict:
    applicable: bool
    envelope_ok: bool | None = None
    envelope_worst: float | None = None
    stability_ok: bool | None = None
    stability_lhs: float | None = None
    stability_bound: float | None = None


def _fixed_point(model, H, y, sigma, lam, k_out=2000):
    cfg = SolveConfig(k_out=k_out, eps_out=1e-13, lam=lam, **TIGHT)
    x, rep = deal_reconstruct(model, H, y, sigma, cfg)
    resid = float(torch.linalg.vector_norm(refine(model, H, x, y, sigma, lam) - x))
    return x, resid


def check_theorem4(model: DealModel, H: ForwardOperator, y, sigma, q_hat: float, iterates, lam=None,
                   y2=None, tol: float = 1e-3, lam_eps: float | None = None,
                   h_norm: float | None = None) -> Theorem4Verdict:
    """Exponential envelope along ``iterates`` and data stability, gated on ``q_hat < 1``.

    Envelope: ``||x_k - x̂|| <= q^(k-1) ||x_1 - x_0|| (1 + tol) + slack`` where the
    slack covers the numerical error of the reference fixed point
    (``residual / (1 - q)``). Stability compares the fixed points for ``y``
    and ``y2`` against ``||H|| / ((1 - q) lambda_eps) ||y - y2||``.
    """
    if not q_hat < 1.0:
        return Theorem4Verdict(applicable=False)
    lam = _lam_of(model, sigma, lam)
    y = torch.as_tensor(y, dtype=DTYPE)
    lam_eps = _floor_eig(model, H, lam) if lam_eps is None else lam_eps
    h_norm = H.norm() if h_norm is None else h_norm
    x_hat, resid = _fixed_point(model, H, y, sigma, lam)
    slack = resid / (1.0 - q_hat) + 1e-10 * float(torch.linalg.vector_norm(x_hat))
    step0 = float(torch.linalg.vector_norm(iterates[1] - iterates[0]))
    worst, ok = 0.0, True
    for k, xk in enumerate(iterates[1:], start=1):
        lhs = float(torch.linalg.vector_norm(xk - x_hat))
        bound = q_hat ** (k - 1) * step0 * (1.0 + tol) + slack
        worst = max(worst, lhs / bound if bound > 0 else (0.0 if lhs == 0 else math.inf))
        ok &= lhs <= bound
    verdict = Theorem4Verdict(applicable=True, envelope_ok=ok, envelope_worst=worst)
    if y2 is not None:
        y2 = torch.as_tensor(y2, dtype=DTYPE)
        z_hat, resid2 = _fixed_point(model, H, y2, sigma, lam)
        lhs = float(torch.linalg.vector_norm(x_hat - z_hat))
        bound = h_norm / ((1.0 - q_hat) * lam_eps) * float(torch.linalg.vector_norm(y - y2))
        slack2 = (resid + resid2) / (1.0 - q_hat)
        verdict.stability_ok = lhs <= bound * (1.0 + tol) + slack2
        verdict.stability_lhs, verdict.stability_bound = lhs, bound
    return verdict


@dataclass
class TheoryReport:
    lambda_eps: float
    eps_floor: float
    lam: float
    sigma: float
    h_norm: float
    lip_data: float
    lip_mask_L: float
    theorem3_bound: float
    q_hat: float
    radius_r: float
    prop1_min_eig: float
    lemma2_worst_ratio: float
    range_worst_ratio: float
    theorem4: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    def to_json(self, **kw) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return json.dumps(clean(asdict(self)), **{"indent": 2, **kw})

    @property
    def passed(self) -> bool:
        return all(v in (True, None) for v in self.verdicts.values())


def theory_report(model: DealModel, H: ForwardOperator, y, sigma, lam=None, n_pairs: int = 100,
                  trials: int = 8, perturbation: float = 1e-3, tol: float = 1e-3, seed: int = 0,
                  k_out: int = 200) -> TheoryReport:
    """Run every check on one measurement and collect the numbers and verdicts."""
    lam = _lam_of(model, sigma, lam)
    y = torch.as_tensor(y, dtype=DTYPE)
    rng = np.random.default_rng(seed)
    eps_floor = lam * model.eps_mask ** 2
    lam_e = lambda_eps(H, model.W, eps_floor)
    h_norm = H.norm()
    hty = float(torch.linalg.vector_norm(H.adjoint(y)))
    radius = hty / lam_e if lam_e > 0 else math.inf
    shape = H.in_shape[-2:]
    lip_mask = model.masknet.lipschitz_bound(shape, sigma)
    t3_bound = 2.0 * lam * lip_mask * hty / lam_e ** 2 if lam_e > 0 else math.inf

    cfg = SolveConfig(k_out=k_out, eps_out=1e-10, lam=lam, **TIGHT)
    x_hat, rep = deal_reconstruct(model, H, y, sigma, cfg, record_iterates=True)
    iterates = rep.iterates

    _, min_eig = check_prop1(H, model.W, model.masknet(x_hat[None], sigma)[0], lam)

    worst_l2 = 0.0
    for _ in range(n_pairs):
        y1 = torch.from_numpy(rng.standard_normal(tuple(y.shape))) * float(y.std()) + y
        y2 = torch.from_numpy(rng.standard_normal(tuple(y.shape))) * float(y.std()) + y
        lhs, bound = check_lemma2(model, H, x_hat, y1, y2, sigma, lam, lam_e, h_norm)
        worst_l2 = max(worst_l2, lhs / bound if bound > 0 else 0.0)
    range_ok, range_worst = check_range(iterates, radius)

    anchors = [iterates[k] for k in (1, 2, 4) if k < len(iterates)] + [x_hat]
    q_hat = estimate_contraction(model, H, y, sigma, lam, trials=trials, radius=radius, anchors=anchors, seed=seed)
    for a, b in zip(iterates[1:-1], iterates[2:-1]):
        d = float(torch.linalg.vector_norm(a - b))
        if d > 1e-9 * max(float(torch.linalg.vector_norm(a)), 1e-12):
            nxt = refine(model, H, torch.stack([a, b]), torch.stack([y, y]), sigma, lam)
            q_hat = max(q_hat, float(torch.linalg.vector_norm(nxt[0] - nxt[1])) / d)

    y2 = y + perturbation * float(torch.linalg.vector_norm(y)) / math.sqrt(y.numel()) * torch.from_numpy(
        rng.standard_normal(tuple(y.shape)))
    t4 = check_theorem4(model, H, y, sigma, q_hat, iterates, lam, y2, tol, lam_e, h_norm)
    verdicts = {
        "prop1_positive_definite": min_eig > PD_THRESHOLD,
        "lemma2": worst_l2 <= 1.0 + 1e-6,
        "theorem3_range": range_ok,
        "theorem3_lipschitz": q_hat <= t3_bound * (1.0 + 1e-9),
        "theorem4_envelope": t4.envelope_ok,
        "theorem4_stability": t4.stability_ok,
    }
    return TheoryReport(
        lambda_eps=lam_e, eps_floor=eps_floor, lam=lam, sigma=float(sigma), h_norm=h_norm,
        lip_data=h_norm / lam_e, lip_mask_L=lip_mask, theorem3_bound=t3_bound, q_hat=q_hat,
        radius_r=radius, prop1_min_eig=min_eig, lemma2_worst_ratio=worst_l2, range_worst_ratio=range_worst,
        theorem4=asdict(t4), verdicts=verdicts,
    )
