"""Command line interface: ``deal {denoise, restore, train, inspect, theory-report}``.

Exit status: 0 on success, 2 when the outer loop hit ``--k-out`` without
converging (the image is still written), 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .io import (
    read_array,
    read_image,
    save_model,
    load_model,
    write_array,
    write_convergence_csv,
    write_image,
    write_training_csv,
)
from .linop import Identity, load_operator_spec, make_operator
from .solver import SolveConfig, deal_reconstruct, equivalent_row, psnr
from .training import add_noise

log = logging.getLogger("deal")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class CLIError(Exception):
    """User-facing failure; the message is printed and the exit status is 1."""


def default_model_path() -> Path:
    return Path(str(resources.files("deal") / "models" / "toy.dealm"))


def _threads():
    n = os.environ.get("DEAL_THREADS")
    if n:
        try:
            k = int(n)
        except ValueError as err:
            raise CLIError(f"DEAL_THREADS must be a positive integer, got {n!r}") from err
        if k < 1:
            raise CLIError(f"DEAL_THREADS must be a positive integer, got {n!r}")
        torch.set_num_threads(k)


def _load(path):
    p = Path(path) if path else default_model_path()
    if not p.exists():
        raise CLIError(f"model file not found: {p}")
    return load_model(p)


def _read(path, what="input"):
    if path is None:
        raise CLIError(f"--{what} is required")
    if not Path(path).exists():
        raise CLIError(f"{what} file not found: {path}")
    return torch.from_numpy(read_array(path))


# -- shared option groups -----------------------------------------------------

def _solver_opts(p):
    g = p.add_argument_group("solver")
    g.add_argument("--sigma", type=float, help="model noise level on the 0-255 scale")
    g.add_argument("--lambda", dest="lam", type=float, help="override lambda = kappa(sigma)")
    g.add_argument("--eps-in", type=float, default=1e-8)
    g.add_argument("--eps-out", type=float, default=1e-5)
    g.add_argument("--k-in", type=int, default=1000)
    g.add_argument("--k-out", type=int, default=1000)
    g.add_argument("--x0", default="zero", help="zero | adjoint | file:PATH")


def _io_opts(p, measurement=False):
    p.add_argument("--model", help="model file (defaults to the bundled toy model)")
    p.add_argument("--input", help="measurement (.npy or PGM/PPM)" if measurement else "noisy image")
    p.add_argument("--output", help="reconstruction (.npy or PGM/PPM)")
    p.add_argument("--csv", help="convergence log k,rel_change,cg_iters[,psnr]")
    p.add_argument("--clean", help="ground truth image for PSNR reporting")
    p.add_argument("--add-noise", type=float, metavar="SIGMA_N",
                   help="treat --input as clean and add seeded Gaussian noise of this level first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)


def _solve_config(args, H, y) -> SolveConfig:
    x0, x0_value = args.x0, None
    if x0.startswith("file:"):
        path = x0[5:]
        x0_value = _read(path, "x0")
        if tuple(x0_value.shape) != tuple(H.in_shape):
            raise CLIError(f"x0 shape {tuple(x0_value.shape)} does not match image shape {H.in_shape}")
        x0 = "given"
    elif x0 not in ("zero", "adjoint"):
        raise CLIError(f"--x0 must be zero, adjoint or file:PATH, got {x0!r}")
    try:
        return SolveConfig(k_in=args.k_in, k_out=args.k_out, eps_in=args.eps_in, eps_out=args.eps_out,
                           x0=x0, x0_value=x0_value, lam=args.lam)
    except ValueError as err:
        raise CLIError(str(err)) from err


def _sigma(args):
    if args.sigma is not None:
        return args.sigma
    if getattr(args, "add_noise", None) is not None:
        return args.add_noise
    raise CLIError("--sigma is required (or --add-noise to use the synthesis level)")


def _reconstruct(args, H, y, clean):
    model = _load(args.model)
    if model.n_in != H.in_shape[0]:
        raise CLIError(f"model expects {model.n_in} channel(s), image has {H.in_shape[0]}")
    cfg = _solve_config(args, H, y)
    x_hat, rep = deal_reconstruct(model, H, y, _sigma(args), cfg, x_true=clean)
    if args.output:
        write_array(args.output, x_hat, args.bits)
    if args.csv:
        write_convergence_csv(args.csv, rep)
    status = "converged" if rep.converged else "not converged"
    print(f"outer_iterations={rep.iterations} {status} rel_change={rep.rel_change[-1]:.3e}")
    if clean is not None:
        baseline = H.adjoint(y) if not isinstance(H, Identity) else y
        print(f"psnr_input={psnr(baseline, clean):.4f} psnr_output={psnr(x_hat, clean):.4f}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def cmd_denoise(args) -> int:
    x = _read(args.input)
    clean = None
    if args.add_noise is not None:
        clean = x
        x = add_noise(x, args.add_noise, args.seed)
    if args.clean:
        clean = _read(args.clean, "clean")
    if clean is not None and clean.shape != x.shape:
        raise CLIError(f"clean image shape {tuple(clean.shape)} differs from input {tuple(x.shape)}")
    if x.dim() != 3:
        raise CLIError(f"expected a (C, H, W) image, got shape {tuple(x.shape)}")
    return _reconstruct(args, Identity(tuple(x.shape)), x, clean)


def cmd_restore(args) -> int:
    if not args.operator:
        raise CLIError("--operator is required")
    spec = load_operator_spec(args.operator)
    data = _read(args.input)
    clean = _read(args.clean, "clean") if args.clean else None
    if args.add_noise is not None:
        # Simulate an acquisition of the clean input.
        clean = data
        H = make_operator(spec, tuple(data.shape))
        rng = np.random.default_rng(args.seed)
        y = H.apply(data) + (args.add_noise / 255.0) * torch.from_numpy(rng.standard_normal(H.out_shape))
    else:
        if clean is None and "image_shape" not in spec:
            raise CLIError("the image shape is unknown: pass --clean or set image_shape in the operator spec")
        shape = tuple(clean.shape) if clean is not None else tuple(spec["image_shape"])
        H = make_operator(spec, shape)
        y = data
        if tuple(y.shape) != tuple(H.out_shape):
            raise CLIError(f"measurement shape {tuple(y.shape)} does not match operator output {H.out_shape}")
    return _reconstruct(args, H, y, clean)


def cmd_train(args) -> int:
    from .data import piecewise_dataset
    from .solver import DealModel
    from .training import TrainConfig, train

    if args.data:
        files = sorted(p for p in Path(args.data).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
        if not files:
            raise CLIError(f"no PGM/PPM images in {args.data}")
        dataset = [read_image(p) for p in files]
    else:
        dataset = piecewise_dataset(args.synthetic, max(64, args.patch_size), seed=args.seed)
    n_in = dataset[0].shape[0]
    n1 = int(args.steps * 0.8)
    try:
        cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, patch_size=args.patch_size,
                          n_filters=args.n_filters, n_in=n_in, eps_mask=args.eps_mask, seed=args.seed,
                          phases=((n1, args.lr, 0.8 * args.lr), (args.steps - n1, 0.4 * args.lr, 1e-6)),
                          val_interval=args.val_interval)
    except ValueError as err:
        raise CLIError(str(err)) from err
    shape = (cfg.patch_size, cfg.patch_size)
    init = _load(args.model) if args.model else DealModel.initialize(n_in, cfg.n_filters, cfg.eps_mask,
                                                                     seed=cfg.seed, shape=shape)
    if args.steps == 0:
        save_model(init, args.output)
        if args.csv:
            write_training_csv(args.csv, [])
        return EXIT_OK
    try:
        result = train(dataset, cfg, model=init)
    except FloatingPointError as err:
        raise CLIError(str(err)) from err
    save_model(result.model, args.output, extra={"best_step": result.best_step, "val_psnr": result.best_psnr})
    if args.final_output:
        save_model(result.final_model, args.final_output)
    if args.csv:
        write_training_csv(args.csv, result.history)
    print(f"best_step={result.best_step} val_psnr={result.best_psnr:.4f}")
    return EXIT_OK


def _montage(kernels: np.ndarray) -> np.ndarray:
    """Tile ``(N, k, k)`` kernels into one image, each rescaled to ``[0, 1]`` around zero."""
    n, k, _ = kernels.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.ones((rows * (k + 1) + 1, cols * (k + 1) + 1))
    for i, ker in enumerate(kernels):
        a = np.abs(ker).max()
        tile = 0.5 + 0.5 * ker / a if a > 0 else np.full_like(ker, 0.5)
        r, c = divmod(i, cols)
        out[1 + r * (k + 1):1 + r * (k + 1) + k, 1 + c * (k + 1):1 + c * (k + 1) + k] = tile
    return out


def _need_output(args):
    if not args.output:
        raise CLIError("--output is required")
    return args.output


def cmd_inspect(args) -> int:
    model = _load(args.model)
    what = args.what
    if what == "filters":
        eff = model.W.effective_kernels()
        write_image(_need_output(args), _montage(eff.reshape(-1, *eff.shape[-2:])), args.bits)
        return EXIT_OK
    if what == "gram":
        shape = (args.grid, args.grid)
        impulse = model.W.gram_impulse(shape)
        img = impulse / max(np.abs(impulse).max(), 1e-300)
        write_image(_need_output(args), 0.5 + 0.5 * img.reshape(-1, *shape)[0], args.bits)
        eig = np.sort(model.W.gram_eigenvalues(shape).ravel())
        if args.csv:
            np.savetxt(args.csv, eig, header="eigenvalue", comments="", fmt="%.17g")
        n_zero = int(np.sum(eig <= 1e-10))
        print(f"eigenvalues={eig.size} numerically_zero={n_zero} min={eig[0]:.3e} max={eig[-1]:.6f}")
        return EXIT_OK
    if what == "theory":
        return cmd_theory_report(args)
    x = _read(args.input)
    if args.add_noise is not None:
        x = add_noise(x, args.add_noise, args.seed)
    H = Identity(tuple(x.shape))
    sigma = _sigma(args)
    cfg = _solve_config(args, H, x)
    if what == "masks":
        out = Path(_need_output(args))
        out.mkdir(parents=True, exist_ok=True)
        nc = model.n_filters
        x0 = {"zero": torch.zeros_like(x), "adjoint": x}.get(cfg.x0, cfg.x0_value)
        write_image(out / "mask_000.pgm", model.masknet(x0[None], sigma)[0].mean(0), args.bits)

        def dump(k, xs, active):
            m = model.masknet(xs[:1], sigma)[0]
            write_image(out / f"mask_{k:03d}.pgm", m.sum(0) / nc, args.bits)

        _, rep = deal_reconstruct(model, H, x, sigma, cfg, callback=dump)
        print(f"wrote {rep.iterations + 1} masks to {out}")
        return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED
    if what == "row":
        if args.pixel is None:
            raise CLIError("--pixel is required for row inspection")
        if not 0 <= args.pixel < x.numel():
            raise CLIError(f"--pixel must lie in [0, {x.numel()})")
        x_hat, rep = deal_reconstruct(model, H, x, sigma, cfg)
        lam = args.lam if args.lam is not None else float(model.lam(torch.tensor([sigma]))[0])
        mask = model.masknet(x_hat[None], sigma)[0]
        row = equivalent_row(model, H, mask, lam, args.pixel)
        if str(args.output or "").endswith(".npy"):
            write_array(args.output, row)
        else:
            peak = max(float(row.abs().max()), 1e-300)
            write_image(_need_output(args), 0.5 + 0.5 * row / peak, args.bits)
        check = float((row * x).sum())
        print(f"row_dot_input={check:.10f} reconstruction={float(x_hat.reshape(-1)[args.pixel]):.10f}")
        return EXIT_OK
    raise CLIError(f"unknown inspection {what!r}")


def cmd_theory_report(args) -> int:
    from .theory import theory_report

    model = _load(args.model)
    x = _read(args.input)
    spec = load_operator_spec(args.operator) if getattr(args, "operator", None) else {"kind": "identity"}
    H = make_operator(spec, tuple(x.shape))
    if args.add_noise is not None:
        rng = np.random.default_rng(args.seed)
        y = H.apply(x) + (args.add_noise / 255.0) * torch.from_numpy(rng.standard_normal(H.out_shape))
    else:
        if tuple(H.out_shape) != tuple(x.shape):
            raise CLIError("without --add-noise the input must already be a measurement of the operator")
        y = x
    report = theory_report(model, H, y, _sigma(args), lam=args.lam, n_pairs=args.pairs, seed=args.seed)
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deal", description="Deep attentive least squares reconstruction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise", help="remove Gaussian noise from an image")
    _io_opts(p)
    _solver_opts(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("restore", help="reconstruct from measurements of a linear operator")
    _io_opts(p, measurement=True)
    _solver_opts(p)
    p.add_argument("--operator", help="operator spec JSON")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("train", help="train a model on images or synthetic data")
    p.add_argument("--data", help="directory of PGM/PPM training images (synthetic if omitted)")
    p.add_argument("--synthetic", type=int, default=128, help="number of synthetic images")
    p.add_argument("--output", required=True, help="best-validation checkpoint")
    p.add_argument("--final-output", help="also save the last iterate of training")
    p.add_argument("--model", help="start from this model instead of a fresh initialization")
    p.add_argument("--csv", help="training log step,loss,term1,term2,term3,psnr_val")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--n-filters", type=int, default=8)
    p.add_argument("--eps-mask", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--val-interval", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="export filters, Gram spectrum, masks, rows or a theory report")
    p.add_argument("what", choices=("filters", "gram", "masks", "row", "theory"))
    _io_opts(p)
    _solver_opts(p)
    p.add_argument("--operator", help="operator spec JSON (theory only)")
    p.add_argument("--grid", type=int, default=32, help="grid size for gram")
    p.add_argument("--pixel", type=int, help="flat pixel index for row")
    p.add_argument("--pairs", type=int, default=100, help="random data pairs for the Lemma check (theory)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("theory-report", help="numerical checks of the convergence theory on a small image")
    _io_opts(p)
    _solver_opts(p)
    p.add_argument("--operator", help="operator spec JSON (identity if omitted)")
    p.add_argument("--pairs", type=int, default=100)
    p.set_defaults(func=cmd_theory_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads()
        return args.func(args)
    except (CLIError, OSError, ValueError, FloatingPointError, KeyError) as err:
        print(f"deal: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
