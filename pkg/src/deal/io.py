"""File formats: Netpbm images, the model container, and CSV logs.

The model container is one file::

    b"DEALMODL" | uint64 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest lists every array with dtype, shape, byte offset and byte length
inside the little-endian blob, plus the scalar hyperparameters needed to
rebuild the model. Loading validates every entry before touching the data.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from .maskgen import MaskNet
from .multiconv import MultiConv, layer_shapes
from .solver import DealModel
from .spline import LinearSpline

__all__ = [
    "FORMAT_VERSION",
    "ModelFormatError",
    "ImageFormatError",
    "read_image",
    "write_image",
    "read_array",
    "write_array",
    "save_model",
    "load_model",
    "read_manifest",
    "write_convergence_csv",
    "write_training_csv",
]

MAGIC = b"DEALMODL"
FORMAT_VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4"}
_SPLINES = ("mask.phi1", "mask.phi2", "mask.phi3", "mask.scales", "kappa")


class ModelFormatError(ValueError):
    """Malformed or incompatible model file."""


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""


# -- images -------------------------------------------------------------------

def _tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the data offset."""
    out, i, n = [], 0, len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ImageFormatError("truncated header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def read_image(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8 or 16 bit, as a ``(C, H, W)`` float array in ``[0, 1]``."""
    data = Path(path).read_bytes()
    tok, off = _tokens(data, 4)
    magic = tok[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    try:
        w, h, maxval = (int(t) for t in tok[1:])
    except ValueError as err:
        raise ImageFormatError(f"{path}: bad header") from err
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise ImageFormatError(f"{path}: bad dimensions or maxval")
    c = 1 if magic == b"P5" else 3
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * c * dt.itemsize
    raw = data[off:off + need]
    if len(raw) < need:
        raise ImageFormatError(f"{path}: raster truncated ({len(raw)} of {need} bytes)")
    img = np.frombuffer(raw, dtype=dt).reshape(h, w, c).transpose(2, 0, 1)
    return img.astype(np.float64) / maxval


def write_image(path, x, bits: int = 8) -> None:
    """Write ``(C, H, W)`` or ``(H, W)`` data in ``[0, 1]`` (clipped) as P5/P6."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    a = np.asarray(torch.as_tensor(x).detach().cpu().numpy() if torch.is_tensor(x) else x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot store an array of shape {a.shape} as PGM/PPM")
    if not np.all(np.isfinite(a)):
        raise ImageFormatError("image contains non-finite values")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval)
    q = q.astype("u1" if bits == 8 else ">u2").transpose(1, 2, 0)
    c, h, w = a.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + q.tobytes())


def read_array(path) -> np.ndarray:
    """Image file, or ``.npy`` for raw measurements and exact floating-point data."""
    if str(path).endswith(".npy"):
        return np.load(path, allow_pickle=False).astype(np.float64)
    return read_image(path)


def write_array(path, x, bits: int = 8) -> None:
    a = x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)
    if str(path).endswith(".npy"):
        np.save(path, a.astype(np.float64), allow_pickle=False)
    else:
        write_image(path, a, bits)


# -- model container ----------------------------------------------------------

def _model_arrays(model: DealModel) -> dict:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.named_arrays().items()}
    arrays["W.gamma"] = np.asarray(model.W.gamma, dtype=np.float64)
    arrays["mask.W.gamma"] = np.asarray(model.masknet.w_mask.gamma, dtype=np.float64)
    return arrays


def save_model(model: DealModel, path, dtype: str = "f64", extra: dict | None = None) -> None:
    """Write the model container. ``dtype='f32'`` halves the size at the cost of exactness."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    table, chunks, offset = {}, [], 0
    for name, arr in _model_arrays(model).items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    splines = model.splines()
    manifest = {
        "format": "deal-model",
        "version": FORMAT_VERSION,
        "hyper": {
            "eps_mask": model.eps_mask,
            "n_filters": model.n_filters,
            "n_in": model.n_in,
            "sigma_unit": model.masknet.sigma_unit,
            "zero_mean_W": model.W.zero_mean,
            "zero_mean_mask": model.masknet.w_mask.zero_mean,
        },
        "splines": {name: splines[name.split(".")[-1]].meta() for name in _SPLINES},
        "arrays": table,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks))


def _split(data: bytes, path):
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a DEAL model file")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise ModelFormatError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ModelFormatError(f"{path}: manifest is not valid JSON") from err
    return manifest, data[start + n:]


def read_manifest(path) -> dict:
    return _split(Path(path).read_bytes(), path)[0]


def _expected_shapes(n_in: int, nc: int) -> dict:
    shapes = {}
    for i, s in enumerate(layer_shapes(n_in, nc)):
        shapes[f"W.{i}"] = s
        shapes[f"mask.W.{i}"] = s
    shapes.update({"W.gamma": (), "mask.W.gamma": (), "mask.mix1": (nc, nc, 3, 3), "mask.mix2": (nc, nc, 3, 3)})
    return shapes


def load_model(path) -> DealModel:
    """Read and validate a model container; errors name the offending array."""
    data = Path(path).read_bytes()
    manifest, blob = _split(data, path)
    if manifest.get("format") != "deal-model":
        raise ModelFormatError(f"{path}: unknown container format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {manifest.get('version')!r}"
                               f" (expected {FORMAT_VERSION})")
    try:
        hyper = manifest["hyper"]
        n_in, nc = int(hyper["n_in"]), int(hyper["n_filters"])
        table = manifest["arrays"]
        smeta = manifest["splines"]
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"{path}: manifest missing field {err}") from err
    expected = _expected_shapes(n_in, nc)
    required = list(expected) + list(_SPLINES)
    missing = [k for k in required if k not in table]
    if missing:
        raise ModelFormatError(f"{path}: array {missing[0]!r} missing from manifest")
    arrays = {}
    for name in required:
        ent = table[name]
        dt = _DTYPES.get(ent.get("dtype"))
        if dt is None:
            raise ModelFormatError(f"array {name!r}: unsupported dtype {ent.get('dtype')!r}")
        shape = tuple(int(s) for s in ent["shape"])
        if name in expected and shape != tuple(expected[name]):
            raise ModelFormatError(f"array {name!r}: shape {shape} does not match expected {tuple(expected[name])}")
        if name == "mask.scales" and (len(shape) != 2 or shape[0] != nc):
            raise ModelFormatError(f"array {name!r}: expected {nc} scaling splines, got shape {shape}")
        if name in _SPLINES and name != "mask.scales" and len(shape) != 1:
            raise ModelFormatError(f"array {name!r}: a spline must be one-dimensional, got shape {shape}")
        off, length = int(ent["offset"]), int(ent["length"])
        if length != math.prod(shape) * np.dtype(dt).itemsize:
            raise ModelFormatError(f"array {name!r}: byte length {length} inconsistent with shape {shape}")
        if off < 0 or off + length > len(blob):
            raise ModelFormatError(f"array {name!r}: bytes [{off}, {off + length}) lie outside the "
                                   f"{len(blob)}-byte blob")
        arr = np.frombuffer(blob, dtype=dt, count=math.prod(shape), offset=off).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"array {name!r}: contains non-finite values")
        arrays[name] = torch.from_numpy(arr.astype(np.float64))

    def spline(name):
        meta = smeta.get(name)
        if meta is None:
            raise ModelFormatError(f"array {name!r}: spline metadata missing")
        return LinearSpline(arrays[name], float(meta["knot_min"]), float(meta["knot_max"]),
                            bool(meta["symmetric"]), str(meta["monotone"]))

    W = MultiConv([arrays[f"W.{i}"] for i in range(3)], float(arrays["W.gamma"]),
                  bool(hyper.get("zero_mean_W", True)))
    wm = MultiConv([arrays[f"mask.W.{i}"] for i in range(3)], float(arrays["mask.W.gamma"]),
                   bool(hyper.get("zero_mean_mask", True)))
    try:
        masknet = MaskNet(wm, arrays["mask.mix1"], arrays["mask.mix2"], spline("mask.phi1"),
                          spline("mask.phi2"), spline("mask.phi3"), spline("mask.scales"),
                          float(hyper["eps_mask"]), float(hyper.get("sigma_unit", 255.0)))
    except ValueError as err:
        raise ModelFormatError(f"{path}: {err}") from err
    return DealModel(W, masknet, spline("kappa"))


# -- CSV logs -----------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def write_convergence_csv(path, report) -> None:
    """``k,rel_change,cg_iters[,psnr]``; the PSNR column only appears with ground truth."""
    has_psnr = report.psnr is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "rel_change", "cg_iters"] + (["psnr"] if has_psnr else []))
        for k, rel, it, p in report.rows():
            w.writerow([k, _fmt(rel), it] + ([_fmt(p)] if has_psnr else []))


def write_training_csv(path, history) -> None:
    cols = ["step", "loss", "term1", "term2", "term3", "psnr_val"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in history:
            pv = rec.get("psnr_val")
            row = [rec["step"]] + [_fmt(rec[c]) for c in cols[1:-1]]
            row.append("" if pv is None or pv != pv else _fmt(pv))
            w.writerow(row)
