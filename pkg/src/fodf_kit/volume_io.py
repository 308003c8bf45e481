"""Volumes, gradient tables and model parameters on disk.

Volume format (``<name>.dwv.json`` + ``<name>.dwv.raw``)::

    {"format": "dwv", "version": 1, "dims": [X, Y, Z, C],
     "voxel_size_mm": [sx, sy, sz], "dtype": "f32le",
     "kind": "dwi_signal" | "sh_signal" | "sh_fodf" | "mask",
     "sh_order": L | null}

The payload is X*Y*Z*C little-endian float32 values in [x][y][z][c] order
(c fastest). Gradient tables are FSL-style text: one row of b-values, three
rows of x/y/z components. Models are ``<name>.model.json`` (layer manifest)
plus ``<name>.model.raw`` (concatenated float32 tensors, manifest order).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ColumnCountMismatch,
    InvalidVolume,
    IoFailure,
    MalformedHeader,
    NonUnitVector,
    ParseError,
    PayloadSizeMismatch,
    ShapeBlobMismatch,
    UnknownLayerKind,
    UnsupportedDtype,
)
from .net import LAYER_KINDS, Layer, ModelParams

__all__ = [
    "Volume4D",
    "GradientScheme",
    "read_volume",
    "write_volume",
    "read_gradients",
    "write_gradients",
    "read_model",
    "write_model",
    "volume_paths",
    "B0_THRESHOLD",
]

KINDS = ("dwi_signal", "sh_signal", "sh_fodf", "mask")
B0_THRESHOLD = 50.0  # s/mm^2; at or below counts as non-diffusion-weighted
RENORM_TOL = 1e-3
_LE_F32 = np.dtype("<f4")


@dataclass(eq=False)
class Volume4D:
    """X x Y x Z x C float32 voxel grid.

    ``source`` optionally carries phantom provenance (noiseless signal and
    voxel models) so a rescan can be simulated; it is never serialised.
    """

    data: np.ndarray
    kind: str = "dwi_signal"
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)
    sh_order: int | None = None
    source: object = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise InvalidVolume(f"volume data must be 4D with positive dims, got {data.shape}")
        self.data = data
        if self.kind not in KINDS:
            raise InvalidVolume(f"unknown volume kind {self.kind!r}")
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise InvalidVolume(f"voxel size must be 3 positive reals, got {self.voxel_size_mm}")
        self.voxel_size_mm = vs
        if self.kind in ("sh_signal", "sh_fodf"):
            c = data.shape[3]
            order = self.sh_order
            if order is None:
                order = int(round((-3 + np.sqrt(1 + 8 * c)) / 2))
            if order < 0 or order % 2 or (order + 1) * (order + 2) // 2 != c:
                raise InvalidVolume(f"{c} channels do not match an even SH order")
            self.sh_order = int(order)
        else:
            self.sh_order = None
        if self.kind == "mask":
            self.check_mask()

    def check_mask(self) -> None:
        ok = (self.data == 0.0) | (self.data == 1.0)
        if not np.all(ok):
            raise InvalidVolume("mask volumes may only hold 0.0 and 1.0")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.dims[:3]

    def bool_mask(self) -> np.ndarray:
        """Spatial boolean mask (first channel) for mask volumes."""
        return self.data[..., 0] > 0.5

    @classmethod
    def from_mask(cls, mask, voxel_size_mm=(1.0, 1.0, 1.0)) -> "Volume4D":
        return cls(np.asarray(mask, dtype=np.float32), "mask", voxel_size_mm)


def volume_paths(path) -> tuple[Path, Path]:
    """Header and payload paths for a volume base name or either file."""
    p = str(path)
    for suffix in (".dwv.json", ".dwv.raw", ".dwv"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p + ".dwv.json"), Path(p + ".dwv.raw")


def write_volume(v: Volume4D, path) -> None:
    if v.kind == "mask":
        v.check_mask()
    header_path, raw_path = volume_paths(path)
    header = {
        "format": "dwv",
        "version": 1,
        "dims": list(v.dims),
        "voxel_size_mm": list(v.voxel_size_mm),
        "dtype": "f32le",
        "kind": v.kind,
        "sh_order": v.sh_order,
    }
    try:
        header_path.parent.mkdir(parents=True, exist_ok=True)
        header_path.write_text(json.dumps(header, indent=2) + "\n")
        raw_path.write_bytes(np.ascontiguousarray(v.data, dtype=_LE_F32).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_volume(path) -> Volume4D:
    header_path, raw_path = volume_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{header_path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{header_path}: header is not a JSON object")
    try:
        dims = [int(d) for d in header["dims"]]
        dtype = header["dtype"]
        kind = header["kind"]
        voxel = header.get("voxel_size_mm", [1.0, 1.0, 1.0])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"{header_path}: missing or invalid field {exc}") from exc
    if len(dims) != 4 or min(dims) < 1:
        raise MalformedHeader(f"{header_path}: dims must be 4 positive integers")
    if dtype != "f32le":
        raise UnsupportedDtype(f"{header_path}: dtype {dtype!r} (only f32le)")
    try:
        payload = raw_path.read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise PayloadSizeMismatch(f"{raw_path}: {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=_LE_F32).astype(np.float32).reshape(dims)
    try:
        return Volume4D(data, kind, voxel, header.get("sh_order"))
    except InvalidVolume as exc:
        raise MalformedHeader(f"{header_path}: {exc}") from exc


@dataclass(eq=False)
class GradientScheme:
    """Per-measurement b-values (s/mm^2) and (N, 3) gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if len(self.bvals) != len(self.bvecs):
            raise ColumnCountMismatch(f"{len(self.bvals)} b-values vs {len(self.bvecs)} vectors")
        norms = np.linalg.norm(self.bvecs, axis=1)
        bad = (self.bvals > 0) & (np.abs(norms - 1.0) > 1e-6)
        if np.any(bad):
            raise NonUnitVector(f"{bad.sum()} diffusion-weighted vectors are not unit length")

    def __len__(self) -> int:
        return len(self.bvals)

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= B0_THRESHOLD

    @property
    def dw_mask(self) -> np.ndarray:
        return ~self.b0_mask

    @property
    def dw_dirs(self) -> np.ndarray:
        return self.bvecs[self.dw_mask]

    def subset(self, rows) -> "GradientScheme":
        rows = np.asarray(rows)
        return GradientScheme(self.bvals[rows], self.bvecs[rows])

    @classmethod
    def single_shell(cls, dirs, bval: float = 2000.0, n_b0: int = 6) -> "GradientScheme":
        dirs = np.asarray(getattr(dirs, "dirs", dirs), dtype=np.float64)
        bvals = np.concatenate([np.zeros(n_b0), np.full(len(dirs), float(bval))])
        bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
        return cls(bvals, bvecs)


def _read_rows(path) -> list[list[float]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    rows = []
    for line in text.splitlines():
        if line.strip():
            try:
                rows.append([float(t) for t in line.split()])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}") from exc
    return rows


def read_gradients(bval_path, bvec_path) -> GradientScheme:
    """Parse FSL ``.bval``/``.bvec`` files.

    Diffusion-weighted vectors whose norm is within 1e-3 of one are
    renormalised; larger deviations raise :class:`NonUnitVector`.
    """
    brows = _read_rows(bval_path)
    if len(brows) != 1:
        raise ParseError(f"{bval_path}: expected one row of b-values, found {len(brows)}")
    vrows = _read_rows(bvec_path)
    if len(vrows) != 3:
        raise ParseError(f"{bvec_path}: expected three rows, found {len(vrows)}")
    bvals = np.array(brows[0])
    if any(len(r) != len(bvals) for r in vrows):
        raise ColumnCountMismatch(
            f"{len(bvals)} b-values vs bvec rows of length {[len(r) for r in vrows]}")
    bvecs = np.array(vrows).T
    dw = bvals > 0
    norms = np.linalg.norm(bvecs, axis=1)
    off = dw & (np.abs(norms - 1.0) > RENORM_TOL)
    if np.any(off):
        i = int(np.argmax(off))
        raise NonUnitVector(f"direction {i} has norm {norms[i]:.6g}")
    # leave already-unit vectors bit-exact so write/read round-trips
    fix = dw & (np.abs(norms - 1.0) > 1e-9)
    bvecs[fix] /= norms[fix, None]
    return GradientScheme(bvals, bvecs)


def write_gradients(scheme: GradientScheme, bval_path, bvec_path) -> None:
    def fmt(row):
        return " ".join(repr(float(v)) for v in row) + "\n"

    try:
        Path(bval_path).parent.mkdir(parents=True, exist_ok=True)
        Path(bval_path).write_text(fmt(scheme.bvals))
        Path(bvec_path).write_text("".join(fmt(r) for r in scheme.bvecs.T))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _model_paths(path) -> tuple[Path, Path]:
    p = str(path)
    for suffix in (".model.json", ".model.raw", ".model"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p + ".model.json"), Path(p + ".model.raw")


def write_model(params: ModelParams, path) -> None:
    """Serialise ``params`` as a JSON manifest plus a float32 blob."""
    manifest_path, raw_path = _model_paths(path)
    layers, blobs = [], []
    for layer in params.layers:
        tensors = []
        n = 0
        for name, arr in layer.tensors.items():
            arr = np.asarray(arr)
            tensors.append({"name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
            n += arr.size
        layers.append({"name": layer.name, "kind": layer.kind, "blob_floats": n,
                       "tensors": tensors})
    manifest = {"format": "fodf-model", "version": 1, "dtype": "f32le",
                "meta": params.meta, "layers": layers}
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        raw_path.write_bytes(b"".join(blobs))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_model(path) -> ModelParams:
    manifest_path, raw_path = _model_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = raw_path.read_bytes()
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{manifest_path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if manifest.get("dtype", "f32le") != "f32le":
        raise UnsupportedDtype(f"{manifest_path}: dtype {manifest.get('dtype')!r}")
    floats = np.frombuffer(blob, dtype=_LE_F32)
    if len(blob) % 4:
        raise ShapeBlobMismatch(f"{raw_path}: length {len(blob)} is not a multiple of 4")
    declared = sum(int(entry["blob_floats"]) for entry in manifest.get("layers", []))
    if declared != floats.size:
        raise ShapeBlobMismatch(f"{raw_path}: {floats.size} floats, manifest declares {declared}")
    layers = []
    offset = 0
    for entry in manifest.get("layers", []):
        if entry.get("kind") not in LAYER_KINDS:
            raise UnknownLayerKind(f"layer {entry.get('name')!r} has kind {entry.get('kind')!r}")
        shapes = [tuple(int(s) for s in t["shape"]) for t in entry["tensors"]]
        need = sum(int(np.prod(s)) for s in shapes)
        if need != int(entry["blob_floats"]):
            raise ShapeBlobMismatch(
                f"layer {entry['name']!r}: shapes need {need} floats, blob holds {entry['blob_floats']}")
        tensors = {}
        for t, shape in zip(entry["tensors"], shapes):
            size = int(np.prod(shape))
            tensors[t["name"]] = floats[offset:offset + size].astype(np.float32).reshape(shape)
            offset += size
        layers.append(Layer(entry["name"], entry["kind"], tensors))
    return ModelParams(layers, manifest.get("meta", {}))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
