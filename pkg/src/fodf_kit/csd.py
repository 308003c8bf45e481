"""Single-shell single-tissue constrained spherical deconvolution.

The fODF ``f`` is recovered from signal SH coefficients ``s`` by
iteratively solving::

    min ||R f - s||^2 + lambda^2 ||P f||^2

where ``R`` scales each order-k block by the response's rotational
harmonic and ``P`` selects rows of an amplitude matrix on a dense sphere
grid where the current fODF falls below ``tau`` times its mean amplitude.
Iteration stops when an active set repeats.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import sh, sphere
from .errors import (
    EmptyMask,
    NonConvergenceWarning,
    TooFewAnisotropicVoxels,
)
from .volume_io import GradientScheme, Volume4D

__all__ = [
    "ResponseFunction",
    "CsdParams",
    "tensor_fit",
    "estimate_response",
    "deconvolve",
    "deconvolve_info",
    "fit_volume",
    "signal_sh_volume",
]


@dataclass
class ResponseFunction:
    """Axially symmetric single-fiber response: one m = 0 coefficient per even order."""

    zonal: np.ndarray

    def __post_init__(self):
        self.zonal = np.asarray(self.zonal, dtype=np.float64).reshape(-1)
        if not self.zonal[0] > 0:
            raise ValueError("response zonal[0] must be positive")

    @property
    def order(self) -> int:
        return 2 * (len(self.zonal) - 1)

    def rotational_harmonics(self) -> np.ndarray:
        """Per-order convolution eigenvalues ``zonal_k / Y_k^0(z)``."""
        k = np.arange(0, self.order + 1, 2)
        return self.zonal / np.sqrt((2 * k + 1) / (4 * np.pi))

    def per_coefficient(self) -> np.ndarray:
        ks, _ = sh.sh_indices(self.order)
        return self.rotational_harmonics()[ks // 2]


@dataclass
class CsdParams:
    lambda_: float = 1.0
    tau: float = 0.0
    max_iter: int = 50
    order: int = 8
    sh_regularize: float = 0.0
    grid_size: int = 724

    def to_dict(self) -> dict:
        return asdict(self)


#: Multiplier applied on top of ``(lambda * rh_0)**2``; see :func:`penalty_weight`.
PENALTY_SCALE = 2.0


@lru_cache(maxsize=8)
def _grid_outer(order: int, n: int) -> np.ndarray:
    """Per-grid-point outer products, flattened to (n, C*C)."""
    G = _grid_matrix(order, n)
    out = (G[:, :, None] * G[:, None, :]).reshape(n, -1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def _grid_matrix(order: int, n: int) -> np.ndarray:
    B = sh.build_design_matrix(sphere.constraint_grid(n), order)
    B.setflags(write=False)
    return B


def _zonal_basis(dirs, order: int) -> np.ndarray:
    ks = np.arange(0, order + 1, 2)
    cos = np.clip(np.asarray(dirs)[:, 2], -1.0, 1.0)
    from scipy.special import eval_legendre

    return np.column_stack([np.sqrt((2 * k + 1) / (4 * np.pi)) * eval_legendre(k, cos) for k in ks])


def tensor_fit(signal, scheme: GradientScheme):
    """Log-linear diffusion tensor fit.

    ``signal`` is (..., N) raw DWI. Returns ``(fa, v1)``: fractional
    anisotropy and principal eigenvector per voxel.
    """
    s = np.asarray(signal, dtype=np.float64)
    s0 = s[..., scheme.b0_mask].mean(axis=-1)
    dw = scheme.dw_mask
    g = scheme.bvecs[dw]
    b = scheme.bvals[dw]
    A = -b[:, None] * np.column_stack([g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
                                      2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2],
                                      2 * g[:, 1] * g[:, 2]])
    ratio = s[..., dw] / np.where(s0 > 0, s0, 1.0)[..., None]
    y = np.log(np.clip(ratio, 1e-6, None))
    coef = np.linalg.lstsq(A, y.reshape(-1, y.shape[-1]).T, rcond=None)[0].T
    D = np.empty((coef.shape[0], 3, 3))
    D[:, 0, 0], D[:, 1, 1], D[:, 2, 2] = coef[:, 0], coef[:, 1], coef[:, 2]
    D[:, 0, 1] = D[:, 1, 0] = coef[:, 3]
    D[:, 0, 2] = D[:, 2, 0] = coef[:, 4]
    D[:, 1, 2] = D[:, 2, 1] = coef[:, 5]
    evals, evecs = np.linalg.eigh(D)
    md = evals.mean(axis=1, keepdims=True)
    num = np.sqrt(np.sum((evals - md) ** 2, axis=1))
    den = np.sqrt(np.sum(evals ** 2, axis=1))
    fa = np.sqrt(1.5) * num / np.where(den > 0, den, 1.0)
    fa = np.where(den > 0, fa, 0.0)
    v1 = evecs[:, :, -1]
    return fa.reshape(s.shape[:-1]), v1.reshape(s.shape[:-1] + (3,))


def _rotation_to_z(v: np.ndarray) -> np.ndarray:
    """Rotation matrix mapping unit vector ``v`` onto +z."""
    z = np.array([0.0, 0.0, 1.0])
    v = v / np.linalg.norm(v)
    if v[2] < 0:
        v = -v
    axis = np.cross(v, z)
    s = np.linalg.norm(axis)
    c = v @ z
    if s < 1e-12:
        return np.eye(3)
    k = axis / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * K + (1 - c) * K @ K


def estimate_response(dwi: Volume4D, scheme: GradientScheme, mask: Volume4D, *,
                      order: int = 8, n_voxels: int = 300, min_voxels: int = 30,
                      fa_floor: float = 0.1) -> ResponseFunction:
    """Single-fiber response from the most anisotropic voxels in ``mask``.

    The ``n_voxels`` highest-FA voxels (among those above ``fa_floor``) are
    rotated so their principal eigenvector lies along z; their normalised
    signals are pooled and fitted with the m = 0 basis functions.
    """
    m = mask.bool_mask()
    if not m.any():
        raise EmptyMask("response estimation needs a non-empty mask")
    signals = dwi.data[m].astype(np.float64)
    fa, v1 = tensor_fit(signals, scheme)
    candidates = np.flatnonzero(np.isfinite(fa) & (fa > fa_floor))
    if candidates.size < min_voxels:
        raise TooFewAnisotropicVoxels(
            f"{candidates.size} voxels exceed FA {fa_floor}; need {min_voxels}")
    ranked = candidates[np.argsort(-fa[candidates], kind="stable")][:n_voxels]
    dw = scheme.dw_mask
    g = scheme.bvecs[dw]
    rows, vals = [], []
    for i in ranked:
        s0 = signals[i, scheme.b0_mask].mean()
        R = _rotation_to_z(v1[i])
        rows.append(g @ R.T)
        vals.append(signals[i, dw] / s0)
    dirs = np.concatenate(rows)
    A = _zonal_basis(dirs, order)
    zonal = np.linalg.lstsq(A, np.concatenate(vals), rcond=None)[0]
    return ResponseFunction(zonal)


def penalty_weight(rf: ResponseFunction, lambda_: float) -> float:
    """Weight on the squared constraint residual for a given ``lambda_``.

    Scaled by the squared k = 0 rotational harmonic (times
    :data:`PENALTY_SCALE`) so that rescaling the response leaves the
    solution unchanged up to the inverse scale.
    """
    return PENALTY_SCALE * (lambda_ * rf.rotational_harmonics()[0]) ** 2


def deconvolve_batch(signal_sh, rf: ResponseFunction, lambda_: float = 1.0, tau: float = 0.0,
                     max_iter: int = 50, grid_size: int = 724):
    """Deconvolve many voxels at once.

    ``signal_sh`` is (V, C). Every voxel follows its own active-set
    iteration; the per-iteration normal matrices are assembled for all
    still-running voxels with one matrix product. Returns
    ``(coeffs, n_iter, converged)`` with shapes (V, C), (V,), (V,).
    """
    S = np.atleast_2d(np.asarray(signal_sh, dtype=np.float64))
    V, C = S.shape
    order = sh.order_from_n_coeffs(C)
    if order != rf.order:
        raise ValueError(f"signal order {order} does not match response order {rf.order}")
    r = rf.per_coefficient()
    F = S / r
    n_iter = np.zeros(V, dtype=int)
    converged = np.zeros(V, dtype=bool)
    if max_iter == 0 or V == 0:
        converged[:] = True
        return F, n_iter, converged
    G = _grid_matrix(order, grid_size)
    GG = _grid_outer(order, grid_size)
    rhs = S * r
    base = np.diag(r * r)
    w = penalty_weight(rf, lambda_)
    seen = [set() for _ in range(V)]
    running = np.arange(V)
    for it in range(1, max_iter + 1):
        amp = F[running] @ G.T
        active = amp < tau * amp.mean(axis=1, keepdims=True)
        keys = np.packbits(active, axis=1)
        keep = np.ones(len(running), dtype=bool)
        for j, v in enumerate(running):
            key = keys[j].tobytes()
            if key in seen[v]:
                keep[j] = False
                n_iter[v] = it - 1
                converged[v] = True
            else:
                seen[v].add(key)
        running, active = running[keep], active[keep]
        if running.size == 0:
            break
        M = base + w * (active.astype(np.float64) @ GG).reshape(-1, C, C)
        F[running] = np.linalg.solve(M, rhs[running][..., None])[..., 0]
        n_iter[running] = it
    if running.size:
        amp = F[running] @ G.T
        keys = np.packbits(amp < tau * amp.mean(axis=1, keepdims=True), axis=1)
        for j, v in enumerate(running):
            converged[v] = keys[j].tobytes() in seen[v]
    return F, n_iter, converged


def deconvolve_info(signal_sh, rf: ResponseFunction, lambda_: float = 1.0, tau: float = 0.0,
                    max_iter: int = 50, grid_size: int = 724):
    """Like :func:`deconvolve` but returns ``(coeffs, n_iter, converged)``."""
    s = np.asarray(signal_sh, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("deconvolve expects a single coefficient vector")
    F, n_iter, conv = deconvolve_batch(s[None], rf, lambda_, tau, max_iter, grid_size)
    return F[0], int(n_iter[0]), bool(conv[0])


def deconvolve(signal_sh, rf: ResponseFunction, lambda_: float = 1.0, tau: float = 0.0,
               max_iter: int = 50, grid_size: int = 724) -> np.ndarray:
    """Constrained deconvolution of one voxel's signal SH coefficients.

    Emits :class:`NonConvergenceWarning` (and returns the last iterate) when
    the active set is still changing after ``max_iter`` solves.
    """
    f, _, converged = deconvolve_info(signal_sh, rf, lambda_, tau, max_iter, grid_size)
    if not converged:
        warnings.warn(f"CSD active set still changing after {max_iter} iterations",
                      NonConvergenceWarning, stacklevel=2)
    return f


def signal_sh_volume(dwi: Volume4D, scheme: GradientScheme, order: int = 8,
                     regularize: float = 0.0, mask=None) -> Volume4D:
    """Fit b0-normalised DW signals of every voxel (or only ``mask``) to SH.

    Voxels with non-positive mean b0 are left at zero.
    """
    data = dwi.data.astype(np.float64)
    s0 = data[..., scheme.b0_mask].mean(axis=-1)
    ok = s0 > 0
    if mask is not None:
        ok &= np.asarray(getattr(mask, "bool_mask", lambda: mask)(), bool)
    B = sh.build_design_matrix(scheme.dw_dirs, order)
    out = np.zeros(dwi.spatial + (sh.n_coeffs(order),))
    norm = data[ok][:, scheme.dw_mask] / s0[ok, None]
    out[ok] = sh.fit_sh(norm, B, regularize)
    return Volume4D(out, "sh_signal", dwi.voxel_size_mm, order)


def fit_volume(dwi: Volume4D, scheme: GradientScheme, mask: Volume4D, rf: ResponseFunction,
               params: CsdParams | None = None, n_threads: int = 1):
    """CSD fODF for every masked voxel.

    Returns ``(fodf_volume, qc)``. Unmasked voxels are zero. Voxels whose
    signal is all zero (or whose b0 is non-positive) are flagged in ``qc``
    and left at zero; non-converged voxels keep their last iterate and are
    counted.
    """
    params = params or CsdParams()
    m = mask.bool_mask()
    if m.shape != dwi.spatial:
        raise ValueError(f"mask {m.shape} does not match volume {dwi.spatial}")
    idx = np.argwhere(m)
    data = dwi.data[m].astype(np.float64)
    s0 = data[:, scheme.b0_mask].mean(axis=1)
    bad = ~(s0 > 0) | ~np.any(data != 0, axis=1) | ~np.all(np.isfinite(data), axis=1)
    B = sh.build_design_matrix(scheme.dw_dirs, params.order)
    good = np.flatnonzero(~bad)
    sig = sh.fit_sh(data[good][:, scheme.dw_mask] / s0[good, None], B, params.sh_regularize)

    def solve_chunk(rows):
        return deconvolve_batch(sig[rows], rf, params.lambda_, params.tau,
                                params.max_iter, params.grid_size)

    chunks = np.array_split(np.arange(len(good)), max(1, n_threads)) if len(good) else []
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(solve_chunk, chunks))
    else:
        parts = [solve_chunk(c) for c in chunks]
    results = [(f, n, c) for part in parts for f, n, c in zip(*part)]

    out = np.zeros(dwi.spatial + (sh.n_coeffs(params.order),))
    flagged = [{"index": [int(v) for v in idx[i]], "reason": "zero_or_invalid_signal"}
               for i in np.flatnonzero(bad)]
    nonconv = 0
    iters = []
    for row, (f, n_it, conv) in zip(good, results):
        out[tuple(idx[row])] = f
        iters.append(int(n_it))
        if not conv:
            nonconv += 1
            flagged.append({"index": [int(v) for v in idx[row]], "reason": "nonconvergence"})
    flagged.sort(key=lambda d: d["index"])
    qc = {
        "n_mask": int(m.sum()),
        "n_fitted": int(len(good)),
        "n_flagged": len(flagged),
        "n_nonconverged": nonconv,
        "mean_iterations": float(np.mean(iters)) if iters else 0.0,
        "flagged": flagged,
        "params": params.to_dict(),
    }
    return Volume4D(out, "sh_fodf", dwi.voxel_size_mm, params.order), qc
