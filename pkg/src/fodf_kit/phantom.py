"""Synthetic multi-tensor DWI phantoms and scan/rescan pairs.

Each voxel is a mixture of axially symmetric tensors::

    S(b, g) = S0 * sum_i f_i * exp(-b * (rd_i + (ad_i - rd_i) * (g . d_i)^2))

Fiber directions vary smoothly through the volume so that neighbouring
voxels carry related orientations. Noise is Rician; every voxel draws from
its own stream seeded by ``(seed, x, y, z)`` so results do not depend on
evaluation order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import sh
from .errors import InvalidVolume, MissingNoiselessSource, ShapeTooSmall
from .volume_io import GradientScheme, Volume4D

__all__ = [
    "Compartment",
    "VoxelModel",
    "ScanProfile",
    "PhantomSource",
    "simulate_signal",
    "ground_truth_fodf",
    "generate_phantom",
    "make_rescan",
    "LAYOUTS",
]

LAYOUTS = ("single_fiber_slab", "crossing_slab", "mixed")
AD_DEFAULT = 1.7e-3
RD_DEFAULT = 0.2e-3
ISO_DEFAULT = 0.8e-3
NOISELESS_SNR = 1e6
_JITTER_STREAM = 0x6A17


@dataclass(frozen=True)
class Compartment:
    fraction: float
    direction: tuple
    ad: float = AD_DEFAULT
    rd: float = RD_DEFAULT


@dataclass(frozen=True)
class VoxelModel:
    compartments: tuple
    s0: float = 1.0

    def __post_init__(self):
        comps = tuple(self.compartments)
        object.__setattr__(self, "compartments", comps)
        if abs(sum(c.fraction for c in comps) - 1.0) > 1e-9:
            raise InvalidVolume("compartment fractions must sum to 1")
        for c in comps:
            if not 0.0 <= c.fraction <= 1.0:
                raise InvalidVolume(f"fraction {c.fraction} outside [0, 1]")
            if not c.ad >= c.rd >= 0:
                raise InvalidVolume(f"need ad >= rd >= 0, got ad={c.ad}, rd={c.rd}")
            if abs(np.linalg.norm(c.direction) - 1.0) > 1e-9:
                raise InvalidVolume("compartment direction must be a unit vector")


@dataclass(frozen=True)
class ScanProfile:
    snr: float = 20.0
    direction_jitter_deg: float = 0.0
    gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.snr > 0:
            raise InvalidVolume("snr must be positive")
        if self.gain <= 0 or self.direction_jitter_deg < 0:
            raise InvalidVolume("gain must be positive and jitter non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class PhantomSource:
    """Per-voxel mixture parameters plus the noiseless nominal signal."""

    fractions: np.ndarray   # X,Y,Z,K
    dirs: np.ndarray        # X,Y,Z,K,3
    ad: np.ndarray          # X,Y,Z,K
    rd: np.ndarray          # X,Y,Z,K
    s0: np.ndarray          # X,Y,Z
    noiseless: np.ndarray   # X,Y,Z,N (float64)
    labels: np.ndarray      # X,Y,Z: 0 background, 1 single fiber, 2 crossing
    info: dict = field(default_factory=dict)

    def voxel_model(self, x: int, y: int, z: int) -> VoxelModel:
        comps = [Compartment(float(f), tuple(self.dirs[x, y, z, k]), float(self.ad[x, y, z, k]),
                             float(self.rd[x, y, z, k]))
                 for k, f in enumerate(self.fractions[x, y, z]) if f > 0]
        return VoxelModel(tuple(comps), float(self.s0[x, y, z]))


def _mixture_signal(fractions, dirs, ad, rd, s0, bvals, bvecs) -> np.ndarray:
    # fractions (..., K), dirs (..., K, 3) -> (..., N)
    proj = np.einsum("...kc,nc->...kn", dirs, bvecs)
    gnorm2 = np.sum(bvecs * bvecs, axis=1)
    adc = rd[..., None] * gnorm2 + (ad - rd)[..., None] * proj ** 2
    atten = np.exp(-bvals * adc)
    return s0[..., None] * np.einsum("...k,...kn->...n", fractions, atten)


def simulate_signal(m: VoxelModel, scheme: GradientScheme) -> np.ndarray:
    """Noiseless signal of one voxel for every measurement of ``scheme``."""
    f = np.array([c.fraction for c in m.compartments])
    d = np.array([c.direction for c in m.compartments], dtype=np.float64)
    ad = np.array([c.ad for c in m.compartments])
    rd = np.array([c.rd for c in m.compartments])
    return _mixture_signal(f, d, ad, rd, np.float64(m.s0), scheme.bvals, scheme.bvecs)


#: Largest negative lobe (relative to the peak) tolerated in a projected kernel.
KERNEL_NEGATIVITY = 1e-3


@lru_cache(maxsize=8)
def _quadrature(order: int):
    """Gauss-Legendre (in cos theta) x uniform (in phi) product grid.

    Exact for band-limited integrands far above ``order``; always at least
    32 x 64 = 2048 nodes.
    """
    n_t = max(32, 2 * order + 2)
    n_p = 2 * n_t
    x, w = np.polynomial.legendre.leggauss(n_t)
    phi = np.arange(n_p) * (2 * np.pi / n_p)
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct ** 2)
    pts = np.column_stack([(st * np.cos(ph)).ravel(), (st * np.sin(ph)).ravel(), ct.ravel()])
    weights = np.repeat(w, n_p) * (2 * np.pi / n_p)
    return pts, weights, sh.build_design_matrix(pts, order)


def _watson_coeffs(direction, kappa: float, order: int) -> np.ndarray:
    pts, weights, B = _quadrature(order)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    f = np.exp(kappa * ((pts @ d) ** 2 - 1.0)) * weights
    return B.T @ (f / f.sum())


@lru_cache(maxsize=8)
def fiber_kernel_concentration(order: int = 8) -> float:
    """Watson concentration of the ground-truth fiber kernel.

    The sharpest kernel whose order-``order`` projection dips no lower than
    ``-KERNEL_NEGATIVITY`` times its peak. A truncated delta rings by
    about 14 % at order 8, which no non-negative estimate can match.
    """
    from scipy.optimize import brentq

    probe = np.column_stack([np.zeros(2001), np.sin(t := np.linspace(0, np.pi / 2, 2001)),
                             np.cos(t)])
    Bp = sh.build_design_matrix(probe, order)

    def excess(kappa):
        v = Bp @ _watson_coeffs((0.0, 0.0, 1.0), kappa, order)
        return v.min() / v.max() + KERNEL_NEGATIVITY

    grid = np.geomspace(0.5, 500.0, 60)
    vals = [excess(k) for k in grid]
    for i in range(1, len(grid)):
        if vals[i - 1] > 0 >= vals[i]:
            return float(brentq(excess, grid[i - 1], grid[i], xtol=1e-6))
    return float(grid[-1])


@lru_cache(maxsize=8)
def _kernel_scale(order: int) -> np.ndarray:
    ks, _ = sh.sh_indices(order)
    zonal = _watson_coeffs((0.0, 0.0, 1.0), fiber_kernel_concentration(order), order)
    _, ms = sh.sh_indices(order)
    per_order = zonal[ms == 0] / np.sqrt((2 * np.arange(0, order + 1, 2) + 1) / (4 * np.pi))
    out = per_order[ks // 2]
    out.setflags(write=False)
    return out


def fiber_kernel_scale(order: int = 8) -> np.ndarray:
    """Per-coefficient factors turning a delta projection into the fiber kernel's.

    The kernel is axially symmetric, so its projection around axis ``d`` is
    ``scale * Y(d)`` with one factor per order (``scale[0] == 1``).
    """
    return _kernel_scale(order)


def ground_truth_fodf(m: VoxelModel, order: int = 8) -> np.ndarray:
    """Even SH projection of a mixture of delta-like fibers.

    Each anisotropic compartment (ad > rd) contributes a unit-mass Watson
    kernel around its axis, weighted by its fraction; the kernel is
    projected by quadrature (see :func:`fiber_kernel_concentration` for
    its width).
    """
    c = np.zeros(sh.n_coeffs(order))
    for comp in m.compartments:
        if comp.ad > comp.rd and comp.fraction > 0:
            c += comp.fraction * sh.build_design_matrix(np.array([comp.direction]), order)[0]
    return fiber_kernel_scale(order) * c


def _orthonormal_pair(rng) -> tuple[np.ndarray, np.ndarray]:
    a = rng.normal(size=3)
    a /= np.linalg.norm(a)
    b = rng.normal(size=3)
    b -= (b @ a) * a
    b /= np.linalg.norm(b)
    return a, b


def _geometry(shape, layout, rng, crossing_ratio):
    X, Y, Z = shape
    grid = np.stack(np.meshgrid(*(np.linspace(0.0, 1.0, n) for n in shape), indexing="ij"), -1)
    e1, e2 = _orthonormal_pair(rng)
    normal = np.cross(e1, e2)
    k1 = rng.normal(size=3)
    k1 /= np.linalg.norm(k1)
    k2 = rng.normal(size=3)
    k2 /= np.linalg.norm(k2)
    theta = rng.uniform(0, np.pi) + 0.5 * np.pi * (grid @ k1)
    tilt = 0.35 * np.sin(np.pi * (grid @ k2) + rng.uniform(0, 2 * np.pi))
    cross = np.deg2rad(60.0 + 30.0 * 0.5 * (1 + np.sin(2 * np.pi * (grid @ k2))))
    frac1 = 0.5 + 0.1 * np.sin(2 * np.pi * (grid @ k1) + rng.uniform(0, 2 * np.pi))

    def in_plane(angle):
        d = np.cos(angle)[..., None] * e1 + np.sin(angle)[..., None] * e2
        d = np.cos(tilt)[..., None] * d + np.sin(tilt)[..., None] * normal
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    d1 = in_plane(theta)
    d2 = in_plane(theta + cross)

    mask = np.zeros(shape, bool)
    mask[1:-1, 1:-1, 1:-1] = True
    labels = np.zeros(shape, np.int8)
    if layout == "single_fiber_slab":
        labels[mask] = 1
    elif layout == "crossing_slab":
        labels[mask] = 2
    else:
        field_ = ndimage.gaussian_filter(rng.normal(size=shape), sigma=max(shape) / 6, mode="wrap")
        n_cross = int(round(crossing_ratio * mask.sum()))
        order = np.argsort(-field_[mask], kind="stable")
        lab = np.ones(mask.sum(), np.int8)
        lab[order[:n_cross]] = 2
        labels[mask] = lab
    return labels, d1, d2, frac1


def _voxel_streams(seed: int, shape):
    for x in range(shape[0]):
        for y in range(shape[1]):
            for z in range(shape[2]):
                yield (x, y, z), np.random.default_rng([seed, x, y, z])


def _jittered_bvecs(scheme: GradientScheme, profile: ScanProfile) -> np.ndarray:
    bvecs = scheme.bvecs.copy()
    if profile.direction_jitter_deg == 0:
        return bvecs
    rng = np.random.default_rng([profile.seed, _JITTER_STREAM])
    for i in np.flatnonzero(scheme.dw_mask):
        g = bvecs[i]
        axis = np.cross(g, rng.normal(size=3))
        axis /= np.linalg.norm(axis)
        ang = np.deg2rad(profile.direction_jitter_deg) * rng.normal()
        # Rodrigues rotation about an axis perpendicular to g
        bvecs[i] = g * np.cos(ang) + np.cross(axis, g) * np.sin(ang)
    return bvecs


def _acquire(source: PhantomSource, scheme: GradientScheme, profile: ScanProfile) -> np.ndarray:
    if profile.direction_jitter_deg > 0:
        clean = _mixture_signal(source.fractions, source.dirs, source.ad, source.rd, source.s0,
                                scheme.bvals, _jittered_bvecs(scheme, profile))
    else:
        clean = source.noiseless
    if profile.snr >= NOISELESS_SNR:
        noisy = clean.copy()
    else:
        noisy = np.empty_like(clean)
        n = clean.shape[-1]
        for (x, y, z), rng in _voxel_streams(profile.seed, clean.shape[:3]):
            sigma = source.s0[x, y, z] / profile.snr
            n1, n2 = rng.normal(0.0, sigma, size=(2, n))
            noisy[x, y, z] = np.sqrt((clean[x, y, z] + n1) ** 2 + n2 ** 2)
    if profile.gain != 1.0:
        noisy = noisy * profile.gain
    return noisy


def generate_phantom(shape, layout: str, scheme: GradientScheme, profile: ScanProfile, *,
                     geometry_seed: int = 0, crossing_ratio: float = 0.5,
                     ad: float = AD_DEFAULT, rd: float = RD_DEFAULT,
                     iso_diffusivity: float = ISO_DEFAULT, s0: float = 1.0,
                     order: int = 8, voxel_size_mm=(2.0, 2.0, 2.0)):
    """Simulate a phantom acquisition.

    Returns ``(dwi, mask, gt_fodf)``. The one-voxel border is isotropic
    background outside the mask; interior voxels hold one fiber or two
    crossing fibers according to ``layout`` (``mixed`` puts
    ``crossing_ratio`` of the mask in smooth crossing regions). The fiber
    geometry depends only on ``geometry_seed``; noise only on
    ``profile.seed``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 3:
        raise ShapeTooSmall(f"phantom needs at least 3 voxels per axis, got {shape}")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
    rng = np.random.default_rng(geometry_seed)
    labels, d1, d2, frac1 = _geometry(shape, layout, rng, crossing_ratio)

    K = 2
    fractions = np.zeros(shape + (K,))
    dirs = np.zeros(shape + (K, 3))
    dirs[..., 0, :] = d1
    dirs[..., 1, :] = d2
    ads = np.full(shape + (K,), float(ad))
    rds = np.full(shape + (K,), float(rd))
    fractions[labels == 1, 0] = 1.0
    crossing = labels == 2
    fractions[crossing, 0] = frac1[crossing]
    fractions[crossing, 1] = 1.0 - frac1[crossing]
    bg = labels == 0
    fractions[bg, 0] = 1.0
    ads[bg] = iso_diffusivity
    rds[bg] = iso_diffusivity
    s0s = np.full(shape, float(s0))

    clean = _mixture_signal(fractions, dirs, ads, rds, s0s, scheme.bvals, scheme.bvecs)
    info = dict(layout=layout, geometry_seed=int(geometry_seed), crossing_ratio=float(crossing_ratio),
                ad=float(ad), rd=float(rd), iso_diffusivity=float(iso_diffusivity), s0=float(s0))
    source = PhantomSource(fractions, dirs, ads, rds, s0s, clean, labels, info)

    fiber = (ads > rds) & (fractions > 0)
    Bd1 = sh.build_design_matrix(d1.reshape(-1, 3), order).reshape(shape + (-1,))
    Bd2 = sh.build_design_matrix(d2.reshape(-1, 3), order).reshape(shape + (-1,))
    a = fiber_kernel_scale(order)
    gt = a * (np.where(fiber[..., 0], fractions[..., 0], 0.0)[..., None] * Bd1
              + np.where(fiber[..., 1], fractions[..., 1], 0.0)[..., None] * Bd2)

    noisy = _acquire(source, scheme, profile)
    dwi = Volume4D(noisy, "dwi_signal", voxel_size_mm, source=source)
    mask = Volume4D.from_mask(labels > 0, voxel_size_mm)
    gt_vol = Volume4D(gt, "sh_fodf", voxel_size_mm, order)
    return dwi, mask, gt_vol


def make_rescan(dwi: Volume4D, scheme: GradientScheme, profile_rescan: ScanProfile) -> Volume4D:
    """Re-acquire the phantom behind ``dwi`` with a new scan profile.

    The noiseless truth is shared with the original scan, so any difference
    between the two volumes comes from noise, gain and direction jitter.
    """
    source = dwi.source
    if not isinstance(source, PhantomSource):
        raise MissingNoiselessSource("volume carries no phantom source to re-acquire")
    noisy = _acquire(source, scheme, profile_rescan)
    return Volume4D(noisy, "dwi_signal", dwi.voxel_size_mm, source=source)
