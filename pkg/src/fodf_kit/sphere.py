"""Gradient-direction sets on the unit sphere.

Directions are treated as axes (``d`` and ``-d`` are the same measurement)
because diffusion signals are antipodally symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import sh
from .errors import (
    InvalidVolume,
    KeepBelowShMinimum,
    TooFewDirections,
    UnderdeterminedDesign,
    UniformityUnattainable,
)

__all__ = [
    "DirectionSet",
    "generate_scheme",
    "repulsion_energy",
    "drop_directions",
    "uniformity_check",
    "condition_ratio",
    "constraint_grid",
    "icosahedron_axes",
    "UNIFORMITY_RATIO",
]

# Calibrated on 45-of-96 random subsets at order 8; see uniformity_check.
UNIFORMITY_RATIO = 2000.0
DEFAULT_MAX_RETRIES = 50


@dataclass(frozen=True)
class DirectionSet:
    """Unit vectors, optionally remembering their rows in a parent set."""

    dirs: np.ndarray
    antipodal_symmetric: bool = True
    indices: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        d = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-9):
            raise InvalidVolume("direction set contains non-unit vectors")
        d.setflags(write=False)
        object.__setattr__(self, "dirs", d)

    def __len__(self) -> int:
        return len(self.dirs)

    def min_separation_deg(self) -> float:
        """Smallest angle between two members (axes if antipodal)."""
        if len(self) < 2:
            return 180.0
        dots = self.dirs @ self.dirs.T
        if self.antipodal_symmetric:
            dots = np.abs(dots)
        np.fill_diagonal(dots, -np.inf)
        return float(np.degrees(np.arccos(np.clip(dots.max(), -1.0, 1.0))))


def repulsion_energy(dirs) -> float:
    """Sum over pairs of ``1/|di - dj| + 1/|di + dj|``."""
    d = np.asarray(dirs, dtype=np.float64)
    iu = np.triu_indices(len(d), 1)
    diff = np.linalg.norm(d[:, None] - d[None], axis=-1)[iu]
    summ = np.linalg.norm(d[:, None] + d[None], axis=-1)[iu]
    return float(np.sum(1.0 / diff) + np.sum(1.0 / summ))


def _energy_grad(d: np.ndarray) -> tuple[float, np.ndarray]:
    diff = d[:, None, :] - d[None, :, :]
    summ = d[:, None, :] + d[None, :, :]
    rd = np.linalg.norm(diff, axis=-1)
    rs = np.linalg.norm(summ, axis=-1)
    np.fill_diagonal(rd, np.inf)
    np.fill_diagonal(rs, np.inf)
    energy = 0.5 * (np.sum(1.0 / rd) + np.sum(1.0 / rs))
    grad = -np.sum(diff / rd[..., None] ** 3, axis=1) - np.sum(summ / rs[..., None] ** 3, axis=1)
    return float(energy), grad


def _canonical(d: np.ndarray) -> np.ndarray:
    # put every axis in the upper hemisphere (ties broken on y, then x)
    key = np.where(np.abs(d[:, 2]) > 1e-12, d[:, 2],
                   np.where(np.abs(d[:, 1]) > 1e-12, d[:, 1], d[:, 0]))
    return d * np.where(key < 0, -1.0, 1.0)[:, None]


def _descend(d: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, list[float]]:
    energy, grad = _energy_grad(d)
    history = [energy]
    step = 0.1 / len(d)
    for _ in range(max_iter):
        tangent = grad - np.sum(grad * d, axis=1, keepdims=True) * d
        if np.max(np.linalg.norm(tangent, axis=1)) < tol:
            break
        # backtracking keeps the energy sequence non-increasing
        while True:
            cand = d - step * tangent
            cand /= np.linalg.norm(cand, axis=1, keepdims=True)
            e_new, g_new = _energy_grad(cand)
            if e_new <= energy:
                break
            step *= 0.5
            if step < 1e-14:
                return d, history
        if energy - e_new < tol * 1e-3 * energy:
            d, energy, grad = cand, e_new, g_new
            history.append(energy)
            break
        d, energy, grad = cand, e_new, g_new
        history.append(energy)
        step *= 1.5
    return d, history


def generate_scheme(n: int, seed: int = 0, restarts: int = 2, max_iter: int = 2000,
                    tol: float = 1e-5, return_history: bool = False):
    """Electrostatic-repulsion scheme of ``n`` axes.

    Each restart draws ``n`` random unit vectors from ``seed`` and runs
    projected gradient descent with backtracking; the lowest-energy result
    is returned. With ``return_history`` the per-iteration energies of the
    winning restart are returned alongside.
    """
    if n < 6:
        raise TooFewDirections(f"need at least 6 directions, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        d0 = rng.normal(size=(n, 3))
        d0 /= np.linalg.norm(d0, axis=1, keepdims=True)
        d, hist = _descend(d0, max_iter, tol)
        if best is None or hist[-1] < best[1][-1]:
            best = (d, hist)
    out = DirectionSet(_canonical(best[0] / np.linalg.norm(best[0], axis=1, keepdims=True)))
    return (out, best[1]) if return_history else out


def icosahedron_axes() -> np.ndarray:
    """The 6 vertex axes of a regular icosahedron (one vertex per antipodal pair)."""
    p = (1 + np.sqrt(5)) / 2
    v = np.array([[0, 1, p], [0, -1, p], [1, p, 0], [-1, p, 0], [p, 0, 1], [-p, 0, 1]], float)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def condition_ratio(subset, reference, order: int = 8) -> float:
    """cond(B_subset) / cond(B_reference) for order-``order`` design matrices."""
    sub = getattr(subset, "dirs", subset)
    ref = getattr(reference, "dirs", reference)
    ncoef = sh.n_coeffs(order)
    if len(sub) < ncoef:
        raise UnderdeterminedDesign(
            f"{len(sub)} directions cannot support {ncoef} order-{order} coefficients")
    c_sub = np.linalg.cond(sh.build_design_matrix(sub, order))
    c_ref = np.linalg.cond(sh.build_design_matrix(ref, order))
    return float(c_sub / c_ref)


def uniformity_check(subset, reference, order: int = 8, ratio: float = UNIFORMITY_RATIO) -> bool:
    """Whether ``subset`` still covers the sphere well enough for an SH fit.

    Passes when the design-matrix condition number grows by at most ``ratio``
    relative to ``reference``. The default ratio is calibrated so that random
    45-of-96 subsets of a repulsion scheme pass with probability >= 0.9 while
    clustered subsets (e.g. one octant) fail by orders of magnitude.
    """
    return condition_ratio(subset, reference, order) <= ratio


def drop_directions(full: DirectionSet, keep: int, seed: int,
                    max_retries: int = DEFAULT_MAX_RETRIES, order: int = 8,
                    ratio: float = UNIFORMITY_RATIO) -> DirectionSet:
    """Random size-``keep`` subset of ``full`` that passes :func:`uniformity_check`.

    The returned set records the chosen rows of ``full`` in ``indices``
    (sorted ascending).
    """
    floor = sh.n_coeffs(order)
    if keep < floor:
        raise KeepBelowShMinimum(f"keep={keep} is below the order-{order} minimum of {floor}")
    n = len(full)
    if keep > n:
        raise ValueError(f"keep={keep} exceeds the {n} available directions")
    if keep == n:
        return DirectionSet(full.dirs, full.antipodal_symmetric, np.arange(n))
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        idx = np.sort(rng.choice(n, size=keep, replace=False))
        if uniformity_check(full.dirs[idx], full.dirs, order, ratio):
            return DirectionSet(full.dirs[idx], full.antipodal_symmetric, idx)
    raise UniformityUnattainable(
        f"no uniform {keep}-of-{n} subset found in {max_retries} draws")


@lru_cache(maxsize=4)
def _fibonacci(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    pts.setflags(write=False)
    return pts


def constraint_grid(n: int = 724) -> np.ndarray:
    """Deterministic near-uniform ``n``-point grid over the whole sphere."""
    return _fibonacci(n)
