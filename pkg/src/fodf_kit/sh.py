"""Real, even-order spherical harmonics.

Coefficients are flat vectors indexed lexicographically over ``(k, m)`` with
``k = 0, 2, ..., L`` and ``m = -k..k``; an order-8 vector has 45 entries.
The basis is real, orthonormal and antipodally symmetric::

    m < 0  ->  sqrt(2) * Im Y_k^|m|
    m = 0  ->  Y_k^0
    m > 0  ->  sqrt(2) * (-1)^m * Re Y_k^m

The legacy ``tournier07`` convention drops the sqrt(2) on the m != 0 terms;
:func:`to_legacy` / :func:`from_legacy` convert by a diagonal rescale.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.special import sph_harm_y

from .errors import (
    DegenerateAnisotropy,
    OddOrder,
    SingularSystem,
    UnderdeterminedFit,
)

__all__ = [
    "n_coeffs",
    "order_from_n_coeffs",
    "sh_indices",
    "cart2sphere",
    "build_design_matrix",
    "fit_sh",
    "eval_sh",
    "acc",
    "acc_many",
    "mean_diffusivity_proxy",
    "to_legacy",
    "from_legacy",
]


def n_coeffs(order: int) -> int:
    """Number of even-order coefficients up to ``order``."""
    _check_order(order)
    return (order + 1) * (order + 2) // 2


def order_from_n_coeffs(n: int) -> int:
    order = int(round((-3 + np.sqrt(1 + 8 * n)) / 2))
    if order < 0 or order % 2 or n_coeffs(order) != n:
        raise OddOrder(f"{n} coefficients do not correspond to an even SH order")
    return order


def _check_order(order) -> None:
    if int(order) != order or order < 0 or order % 2:
        raise OddOrder(f"SH order must be a non-negative even integer, got {order}")


def sh_indices(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the ``(k, m)`` arrays for every flat coefficient index."""
    _check_order(order)
    ks, ms = [], []
    for k in range(0, order + 1, 2):
        for m in range(-k, k + 1):
            ks.append(k)
            ms.append(m)
    return np.array(ks), np.array(ms)


def cart2sphere(dirs) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle and azimuth of (N, 3) vectors (normalised internally)."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(dirs, axis=1)
    r = np.where(r == 0, 1.0, r)
    theta = np.arccos(np.clip(dirs[:, 2] / r, -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    return theta, phi


def _as_array(dirs) -> np.ndarray:
    # accept a sphere.DirectionSet or anything array-like
    return np.asarray(getattr(dirs, "dirs", dirs), dtype=np.float64).reshape(-1, 3)


def build_design_matrix(dirs, order: int) -> np.ndarray:
    """Evaluate every basis function of ``order`` at every direction.

    Returns an ``(N, n_coeffs(order))`` float64 array.
    """
    ks, ms = sh_indices(order)
    theta, phi = cart2sphere(_as_array(dirs))
    B = np.empty((theta.size, ks.size))
    for j, (k, m) in enumerate(zip(ks, ms)):
        y = sph_harm_y(k, abs(m), theta, phi)
        if m < 0:
            B[:, j] = np.sqrt(2.0) * y.imag
        elif m == 0:
            B[:, j] = y.real
        else:
            B[:, j] = np.sqrt(2.0) * (-1.0) ** m * y.real
    return B


def fit_sh(signal, dm: np.ndarray, regularize: float = 0.0) -> np.ndarray:
    """Least-squares SH coefficients of ``signal`` sampled at the rows of ``dm``.

    Solves ``(B^T B + regularize I) c = B^T s`` with a Cholesky factorisation.
    ``signal`` may carry leading batch axes; the last axis runs over
    directions.
    """
    dm = np.asarray(dm, dtype=np.float64)
    s = np.asarray(signal, dtype=np.float64)
    rows, cols = dm.shape
    if s.shape[-1] != rows:
        raise ValueError(f"signal has {s.shape[-1]} samples, design matrix {rows} rows")
    if regularize < 0:
        raise ValueError("regularize must be non-negative")
    if rows < cols and regularize == 0:
        raise UnderdeterminedFit(f"{rows} directions cannot determine {cols} coefficients")
    gram = dm.T @ dm + regularize * np.eye(cols)
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    rhs = s.reshape(-1, rows) @ dm
    c = linalg.cho_solve(factor, rhs.T).T
    return c.reshape(s.shape[:-1] + (cols,))


def eval_sh(c, dirs) -> np.ndarray:
    """Amplitudes ``B c`` of coefficient vector(s) ``c`` at ``dirs``."""
    c = np.asarray(c, dtype=np.float64)
    B = build_design_matrix(dirs, order_from_n_coeffs(c.shape[-1]))
    return c @ B.T


def acc(u, v) -> float:
    """Angular correlation coefficient of two coefficient vectors.

    The isotropic k = 0 term is excluded; the even basis has no k = 1 terms,
    so the sum runs over k = 2, 4, ..., L.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"order mismatch: {u.shape} vs {v.shape}")
    order_from_n_coeffs(u.size)
    ua, va = u[1:], v[1:]
    nu = np.sqrt(ua @ ua)
    nv = np.sqrt(va @ va)
    if nu == 0 or nv == 0:
        raise DegenerateAnisotropy("coefficient vector has no k >= 2 content")
    return float(np.clip((ua @ va) / (nu * nv), -1.0, 1.0))


def acc_many(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`acc` over leading axes.

    Returns ``(values, valid)``; entries where either input is degenerate
    have ``valid == False`` and value 0.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    ua, va = u[..., 1:], v[..., 1:]
    nu = np.sqrt(np.sum(ua * ua, axis=-1))
    nv = np.sqrt(np.sum(va * va, axis=-1))
    valid = (nu > 0) & (nv > 0)
    denom = np.where(valid, nu * nv, 1.0)
    vals = np.where(valid, np.sum(ua * va, axis=-1) / denom, 0.0)
    return np.clip(vals, -1.0, 1.0), valid


def mean_diffusivity_proxy(c) -> float | np.ndarray:
    """The k = 0 coefficient (flat index 0)."""
    c = np.asarray(c)
    return c[..., 0] if c.ndim > 1 else float(c[0])


def _legacy_scale(order: int) -> np.ndarray:
    _, ms = sh_indices(order)
    return np.where(ms == 0, 1.0, np.sqrt(2.0))


def to_legacy(c) -> np.ndarray:
    """Coefficients for the legacy basis that omits sqrt(2) on m != 0."""
    c = np.asarray(c, dtype=np.float64)
    return c * _legacy_scale(order_from_n_coeffs(c.shape[-1]))


def from_legacy(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return c / _legacy_scale(order_from_n_coeffs(c.shape[-1]))
