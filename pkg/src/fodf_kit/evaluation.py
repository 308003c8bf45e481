"""Evaluation protocols: ACC maps, dropout degradation curves, Wilcoxon tests.

Scalar maps (per-voxel ACC, the k = 0 coefficient) are stored as
single-channel ``dwi_signal`` volumes so they round-trip through the
volume format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import csd, sh, trainer
from .errors import DimsMismatch, TooFewNonzeroPairs
from .volume_io import GradientScheme, Volume4D

__all__ = [
    "EvalReport",
    "DegradationCurve",
    "acc_map",
    "dropout_estimate",
    "degradation_experiment",
    "wilcoxon_signed_rank",
    "md_acc_panel",
    "HIST_BINS",
    "EXACT_MAX_N",
]

HIST_BINS = 100
EXACT_MAX_N = 25


def _scalar_volume(values: np.ndarray, voxel_size_mm) -> Volume4D:
    return Volume4D(np.asarray(values, dtype=np.float64)[..., None], "dwi_signal", voxel_size_mm)


@dataclass
class EvalReport:
    """Per-voxel ACC between two fODF volumes plus summary statistics.

    ``mean``/``std`` (population) run over included voxels only; voxels where
    either side has no k >= 2 power are counted in ``n_excluded``.
    """

    acc_map: Volume4D
    mean: float
    std: float
    n_voxels: int
    n_excluded: int
    label: str = ""
    histogram: list = field(default_factory=list)
    values: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
        return {
            "label": self.label,
            "mean_acc": self.mean,
            "std_acc": self.std,
            "n_voxels": self.n_voxels,
            "n_excluded": self.n_excluded,
            "histogram": {"edges": [float(e) for e in edges], "counts": list(self.histogram)},
        }


def _check_pair(a: Volume4D, b: Volume4D, mask: Volume4D | None):
    if a.dims != b.dims:
        raise DimsMismatch(f"{a.dims} vs {b.dims}")
    if a.sh_order is not None and b.sh_order is not None and a.sh_order != b.sh_order:
        raise DimsMismatch(f"SH order {a.sh_order} vs {b.sh_order}")
    if mask is not None and mask.spatial != a.spatial:
        raise DimsMismatch(f"mask {mask.spatial} vs volume {a.spatial}")


def acc_map(a: Volume4D, b: Volume4D, mask: Volume4D, label: str = "") -> EvalReport:
    """Voxelwise ACC of ``a`` against ``b`` inside ``mask``."""
    _check_pair(a, b, mask)
    m = mask.bool_mask()
    vals, valid = sh.acc_many(a.data[m].astype(np.float64), b.data[m].astype(np.float64))
    full = np.zeros(a.spatial)
    full[m] = np.where(valid, vals, 0.0)
    good = vals[valid]
    counts, _ = np.histogram(good, bins=HIST_BINS, range=(-1.0, 1.0))
    return EvalReport(
        acc_map=_scalar_volume(full, a.voxel_size_mm),
        mean=float(good.mean()) if good.size else float("nan"),
        std=float(good.std()) if good.size else float("nan"),
        n_voxels=int(good.size),
        n_excluded=int((~valid).sum()),
        label=label,
        histogram=[int(c) for c in counts],
        values=good,
    )


# ---------------------------------------------------------------- degradation

@dataclass
class DegradationCurve:
    """Mean ACC vs retained direction count.

    ``std`` is the spread of the per-repeat means; ``voxel_std`` the mean
    over repeats of the within-volume voxel spread.
    """

    counts: list
    mean: list
    std: list
    voxel_std: list
    per_repeat: list
    estimator: str = "csd"

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.counts, self.counts[1:])):
            raise ValueError("direction counts must be strictly increasing")
        if not self.per_repeat or not all(len(r) >= 1 for r in self.per_repeat):
            raise ValueError("each count needs at least one repeat")

    @property
    def pooled_std(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.std))))

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "counts": [int(c) for c in self.counts],
                "mean_acc": [float(v) for v in self.mean], "std_acc": [float(v) for v in self.std],
                "voxel_std_acc": [float(v) for v in self.voxel_std],
                "pooled_std": self.pooled_std,
                "per_repeat": [[float(v) for v in r] for r in self.per_repeat]}


def _repeat_seed(seed: int, count: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, count, repeat]).generate_state(1)[0])


def dropout_estimate(dwi: Volume4D, scheme: GradientScheme, mask: Volume4D, estimator,
                     count: int, repeat: int, seed: int = 0,
                     csd_params: csd.CsdParams | None = None, n_threads: int = 1) -> Volume4D:
    """fODF volume from one seeded ``count``-direction dropout of ``dwi``.

    ``estimator`` is ``"csd"`` (response re-estimated on the reduced data)
    or trained :class:`~fodf_kit.net.ModelParams`.
    """
    params = csd_params or csd.CsdParams()
    sub_scheme, rows = trainer.drop_scheme(scheme, count, _repeat_seed(seed, count, repeat),
                                           params.order)
    if isinstance(estimator, str):
        if estimator != "csd":
            raise ValueError(f"unknown estimator {estimator!r}")
        sub = Volume4D(dwi.data[..., rows], dwi.kind, dwi.voxel_size_mm)
        rf = csd.estimate_response(sub, sub_scheme, mask, order=params.order)
        return csd.fit_volume(sub, sub_scheme, mask, rf, params, n_threads)[0]
    sig = trainer.signal_sh(dwi, scheme, params.order, rows)
    return trainer.predict(estimator, sig, mask)


def degradation_experiment(dwi: Volume4D, scheme: GradientScheme, mask: Volume4D, estimator="csd",
                           counts=None, repeats: int = 10, seed: int = 0,
                           reference: Volume4D | None = None,
                           csd_params: csd.CsdParams | None = None,
                           n_threads: int = 1) -> DegradationCurve:
    """ACC vs full-direction CSD as directions are dropped.

    ``counts`` defaults to 45, 50, ... up to the number of DW directions
    (which is always included). Repeat ``r`` at count ``c`` uses the dropout
    seeded by ``(seed, c, r)``.
    """
    params = csd_params or csd.CsdParams()
    n_dw = int(scheme.dw_mask.sum())
    if counts is None:
        counts = list(range(sh.n_coeffs(params.order), n_dw, 5)) + [n_dw]
    counts = sorted(int(c) for c in counts)
    if counts[0] < sh.n_coeffs(params.order) or counts[-1] > n_dw:
        raise ValueError(f"counts must lie in [{sh.n_coeffs(params.order)}, {n_dw}]")
    if reference is None:
        rf = csd.estimate_response(dwi, scheme, mask, order=params.order)
        reference = csd.fit_volume(dwi, scheme, mask, rf, params, n_threads)[0]
    means, stds, vstds, per = [], [], [], []
    for c in counts:
        rep_means, rep_vstd = [], []
        for r in range(repeats):
            if c == n_dw and r:
                # keeping every direction leaves nothing random to repeat
                rep_means.append(rep_means[0])
                rep_vstd.append(rep_vstd[0])
                continue
            est = dropout_estimate(dwi, scheme, mask, estimator, c, r, seed, params, n_threads)
            rep = acc_map(est, reference, mask)
            rep_means.append(rep.mean)
            rep_vstd.append(rep.std)
        per.append(rep_means)
        means.append(float(np.mean(rep_means)))
        stds.append(float(np.std(rep_means)))
        vstds.append(float(np.mean(rep_vstd)))
    label = estimator if isinstance(estimator, str) else "model"
    return DegradationCurve(counts, means, stds, vstds, per, label)


# ---------------------------------------------------------------- statistics

def _exact_upper_tail(doubled_ranks: np.ndarray, w2: int) -> tuple[float, float]:
    """P(W+ <= w) and P(W+ >= w) under the null, ranks given doubled (integers)."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        nxt = dist.copy()
        nxt[r:] += dist[:total + 1 - r]
        dist = nxt * 0.5
    return float(dist[:w2 + 1].sum()), float(dist[w2:].sum())


def wilcoxon_signed_rank(x, y, exact_max_n: int = EXACT_MAX_N) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes get mid-ranks. Returns
    ``(statistic, p)`` with ``statistic = min(W+, W-)``. For at most
    ``exact_max_n`` pairs the null distribution is enumerated exactly;
    beyond that a tie-corrected normal approximation with continuity
    correction is used.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimsMismatch(f"{x.shape} vs {y.shape}")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n < 6:
        raise TooFewNonzeroPairs(f"{n} non-zero differences; need at least 6")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        lo, hi = _exact_upper_tail(doubled, int(round(2 * w_plus)))
        p = min(1.0, 2.0 * min(lo, hi))
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(t ** 3 - t) / 48.0
        z = max(abs(w_plus - mean) - 0.5, 0.0) / np.sqrt(var)
        p = min(1.0, 2.0 * stats.norm.sf(z))
    return stat, float(p)


# ---------------------------------------------------------------- panels

def md_acc_panel(pred: Volume4D, reference: Volume4D, mask: Volume4D) -> dict:
    """k = 0 coefficient map of ``pred`` and its ACC map against ``reference``.

    Returns ``{"md": Volume4D, "acc": Volume4D, "summary": dict}``.
    """
    _check_pair(pred, reference, mask)
    m = mask.bool_mask()
    md = np.zeros(pred.spatial)
    md[m] = sh.mean_diffusivity_proxy(pred.data[m].astype(np.float64))
    rep = acc_map(pred, reference, mask, label="panel")
    summary = {
        "md_mean": float(md[m].mean()) if m.any() else float("nan"),
        "md_std": float(md[m].std()) if m.any() else float("nan"),
        "acc_mean": rep.mean,
        "acc_std": rep.std,
        "n_voxels": rep.n_voxels,
        "n_excluded": rep.n_excluded,
    }
    return {"md": _scalar_volume(md, pred.voxel_size_mm), "acc": rep.acc_map, "summary": summary}
