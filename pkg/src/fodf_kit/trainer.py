"""Patch datasets, direction-dropout augmentation and the training loop.

A training sample is a 3x3x3 neighbourhood of order-8 signal SH vectors
(``sh_signal``) labelled with the full-direction CSD fODF of its centre
voxel. Optional scan/rescan pairs feed the consistency term of the loss.
Models are selected by validation ``loss1`` (label fidelity) over epochs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import net, sh, sphere
from .errors import DivergenceDetected, KeepBelowShMinimum, NoPairsForBeta, ShapeMismatch
from .volume_io import GradientScheme, Volume4D

__all__ = [
    "Subject",
    "PairedSubject",
    "Datasets",
    "TrainConfig",
    "TrainResult",
    "extract_patches",
    "patch_array",
    "drop_scheme",
    "signal_sh",
    "augment_subject",
    "split_region",
    "train",
    "predict",
]

log = logging.getLogger(__name__)

PATCH = 3


# ---------------------------------------------------------------- data types

@dataclass
class Subject:
    """One labelled acquisition.

    ``signal`` holds order-8 SH coefficients of the b0-normalised signal;
    ``labels`` the full-direction CSD fODF. ``dwi``/``scheme`` are only
    needed for augmentation.
    """

    name: str
    signal: Volume4D
    labels: Volume4D
    mask: Volume4D
    dwi: Volume4D | None = None
    scheme: GradientScheme | None = None

    def __post_init__(self):
        if self.signal.spatial != self.labels.spatial or self.signal.spatial != self.mask.spatial:
            raise ShapeMismatch(
                f"subject {self.name}: signal {self.signal.spatial}, labels "
                f"{self.labels.spatial}, mask {self.mask.spatial}")

    def with_mask(self, mask: Volume4D) -> "Subject":
        return Subject(self.name, self.signal, self.labels, mask, self.dwi, self.scheme)


@dataclass
class PairedSubject:
    """Scan/rescan SH-signal volumes of one subject, voxel-aligned."""

    name: str
    scan: Volume4D
    rescan: Volume4D
    mask: Volume4D

    def __post_init__(self):
        if not (self.scan.spatial == self.rescan.spatial == self.mask.spatial):
            raise ShapeMismatch(f"pair {self.name}: scan/rescan/mask dims differ")


@dataclass
class Datasets:
    train: list
    validation: list
    pairs: list = field(default_factory=list)


@dataclass
class TrainConfig:
    architecture: str = "cnn"
    alpha: float = 1.0
    beta: float = 0.5
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    seed: int = 0
    conv_channels: int = 64
    dense_width: int = 256
    mlp_widths: tuple = (400, 45, 200, 45)
    augment: bool = False
    n_variants: int = 4
    keep_range: tuple | None = None
    eval_batch: int = 512
    standardize: bool = True

    def __post_init__(self):
        if self.architecture not in ("cnn", "mlp"):
            raise ValueError(f"architecture must be 'cnn' or 'mlp', got {self.architecture!r}")
        self.mlp_widths = tuple(int(v) for v in self.mlp_widths)
        if self.keep_range is not None:
            self.keep_range = tuple(int(v) for v in self.keep_range)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        net.LossWeights(self.alpha, self.beta)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp_widths"] = list(self.mlp_widths)
        out["keep_range"] = None if self.keep_range is None else list(self.keep_range)
        return out

    @property
    def weights(self) -> net.LossWeights:
        return net.LossWeights(self.alpha, self.beta)


@dataclass
class TrainResult:
    params: net.ModelParams
    log: dict


# ---------------------------------------------------------------- patches

def _interior(mask: np.ndarray) -> np.ndarray:
    """Mask voxels whose full 3x3x3 neighbourhood is inside the volume."""
    inner = np.zeros_like(mask, dtype=bool)
    inner[1:-1, 1:-1, 1:-1] = mask[1:-1, 1:-1, 1:-1]
    return inner


def extract_patches(sh_vol: Volume4D, mask: Volume4D):
    """Yield ``(index, patch)`` for every masked voxel with an in-bounds 3x3x3 neighbourhood.

    Neighbours outside the mask are kept as context. Voxels on the volume
    boundary are skipped.
    """
    idx, patches = patch_array(sh_vol, mask)
    for i, p in zip(idx, patches):
        yield tuple(int(v) for v in i), p


def patch_array(sh_vol: Volume4D, mask) -> tuple[np.ndarray, np.ndarray]:
    """All patches at once: ``(indices (N,3), patches (N,3,3,3,C))``."""
    m = mask.bool_mask() if isinstance(mask, Volume4D) else np.asarray(mask, bool)
    if m.shape != sh_vol.spatial:
        raise ShapeMismatch(f"mask {m.shape} vs volume {sh_vol.spatial}")
    if min(sh_vol.spatial) < PATCH:
        return np.zeros((0, 3), int), np.zeros((0, PATCH, PATCH, PATCH, sh_vol.dims[3]), np.float32)
    idx = np.argwhere(_interior(m))
    win = np.lib.stride_tricks.sliding_window_view(sh_vol.data, (PATCH,) * 3, axis=(0, 1, 2))
    # win: (X-2, Y-2, Z-2, C, 3, 3, 3) -> patches (N, 3, 3, 3, C)
    p = win[idx[:, 0] - 1, idx[:, 1] - 1, idx[:, 2] - 1]
    return idx, np.ascontiguousarray(np.moveaxis(p, 1, -1))


def _centres(patches: np.ndarray) -> np.ndarray:
    return patches[:, 1, 1, 1, :]


# ---------------------------------------------------------------- augmentation

def drop_scheme(scheme: GradientScheme, keep: int, seed: int, order: int = 8):
    """Keep every b0 row plus a uniform random ``keep``-subset of the DW rows.

    Returns ``(sub_scheme, rows)`` with ``rows`` indexing the original scheme.
    """
    dw_rows = np.flatnonzero(scheme.dw_mask)
    chosen = sphere.drop_directions(sphere.DirectionSet(scheme.dw_dirs), keep, seed, order=order)
    rows = np.sort(np.concatenate([np.flatnonzero(scheme.b0_mask), dw_rows[chosen.indices]]))
    return scheme.subset(rows), rows


def signal_sh(dwi: Volume4D, scheme: GradientScheme, order: int = 8, rows=None) -> Volume4D:
    """b0-normalised order-``order`` SH fit, optionally on a subset of ``rows``."""
    if rows is not None:
        dwi = Volume4D(dwi.data[..., rows], dwi.kind, dwi.voxel_size_mm)
        scheme = scheme.subset(rows)
    data = dwi.data.astype(np.float64)
    s0 = data[..., scheme.b0_mask].mean(axis=-1)
    ok = s0 > 0
    out = np.zeros(dwi.spatial + (sh.n_coeffs(order),))
    B = sh.build_design_matrix(scheme.dw_dirs, order)
    out[ok] = sh.fit_sh(data[ok][:, scheme.dw_mask] / s0[ok, None], B)
    return Volume4D(out, "sh_signal", dwi.voxel_size_mm, order)


def _keep_bounds(scheme: GradientScheme, keep_range, order: int) -> tuple[int, int]:
    n_dw = int(scheme.dw_mask.sum())
    lo, hi = keep_range if keep_range is not None else (sh.n_coeffs(order), n_dw)
    if lo < sh.n_coeffs(order):
        raise KeepBelowShMinimum(f"keep_range lower bound {lo} is below {sh.n_coeffs(order)}")
    if hi > n_dw or lo > hi:
        raise ValueError(f"keep_range {keep_range} not within [{sh.n_coeffs(order)}, {n_dw}]")
    return int(lo), int(hi)


def augment_subject(dwi: Volume4D, scheme: GradientScheme, n_variants: int = 4,
                    keep_range=None, seed: int = 0, order: int = 8, return_keeps: bool = False):
    """SH-signal volumes re-fitted from random uniform direction subsets.

    Variant ``i`` draws its retained count uniformly from ``keep_range``
    (inclusive) and its subset from a stream seeded by ``(seed, i)``.
    Labels are not touched: they stay the full-direction CSD.
    """
    lo, hi = _keep_bounds(scheme, keep_range, order)
    out, keeps = [], []
    for i in range(n_variants):
        ss = np.random.SeedSequence([seed, i])
        keep = int(np.random.default_rng(ss).integers(lo, hi + 1))
        sub_seed = int(ss.generate_state(1)[0])
        _, rows = drop_scheme(scheme, keep, sub_seed, order)
        out.append(signal_sh(dwi, scheme, order, rows))
        keeps.append(keep)
    return (out, keeps) if return_keeps else out


def split_region(mask: Volume4D, fraction: float = 0.25, axis: int = 2):
    """Split a mask into (train, validation) by a plane along ``axis``.

    The validation part is the last ``fraction`` of the masked extent.
    """
    m = mask.bool_mask()
    occupied = np.flatnonzero(m.any(axis=tuple(a for a in range(3) if a != axis)))
    if occupied.size == 0:
        raise ValueError("cannot split an empty mask")
    n_val = max(1, int(round(fraction * occupied.size)))
    cut = occupied[-n_val]
    sel = np.arange(m.shape[axis]) >= cut
    shape = [1, 1, 1]
    shape[axis] = -1
    val = m & sel.reshape(shape)
    return (Volume4D.from_mask(m & ~val, mask.voxel_size_mm),
            Volume4D.from_mask(val, mask.voxel_size_mm))


# ---------------------------------------------------------------- model helpers

def init_model(config: TrainConfig, in_channels: int = 45, out_channels: int = 45) -> net.ModelParams:
    if config.architecture == "cnn":
        return net.init_cnn(config.seed, in_channels, config.conv_channels, config.dense_width,
                            out_channels)
    widths = tuple(config.mlp_widths[:-1]) + (out_channels,)
    return net.init_mlp(config.seed, in_channels, widths)


def _inputs(params: net.ModelParams, patches: np.ndarray) -> np.ndarray:
    return _centres(patches) if params.architecture == "mlp" else patches


def predict_patches(params: net.ModelParams, patches: np.ndarray, batch: int = 512) -> np.ndarray:
    """Eval-mode predictions for (N,3,3,3,C) patches (centre vector only for MLPs)."""
    x = _inputs(params, patches)
    if len(x) == 0:
        return np.zeros((0, params.layers[-1]["weight"].shape[-1]))
    return np.concatenate([net.forward(params, x[i:i + batch]) for i in range(0, len(x), batch)])


def predict(params: net.ModelParams, sh_vol: Volume4D, mask: Volume4D, batch: int = 512) -> Volume4D:
    """fODF volume predicted at every patchable masked voxel; zero elsewhere."""
    idx, patches = patch_array(sh_vol, mask)
    pred = predict_patches(params, patches, batch)
    out = np.zeros(sh_vol.spatial + (pred.shape[1] if len(pred) else sh_vol.dims[3],))
    out[tuple(idx.T)] = pred
    return Volume4D(out, "sh_fodf", sh_vol.voxel_size_mm, sh.order_from_n_coeffs(out.shape[-1]))


# ---------------------------------------------------------------- training

@dataclass
class _Pool:
    x: np.ndarray
    y: np.ndarray
    subject: np.ndarray
    keep: np.ndarray


def _labelled_pool(subjects, config: TrainConfig) -> tuple[_Pool, list[str]]:
    xs, ys, who, keeps = [], [], [], []
    names = []
    for si, s in enumerate(subjects):
        names.append(s.name)
        idx, p = patch_array(s.signal, s.mask)
        y = s.labels.data[tuple(idx.T)]
        n_full = int(s.scheme.dw_mask.sum()) if s.scheme is not None else -1
        variants = [(p, n_full)]
        if config.augment:
            if s.dwi is None or s.scheme is None:
                raise ValueError(f"augmentation needs raw dwi and scheme for subject {s.name}")
            vols, ks = augment_subject(s.dwi, s.scheme, config.n_variants, config.keep_range,
                                       seed=config.seed * 1000003 + si, return_keeps=True)
            variants += [(patch_array(v, s.mask)[1], k) for v, k in zip(vols, ks)]
        for pv, k in variants:
            xs.append(pv)
            ys.append(y)
            who.append(np.full(len(pv), si))
            keeps.append(np.full(len(pv), k))
    if not xs:
        return _Pool(np.zeros((0, 3, 3, 3, 45), np.float32), np.zeros((0, 45)), np.zeros(0, int),
                     np.zeros(0, int)), names
    return _Pool(np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.float32),
                 np.concatenate(who), np.concatenate(keeps)), names


def _pair_pool(pairs):
    us, vs, names = [], [], []
    for pr in pairs:
        m = pr.mask
        _, u = patch_array(pr.scan, m)
        _, v = patch_array(pr.rescan, m)
        us.append(u)
        vs.append(v)
        names.append(np.full(len(u), pr.name, dtype=object))
    if not us:
        return None
    return (np.concatenate(us).astype(np.float32), np.concatenate(vs).astype(np.float32),
            np.concatenate(names))


def _evaluate(params, x, y, batch):
    if len(x) == 0:
        return float("nan"), float("nan")
    pred = predict_patches(params, x, batch)
    l1 = float(np.mean(np.sum((pred - y.astype(np.float64)) ** 2, axis=1)))
    vals, valid = sh.acc_many(pred, y)
    return l1, float(vals[valid].mean()) if valid.any() else float("nan")


def _fit_standardization(params: net.ModelParams, pool: _Pool) -> None:
    """Whiten inputs and outputs per SH channel using training-set statistics.

    High-order signal coefficients are orders of magnitude smaller than the
    k = 0 term; without this the fan-in scaled initialisation barely sees them.
    """
    c = _centres(pool.x).astype(np.float64)
    y = pool.y.astype(np.float64)

    def scale(a):
        s = a.std(axis=0)
        return np.where(s > 1e-12 * max(s.max(), 1e-300), s, 1.0)

    net.set_standardization(params, c.mean(axis=0), scale(c), y.mean(axis=0), scale(y))


def train(config: TrainConfig, datasets: Datasets, progress=None) -> TrainResult:
    """Train a patch CNN or voxel MLP; return best-validation parameters and a log.

    Each step draws a shuffled mini-batch of labelled samples and, when
    ``beta > 0``, an equally sized random batch of scan/rescan pairs taken
    preferably from subjects other than the labelled ones.
    """
    if not datasets.train:
        raise ValueError("training needs at least one labelled subject")
    if config.beta > 0 and not datasets.pairs:
        raise NoPairsForBeta("beta > 0 requires scan/rescan pairs")
    w = config.weights
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    pool, names = _labelled_pool(datasets.train, config)
    if len(pool.x) == 0:
        raise ValueError("no patchable voxels in the training masks")
    val_x, val_y = [], []
    for s in datasets.validation:
        idx, p = patch_array(s.signal, s.mask)
        val_x.append(p)
        val_y.append(s.labels.data[tuple(idx.T)])
    val_x = np.concatenate(val_x).astype(np.float32) if val_x else np.zeros((0, 3, 3, 3, 45), np.float32)
    val_y = np.concatenate(val_y).astype(np.float32) if val_y else np.zeros((0, 45), np.float32)

    warnings_ = []
    pairs = _pair_pool(datasets.pairs) if config.beta > 0 else None
    pair_choice = None
    if pairs is not None:
        pair_names = pairs[2]
        foreign = ~np.isin(pair_names, np.asarray(names, dtype=object))
        if foreign.any():
            pair_choice = np.flatnonzero(foreign)
        else:
            pair_choice = np.arange(len(pair_names))
            msg = "only same-subject scan/rescan pairs available; pairing within subject"
            warnings_.append(msg)
            log.warning(msg)
        if pair_choice.size == 0:
            raise NoPairsForBeta("scan/rescan pairs contain no patchable voxels")

    params = init_model(config, pool.x.shape[-1], pool.y.shape[-1])
    if config.standardize:
        _fit_standardization(params, pool)
    state = net.AdamState()
    mom = params.meta.get("bn_momentum", 0.1)
    best = (np.inf, -1, params.copy())
    epochs = []
    n = len(pool.x)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        tot = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            x = _inputs(params, pool.x[sel])
            u = v = None
            if pairs is not None:
                pick = pair_choice[rng.integers(0, pair_choice.size, size=len(sel))]
                u = _inputs(params, pairs[0][pick])
                v = _inputs(params, pairs[1][pick])
            batch = net.Batch(x, pool.y[sel], u, v)
            value, grads, stats = net.backward(params, batch, w)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            net.update_running_stats(params, stats, mom)
            params = net.sgd_adam_step(params, grads, state, config.lr)
            tot += value
            n_batches += 1
        val_l1, val_acc = _evaluate(params, val_x, val_y, config.eval_batch)
        rec = {"epoch": epoch, "train_loss": tot / max(n_batches, 1),
               "val_loss1": val_l1, "val_acc": val_acc}
        epochs.append(rec)
        if progress is not None:
            progress(rec)
        score = val_l1 if np.isfinite(val_l1) else tot / max(n_batches, 1)
        if score < best[0]:
            best = (score, epoch, params.copy())

    keeps, counts = np.unique(pool.keep, return_counts=True)
    log_ = {
        "config": config.to_dict(),
        "epochs": epochs,
        "best_epoch": int(best[1]),
        "best_val_loss1": float(best[0]),
        "n_train_samples": int(n),
        "n_val_samples": int(len(val_x)),
        "n_pair_samples": int(0 if pairs is None else pair_choice.size),
        "retained_directions": {str(int(k)): int(c) for k, c in zip(keeps, counts)},
        "warnings": warnings_,
    }
    return TrainResult(best[2], log_)
