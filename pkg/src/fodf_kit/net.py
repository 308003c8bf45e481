"""Patch CNN and voxel MLP regressors with a hand-written reverse pass.

Both networks map SH signal coefficients (45 channels at order 8) to fODF
SH coefficients. The patch CNN consumes a 3x3x3 neighbourhood and predicts
the centre voxel::

    conv(45->C) BN ReLU -> conv(C->C) BN ReLU -> conv(C->C) BN
        (+ first block output) ReLU -> flatten -> dense(D) ReLU -> dense(45)

The voxel MLP is dense 45 -> 400 -> 45 -> 200 -> 45 with ReLU between layers.

Layers are plain functions returning ``(output, cache)``; the backward
functions consume the cache. Parameters live in :class:`ModelParams`, an
ordered list of named layers holding numpy arrays.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, UnknownLayerKind

__all__ = [
    "Layer",
    "ModelParams",
    "LossWeights",
    "Batch",
    "AdamState",
    "init_cnn",
    "init_mlp",
    "forward",
    "forward_cnn",
    "forward_mlp",
    "loss",
    "backward",
    "sgd_adam_step",
    "update_running_stats",
    "trainable",
]

LAYER_KINDS = ("conv3", "dense", "batchnorm")
TRAINABLE = {"conv3": ("weight", "bias"), "dense": ("weight", "bias"),
             "batchnorm": ("gamma", "beta")}


@dataclass
class Layer:
    name: str
    kind: str
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UnknownLayerKind(f"layer {self.name!r} has unknown kind {self.kind!r}")

    def __getitem__(self, key):
        return self.tensors[key]


@dataclass
class ModelParams:
    """Ordered layers plus architecture metadata (widths, BN settings)."""

    layers: list[Layer] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def architecture(self) -> str | None:
        return self.meta.get("architecture")

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        for layer in out.layers:
            layer.tensors = {k: v.astype(dtype) for k, v in layer.tensors.items()}
        return out

    def n_parameters(self) -> int:
        return sum(self[n][t].size for n, t in trainable(self))


def trainable(params: ModelParams) -> list[tuple[str, str]]:
    """(layer, tensor) names of every trainable array, in layer order."""
    return [(layer.name, t) for layer in params.layers for t in TRAINABLE[layer.kind]]


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")


@dataclass
class Batch:
    """Labelled inputs ``x``/``target`` plus optional paired inputs ``u``/``v``."""

    x: np.ndarray
    target: np.ndarray
    u: np.ndarray | None = None
    v: np.ndarray | None = None


# ---------------------------------------------------------------- init

def _uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _dense(rng, name, n_in, n_out, dtype):
    return Layer(name, "dense", {"weight": _uniform(rng, n_in, (n_in, n_out), dtype),
                                 "bias": np.zeros(n_out, dtype)})


def _conv(rng, name, c_in, c_out, dtype):
    return Layer(name, "conv3", {"weight": _uniform(rng, 27 * c_in, (3, 3, 3, c_in, c_out), dtype),
                                 "bias": np.zeros(c_out, dtype)})


def _bn(name, c, dtype):
    return Layer(name, "batchnorm", {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                                     "running_mean": np.zeros(c, dtype),
                                     "running_var": np.ones(c, dtype)})


def init_cnn(seed: int = 0, in_channels: int = 45, conv_channels: int = 64,
             dense_width: int = 256, out_channels: int = 45, patch_size: int = 3,
             dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform initialisation of the patch CNN."""
    rng = np.random.default_rng(seed)
    c = conv_channels
    layers = [
        _conv(rng, "conv1", in_channels, c, dtype), _bn("bn1", c, dtype),
        _conv(rng, "conv2", c, c, dtype), _bn("bn2", c, dtype),
        _conv(rng, "conv3", c, c, dtype), _bn("bn3", c, dtype),
        _dense(rng, "dense1", patch_size ** 3 * c, dense_width, dtype),
        _dense(rng, "dense2", dense_width, out_channels, dtype),
    ]
    meta = dict(architecture="cnn", in_channels=in_channels, conv_channels=c,
                dense_width=dense_width, out_channels=out_channels,
                patch_size=patch_size, bn_eps=1e-5, bn_momentum=0.1)
    return ModelParams(layers, meta)


def init_mlp(seed: int = 0, in_channels: int = 45, widths=(400, 45, 200, 45),
             dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    sizes = [in_channels, *widths]
    layers = [_dense(rng, f"dense{i + 1}", a, b, dtype)
              for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
    meta = dict(architecture="mlp", in_channels=in_channels, widths=list(widths),
                out_channels=widths[-1])
    return ModelParams(layers, meta)


# ---------------------------------------------------------------- layers

def _conv_forward(x, w, b):
    B, S = x.shape[0], x.shape[1]
    c_in, c_out = w.shape[3], w.shape[4]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))  # B,S,S,S,Cin,3,3,3
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(B * S ** 3, 27 * c_in)
    y = cols @ w.reshape(27 * c_in, c_out) + b
    return y.reshape(B, S, S, S, c_out), (cols, w, x.shape)


def _conv_backward(dy, cache, need_dx=True):
    cols, w, xshape = cache
    B, S, c_in = xshape[0], xshape[1], xshape[4]
    c_out = w.shape[4]
    dy2 = dy.reshape(-1, c_out)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ w.reshape(27 * c_in, c_out).T).reshape(B, S, S, S, 3, 3, 3, c_in)
    dxp = np.zeros((B, S + 2, S + 2, S + 2, c_in), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                dxp[:, i:i + S, j:j + S, k:k + S] += dcols[:, :, :, :, i, j, k]
    return dxp[:, 1:-1, 1:-1, 1:-1], dw, db


def _bn_forward(x, layer, train, eps):
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mu, var = layer["running_mean"], layer["running_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = layer["gamma"] * xhat + layer["beta"]
    n = x.size // x.shape[-1]
    return y, (xhat, inv, layer["gamma"], n), (mu, var, n)


def _bn_backward(dy, cache):
    xhat, inv, gamma, n = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- forward

def _cnn_forward(params, x, train):
    meta = params.meta
    eps = meta.get("bn_eps", 1e-5)
    S = meta.get("patch_size", 3)
    if x.ndim != 5 or x.shape[1:4] != (S, S, S) or x.shape[4] != meta["in_channels"]:
        raise ShapeMismatch(f"expected (B,{S},{S},{S},{meta['in_channels']}) patches, got {x.shape}")
    tape, stats = {}, {}
    z1, tape["conv1"] = _conv_forward(x, params["conv1"]["weight"], params["conv1"]["bias"])
    a1, tape["bn1"], stats["bn1"] = _bn_forward(z1, params["bn1"], train, eps)
    h1 = np.maximum(a1, 0)
    z2, tape["conv2"] = _conv_forward(h1, params["conv2"]["weight"], params["conv2"]["bias"])
    a2, tape["bn2"], stats["bn2"] = _bn_forward(z2, params["bn2"], train, eps)
    h2 = np.maximum(a2, 0)
    z3, tape["conv3"] = _conv_forward(h2, params["conv3"]["weight"], params["conv3"]["bias"])
    a3, tape["bn3"], stats["bn3"] = _bn_forward(z3, params["bn3"], train, eps)
    r = a3 + h1
    h3 = np.maximum(r, 0)
    flat = h3.reshape(x.shape[0], -1)
    d1 = flat @ params["dense1"]["weight"] + params["dense1"]["bias"]
    g1 = np.maximum(d1, 0)
    out = g1 @ params["dense2"]["weight"] + params["dense2"]["bias"]
    tape.update(a1=a1, a2=a2, r=r, h3=h3, flat=flat, d1=d1, g1=g1, shape=h3.shape)
    return out, tape, stats


def _cnn_backward(params, tape, dout, grads):
    grads[("dense2", "weight")] = tape["g1"].T @ dout
    grads[("dense2", "bias")] = dout.sum(axis=0)
    dg1 = dout @ params["dense2"]["weight"].T
    dd1 = dg1 * (tape["d1"] > 0)
    grads[("dense1", "weight")] = tape["flat"].T @ dd1
    grads[("dense1", "bias")] = dd1.sum(axis=0)
    dh3 = (dd1 @ params["dense1"]["weight"].T).reshape(tape["shape"])
    dr = dh3 * (tape["r"] > 0)
    da3 = dr
    dz3, grads[("bn3", "gamma")], grads[("bn3", "beta")] = _bn_backward(da3, tape["bn3"])
    dh2, grads[("conv3", "weight")], grads[("conv3", "bias")] = _conv_backward(dz3, tape["conv3"])
    da2 = dh2 * (tape["a2"] > 0)
    dz2, grads[("bn2", "gamma")], grads[("bn2", "beta")] = _bn_backward(da2, tape["bn2"])
    dh1, grads[("conv2", "weight")], grads[("conv2", "bias")] = _conv_backward(dz2, tape["conv2"])
    dh1 = dh1 + dr  # skip connection
    da1 = dh1 * (tape["a1"] > 0)
    dz1, grads[("bn1", "gamma")], grads[("bn1", "beta")] = _bn_backward(da1, tape["bn1"])
    _, grads[("conv1", "weight")], grads[("conv1", "bias")] = _conv_backward(
        dz1, tape["conv1"], need_dx=False)


def _mlp_forward(params, x):
    if x.ndim != 2 or x.shape[1] != params.meta["in_channels"]:
        raise ShapeMismatch(f"expected (B,{params.meta['in_channels']}) inputs, got {x.shape}")
    acts = [x]
    pre = []
    h = x
    n = len(params.layers)
    for i, layer in enumerate(params.layers):
        z = h @ layer["weight"] + layer["bias"]
        pre.append(z)
        h = np.maximum(z, 0) if i < n - 1 else z
        acts.append(h)
    return h, {"acts": acts, "pre": pre}, {}


def _mlp_backward(params, tape, dout, grads):
    dz = dout
    n = len(params.layers)
    for i in range(n - 1, -1, -1):
        layer = params.layers[i]
        grads[(layer.name, "weight")] = tape["acts"][i].T @ dz
        grads[(layer.name, "bias")] = dz.sum(axis=0)
        if i:
            dz = (dz @ layer["weight"].T) * (tape["pre"][i - 1] > 0)


def _prepare(params, x):
    dtype = params.layers[0]["weight"].dtype if params.layers else np.float64
    x = np.asarray(x, dtype=dtype)
    if not np.all(np.isfinite(x)):
        raise ValueError("network input contains non-finite values")
    return x


def set_standardization(params: ModelParams, input_shift, input_scale, output_shift,
                        output_scale) -> None:
    """Fix per-channel input whitening and output scaling (stored in ``meta``).

    The network then sees ``(x - input_shift) / input_scale`` and its raw
    output ``y`` is reported as ``y * output_scale + output_shift``.
    """
    for key, val in (("input_shift", input_shift), ("input_scale", input_scale),
                     ("output_shift", output_shift), ("output_scale", output_scale)):
        params.meta[key] = [float(v) for v in np.asarray(val, dtype=np.float64).ravel()]


def _affine(params, prefix, dtype):
    if prefix + "_shift" not in params.meta:
        return None
    return (np.asarray(params.meta[prefix + "_shift"], dtype=dtype),
            np.asarray(params.meta[prefix + "_scale"], dtype=dtype))


def _run(params, x, train):
    """Forward pass including the optional standardisation in ``meta``."""
    inp = _affine(params, "input", x.dtype)
    if inp is not None:
        x = (x - inp[0]) / inp[1]
    if params.architecture == "cnn":
        out, tape, stats = _cnn_forward(params, x, train)
    elif params.architecture == "mlp":
        out, tape, stats = _mlp_forward(params, x)
    else:
        raise UnknownLayerKind(f"unknown architecture {params.architecture!r}")
    outp = _affine(params, "output", out.dtype)
    if outp is not None:
        out = out * outp[1] + outp[0]
    return out, tape, stats


def _output_scale(params, dout):
    outp = _affine(params, "output", dout.dtype)
    return dout if outp is None else dout * outp[1]


def forward(params: ModelParams, x, train_mode: bool = False) -> np.ndarray:
    """Batched forward pass for either architecture."""
    x = _prepare(params, x)
    single = (params.architecture == "cnn" and x.ndim == 4) or (
        params.architecture == "mlp" and x.ndim == 1)
    if single:
        x = x[None]
    out = _run(params, x, train_mode)[0]
    return out[0] if single else out


def forward_cnn(params: ModelParams, patch, train_mode: bool = False) -> np.ndarray:
    """Predict centre-voxel fODF coefficients from (B,)3x3x3x45 patches."""
    if params.architecture != "cnn":
        raise ShapeMismatch("parameters do not describe a patch CNN")
    return forward(params, patch, train_mode)


def forward_mlp(params: ModelParams, signal_sh) -> np.ndarray:
    if params.architecture != "mlp":
        raise ShapeMismatch("parameters do not describe a voxel MLP")
    return forward(params, signal_sh)


# ---------------------------------------------------------------- loss

def loss(pred, truth, pred_u=None, pred_v=None, w: LossWeights | None = None) -> float:
    """``alpha * sum (pred - truth)^2 + beta * sum (pred_u - pred_v)^2``.

    Sums run over coefficients; with leading batch axes the result is the
    batch mean of the per-sample loss.
    """
    w = w or LossWeights()
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    l1 = np.mean(np.sum((pred - truth) ** 2, axis=-1))
    l2 = 0.0
    if w.beta and pred_u is not None:
        pu = np.asarray(pred_u, dtype=np.float64)
        pv = np.asarray(pred_v, dtype=np.float64)
        if pu.shape != pv.shape:
            raise ShapeMismatch(f"{pu.shape} vs {pv.shape}")
        l2 = np.mean(np.sum((pu - pv) ** 2, axis=-1))
    return float(w.alpha * l1 + w.beta * l2)


def batch_loss(params: ModelParams, batch: Batch, w: LossWeights | None = None) -> float:
    """Training-mode loss of one batch, exactly as :func:`backward` computes it."""
    w = w or LossWeights()
    x = _prepare(params, batch.x)
    pred = _run(params, x, True)[0]
    pu = pv = None
    if w.beta and batch.u is not None and len(batch.u):
        pu = _run(params, _prepare(params, batch.u), True)[0]
        pv = _run(params, _prepare(params, batch.v), True)[0]
    return loss(pred, batch.target, pu, pv, w)


def backward(params: ModelParams, batch: Batch, w: LossWeights | None = None):
    """Loss, parameter gradients and BN batch statistics for one batch.

    The labelled and paired branches run as separate train-mode passes with
    shared weights, so with ``beta == 0`` the paired branch contributes
    nothing. Returns ``(loss_value, grads, bn_stats)`` where ``grads`` maps
    ``(layer, tensor)`` to an array and ``bn_stats`` holds the labelled
    branch's batch mean/variance per BN layer.
    """
    w = w or LossWeights()
    x = _prepare(params, batch.x)
    target = np.asarray(batch.target, dtype=x.dtype)
    grads = {key: np.zeros_like(params[key[0]][key[1]]) for key in trainable(params)}
    back = _cnn_backward if params.architecture == "cnn" else _mlp_backward

    out, tape, stats = _run(params, x, True)
    if out.shape != target.shape:
        raise ShapeMismatch(f"prediction {out.shape} vs target {target.shape}")
    diff = out - target
    total = w.alpha * np.mean(np.sum(diff.astype(np.float64) ** 2, axis=-1))
    if w.alpha:
        part = {}
        back(params, tape, _output_scale(params, (2.0 * w.alpha / len(x)) * diff), part)
        for k, g in part.items():
            grads[k] += g

    if w.beta and batch.u is not None and len(batch.u):
        u = _prepare(params, batch.u)
        v = _prepare(params, batch.v)
        out_u, tape_u, _ = _run(params, u, True)
        out_v, tape_v, _ = _run(params, v, True)
        d = out_u - out_v
        total += w.beta * np.mean(np.sum(d.astype(np.float64) ** 2, axis=-1))
        scale = 2.0 * w.beta / len(u)
        for tp, sign in ((tape_u, 1.0), (tape_v, -1.0)):
            part = {}
            back(params, tp, _output_scale(params, (sign * scale) * d), part)
            for k, g in part.items():
                grads[k] += g
    return float(total), grads, stats


def update_running_stats(params: ModelParams, stats: dict, momentum: float | None = None) -> None:
    """Blend batch statistics into BN running mean/var in place."""
    mom = params.meta.get("bn_momentum", 0.1) if momentum is None else momentum
    for name, (mu, var, n) in stats.items():
        layer = params[name]
        unbiased = var * (n / max(n - 1, 1))
        layer.tensors["running_mean"] = ((1 - mom) * layer["running_mean"] + mom * mu).astype(
            layer["running_mean"].dtype)
        layer.tensors["running_var"] = ((1 - mom) * layer["running_var"] + mom * unbiased).astype(
            layer["running_var"].dtype)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def sgd_adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float = 1e-3) -> ModelParams:
    """One bias-corrected Adam update; returns new params and advances ``state``."""
    out = params.copy()
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = b1 * state.m.get(key, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(key, 0.0) + (1 - b2) * g * g
        state.m[key], state.v[key] = m, v
        p = out[key[0]].tensors[key[1]]
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[key[0]].tensors[key[1]] = (p - step).astype(p.dtype)
    return out
