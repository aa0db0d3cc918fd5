"""U-FNO forward pass with hand-written reverse mode.

Internal tensors are channel-first, ``(batch, channels, z, x, t)``.  Every
``*_forward`` function returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient and the cache, adding parameter
gradients into a dict keyed like :class:`UfnoParams`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg.blas import dgemm

from .spectral import (check_modes, forward_transform, forward_transform_adjoint, inverse_transform,
                       inverse_transform_adjoint, mix_modes, mix_modes_backward, spectral_basis)

N_INPUT = 4  # log-permeability plus x, z, t coordinates


@dataclass(frozen=True)
class UfnoConfig:
    """Architecture of one surrogate network.

    ``pad_multiple`` rounds each of (z, x, t) up to a multiple by zero padding
    after lifting; the U-Net branch halves every axis twice, so padded sizes
    must be divisible by 4 when U-Fourier layers are present.
    """

    width: int = 12
    n_fourier: int = 2
    n_ufourier: int = 2
    modes: tuple = (10, 8, 16)
    pad_multiple: tuple = (4, 8, 8)
    q_hidden: int = 128
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "pad_multiple", tuple(int(p) for p in self.pad_multiple))
        if self.width < 1 or self.q_hidden < 1:
            raise ValueError("width and q_hidden must be positive")
        if self.n_fourier < 0 or self.n_ufourier < 0:
            raise ValueError("layer counts must be non-negative")
        if len(self.modes) != 3 or len(self.pad_multiple) != 3:
            raise ValueError("modes and pad_multiple need one entry per axis (z, x, t)")
        if min(self.pad_multiple) < 1:
            raise ValueError("pad multiples must be positive")
        if self.activation != "relu":
            raise ValueError("only the ReLU activation is supported")

    def padded_shape(self, dims) -> tuple:
        return tuple(-(-int(n) // p) * p for n, p in zip(dims, self.pad_multiple))

    def validate_dims(self, dims) -> tuple:
        padded = self.padded_shape(dims)
        if self.n_fourier + self.n_ufourier:
            check_modes(padded, self.modes)
        if self.n_ufourier and any(n % 4 for n in padded):
            raise ValueError(f"padded shape {padded} is not divisible by 4 as the U-Net branch requires")
        return padded

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        d["pad_multiple"] = list(self.pad_multiple)
        return d


@dataclass(eq=False)
class UfnoParams:
    """Named float64 arrays; complex spectral weights are split into real and
    imaginary parts so every entry is a real trainable tensor."""

    arrays: dict = field(default_factory=dict)

    def __getitem__(self, k):
        return self.arrays[k]

    def __setitem__(self, k, v):
        self.arrays[k] = v

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "UfnoParams":
        return UfnoParams({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def spectral(self, prefix: str) -> np.ndarray:
        return self.arrays[prefix + ".R_re"] + 1j * self.arrays[prefix + ".R_im"]


def layer_names(cfg: UfnoConfig) -> list:
    return [f"f{i}" for i in range(cfg.n_fourier)] + [f"u{i}" for i in range(cfg.n_ufourier)]


def init_params(cfg: UfnoConfig, rng: np.random.Generator) -> UfnoParams:
    """Uniform fan-in initialization for affine maps, ``U[0, 1)/width^2`` for
    spectral weights (the usual FNO choice) and He-normal U-Net kernels."""
    w, h = cfg.width, cfg.q_hidden
    p = {}

    def affine(name, n_out, n_in):
        bound = 1.0 / np.sqrt(n_in)
        p[name + ".w"] = rng.uniform(-bound, bound, (n_out, n_in))
        p[name + ".b"] = rng.uniform(-bound, bound, n_out)

    affine("P", w, N_INPUT)
    scale = 1.0 / (w * w)
    for name in layer_names(cfg):
        p[name + ".R_re"] = scale * rng.random((w, w) + cfg.modes)
        p[name + ".R_im"] = scale * rng.random((w, w) + cfg.modes)
        affine(name + ".W", w, w)
        if name.startswith("u"):
            for part, n_out, n_in, fan in (("d1", w, 8 * w, 8 * w), ("d2", w, 8 * w, 8 * w),
                                           ("t2", 8 * w, w, w), ("t1", 8 * w, 2 * w, 2 * w)):
                p[f"{name}.{part}.w"] = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / fan)
                p[f"{name}.{part}.b"] = np.zeros(w)
    affine("Q1", h, w)
    affine("Q2", 1, h)
    return UfnoParams(p)


def zero_params(cfg: UfnoConfig) -> UfnoParams:
    return UfnoParams(init_params(cfg, np.random.default_rng(0)).zeros_like())


# -- pointwise and strided building blocks -------------------------------------
def _mm_acc(c, a, b, trans_a=False, trans_b=False):
    """In-place ``c += op(a) @ op(b)`` for C-contiguous 2-D float64 arrays."""
    # a row-major product is the column-major product of the transposes
    dgemm(1.0, b.T, a.T, beta=1.0, c=c.T, trans_a=trans_b, trans_b=trans_a, overwrite_c=True)


def _flat(v):
    return v.reshape(v.shape[0], v.shape[1], -1)


def pointwise_acc(out, v, w):
    """``out += w @ v`` channel-wise at every point (both channel-first)."""
    of, vf = _flat(out), _flat(v)
    for i in range(v.shape[0]):
        _mm_acc(of[i], w, vf[i])


def pointwise(v, w, b):
    """Channel-mixing affine map applied at every point: ``w @ v + b``."""
    out = np.empty((v.shape[0], w.shape[0]) + v.shape[2:])
    out[...] = b.reshape((1, -1) + (1,) * (v.ndim - 2))
    pointwise_acc(out, np.ascontiguousarray(v), w)
    return out


def pointwise_backward(g, v, w, grads, name, need_input=True):
    """Accumulate weight/bias gradients; return ``w.T @ g`` unless ``need_input`` is False."""
    gf, vf = _flat(g), _flat(v)
    gw = grads[name + ".w"]
    for i in range(v.shape[0]):
        _mm_acc(gw, gf[i], vf[i], trans_b=True)
    grads[name + ".b"] += gf.sum(axis=(0, 2))
    if not need_input:
        return None
    gv = np.zeros(v.shape)
    gvf = _flat(gv)
    for i in range(v.shape[0]):
        _mm_acc(gvf[i], w, gf[i], trans_a=True)
    return gv


def _patches(v):
    """(B, C, Z, X, T) -> (B, 8C, Z/2 * X/2 * T/2) non-overlapping 2x2x2 blocks."""
    B, C, Z, X, T = v.shape
    if Z % 2 or X % 2 or T % 2:
        raise ValueError(f"spatial-temporal dims {v.shape[2:]} are not divisible by 2")
    r = v.reshape(B, C, Z // 2, 2, X // 2, 2, T // 2, 2).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return np.ascontiguousarray(r).reshape(B, 8 * C, -1)


def _unpatch(p, shape):
    B, C, Z, X, T = shape
    r = p.reshape(B, C, 2, 2, 2, Z // 2, X // 2, T // 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return np.ascontiguousarray(r).reshape(shape)


def down_conv(v, w, b):
    """Kernel-2, stride-2 convolution."""
    B, C, Z, X, T = v.shape
    return pointwise(_patches(v), w, b).reshape(B, w.shape[0], Z // 2, X // 2, T // 2)


def down_conv_backward(g, v, w, grads, name):
    gp = pointwise_backward(g, _patches(v), w, grads, name)
    return _unpatch(gp, v.shape)


def up_conv(v, w, b):
    """Kernel-2, stride-2 transposed convolution (``w`` is (8*Co, Ci))."""
    B, C, Z, X, T = v.shape
    co = w.shape[0] // 8
    p = np.zeros((B, w.shape[0], Z * X * T))
    pointwise_acc(p, v, w)
    out = _unpatch(p, (B, co, 2 * Z, 2 * X, 2 * T))
    out += b.reshape(1, -1, 1, 1, 1)
    return out


def up_conv_backward(g, v, w, grads, name):
    B, C = v.shape[:2]
    grads[name + ".b"] += g.sum(axis=(0, 2, 3, 4))
    gp = _patches(g)
    gw = grads[name + ".w"]
    gv = np.zeros(v.shape)
    vf, gvf = _flat(v), _flat(gv)
    for i in range(B):
        _mm_acc(gw, gp[i], vf[i], trans_b=True)
        _mm_acc(gvf[i], w, gp[i], trans_a=True)
    return gv


# -- layers -----------------------------------------------------------------------
def spectral_forward(v, R):
    sb = spectral_basis(v.shape[2:], R.shape[2:])
    y = forward_transform(v, sb)
    return inverse_transform(mix_modes(y, R), sb), (sb, y)


def spectral_backward(g, cache, R, grads, name):
    sb, y = cache
    gy, gR = mix_modes_backward(inverse_transform_adjoint(g, sb), y, R)
    grads[name + ".R_re"] += gR.real
    grads[name + ".R_im"] += gR.imag
    return forward_transform_adjoint(gy, sb)


def unet_block(v, params: UfnoParams, name: str):
    """Two-level encoder/decoder with a concatenation skip; output shape = input shape."""
    p = params
    e1 = np.maximum(down_conv(v, p[name + ".d1.w"], p[name + ".d1.b"]), 0.0)
    e2 = np.maximum(down_conv(e1, p[name + ".d2.w"], p[name + ".d2.b"]), 0.0)
    d2 = np.maximum(up_conv(e2, p[name + ".t2.w"], p[name + ".t2.b"]), 0.0)
    cat = np.concatenate([d2, e1], axis=1)
    out = up_conv(cat, p[name + ".t1.w"], p[name + ".t1.b"])
    return out, (v, e1, e2, cat)


def unet_block_backward(g, cache, params: UfnoParams, grads, name):
    """Gradient w.r.t. the block input; ReLU masks are recovered from the
    post-activation values (positive exactly where the pre-activation was)."""
    p = params
    v, e1, e2, cat = cache
    w = e1.shape[1]
    g_cat = up_conv_backward(g, cat, p[name + ".t1.w"], grads, name + ".t1")
    g_d2, g_e1 = g_cat[:, :w] * (cat[:, :w] > 0), g_cat[:, w:].copy()
    g_e2 = up_conv_backward(g_d2, e2, p[name + ".t2.w"], grads, name + ".t2")
    g_e1 += down_conv_backward(g_e2 * (e2 > 0), e1, p[name + ".d2.w"], grads, name + ".d2")
    return down_conv_backward(g_e1 * (e1 > 0), v, p[name + ".d1.w"], grads, name + ".d1")


def fourier_layer(v, params: UfnoParams, name: str, with_unet: bool | None = None):
    """``relu(spectral(v) [+ U(v)] + W v + b)``; the U-Net branch is used for
    layers whose name starts with ``u`` unless ``with_unet`` says otherwise."""
    with_unet = name.startswith("u") if with_unet is None else with_unet
    v = np.ascontiguousarray(v)
    out, sc = spectral_forward(v, params.spectral(name))
    pointwise_acc(out, v, params[name + ".W.w"])
    out += params[name + ".W.b"].reshape(1, -1, 1, 1, 1)
    uc = None
    if with_unet:
        u, uc = unet_block(v, params, name)
        out += u
    np.maximum(out, 0.0, out=out)
    return out, (v, sc, uc)


def u_fourier_layer(v, params: UfnoParams, name: str):
    return fourier_layer(v, params, name, with_unet=True)


def fourier_layer_backward(g, cache, out, params: UfnoParams, grads, name):
    """``out`` is the layer's own output (its positive entries give the ReLU mask)."""
    v, sc, uc = cache
    gp = g * (out > 0)
    gv = spectral_backward(gp, sc, params.spectral(name), grads, name)
    w = params[name + ".W.w"]
    gf, vf, gvf = _flat(gp), _flat(v), _flat(gv)
    gw = grads[name + ".W.w"]
    for i in range(v.shape[0]):
        _mm_acc(gw, gf[i], vf[i], trans_b=True)
        _mm_acc(gvf[i], w, gf[i], trans_a=True)
    grads[name + ".W.b"] += gf.sum(axis=(0, 2))
    if uc is not None:
        gv += unet_block_backward(gp, uc, params, grads, name)
    return gv


# -- whole network ---------------------------------------------------------------
def input_tensor(logk_norm: np.ndarray, times_norm: np.ndarray) -> np.ndarray:
    """Replicate normalized log-permeability over time and append coordinates.

    ``logk_norm`` is (B, Z, X); the result is (B, 4, Z, X, T) with channels
    (logk, x, z, t), coordinates scaled to [0, 1].
    """
    logk_norm = np.asarray(logk_norm, dtype=float)
    B, Z, X = logk_norm.shape
    T = times_norm.size
    out = np.empty((B, N_INPUT, Z, X, T))
    out[:, 0] = logk_norm[..., None]
    out[:, 1] = (np.arange(X) + 0.5)[None, None, :, None] / X
    out[:, 2] = (np.arange(Z) + 0.5)[None, :, None, None] / Z
    out[:, 3] = np.asarray(times_norm, dtype=float)[None, None, None, :]
    return out


def forward(x: np.ndarray, params: UfnoParams, cfg: UfnoConfig, keep: bool = False):
    """Network output (B, Z, X, T) in normalized units from an input tensor
    built by :func:`input_tensor`.  With ``keep`` the cache for
    :func:`backward` is returned as well."""
    if x.ndim != 5 or x.shape[1] != N_INPUT:
        raise ValueError(f"expected a (B, {N_INPUT}, Z, X, T) input, got {x.shape}")
    dims = x.shape[2:]
    padded = cfg.validate_dims(dims)
    Z, X, T = dims
    v = np.zeros((x.shape[0], cfg.width) + padded)
    v[:, :, :Z, :X, :T] = pointwise(x, params["P.w"], params["P.b"])
    caches, outs = [], []
    for name in layer_names(cfg):
        v, c = fourier_layer(v, params, name)
        if keep:
            caches.append(c)
            outs.append(v)
    v = np.ascontiguousarray(v[:, :, :Z, :X, :T])
    h = pointwise(v, params["Q1.w"], params["Q1.b"])
    np.maximum(h, 0.0, out=h)
    out = pointwise(h, params["Q2.w"], params["Q2.b"])[:, 0]
    if not keep:
        return out
    return out, {"x": x, "caches": caches, "outs": outs, "padded": padded, "v": v, "h": h}


def layer_shapes(dims, cfg: UfnoConfig, batch: int = 1) -> list:
    """(name, shape) after each stage, channel-last like the reference table."""
    padded = cfg.validate_dims(dims)
    w = cfg.width
    rows = [("input", (*dims, 1)), ("lifting", (*dims, w)), ("padding", (*padded, w))]
    rows += [(f"fourier{i + 1}", (*padded, w)) for i in range(cfg.n_fourier)]
    rows += [(f"u-fourier{i + 1}", (*padded, w)) for i in range(cfg.n_ufourier)]
    rows += [("unpadding", (*dims, w)), ("projection1", (*dims, cfg.q_hidden)), ("projection2", (*dims, 1))]
    return rows


def backward(g_out: np.ndarray, tape: dict, params: UfnoParams, cfg: UfnoConfig) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter given ``dL/d out``."""
    grads = params.zeros_like()
    g = np.ascontiguousarray(g_out[:, None])
    gh = pointwise_backward(g, tape["h"], params["Q2.w"], grads, "Q2")
    gh *= tape["h"] > 0
    gv = pointwise_backward(gh, tape["v"], params["Q1.w"], grads, "Q1")
    B, W, Z, X, T = gv.shape
    full = np.zeros((B, W) + tuple(tape["padded"]))
    full[:, :, :Z, :X, :T] = gv
    gv = full
    names = layer_names(cfg)
    for name, cache, out in reversed(list(zip(names, tape["caches"], tape["outs"]))):
        gv = fourier_layer_backward(gv, cache, out, params, grads, name)
    gv = np.ascontiguousarray(gv[:, :, :Z, :X, :T])
    pointwise_backward(gv, tape["x"], params["P.w"], grads, "P", need_input=False)
    return grads


def loss(pred: np.ndarray, truth: np.ndarray, active: np.ndarray, lam: float) -> float:
    """Mean over samples and times of ``sum_cells e^2 + lam * sum_active e^2``.

    ``pred`` and ``truth`` are (n_smp, Z, X, n_t); ``active`` is (Z, X).
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    e2 = (pred - truth) ** 2
    weight = 1.0 + lam * np.asarray(active, dtype=float)
    n_smp, n_t = pred.shape[0], pred.shape[-1]
    return float(np.sum(e2 * weight[None, :, :, None]) / (n_smp * n_t))


def loss_grad(pred, truth, active, lam) -> np.ndarray:
    weight = 1.0 + lam * np.asarray(active, dtype=float)
    n_smp, n_t = pred.shape[0], pred.shape[-1]
    return 2.0 * (pred - truth) * weight[None, :, :, None] / (n_smp * n_t)
