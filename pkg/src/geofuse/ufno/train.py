"""Normalization, ADAM and the mini-batch training loop."""
from __future__ import annotations

import time as _time
from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import TrainingError
from ..seeding import rng_for
from .network import UfnoConfig, UfnoParams, backward, forward, init_params, input_tensor, loss, loss_grad

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and self.eps > 0 and self.lam >= 0):
            raise ValueError("lr and eps must be positive, lam non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Normalizer:
    """z-score statistics: a scalar pair for log-permeability and one pair per
    output quantity, all computed over active cells of the training set."""

    logk_mean: float
    logk_std: float
    out_mean: dict
    out_std: dict
    t_scale: float = 1.0

    def apply_input(self, logk):
        return (np.asarray(logk, dtype=float) - self.logk_mean) / self.logk_std

    def invert_input(self, z):
        return np.asarray(z, dtype=float) * self.logk_std + self.logk_mean

    def apply(self, quantity: str, values):
        return (np.asarray(values, dtype=float) - self.out_mean[quantity]) / self.out_std[quantity]

    def invert(self, quantity: str, z):
        return np.asarray(z, dtype=float) * self.out_std[quantity] + self.out_mean[quantity]

    def times(self, t):
        return np.asarray(t, dtype=float) / self.t_scale

    def to_dict(self) -> dict:
        return {"logk_mean": self.logk_mean, "logk_std": self.logk_std, "out_mean": dict(self.out_mean),
                "out_std": dict(self.out_std), "t_scale": self.t_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(float(d["logk_mean"]), float(d["logk_std"]),
                   {k: float(v) for k, v in d["out_mean"].items()},
                   {k: float(v) for k, v in d["out_std"].items()}, float(d.get("t_scale", 1.0)))


def _mean_std(a) -> tuple[float, float]:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        raise ValueError("cannot fit a normalizer to an empty dataset")
    return float(np.mean(a)), max(float(np.std(a)), STD_FLOOR)


def fit_normalizer(logk, outputs: dict, active=None, times=None) -> Normalizer:
    """Fit on training data only.

    Parameters
    ----------
    logk : ndarray, shape (N, Z, X)
    outputs : dict
        Quantity name -> values; either full-grid ``(N, Z, X, T)`` arrays
        (restricted to ``active`` when given) or per-active-cell arrays.
    times : array-like, optional
        Output times; their maximum becomes the time scale.
    """
    logk = np.asarray(logk, dtype=float)
    sel = (lambda a: a[:, active]) if active is not None else (lambda a: a)
    lm, ls = _mean_std(sel(logk))
    means, stds = {}, {}
    for q, vals in outputs.items():
        means[q], stds[q] = _mean_std(sel(np.asarray(vals, dtype=float)))
    t_scale = float(np.max(np.abs(times))) if times is not None and np.size(times) else 1.0
    return Normalizer(lm, ls, means, stds, t_scale if t_scale > 0 else 1.0)


# -- optimizer ------------------------------------------------------------------------
def adam_init(params: UfnoParams) -> dict:
    return {"m": params.zeros_like(), "v": params.zeros_like()}


def adam_step(params: UfnoParams, grads: dict, moments: dict, t: int, cfg: TrainConfig):
    """One bias-corrected ADAM update, in place; returns ``(params, moments)``."""
    if t < 1:
        raise ValueError("ADAM step counter starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in params:
        g = grads[k]
        m, v = moments["m"][k], moments["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, moments


# -- training -------------------------------------------------------------------------
def split_indices(n: int, val_fraction: float, seed: int):
    """Deterministic train/validation split (validation may be empty)."""
    if n < 2:
        raise ValueError("training needs at least two samples")
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 1 if val_fraction > 0 else 0), n - 1)
    perm = rng_for(seed, "split").permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def dataset_loss(params, cfg: UfnoConfig, x_of, y, idx, active, lam, batch: int) -> float:
    """Loss over samples ``idx`` evaluated in chunks (same value as one big batch)."""
    if len(idx) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(idx), batch):
        b = idx[s:s + batch]
        total += loss(forward(x_of(b), params, cfg), y[b], active, lam) * len(b)
    return total / len(idx)


def train_arrays(logk_norm, y_norm, times_norm, active, tcfg: TrainConfig, ucfg: UfnoConfig,
                 params: UfnoParams | None = None, progress=None):
    """Fit one network to normalized data.

    Parameters
    ----------
    logk_norm : ndarray, shape (N, Z, X)
    y_norm : ndarray, shape (N, Z, X, T)
    times_norm : ndarray, shape (T,)
    active : bool ndarray, shape (Z, X)

    Returns
    -------
    params, log
        ``log`` rows are ``(epoch, train_loss, val_loss, wall_time)``; epoch 0
        holds the losses of the initial parameters, later rows the mean batch
        loss seen during the epoch and the end-of-epoch validation loss.
    """
    logk_norm = np.asarray(logk_norm, dtype=float)
    y_norm = np.asarray(y_norm, dtype=float)
    times_norm = np.asarray(times_norm, dtype=float)
    active = np.asarray(active, dtype=bool)
    n = logk_norm.shape[0]
    if y_norm.shape != logk_norm.shape + (times_norm.size,):
        raise ValueError(f"targets {y_norm.shape} do not match inputs {logk_norm.shape} x {times_norm.size} times")
    tr, va = split_indices(n, tcfg.val_fraction, tcfg.seed)
    params = init_params(ucfg, rng_for(tcfg.seed, "init")) if params is None else params.copy()
    moments = adam_init(params)

    def x_of(b):
        return input_tensor(logk_norm[b], times_norm)

    tic = _time.perf_counter()
    bs = tcfg.batch_size
    log = [(0, dataset_loss(params, ucfg, x_of, y_norm, tr, active, tcfg.lam, bs),
            dataset_loss(params, ucfg, x_of, y_norm, va, active, tcfg.lam, bs), _time.perf_counter() - tic)]
    if progress:
        progress(log[-1])
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = tr[rng_for(tcfg.seed, "shuffle", epoch).permutation(tr.size)]
        seen = 0.0
        for bi, s in enumerate(range(0, order.size, bs)):
            b = np.sort(order[s:s + bs])
            out, tape = forward(x_of(b), params, ucfg, keep=True)
            val = loss(out, y_norm[b], active, tcfg.lam)
            grads = backward(loss_grad(out, y_norm[b], active, tcfg.lam), tape, params, ucfg)
            gmax = max(float(np.max(np.abs(g))) for g in grads.values())
            if not (np.isfinite(val) and np.isfinite(gmax)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi} (max |grad| = {gmax:.3g})")
            step += 1
            adam_step(params, grads, moments, step, tcfg)
            seen += val * b.size
        log.append((epoch, seen / tr.size, dataset_loss(params, ucfg, x_of, y_norm, va, active, tcfg.lam, bs),
                    _time.perf_counter() - tic))
        if progress:
            progress(log[-1])
    if not params.all_finite():
        raise TrainingError("training produced non-finite parameters")
    return params, log
