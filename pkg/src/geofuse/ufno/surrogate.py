"""Trained surrogates in physical units, a scikit-learn style estimator and a
finite-difference gradient check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ..domain import GridSpec
from ..simulator.run import SimOutput
from .network import UfnoConfig, UfnoParams, backward, forward, input_tensor, loss, loss_grad
from .train import Normalizer, TrainConfig, fit_normalizer, train_arrays

QUANTITIES = ("pressure", "salinity")


@dataclass(eq=False)
class Surrogate:
    """One trained network for one output quantity."""

    quantity: str
    params: UfnoParams
    ucfg: UfnoConfig
    norm: Normalizer

    def predict(self, logk, times, batch: int = 4) -> np.ndarray:
        """Physical-unit prediction, shape (N, Z, X, T), for logk of shape (N, Z, X)."""
        logk = np.asarray(logk, dtype=float)
        if logk.ndim == 2:
            logk = logk[None]
        tn = self.norm.times(times)
        z = self.norm.apply_input(logk)
        out = np.empty(logk.shape + (tn.size,))
        for s in range(0, logk.shape[0], batch):
            out[s:s + batch] = forward(input_tensor(z[s:s + batch], tn), self.params, self.ucfg)
        return self.norm.invert(self.quantity, out)


def stack_dataset(pairs, grid: GridSpec):
    """``(GeoModel, SimOutput)`` pairs -> logk (N, Z, X), full-grid outputs per
    quantity (N, Z, X, T) with inactive cells left as NaN, and output times."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty dataset")
    times = np.asarray(pairs[0][1].output_times, dtype=float)
    logk = np.stack([m.logk for m, _ in pairs])
    fields = {}
    for q, attr in zip(QUANTITIES, ("pressure_series", "salinity_series")):
        arr = np.stack([grid.to_full(getattr(o, attr), fill=np.nan) for _, o in pairs])
        fields[q] = arr
    for _, o in pairs:
        if not np.array_equal(o.output_times, times):
            raise ValueError("all simulator outputs must share output times")
    return logk, fields, times


def normalized_targets(norm: Normalizer, quantity: str, full: np.ndarray) -> np.ndarray:
    """Normalized targets with inactive (NaN) cells set to the mean (zero)."""
    z = norm.apply(quantity, full)
    return np.where(np.isfinite(z), z, 0.0)


def train(dataset, tcfg: TrainConfig, ucfg: UfnoConfig, grid: GridSpec, quantities=QUANTITIES,
          progress=None):
    """Train one network per quantity on ``(GeoModel, SimOutput)`` pairs.

    The normalizer is fitted on the training split only.  Returns
    ``({quantity: Surrogate}, {quantity: log})``.
    """
    from .train import split_indices
    logk, fields, times = stack_dataset(dataset, grid)
    tr, _ = split_indices(logk.shape[0], tcfg.val_fraction, tcfg.seed)
    act = grid.active
    norm = fit_normalizer(logk[tr], {q: fields[q][tr] for q in quantities}, active=act, times=times)
    surrogates, logs = {}, {}
    for q in quantities:
        y = normalized_targets(norm, q, fields[q])
        cb = (lambda row, q=q: progress(q, row)) if progress else None
        params, log = train_arrays(norm.apply_input(logk), y, norm.times(times), act, tcfg, ucfg, progress=cb)
        surrogates[q] = Surrogate(q, params, ucfg, norm)
        logs[q] = log
    return surrogates, logs


def surrogate_outputs(surrogates: dict, logk, grid: GridSpec, times) -> list:
    """Surrogate predictions packaged like simulator outputs (active cells only)."""
    logk = np.asarray(logk, dtype=float)
    if logk.ndim == 2:
        logk = logk[None]
    cells = grid.active_flat
    P = surrogates["pressure"].predict(logk, times)
    C = surrogates["salinity"].predict(logk, times)
    n = logk.shape[0]
    P = P.reshape(n, grid.n_cells, -1)[:, cells]
    C = C.reshape(n, grid.n_cells, -1)[:, cells]
    t = np.asarray(times, dtype=float)
    return [SimOutput(P[i], C[i], t.copy()) for i in range(n)]


class UFNORegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``X`` is log-permeability (N, Z, X), ``y`` the field
    to learn (N, Z, X, T).  Cells outside ``active`` are ignored by the
    normalizer and weighted without the active-cell bonus in the loss."""

    def __init__(self, width=12, n_fourier=2, n_ufourier=2, modes=(10, 8, 16), pad_multiple=(4, 8, 8),
                 q_hidden=128, epochs=20, batch_size=4, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 lam=1.0, val_fraction=0.1, seed=0):
        self.width = width
        self.n_fourier = n_fourier
        self.n_ufourier = n_ufourier
        self.modes = modes
        self.pad_multiple = pad_multiple
        self.q_hidden = q_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lam = lam
        self.val_fraction = val_fraction
        self.seed = seed

    def _configs(self):
        ucfg = UfnoConfig(self.width, self.n_fourier, self.n_ufourier, tuple(self.modes),
                          tuple(self.pad_multiple), self.q_hidden)
        tcfg = TrainConfig(self.epochs, self.batch_size, self.lr, self.beta1, self.beta2, self.eps,
                           self.lam, self.val_fraction, self.seed)
        return ucfg, tcfg

    def fit(self, X, y, active=None, times=None):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 3 or y.ndim != 4 or y.shape[:3] != X.shape:
            raise ValueError(f"expected X (N, Z, X) and y (N, Z, X, T), got {X.shape} and {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("inputs must be finite")
        active = np.ones(X.shape[1:], bool) if active is None else np.asarray(active, bool)
        times = np.linspace(0.0, 1.0, y.shape[-1]) if times is None else np.asarray(times, float)
        ucfg, tcfg = self._configs()
        from .train import split_indices
        tr, _ = split_indices(X.shape[0], tcfg.val_fraction, tcfg.seed)
        self.normalizer_ = fit_normalizer(X[tr], {"y": y[tr]}, active=active, times=times)
        yn = self.normalizer_.apply("y", y)
        self.params_, self.log_ = train_arrays(self.normalizer_.apply_input(X), yn, self.normalizer_.times(times),
                                               active, tcfg, ucfg)
        self.ucfg_, self.times_, self.active_ = ucfg, times, active
        return self

    def predict(self, X, times=None):
        if not hasattr(self, "params_"):
            raise ValueError("estimator is not fitted")
        times = self.times_ if times is None else times
        return Surrogate("y", self.params_, self.ucfg_, self.normalizer_).predict(X, times)

    def score(self, X, y, sample_weight=None):
        """Coefficient of determination over all entries."""
        y = np.asarray(y, dtype=float)
        e = self.predict(X) - y
        return 1.0 - float(np.sum(e * e) / np.sum((y - y.mean()) ** 2))


# -- gradient check ------------------------------------------------------------------------
def activation_pattern(x, params: UfnoParams, cfg: UfnoConfig) -> list:
    """Sign pattern of every ReLU in the network for input ``x``."""
    _, tape = forward(x, params, cfg, keep=True)
    pats = [o > 0 for o in tape["outs"]] + [tape["h"] > 0]
    for _, _, uc in tape["caches"]:
        if uc is not None:
            _, e1, e2, cat = uc
            pats += [e1 > 0, e2 > 0, cat > 0]
    return pats


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(params: UfnoParams, cfg: UfnoConfig, x, y, active, lam: float = 1.0, n: int = 100,
                   h: float = 1e-4, rng=None, max_draws: int = 10000) -> dict:
    """Compare reverse-mode gradients with central differences on ``n`` random weights.

    A weight whose +/-h stencil flips any ReLU is redrawn: across a kink the
    central difference measures a different linear piece, not the gradient.
    The relative error uses ``max(|fd|, |ad|, 1e-6 * max|grad|)`` as its
    denominator so that near-zero gradients are judged against the scale of
    the whole gradient.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out, tape = forward(x, params, cfg, keep=True)
    grads = backward(loss_grad(out, y, active, lam), tape, params, cfg)
    base = activation_pattern(x, params, cfg)
    scale = max(float(np.max(np.abs(g))) for g in grads.values())
    names = [k for k in params]
    rows, redrawn, draws = [], 0, 0
    work = params.copy()
    while len(rows) < n:
        draws += 1
        if draws > max_draws:
            raise RuntimeError("too many weights sit next to a ReLU kink")
        k = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        orig = work[k][idx]
        work[k][idx] = orig + h
        lp, pp = loss(forward(x, work, cfg), y, active, lam), activation_pattern(x, work, cfg)
        work[k][idx] = orig - h
        lm, pm = loss(forward(x, work, cfg), y, active, lam), activation_pattern(x, work, cfg)
        work[k][idx] = orig
        if not (_same_pattern(base, pp) and _same_pattern(base, pm)):
            redrawn += 1
            continue
        fd = (lp - lm) / (2 * h)
        ad = float(grads[k][idx])
        rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6 * scale)
        rows.append((k, idx, fd, ad, rel))
    return {"rows": rows, "redrawn": redrawn, "max_rel": max(r[4] for r in rows), "grad_scale": scale}
