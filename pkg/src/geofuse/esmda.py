"""Ensemble smoother with multiple data assimilation over latent PCA coordinates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import ConfigError, GeofuseError
from .seeding import rng_for, stage_seed


class AssimilationError(GeofuseError, RuntimeError):
    exit_code = 3


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed data and independent Gaussian noise levels.

    The ordering of ``values`` follows :func:`geofuse.simulator.extract_observations`
    (time-major, then location, then head/salinity).
    """

    values: np.ndarray
    noise_std: np.ndarray
    locations: tuple = ()
    times: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        s = np.asarray(self.noise_std, dtype=float).ravel()
        if s.size == 1 and v.size > 1:
            s = np.full(v.size, float(s[0]))
        if v.size != s.size:
            raise ValueError(f"{v.size} observations but {s.size} noise levels")
        if not np.all(s > 0):
            raise ValueError("noise standard deviations must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "noise_std", s)

    def __len__(self):
        return self.values.size


def interleaved_noise(n_times: int, n_locations: int, sigma_head: float, sigma_salinity: float) -> np.ndarray:
    """Noise vector in the (time, location, quantity) observation order."""
    return np.tile([sigma_head, sigma_salinity], n_times * n_locations).astype(float)


@dataclass(frozen=True)
class EsmdaConfig:
    n_assim: int = 4
    alphas: tuple = (4.0, 4.0, 4.0, 4.0)
    n_real: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.n_assim < 1:
            raise ConfigError("esmda.n_assim", "must be at least 1")
        if len(self.alphas) != self.n_assim:
            raise ConfigError("esmda.alphas", f"expected {self.n_assim} inflation coefficients, got {len(self.alphas)}")
        if not all(a > 0 for a in self.alphas):
            raise ConfigError("esmda.alphas", "inflation coefficients must be positive")
        total = sum(1.0 / a for a in self.alphas)
        if abs(total - 1.0) > 1e-10:
            raise ConfigError("esmda.alphas", f"reciprocals sum to {total!r}, not 1")
        if self.n_real < 2:
            raise ConfigError("esmda.n_real", "at least two realizations are needed")


@dataclass(eq=False)
class LatentEnsemble:
    """``xi`` is (N_r, n_l); ``seeds`` records how each row was drawn."""

    xi: np.ndarray
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        if not np.all(np.isfinite(self.xi)):
            raise ValueError("latent ensemble must be finite")

    @property
    def n_real(self) -> int:
        return self.xi.shape[0]

    @property
    def n_l(self) -> int:
        return self.xi.shape[1]


def _prior_row(seed: int, member: int, n_l: int) -> np.ndarray:
    return rng_for(seed, "prior", member).standard_normal(n_l)


def sample_prior(n_real: int, n_l: int, seed: int) -> LatentEnsemble:
    """i.i.d. standard normal latent vectors, one seeded stream per member."""
    if n_real < 2:
        raise ValueError("a prior ensemble needs at least two members")
    rows = [_prior_row(seed, i, n_l) for i in range(n_real)]
    return LatentEnsemble(np.array(rows).reshape(n_real, n_l), [stage_seed(seed, "prior", i) for i in range(n_real)])


def perturb_observations(obs: ObservationSet, alpha: float, seed: int, member: int = 0, step: int = 0) -> np.ndarray:
    """``d_obs + sqrt(alpha) * e`` with ``e ~ N(0, diag(noise_std^2))``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    e = rng_for(seed, "perturb", member, step).standard_normal(len(obs)) * obs.noise_std
    return obs.values + np.sqrt(alpha) * e


def _factor(mat: np.ndarray):
    try:
        return cho_factor(mat, lower=True, check_finite=False)
    except LinAlgError:
        pass
    n = mat.shape[0]
    jitter = 1e-10 * np.trace(mat) / n
    try:
        return cho_factor(mat + jitter * np.eye(n), lower=True, check_finite=False)
    except LinAlgError:
        raise AssimilationError("C_d + alpha C_D is not positive definite; increase alpha or "
                                "use fewer observations") from None


def esmda_update(xi, d, obs: ObservationSet, alpha: float, seed: int, step: int = 0,
                 members=None) -> np.ndarray:
    """One smoother update of every member.

    Parameters
    ----------
    xi : ndarray, shape (N_r, n_l)
    d : ndarray, shape (N_r, n_obs)
        Predicted data of each member.
    members : sequence of int, optional
        Identity of each row, which keys its observation-noise stream
        (defaults to the row index).  Reordering rows together with their
        ids reorders the result the same way.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    n = xi.shape[0]
    if n < 2 or d.shape != (n, len(obs)):
        raise ValueError(f"need (N_r >= 2, n_obs) data, got {d.shape} for {n} members and {len(obs)} observations")
    dxi = xi - xi.mean(axis=0)
    dd = d - d.mean(axis=0)
    c_xd = dxi.T @ dd / (n - 1)
    c_dd = dd.T @ dd / (n - 1)
    c_dd[np.diag_indices_from(c_dd)] += alpha * obs.noise_std ** 2
    factor = _factor(c_dd)
    members = range(n) if members is None else [int(i) for i in members]
    if len(members) != n:
        raise ValueError(f"{len(members)} member ids for {n} members")
    pert = np.stack([perturb_observations(obs, alpha, seed, i, step) for i in members])
    innov = cho_solve(factor, (pert - d).T, check_finite=False)
    return xi + (c_xd @ innov).T


def data_mismatch(d, obs: ObservationSet) -> float:
    """Normalized mismatch of the ensemble-mean prediction."""
    dbar = np.atleast_2d(d).mean(axis=0)
    return float(np.sum(((dbar - obs.values) / obs.noise_std) ** 2) / len(obs))


@dataclass
class EsmdaResult:
    posterior: LatentEnsemble
    history: list          # latent ensembles, prior first
    data: list             # predicted data per stage
    diagnostics: list      # (step, mismatch, latent_spread)
    resampled: list = field(default_factory=list)


def _evaluate(forward, xi, seed: int, step: int, resampled: list):
    """Forward map over all members; failures are replaced by a fresh prior draw once."""
    rows = []
    for i in range(xi.shape[0]):
        try:
            rows.append(np.asarray(forward(xi[i]), dtype=float))
            continue
        except Exception:
            pass
        redraw_seed = stage_seed(seed, "resample", i * 1000 + step)
        xi[i] = np.random.default_rng(redraw_seed).standard_normal(xi.shape[1])
        resampled.append((step, i, redraw_seed))
        try:
            rows.append(np.asarray(forward(xi[i]), dtype=float))
        except Exception as exc:
            raise AssimilationError(f"forward map failed twice for member {i} (seed {redraw_seed}): {exc}") from exc
    return np.stack(rows)


def run_esmda(prior: LatentEnsemble, forward, obs: ObservationSet, cfg: EsmdaConfig, forward_batch=None) -> EsmdaResult:
    """Run ``cfg.n_assim`` updates, re-evaluating the forward map each time.

    ``forward`` maps one latent vector to predicted observations; when
    ``forward_batch`` is given it maps the whole (N_r, n_l) matrix at once and
    is used instead (a failure then aborts without resampling).
    """
    xi = prior.xi.copy()
    resampled: list = []

    def evaluate(x, step):
        if forward_batch is not None:
            out = np.asarray(forward_batch(x), dtype=float)
            if not np.all(np.isfinite(out)):
                raise AssimilationError(f"non-finite predictions at step {step}")
            return out
        return _evaluate(forward, x, cfg.seed, step, resampled)

    d = evaluate(xi, 0)
    history, data = [xi.copy()], [d]
    diags = [(0, data_mismatch(d, obs), float(np.mean(np.std(xi, axis=0, ddof=1))))]
    for k, alpha in enumerate(cfg.alphas, start=1):
        xi = esmda_update(xi, d, obs, alpha, cfg.seed, step=k)
        d = evaluate(xi, k)
        history.append(xi.copy())
        data.append(d)
        diags.append((k, data_mismatch(d, obs), float(np.mean(np.std(xi, axis=0, ddof=1)))))
    return EsmdaResult(LatentEnsemble(xi, list(prior.seeds)), history, data, diags, resampled)
