"""Correlated Gaussian geomodels and their PCA parameterization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .domain import GridSpec
from .exceptions import ConfigError
from .seeding import stage_seed

PHI_MIN, PHI_MAX = 0.01, 0.99


@dataclass(frozen=True)
class CovarianceSpec:
    """Separable exponential covariance, correlation lengths in cells."""

    model: str = "exponential"
    lx_corr: float = 5.0
    lz_corr: float = 5.0
    mean_logk: float = 4.5
    std_logk: float = 1.0
    mean_phi: float = 0.5
    std_phi: float = 0.05

    def __post_init__(self):
        if self.model != "exponential":
            raise ConfigError("geostat.model", "only 'exponential' is supported")
        if not (self.lx_corr > 0 and self.lz_corr > 0):
            raise ConfigError("geostat.lx_corr", "correlation lengths must be positive")
        if self.std_logk < 0 or self.std_phi < 0:
            raise ConfigError("geostat.std_logk", "standard deviations must be non-negative")

    def correlation(self, hx, hz):
        return np.exp(-np.abs(hx) / self.lx_corr - np.abs(hz) / self.lz_corr)


@dataclass(frozen=True, eq=False)
class GeoModel:
    """Log-permeability (natural log of millidarcy) and porosity, shape ``(nz, nx)``."""

    logk: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        if self.logk.shape != self.phi.shape:
            raise ValueError("logk and phi must share a shape")
        if not (np.all(np.isfinite(self.logk)) and np.all(np.isfinite(self.phi))):
            raise ValueError("geomodel values must be finite")
        if np.any(self.phi <= 0) or np.any(self.phi >= 1):
            raise ValueError("porosity must lie strictly inside (0, 1)")

    @property
    def permeability(self) -> np.ndarray:
        """Intrinsic permeability in m^2."""
        return np.exp(self.logk) * 9.869233e-16


@dataclass
class Ensemble:
    members: list
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {m.logk.shape for m in self.members}
        if len(shapes) > 1:
            raise ValueError("ensemble members must share one grid shape")

    def __len__(self):
        return len(self.members)

    def logk_matrix(self) -> np.ndarray:
        return np.stack([m.logk.ravel() for m in self.members])


def _embedding_sqrt_eigs(nz: int, nx: int, cov: CovarianceSpec) -> np.ndarray:
    mz, mx = 2 * nz, 2 * nx
    hz = np.minimum(np.arange(mz), mz - np.arange(mz))
    hx = np.minimum(np.arange(mx), mx - np.arange(mx))
    kernel = cov.correlation(hx[None, :], hz[:, None])
    eigs = np.fft.fft2(kernel).real
    # Separable exponential kernels embed non-negatively; clip rounding noise only.
    return np.sqrt(np.clip(eigs, 0.0, None) / (mz * mx))


def generate_field(grid: GridSpec, cov: CovarianceSpec, seed: int) -> np.ndarray:
    """Standard-normal field with correlation ``exp(-hx/lx - hz/lz)`` by
    circulant embedding on a grid padded by a factor of two per axis."""
    sq = _embedding_sqrt_eigs(grid.nz, grid.nx, cov)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(sq.shape) + 1j * rng.standard_normal(sq.shape)
    full = np.fft.fft2(sq * noise).real
    return full[: grid.nz, : grid.nx].copy()


def field_to_model(field_: np.ndarray, cov: CovarianceSpec) -> GeoModel:
    """Map one standard field to log-permeability and porosity (same field for both)."""
    f = np.asarray(field_, dtype=float)
    logk = cov.mean_logk + cov.std_logk * f
    phi = np.clip(cov.mean_phi + cov.std_phi * f, PHI_MIN, PHI_MAX)
    return GeoModel(logk=logk, phi=phi)


def model_from_logk(logk: np.ndarray, cov: CovarianceSpec) -> GeoModel:
    """Rebuild porosity from log-permeability by inverting the shared affine map."""
    std = cov.std_logk if cov.std_logk > 0 else 1.0
    return field_to_model((np.asarray(logk, dtype=float) - cov.mean_logk) / std, cov)


def generate_ensemble(grid: GridSpec, cov: CovarianceSpec, n: int, master_seed: int,
                      stage: str = "generate") -> Ensemble:
    seeds = [stage_seed(master_seed, stage, i) for i in range(n)]
    members = [field_to_model(generate_field(grid, cov, s), cov) for s in seeds]
    return Ensemble(members, seeds)


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray            # (n_cells,)
    basis: np.ndarray           # (n_cells, n_l), orthonormal columns
    singular_values: np.ndarray
    n_l: int
    n_members: int
    shape: tuple
    cov: CovarianceSpec | None = None

    @property
    def latent_scale(self) -> np.ndarray:
        """Per-component prior standard deviation, ``s_j / sqrt(N - 1)``."""
        return self.singular_values[: self.n_l] / np.sqrt(max(self.n_members - 1, 1))


def energy_rank(singular_values, energy_fraction: float) -> int:
    """Smallest k whose leading squared singular values hold ``energy_fraction``
    of the total; 0 when the total is zero."""
    if not 0.0 < energy_fraction <= 1.0:
        raise ValueError("energy_fraction must lie in (0, 1]")
    s2 = np.asarray(singular_values, dtype=float) ** 2
    cum = np.cumsum(s2)
    if cum.size == 0 or cum[-1] <= 0.0:
        return 0
    k = int(np.searchsorted(cum, energy_fraction * cum[-1], side="left")) + 1
    return min(k, s2.size)


def fit_pca(ensemble, energy_fraction: float = 0.95, cov: CovarianceSpec | None = None) -> PcaBasis:
    """Centered SVD of the member matrix (log-permeability)."""
    if isinstance(ensemble, Ensemble):
        shape = ensemble.members[0].logk.shape
        X = ensemble.logk_matrix()
    else:
        X = np.asarray(ensemble, dtype=float)
        shape = X.shape[1:]
        X = X.reshape(X.shape[0], -1)
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least two members")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    n_l = energy_rank(s, energy_fraction)
    return PcaBasis(mean=mean, basis=vt[:n_l].T.copy(), singular_values=s, n_l=n_l,
                    n_members=X.shape[0], shape=tuple(shape), cov=cov)


def pca_reconstruct(basis: PcaBasis, xi) -> GeoModel | np.ndarray:
    """``logk = Phi xi + mean``; returns a GeoModel when the basis carries a
    covariance spec, otherwise the flat log-permeability vector."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (basis.n_l,):
        raise ValueError(f"latent vector must have length {basis.n_l}, got {xi.shape}")
    logk = basis.basis @ xi + basis.mean
    if basis.cov is None:
        return logk
    return model_from_logk(logk.reshape(basis.shape), basis.cov)


def pca_project(basis: PcaBasis, model) -> np.ndarray:
    logk = model.logk if isinstance(model, GeoModel) else np.asarray(model, dtype=float)
    logk = logk.ravel()
    if logk.shape != basis.mean.shape:
        raise ValueError(f"model has {logk.size} cells, basis expects {basis.mean.size}")
    return basis.basis.T @ (logk - basis.mean)


class PCAParameterization(TransformerMixin, BaseEstimator):
    """Energy-truncated PCA of flattened log-permeability fields.

    Parameters
    ----------
    energy_fraction : float
        Fraction of the centered ensemble energy retained.
    whiten : bool
        If True, latent coordinates are scaled to unit prior variance, so a
        standard-normal latent vector maps to a draw with the ensemble
        covariance restricted to the retained subspace.
    """

    def __init__(self, energy_fraction: float = 0.95, whiten: bool = False):
        self.energy_fraction = energy_fraction
        self.whiten = whiten

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.basis_ = fit_pca(X, self.energy_fraction)
        self.mean_ = self.basis_.mean
        self.components_ = self.basis_.basis.T
        self.singular_values_ = self.basis_.singular_values
        self.n_components_ = self.basis_.n_l
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        xi = (X - self.mean_) @ self.basis_.basis
        if self.whiten:
            xi = xi / np.where(self.basis_.latent_scale > 0, self.basis_.latent_scale, 1.0)
        return xi

    def inverse_transform(self, Xi):
        check_is_fitted(self, "basis_")
        Xi = check_array(Xi)
        if self.whiten:
            Xi = Xi * self.basis_.latent_scale
        return Xi @ self.components_ + self.mean_


def latent_to_logk(basis: PcaBasis, z: np.ndarray) -> np.ndarray:
    """Whitened latent rows ``z`` (N, n_l) to flat log-permeability rows."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != basis.n_l:
        raise ValueError(f"latent vectors must have length {basis.n_l}")
    return (z * basis.latent_scale) @ basis.basis.T + basis.mean
