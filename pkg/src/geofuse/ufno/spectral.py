"""Real 3-D Fourier transforms and the truncated spectral convolution.

Tensors are channel-first, ``(batch, channels, z, x, t)``.  The spectral
convolution only ever needs a handful of low modes, so the forward and
inverse transforms are applied as dense truncated DFT matrices, one axis at a
time.  With every mode retained this is exactly ``rfftn`` followed by
``irfftn``; truncation simply drops rows of the matrices.  The adjoints used
for reverse mode are the conjugate transposes of the same matrices.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def rfft3(x: np.ndarray) -> np.ndarray:
    """Unnormalized real FFT over the last three axes of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 3:
        raise ValueError(f"rfft3 needs at least three axes, got shape {x.shape}")
    return np.fft.rfftn(x, axes=(-3, -2, -1))


def irfft3(spec: np.ndarray, dims) -> np.ndarray:
    """Inverse of :func:`rfft3`; ``dims`` is the real shape of the last three axes."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError("dims must have three entries")
    expect = (dims[0], dims[1], dims[2] // 2 + 1)
    if spec.shape[-3:] != expect:
        raise ValueError(f"spectrum shape {spec.shape[-3:]} does not match dims {dims} (expected {expect})")
    return np.fft.irfftn(spec, s=dims, axes=(-3, -2, -1))


def full_axis_modes(n: int, m: int) -> np.ndarray:
    """The ``m`` lowest-|frequency| indices of a length-``n`` complex FFT axis."""
    if not 1 <= m <= n:
        raise ValueError(f"mode count {m} outside [1, {n}]")
    return np.concatenate([np.arange((m + 1) // 2), np.arange(n - m // 2, n)])


def check_modes(padded, modes):
    """Validate per-axis mode counts against a padded ``(z, x, t)`` shape."""
    nz, nx, nt = padded
    mz, mx, mt = modes
    if not (1 <= mz <= nz and 1 <= mx <= nx and 1 <= mt <= nt // 2 + 1):
        raise ValueError(f"modes {tuple(modes)} do not fit padded shape {tuple(padded)}")


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Truncated forward (``F*``) and inverse (``B*``) DFT matrices.

    ``Fz`` is ``(mz, Z)``, ``Bz`` is ``(Z, mz)``; likewise for x.  ``Ft`` maps
    real samples to the first ``mt`` real-FFT bins and ``Bt`` carries the
    Hermitian doubling weights, so that ``Re(Bt @ W)`` equals ``irfft``.
    """

    Fz: np.ndarray
    Fx: np.ndarray
    Ft: np.ndarray
    Bz: np.ndarray
    Bx: np.ndarray
    Bt: np.ndarray
    t_mats: dict  # real matrices acting on interleaved (re, im) t-axis data

    @property
    def modes(self):
        return self.Fz.shape[0], self.Fx.shape[0], self.Ft.shape[0]


def _dft_rows(n: int, k: np.ndarray) -> np.ndarray:
    return np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)


def _to_interleaved(mat: np.ndarray) -> np.ndarray:
    """Real (n, 2m) matrix whose product with real data, viewed as complex, is ``x @ mat``."""
    out = np.empty((mat.shape[0], 2 * mat.shape[1]))
    out[:, 0::2] = mat.real
    out[:, 1::2] = mat.imag
    return out


def _from_interleaved(mat: np.ndarray) -> np.ndarray:
    """Real (2m, n) matrix giving ``Re(w @ mat)`` from complex ``w`` viewed as floats."""
    out = np.empty((2 * mat.shape[0], mat.shape[1]))
    out[0::2] = mat.real
    out[1::2] = -mat.imag
    return out


@lru_cache(maxsize=32)
def spectral_basis(padded: tuple, modes: tuple) -> SpectralBasis:
    check_modes(padded, modes)
    nz, nx, nt = padded
    mz, mx, mt = modes
    kz, kx, kt = full_axis_modes(nz, mz), full_axis_modes(nx, mx), np.arange(mt)
    Fz, Fx, Ft = _dft_rows(nz, kz), _dft_rows(nx, kx), _dft_rows(nt, kt)
    w = np.full(mt, 2.0)
    w[0] = 1.0
    if nt % 2 == 0 and mt == nt // 2 + 1:
        w[-1] = 1.0
    Bt = (Ft.conj().T * w) / nt
    mats = {}
    for key, mat in (("fwd", Ft.T), ("inv_adj", Bt.conj())):
        mats[key] = _to_interleaved(mat)
    for key, mat in (("inv", Bt.T), ("fwd_adj", Ft.conj())):
        mats[key] = _from_interleaved(mat)
    basis = SpectralBasis(Fz, Fx, Ft, Fz.conj().T / nz, Fx.conj().T / nx, Bt, mats)
    for a in (basis.Fz, basis.Fx, basis.Ft, basis.Bz, basis.Bx, basis.Bt, *mats.values()):
        a.setflags(write=False)
    return basis


def _on_x(mat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Apply ``mat`` along the x axis of a (B, C, Z, X, K) array."""
    return np.matmul(mat, y)


def _on_z(mat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Apply ``mat`` along the z axis of a (B, C, Z, X, K) array."""
    B, C, Z, X, K = y.shape
    out = np.matmul(mat, y.reshape(B, C, Z, X * K))
    return out.reshape(B, C, mat.shape[0], X, K)


def _last_real(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Complex product over the last axis of real ``x`` (one real GEMM)."""
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    out = (flat @ mat).view(complex)
    return out.reshape(x.shape[:-1] + (mat.shape[1] // 2,))


def _last_to_real(w: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Real part of a complex product over the last axis (one real GEMM)."""
    flat = np.ascontiguousarray(w).reshape(-1, w.shape[-1]).view(float)
    out = flat @ mat
    return out.reshape(w.shape[:-1] + (mat.shape[1],))


def forward_transform(v: np.ndarray, sb: SpectralBasis) -> np.ndarray:
    """Retained spectrum of a real (B, C, Z, X, T) tensor, shape (B, C, mz, mx, mt)."""
    y = _last_real(v, sb.t_mats["fwd"])
    return _on_z(sb.Fz, _on_x(sb.Fx, y))


def forward_transform_adjoint(g: np.ndarray, sb: SpectralBasis) -> np.ndarray:
    """Gradient w.r.t. the real input of :func:`forward_transform`."""
    y = _on_x(sb.Fx.conj().T, _on_z(sb.Fz.conj().T, g))
    return _last_to_real(y, sb.t_mats["fwd_adj"])


def inverse_transform(w: np.ndarray, sb: SpectralBasis) -> np.ndarray:
    """Real tensor from a retained spectrum (missing modes taken as zero)."""
    y = _on_x(sb.Bx, _on_z(sb.Bz, w))
    return _last_to_real(y, sb.t_mats["inv"])


def inverse_transform_adjoint(g: np.ndarray, sb: SpectralBasis) -> np.ndarray:
    """Gradient (d/dRe + i d/dIm) w.r.t. the spectrum fed to :func:`inverse_transform`."""
    y = _last_real(g, sb.t_mats["inv_adj"])
    return _on_z(sb.Bz.conj().T, _on_x(sb.Bx.conj().T, y))


def mix_modes(y: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Per-mode channel mixing: ``out[b, o, m] = sum_i y[b, i, m] R[i, o, m]``.

    ``y`` is (B, Ci, mz, mx, mt) and ``R`` is (Ci, Co, mz, mx, mt).
    """
    B, ci = y.shape[:2]
    co = R.shape[1]
    M = y[0, 0].size
    ym = y.reshape(B, ci, M).transpose(2, 0, 1)
    rm = R.reshape(ci, co, M).transpose(2, 0, 1)
    out = np.matmul(ym, rm)
    return out.transpose(1, 2, 0).reshape((B, co) + y.shape[2:])


def mix_modes_backward(g: np.ndarray, y: np.ndarray, R: np.ndarray):
    """Gradients of :func:`mix_modes` w.r.t. ``y`` and ``R``."""
    B, ci = y.shape[:2]
    co = R.shape[1]
    M = y[0, 0].size
    ym = y.reshape(B, ci, M).transpose(2, 0, 1)
    gm = g.reshape(B, co, M).transpose(2, 0, 1)
    rm = R.reshape(ci, co, M).transpose(2, 0, 1)
    gR = np.matmul(ym.conj().transpose(0, 2, 1), gm).transpose(1, 2, 0).reshape(R.shape)
    gy = np.matmul(gm, rm.conj().transpose(0, 2, 1)).transpose(1, 2, 0).reshape(y.shape)
    return gy, gR


def spectral_conv(v: np.ndarray, R: np.ndarray, modes=None) -> np.ndarray:
    """``F^-1(R . F(v))`` with all modes beyond ``modes`` set to zero.

    Parameters
    ----------
    v : ndarray, shape (B, C, Z, X, T)
    R : complex ndarray, shape (C, Co, mz, mx, mt)
    modes : tuple, optional
        Must agree with ``R.shape[:3]`` when given.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 5:
        raise ValueError(f"expected a (B, C, Z, X, T) tensor, got shape {v.shape}")
    if modes is not None and tuple(modes) != R.shape[2:]:
        raise ValueError(f"modes {tuple(modes)} disagree with weights {R.shape[2:]}")
    if R.shape[0] != v.shape[1]:
        raise ValueError(f"weights expect {R.shape[0]} channels, input has {v.shape[1]}")
    sb = spectral_basis(v.shape[2:], R.shape[2:])
    return inverse_transform(mix_modes(forward_transform(v, sb), R), sb)
