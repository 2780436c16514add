"""Distance and distance-angle encodings of edge geometry.

* Bessel basis: ``sqrt(2/c) * sin(n*pi*r/c) / r`` for n = 1..n_bbf.
* Spherical basis: ``sqrt(2 / (c^3 j_{l+1}(z_ln)^2)) * j_l(z_ln r / c) * Y_l^0(theta)``
  with ``z_ln`` the n-th positive root of the spherical Bessel function
  ``j_l`` and ``theta`` used as the polar angle of the zonal harmonic.
  Component ``(n, l)`` is stored at index ``l * n_sbf_radial + (n - 1)``.
* Gaussian radial basis (ablation): ``exp(-gamma (r - mu_k)^2)`` with centers
  evenly spaced on (0, c].
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import eval_legendre, spherical_jn


@dataclass(frozen=True)
class BasisConfig:
    cutoff: float = 5.0
    n_bbf: int = 8
    n_sbf_radial: int = 6
    l_sbf_max: int = 6
    n_rbf: int = 8

    def __post_init__(self) -> None:
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if min(self.n_bbf, self.n_sbf_radial, self.n_rbf) < 1 or self.l_sbf_max < 0:
            raise ValueError("basis sizes must be >= 1")

    @property
    def n_sbf(self) -> int:
        return self.n_sbf_radial * (self.l_sbf_max + 1)

    @property
    def rbf_gamma(self) -> float:
        spacing = self.cutoff / self.n_rbf
        return 0.5 / spacing ** 2


def _check_r(r: np.ndarray, c: float) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("edge distance must be positive")
    if np.any(r > c):
        raise ValueError(f"edge distance exceeds the cutoff {c}")
    return r


def bbf(r, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    c = cfg.cutoff
    r = _check_r(r, c)
    k = np.arange(1, cfg.n_bbf + 1) * math.pi / c
    x = r[..., None] * k
    small = r[..., None] < 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = np.sin(x) / r[..., None]
    series = k * (1.0 - x * x / 6.0 + x ** 4 / 120.0)
    return math.sqrt(2.0 / c) * np.where(small, series, direct)


@functools.lru_cache(maxsize=None)
def spherical_bessel_roots(l_max: int, n_roots: int) -> np.ndarray:
    """``roots[l, n-1]`` is the n-th positive zero of ``j_l``.

    Zeros of ``j_l`` interlace those of ``j_{l-1}``, so each root of order l
    is bracketed by consecutive roots of order l - 1.
    """
    total = n_roots + l_max
    roots = np.zeros((l_max + 1, total))
    roots[0] = np.arange(1, total + 1) * math.pi
    for l in range(1, l_max + 1):
        prev = roots[l - 1]
        for n in range(total - l):
            roots[l, n] = brentq(lambda x: spherical_jn(l, x), prev[n], prev[n + 1],
                                 xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return roots[:, :n_roots].copy()


@functools.lru_cache(maxsize=None)
def _sbf_norms(l_max: int, n_roots: int, c: float) -> np.ndarray:
    z = spherical_bessel_roots(l_max, n_roots)
    ls = np.arange(l_max + 1)[:, None]
    return np.sqrt(2.0 / (c ** 3 * spherical_jn(ls + 1, z) ** 2))


def zonal_harmonic(l: int, theta) -> np.ndarray:
    return math.sqrt((2 * l + 1) / (4 * math.pi)) * eval_legendre(l, np.cos(theta))


def sbf(r, theta, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    c = cfg.cutoff
    r = _check_r(r, c)
    theta = np.asarray(theta, dtype=float)
    z = spherical_bessel_roots(cfg.l_sbf_max, cfg.n_sbf_radial)
    norms = _sbf_norms(cfg.l_sbf_max, cfg.n_sbf_radial, c)
    parts = []
    for l in range(cfg.l_sbf_max + 1):
        radial = norms[l] * spherical_jn(l, z[l] * r[..., None] / c)
        parts.append(radial * zonal_harmonic(l, theta)[..., None])
    return np.concatenate(parts, axis=-1)


def rbf(r, cfg: BasisConfig = BasisConfig()) -> np.ndarray:
    r = _check_r(r, cfg.cutoff)
    mu = cfg.cutoff * np.arange(1, cfg.n_rbf + 1) / cfg.n_rbf
    return np.exp(-cfg.rbf_gamma * (r[..., None] - mu) ** 2)
