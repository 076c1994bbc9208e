"""Closed-form and brute-force references used to validate the solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .market import MarketModel, build_time_grid, derive_seed, simulate_exact

Z95 = float(ndtri(0.975))


@dataclass(frozen=True)
class OraclePrice:
    value: float
    stderr: float = 0.0

    @property
    def interval(self) -> tuple[float, float]:
        return self.value - Z95 * self.stderr, self.value + Z95 * self.stderr


def bs_call(s: float, K: float, r: float, sigma: float, tau: float) -> OraclePrice:
    if s <= 0 or K <= 0:
        raise ValueError("spot and strike must be positive")
    if tau < 0 or sigma < 0:
        raise ValueError("tau and sigma must be nonnegative")
    disc_k = K * np.exp(-r * tau)
    if tau == 0 or sigma == 0:
        return OraclePrice(max(s - disc_k, 0.0))
    vol = sigma * np.sqrt(tau)
    d1 = (np.log(s / K) + (r + 0.5 * sigma**2) * tau) / vol
    return OraclePrice(float(s * ndtr(d1) - disc_k * ndtr(d1 - vol)))


def bs_delta(s: float, K: float, r: float, sigma: float, tau: float) -> float:
    vol = sigma * np.sqrt(tau)
    return float(ndtr((np.log(s / K) + (r + 0.5 * sigma**2) * tau) / vol))


def forward_exposures(s0: float, K: float, r: float, sigma: float, s, T: float = 1.0):
    """Time-0 DEPE(s) and DENE(s) of a long forward ``S_T - K`` maturing at T.

    The clean value at s is ``S_s - K e^{-r(T-s)}``, so DEPE(s) is a call on
    S_s struck at ``K e^{-r(T-s)}``; at r = 0 this is the usual d1/d2 form.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0) or s0 <= 0 or K <= 0:
        raise ValueError("exposure date, spot and strike must be positive")
    vol = sigma * np.sqrt(s)
    d1 = (np.log(s0 / K) + r * (T - s) + r * s + 0.5 * sigma**2 * s) / vol
    d2 = d1 - vol
    disc_k = K * np.exp(-r * T)
    depe = s0 * ndtr(d1) - disc_k * ndtr(d2)
    dene = s0 * ndtr(-d1) - disc_k * ndtr(-d2)
    return depe, dene


def fva_by_discounting(s0: float, K: float, r: float, r_f: float, sigma: float | None, T: float):
    """Clean value, all-in value and FVA of an uncollateralized forward.

    The asset drifts at the collateral rate r; the all-in value discounts the
    payoff at the funding rate r_f instead.
    """
    clean = s0 - K * np.exp(-r * T)
    all_in = np.exp(-r_f * T) * (s0 * np.exp(r * T) - K)
    return float(clean), float(all_in), float(clean - all_in)


def mc_price(model: MarketModel, payoff, r: float, T: float, n: int, seed: int) -> OraclePrice:
    """Discounted mean payoff from single-step exact terminal sampling."""
    if n < 2:
        raise ValueError("need at least two samples")
    paths = simulate_exact(model, build_time_grid(T, 1), n, derive_seed(seed, 500))
    samples = np.exp(-r * T) * np.asarray(payoff(paths.states[:, -1]), dtype=float)
    return OraclePrice(float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n)))


def finite_diff_jacobian(f, x, h: float = 1e-5) -> np.ndarray:
    """Central differences, one column per input coordinate."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def constant_exposure_dva(v: float, recovery: float, intensity: float, r_tilde: float, T: float) -> float:
    """int_0^T (1-R) lambda v e^{-r~ u} du for a constant positive exposure v."""
    return (1 - recovery) * intensity * v * (-np.expm1(-r_tilde * T)) / r_tilde
