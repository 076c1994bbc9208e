"""Multi-asset geometric Brownian motion on a uniform time grid.

Paths are generated from counter-based Philox streams: path ``p`` of a batch
drawn with ``seed`` always consumes the same block of the stream, so it is
identical whether it is simulated alone or as part of a larger batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t


def build_time_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(float(T), int(N))


def cholesky_factor(corr: np.ndarray, tol: float = PIVOT_TOL) -> np.ndarray:
    """Lower-triangular factor of a correlation matrix.

    Positive-semidefinite inputs are accepted: a pivot within ``tol`` of zero
    (or slightly negative) is zeroed together with the rest of its column.
    """
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    if corr.shape != (d, d):
        raise ValueError("correlation must be square")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("correlation must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ValueError("correlation must have unit diagonal")
    L = np.zeros_like(corr)
    for j in range(d):
        pivot = corr[j, j] - L[j, :j] @ L[j, :j]
        if pivot < -tol:
            raise ValueError("correlation matrix is not positive semidefinite")
        if pivot <= tol:
            continue
        L[j, j] = np.sqrt(pivot)
        L[j + 1:, j] = (corr[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(frozen=True)
class MarketModel:
    """Correlated Black-Scholes assets ``dS^i = r^i S^i dt + sigma^i S^i dW^i``."""

    s0: np.ndarray
    rates: np.ndarray
    vols: np.ndarray
    correlation: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s0 = np.atleast_1d(np.asarray(self.s0, dtype=float))
        d = s0.size
        rates = np.broadcast_to(np.asarray(self.rates, dtype=float), (d,)).copy()
        vols = np.broadcast_to(np.asarray(self.vols, dtype=float), (d,)).copy()
        corr = np.asarray(self.correlation, dtype=float).reshape(d, d)
        if np.any(s0 <= 0):
            raise ValueError("initial prices must be strictly positive")
        if np.any(vols < 0):
            raise ValueError("volatilities must be nonnegative")
        for name, value in (("s0", s0), ("rates", rates), ("vols", vols), ("correlation", corr)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        chol = cholesky_factor(corr)
        chol.setflags(write=False)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def uncorrelated(cls, s0, rates, vols, dim: int | None = None) -> "MarketModel":
        d = dim if dim is not None else np.atleast_1d(s0).size
        s0 = np.broadcast_to(np.asarray(s0, dtype=float), (d,))
        return cls(s0, rates, vols, np.eye(d))

    @property
    def dim(self) -> int:
        return self.s0.size

    def marginal_moments(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation of S_t under the exact dynamics, shape (len(t), d)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
        mean = self.s0 * np.exp(self.rates * t)
        var = mean**2 * np.expm1(self.vols**2 * t)
        return mean, np.sqrt(var)


@dataclass(frozen=True)
class PathBatch:
    grid: TimeGrid
    states: np.ndarray       # (count, N+1, d)
    increments: np.ndarray   # (count, N, d), correlated Brownian increments
    seed: int
    first_path: int = 0

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def _blocks_per_path(steps: int, dim: int) -> int:
    return -(-steps * dim // 4)


def standard_normals(seed: int, first_path: int, count: int, steps: int, dim: int) -> np.ndarray:
    """Per-path Gaussian draws of shape (count, steps, dim).

    Path ``p`` reads the Philox blocks ``[p*B, (p+1)*B)`` of the stream keyed
    by ``seed`` and maps them through the inverse normal CDF.
    """
    blocks = _blocks_per_path(steps, dim)
    bitgen = np.random.Philox(key=int(seed) % (1 << 128))
    bitgen.advance(first_path * blocks)
    raw = bitgen.random_raw(count * blocks * 4).reshape(count, blocks * 4)[:, : steps * dim]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u).reshape(count, steps, dim)


def derive_seed(*parts: int) -> int:
    """Combine integers into a 128-bit Philox key."""
    words = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


def _correlated_increments(model, grid, count, seed, first_path):
    if count < 1:
        raise ValueError("count must be at least 1")
    z = standard_normals(seed, first_path, count, grid.steps, model.dim)
    return np.sqrt(grid.dt) * (z @ model.chol.T)


def simulate_euler(model: MarketModel, grid: TimeGrid, count: int, seed: int,
                   first_path: int = 0) -> PathBatch:
    dW = _correlated_increments(model, grid, count, seed, first_path)
    factors = 1.0 + model.rates * grid.dt + model.vols * dW
    states = np.empty((count, grid.steps + 1, model.dim))
    states[:, 0] = model.s0
    states[:, 1:] = model.s0 * np.cumprod(factors, axis=1)
    return PathBatch(grid, states, dW, seed, first_path)


def simulate_exact(model: MarketModel, grid: TimeGrid, count: int, seed: int,
                   first_path: int = 0) -> PathBatch:
    dW = _correlated_increments(model, grid, count, seed, first_path)
    log_steps = (model.rates - 0.5 * model.vols**2) * grid.dt + model.vols * dW
    states = np.empty((count, grid.steps + 1, model.dim))
    states[:, 0] = model.s0
    states[:, 1:] = model.s0 * np.exp(np.cumsum(log_steps, axis=1))
    return PathBatch(grid, states, dW, seed, first_path)


SCHEMES = {"exact": simulate_exact, "euler": simulate_euler}


def simulate(model, grid, count, seed, scheme="exact", first_path=0) -> PathBatch:
    try:
        fn = SCHEMES[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}") from None
    return fn(model, grid, count, seed, first_path)
