"""Valuation adjustments on top of the Deep BSDE solver.

Clean values of European claims are learned one claim at a time, summed into
a portfolio, passed through the collateral rule and then either integrated
against default intensities by outer Monte Carlo (CVA/DVA) or fed as the
forward input of a second BSDE for the full pre-default xVA, which also
captures the recursive funding term.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bsde import (BsdeProblem, SolverConfig, TrainedBsde, ValuePaths, evaluate, fit,
                   init_parameters, train, trained_from_bytes, trained_to_bytes)
from .market import MarketModel, PathBatch, TimeGrid, derive_seed, simulate
from .neural import jacobian


# -- deterministic rate curves -----------------------------------------------

@dataclass(frozen=True)
class Curve:
    """Piecewise-constant function of time: ``values[k]`` on ``[times[k], times[k+1])``."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times or self.times[0] != 0.0:
            raise ValueError("curve needs matching knots starting at t=0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("curve knots must be increasing")

    @classmethod
    def constant(cls, value: float) -> "Curve":
        return cls((0.0,), (float(value),))

    def __call__(self, t):
        if len(self.values) == 1:
            return self.values[0] if np.ndim(t) == 0 else np.full(np.shape(t), self.values[0])
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.asarray(self.values)[idx]

    def integral(self, t):
        """int_0^t of the curve."""
        knots = np.asarray(self.times)
        vals = np.asarray(self.values)
        t = np.asarray(t, dtype=float)
        widths = np.clip(t[..., None] - knots, 0.0, None)
        widths[..., :-1] = np.minimum(widths[..., :-1], np.diff(knots))
        return (widths * vals).sum(axis=-1)


def as_curve(x) -> Curve:
    return x if isinstance(x, Curve) else Curve.constant(x)


RATE_FIELDS = ("r", "funding_lending", "funding_borrowing", "collateral_lending",
               "collateral_borrowing", "intensity_bank", "intensity_counterparty")


@dataclass(frozen=True)
class XvaRates:
    """Deterministic rates, intensities and recoveries of the bank (B) and counterparty (C).

    Spreads default to zero (every rate falls back to ``r``); intensities to zero.
    """

    r: float | Curve
    funding_lending: float | Curve | None = None
    funding_borrowing: float | Curve | None = None
    collateral_lending: float | Curve | None = None
    collateral_borrowing: float | Curve | None = None
    intensity_bank: float | Curve = 0.0
    intensity_counterparty: float | Curve = 0.0
    recovery_bank: float = 0.0
    recovery_counterparty: float = 0.0

    def __post_init__(self):
        for name in RATE_FIELDS:
            value = getattr(self, name)
            object.__setattr__(self, name, as_curve(self.r if value is None else value))
        for name in ("intensity_bank", "intensity_counterparty"):
            if min(getattr(self, name).values) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("recovery_bank", "recovery_counterparty"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def r_tilde(self, t):
        return self.r(t) + self.intensity_bank(t) + self.intensity_counterparty(t)

    def discount_tilde(self, t):
        """exp(-int_0^t (r + lambda^B + lambda^C))."""
        return np.exp(-(self.r.integral(t) + self.intensity_bank.integral(t)
                        + self.intensity_counterparty.integral(t)))

    def discount(self, t):
        return np.exp(-self.r.integral(t))

    def to_dict(self) -> dict:
        out = {name: {"times": list(c.times), "values": list(c.values)}
               for name in RATE_FIELDS for c in [getattr(self, name)]}
        out["recovery_bank"] = self.recovery_bank
        out["recovery_counterparty"] = self.recovery_counterparty
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "XvaRates":
        kw = {k: Curve(tuple(v["times"]), tuple(v["values"])) if isinstance(v, dict) else v
              for k, v in data.items()}
        return cls(**kw)


# -- claims and collateral ---------------------------------------------------

@dataclass(frozen=True)
class EuropeanClaim:
    payoff: Callable[[np.ndarray], np.ndarray]   # (paths, d) -> (paths,)
    label: str = "claim"
    maturity: float | None = None

    def scaled(self, factor: float, label: str | None = None) -> "EuropeanClaim":
        payoff = self.payoff
        return replace(self, payoff=lambda s: factor * payoff(s), label=label or self.label)


def forward_claim(strike: float, asset: int = 0, label: str = "forward") -> EuropeanClaim:
    return EuropeanClaim(lambda s: s[:, asset] - strike, label)


def call_claim(strike: float, asset: int = 0, label: str = "call") -> EuropeanClaim:
    return EuropeanClaim(lambda s: np.maximum(s[:, asset] - strike, 0.0), label)


def basket_call_claim(strike: float, label: str = "basket_call") -> EuropeanClaim:
    """(sum_i S^i - d K)^+."""
    return EuropeanClaim(lambda s: np.maximum(s.sum(axis=1) - s.shape[1] * strike, 0.0), label)


@dataclass(frozen=True)
class CollateralSpec:
    receiving_threshold: float = 0.0
    posting_threshold: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if self.receiving_threshold < 0 or self.posting_threshold < 0:
            raise ValueError("collateral thresholds must be nonnegative")


NO_COLLATERAL = CollateralSpec()


def collateral(spec: CollateralSpec, v):
    """C(v) = (v - H_r)^+ - (v + H_p)^-, or 0 when collateral is disabled."""
    v = np.asarray(v, dtype=float)
    if not spec.enabled:
        return np.zeros_like(v)
    return np.maximum(v - spec.receiving_threshold, 0.0) - np.maximum(-(v + spec.posting_threshold), 0.0)


# -- clean values ------------------------------------------------------------

def clean_claim_problem(claim: EuropeanClaim, rates: XvaRates, model: MarketModel | None = None,
                        dim: int | None = None) -> BsdeProblem:
    """Clean-value BSDE: driver -r(t) y, terminal payoff, control fed by the asset state."""
    r = rates.r

    def driver(t, x, aux, y, z):
        rt = float(r(t))
        return -rt * y, -rt, None

    moments = None
    if model is not None:
        def moments(grid):
            return model.marginal_moments(grid.nodes[:-1])

    d = model.dim if model is not None else (dim or 1)
    return BsdeProblem(driver, lambda s, aux: claim.payoff(s), control_dim=d, input_moments=moments)


@dataclass
class ClaimSolution:
    claim: EuropeanClaim
    problem: BsdeProblem
    trained: TrainedBsde
    rates: XvaRates | None = None
    spec: object = None          # serializable claim description, when known
    config_hash: str = ""


def train_claims(claims: Sequence[EuropeanClaim], model: MarketModel, rates: XvaRates, grid: TimeGrid,
                 config: SolverConfig) -> list[ClaimSolution]:
    """Train one clean-value solver per claim, each with its own seed stream."""
    out = []
    for m, claim in enumerate(claims):
        problem = clean_claim_problem(claim, rates, model)
        cfg = replace(config, seed=derive_seed(config.seed, 100, m) % (1 << 63))
        out.append(ClaimSolution(claim, problem, train(problem, model, grid, cfg), rates))
    return out


def aggregate_portfolio(value_paths: Sequence[ValuePaths]) -> ValuePaths:
    if not value_paths:
        raise ValueError("no claim value paths to aggregate")
    first = value_paths[0]
    for vp in value_paths[1:]:
        if vp.grid != first.grid or vp.values.shape != first.values.shape \
                or vp.controls.shape != first.controls.shape:
            raise ValueError("claim value paths are on different grids or batches")
    return ValuePaths(first.grid, sum(vp.values for vp in value_paths),
                      sum(vp.controls for vp in value_paths))


def portfolio_paths(claims: Sequence[ClaimSolution], paths: PathBatch) -> ValuePaths:
    if not claims:
        return ValuePaths(paths.grid, np.zeros((paths.count, paths.grid.steps + 1)),
                          np.zeros((paths.count, paths.grid.steps, paths.dim)))
    return aggregate_portfolio([evaluate(c.trained, c.problem, paths) for c in claims])


# -- non-recursive adjustments (outer Monte Carlo) ---------------------------

class Adjustment(str, enum.Enum):
    CVA = "cva"
    DVA = "dva"
    BILATERAL = "bilateral"   # -CVA + DVA, pathwise


def cva_dva_integrand(rates: XvaRates, kind, t, v, c):
    """Discounted loss rate at time t for the CVA or DVA integral, anchored at t_0 = 0."""
    kind = Adjustment(kind)
    exposure = np.asarray(v, dtype=float) - np.asarray(c, dtype=float)
    disc = rates.discount_tilde(t)
    if kind is Adjustment.CVA:
        return (1 - rates.recovery_counterparty) * disc * np.maximum(-exposure, 0.0) * rates.intensity_counterparty(t)
    if kind is Adjustment.DVA:
        return (1 - rates.recovery_bank) * disc * np.maximum(exposure, 0.0) * rates.intensity_bank(t)
    return cva_dva_integrand(rates, "dva", t, v, c) - cva_dva_integrand(rates, "cva", t, v, c)


def adjustment_from_values(values: np.ndarray, grid: TimeGrid, rates: XvaRates, spec: CollateralSpec,
                           kind) -> tuple[float, float]:
    """Rectangle rule sum_{n<N} Phi(t_n, V_n) dt per path; mean and standard error."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != grid.steps + 1:
        raise ValueError("values must have shape (paths, N+1)")
    if values.shape[0] < 2:
        raise ValueError("need at least two outer paths")
    t = grid.nodes[:-1]
    v = values[:, :-1]
    per_path = cva_dva_integrand(rates, kind, t, v, collateral(spec, v)).sum(axis=1) * grid.dt
    return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(per_path.size))


def outer_paths(model: MarketModel, grid: TimeGrid, count: int, seed: int, scheme: str = "exact") -> PathBatch:
    return simulate(model, grid, count, derive_seed(seed, 900), scheme)


def adjustment_mc(claims: Sequence[ClaimSolution], model: MarketModel, rates: XvaRates, spec: CollateralSpec,
                  kind, grid: TimeGrid, P: int, seed: int, scheme: str = "exact",
                  paths: PathBatch | None = None) -> tuple[float, float]:
    """Outer Monte Carlo over P fresh paths of the learned clean portfolio."""
    if P < 2:
        raise ValueError("need at least two outer paths")
    for c in claims:
        if not isinstance(c.trained, TrainedBsde) or c.trained.best_iteration < 0:
            raise RuntimeError(f"claim {c.claim.label!r} has not been trained")
    if paths is None:
        paths = outer_paths(model, grid, P, seed, scheme)
    return adjustment_from_values(portfolio_paths(claims, paths).values, grid, rates, spec, kind)


# -- recursive xVA BSDE ------------------------------------------------------

def xva_driver(rates: XvaRates, t, v, c, x):
    """Pre-default xVA generator f(t, V, XVA) with collateral c = C(V)."""
    v, c, x = (np.asarray(a, dtype=float) for a in (v, c, x))
    r = rates.r(t)
    lam_b, lam_c = rates.intensity_bank(t), rates.intensity_counterparty(t)
    exposure = v - c
    funded = v - x - c
    return (-(1 - rates.recovery_counterparty) * np.maximum(-exposure, 0.0) * lam_c
            + (1 - rates.recovery_bank) * np.maximum(exposure, 0.0) * lam_b
            + (rates.funding_lending(t) - r) * np.maximum(funded, 0.0)
            - (rates.funding_borrowing(t) - r) * np.maximum(-funded, 0.0)
            + (rates.collateral_lending(t) - r) * np.maximum(c, 0.0)
            - (rates.collateral_borrowing(t) - r) * np.maximum(-c, 0.0)
            - (r + lam_c + lam_b) * x)


def _xva_driver_dx(rates: XvaRates, t, v, c, x):
    funded = v - x - c
    r = rates.r(t)
    return (-(rates.funding_lending(t) - r) * (funded > 0)
            - (rates.funding_borrowing(t) - r) * (funded < 0)
            - rates.r_tilde(t))


def xva_problem(claims: Sequence[ClaimSolution], rates: XvaRates, spec: CollateralSpec, dim: int,
                control_input: str = "value") -> BsdeProblem:
    """BSDE for the pre-default xVA with zero terminal value.

    Auxiliary per-node data: clean portfolio value and collateral. The control
    network sees the portfolio value (``"value"``) or the asset state (``"state"``).
    """
    if control_input not in ("value", "state"):
        raise ValueError(f"control_input must be 'value' or 'state', got {control_input!r}")

    def augment(paths):
        v = portfolio_paths(claims, paths).values
        return np.stack([v, collateral(spec, v)], axis=-1)

    def driver(t, s, aux, x, z):
        v, c = aux[:, 0], aux[:, 1]
        return xva_driver(rates, t, v, c, x), _xva_driver_dx(rates, t, v, c, x), None

    def terminal(s, aux):
        return np.zeros(s.shape[0])

    if control_input == "value":
        def inputs(states, aux):
            return np.swapaxes(aux[:, :-1, :1], 0, 1)
        return BsdeProblem(driver, terminal, control_dim=dim, input_dim=1, control_input=inputs,
                           augment=augment)
    return BsdeProblem(driver, terminal, control_dim=dim, input_dim=dim, augment=augment)


@dataclass
class XvaSolution:
    trained: TrainedBsde
    problem: BsdeProblem
    rates: XvaRates
    spec: CollateralSpec
    control_input: str = "value"
    outer: PathBatch | None = field(default=None, repr=False)
    config_hash: str = ""

    @property
    def adjustment(self) -> float:
        return self.trained.xi


XVA_TRAINING_MODES = ("fresh", "fixed")


def solve_xva(claims: Sequence[ClaimSolution], model: MarketModel, rates: XvaRates, spec: CollateralSpec,
              grid: TimeGrid, config: SolverConfig, P: int = 2048, outer_seed: int = 1,
              control_input: str = "value", paths: PathBatch | None = None,
              training: str = "fresh") -> XvaSolution:
    """Recursive xVA solve: fit (gamma, zeta) to the xVA BSDE driven by the learned portfolio.

    The P outer portfolio paths are scored with the full objective
    mean(XVA_N^2) every ``validate_every`` iterations and the best parameters
    are kept. With ``training="fresh"`` each iteration simulates
    ``config.batch_size`` new portfolio paths, so the P paths act as a
    held-out set; ``"fixed"`` instead draws minibatches from the P paths
    themselves, which lets the per-step networks memorize them when the
    control input is the scalar portfolio value.
    """
    if training not in XVA_TRAINING_MODES:
        raise ValueError(f"training must be one of {XVA_TRAINING_MODES}, got {training!r}")
    problem = xva_problem(claims, rates, spec, model.dim, control_input)
    if paths is None:
        paths = outer_paths(model, grid, P, outer_seed, config.scheme)
    aux = problem.aux_for(paths)
    shift_src = problem.inputs(paths, aux)
    problem.input_moments = lambda g: (shift_src.mean(axis=1), shift_src.std(axis=1))
    nets, _ = init_parameters(problem, model, grid, replace(config, xi_init="uniform", xi_bracket=(0.0, 0.0)))
    gamma0 = _xva_pilot(problem, paths, aux)

    if training == "fresh":
        def draw(it):
            sub = simulate(model, grid, config.batch_size, derive_seed(config.seed, 8, it), config.scheme)
            return sub, problem.aux_for(sub)
    else:
        rng = np.random.default_rng(derive_seed(config.seed, 7) % (1 << 63))
        batch = min(config.batch_size, paths.count)
        order: list[int] = []

        def draw(it):
            nonlocal order
            if len(order) < batch:
                order = list(rng.permutation(paths.count))
            idx = np.sort(order[:batch])
            order = order[batch:]
            sub = PathBatch(grid, paths.states[idx], paths.increments[idx], paths.seed)
            return sub, aux[idx]

    trained = fit(problem, grid, config, draw, (paths, aux), nets, gamma0)
    return XvaSolution(trained, problem, rates, spec, control_input, paths)


def _xva_pilot(problem: BsdeProblem, paths: PathBatch, aux) -> float:
    """Zero-control estimate of XVA_0: integrate the generator backward along each path."""
    grid = paths.grid
    x = np.zeros(paths.count)
    for n in range(grid.steps - 1, -1, -1):
        h, _, _ = problem.driver(grid.nodes[n], paths.states[:, n], aux[:, n], x, None)
        x = x + h * grid.dt
    return float(x.mean())


def xva_paths(solution: XvaSolution, paths: PathBatch) -> ValuePaths:
    return evaluate(solution.trained, solution.problem, paths)


# -- exposures, sensitivities, error bound -----------------------------------

@dataclass
class ExposureProfile:
    times: np.ndarray
    depe: np.ndarray
    dene: np.ndarray
    depe_se: np.ndarray
    dene_se: np.ndarray


def exposure_profile(value_paths: ValuePaths, rates: XvaRates) -> ExposureProfile:
    """Discounted expected positive / negative exposure per node with standard errors."""
    values = value_paths.values
    if values.shape[0] < 1:
        raise ValueError("no paths")
    t = value_paths.grid.nodes
    disc = rates.discount(t)
    pos = disc * np.maximum(values, 0.0)
    neg = -disc * np.maximum(-values, 0.0)
    n = values.shape[0]
    ddof = 1 if n > 1 else 0
    return ExposureProfile(t, pos.mean(axis=0), neg.mean(axis=0),
                           pos.std(axis=0, ddof=ddof) / np.sqrt(n), neg.std(axis=0, ddof=ddof) / np.sqrt(n))


class SingularDiffusion(ValueError):
    pass


@dataclass
class Sensitivities:
    delta: np.ndarray                # (paths, N, d)
    gamma: np.ndarray | None = None  # (paths, N, d, d)


def _diffusion_diag(paths: PathBatch, model: MarketModel) -> np.ndarray:
    diag = model.vols * paths.states[:, :-1]
    if np.any(diag == 0):
        raise SingularDiffusion("diffusion matrix is singular (zero price or zero volatility)")
    return diag


def sensitivities(solution, paths: PathBatch, model: MarketModel, gamma: bool = False,
                  claims: Sequence[ClaimSolution] | None = None) -> Sensitivities:
    """Pathwise deltas (and optionally gammas) from the learned controls.

    The stored increments are the correlated Brownian increments, so the
    control equals diag(sigma S) times the price gradient and
    delta = Z / (sigma S) componentwise. ``solution`` is a ClaimSolution or an
    XvaSolution; for the latter, gamma needs the underlying ``claims``.
    """
    diag = _diffusion_diag(paths, model)
    if isinstance(solution, XvaSolution):
        trained, problem = solution.trained, solution.problem
    else:
        trained, problem = solution.trained, solution.problem
    aux = problem.aux_for(paths)
    vp = evaluate(trained, problem, paths, aux)
    delta = vp.controls / diag
    if not gamma:
        return Sensitivities(delta)
    inputs = problem.inputs(paths, aux)                     # (N, B, k)
    J = jacobian(trained.nets, inputs)                      # (N, B, d, k)
    J = np.swapaxes(J, 0, 1)                                # (B, N, d, k)
    if isinstance(solution, XvaSolution) and solution.control_input == "value":
        if claims is None:
            raise ValueError("gamma of a value-driven xVA control needs the clean claims")
        port_delta = sum(sensitivities(c, paths, model).delta for c in claims)   # (B, N, d)
        J = J @ port_delta[..., None, :]                    # (B, N, d, d)
    g = J / diag[..., :, None]
    idx = np.arange(model.dim)
    g[..., idx, idx] -= vp.controls / (model.vols * paths.states[:, :-1] ** 2)
    return Sensitivities(delta, g)


def a_posteriori_bound(losses, dt: float, C: float = 1.0) -> float:
    """C * (dt + sum of terminal losses)^(1/2)."""
    losses = np.atleast_1d(np.asarray(losses, dtype=float))
    if np.any(losses < 0) or dt < 0:
        raise ValueError("losses and dt must be nonnegative")
    return float(C * np.sqrt(dt + losses.sum()))


# -- serialization -----------------------------------------------------------

def xva_solution_to_bytes(solution: XvaSolution) -> bytes:
    extra = {"framework": {"rates": solution.rates.to_dict(), "collateral": asdict(solution.spec)},
             "control_input": solution.control_input}
    return trained_to_bytes(solution.trained, extra)


def xva_solution_from_bytes(blob: bytes, claims: Sequence[ClaimSolution], dim: int) -> XvaSolution:
    trained, extra = trained_from_bytes(blob)
    if "framework" not in extra:
        raise ValueError("file does not contain an xVA solution")
    rates = XvaRates.from_dict(extra["framework"]["rates"])
    spec = CollateralSpec(**extra["framework"]["collateral"])
    problem = xva_problem(claims, rates, spec, dim, extra["control_input"])
    return XvaSolution(trained, problem, rates, spec, extra["control_input"])
