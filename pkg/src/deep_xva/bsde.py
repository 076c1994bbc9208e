"""Deep BSDE solver: per-time-step control networks trained on the terminal mismatch.

The backward equation ``Y_t = g(X_T) + int h ds - int Z dW`` is stepped
forward as ``Y_{n+1} = Y_n - h(t_n, X_n, Y_n, Z_n) dt + Z_n . dW_n`` with
``Y_0 = xi`` and ``Z_n = phi_n(input_n)``; ``xi`` and the networks minimise
the mean squared terminal error.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .market import MarketModel, PathBatch, TimeGrid, derive_seed, simulate
from .neural import (AdamConfig, AdamState, NetworkParams, Workspace, adam_step, backward, forward,
                     init_network, network_from_bytes, network_to_bytes)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
CONTAINER_MAGIC = b"DXBS"
CONTAINER_VERSION = 1

# driver(t, x_n, aux_n, y, z) -> (h, dh/dy, dh/dz); dh/dz may be None when h ignores z
Driver = Callable[[float, np.ndarray, "np.ndarray | None", np.ndarray, np.ndarray],
                  tuple[np.ndarray, "np.ndarray | float", "np.ndarray | None"]]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss!r})")
        self.iteration = iteration
        self.loss = loss


@dataclass
class BsdeProblem:
    """Driver, terminal condition and control parametrization of one BSDE.

    ``augment`` maps a path batch to per-node auxiliary quantities of shape
    (paths, N+1, m) that the driver, terminal and control input may use (the
    xVA equation reads the clean portfolio value from there).
    ``control_input`` maps (states, aux) to network inputs of shape
    (N, paths, input_dim); by default the asset state is used.
    ``input_moments`` gives per-step (shift, scale) of the control inputs for
    standardization; when absent they are estimated once on a pilot batch.
    """

    driver: Driver
    terminal: Callable[[np.ndarray, "np.ndarray | None"], np.ndarray]
    control_dim: int
    input_dim: int | None = None
    control_input: Callable | None = None
    augment: Callable[[PathBatch], np.ndarray] | None = None
    input_moments: Callable[[TimeGrid], tuple[np.ndarray, np.ndarray]] | None = None

    def __post_init__(self):
        if self.input_dim is None:
            self.input_dim = self.control_dim

    def inputs(self, paths: PathBatch, aux) -> np.ndarray:
        if self.control_input is not None:
            return self.control_input(paths.states, aux)
        return np.swapaxes(paths.states[:, :-1], 0, 1)

    def aux_for(self, paths: PathBatch):
        return None if self.augment is None else self.augment(paths)


OUTPUT_SCALINGS = ("payoff", "none")


@dataclass
class SolverConfig:
    batch_size: int = 64
    iterations: int = 4000
    hidden: tuple[int, ...] = (21, 21)
    adam: AdamConfig = field(default_factory=AdamConfig)
    validation_size: int | None = None       # default 4 * batch_size
    validate_every: int = 50
    seed: int = 0
    scheme: str = "exact"
    xi_init: str = "uniform"                 # "uniform" or "pilot"
    xi_bracket: tuple[float, float] = (0.0, 1.0)
    pilot_size: int = 4096
    xi_polish: int = 0                       # fresh paths for the final xi refit, 0 = off
    output_scaling: str = "payoff"           # "payoff" or "none"

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if self.output_scaling not in OUTPUT_SCALINGS:
            raise ValueError(f"output_scaling must be one of {OUTPUT_SCALINGS}")
        if self.xi_polish < 0:
            raise ValueError("xi_polish must be nonnegative")


@dataclass
class TrainedBsde:
    grid: TimeGrid
    xi: float
    nets: NetworkParams                      # stacked, one network per step n = 0..N-1
    loss_history: np.ndarray = field(default_factory=lambda: np.empty(0))
    validation_history: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int = -1
    validation_loss: float = float("nan")
    xi_sgd: float | None = None              # xi before the optional polish step

    @property
    def networks(self) -> list[NetworkParams]:
        return [self.nets[n] for n in range(len(self.nets))]


@dataclass
class ValuePaths:
    grid: TimeGrid
    values: np.ndarray      # (paths, N+1)
    controls: np.ndarray    # (paths, N, d)

    @property
    def count(self) -> int:
        return self.values.shape[0]


@dataclass
class _Rollout:
    values: np.ndarray
    controls: np.ndarray        # (N, B, d)
    cache: object
    dh_dy: list
    dh_dz: list


def _integrate(problem: BsdeProblem, paths: PathBatch, aux, xi, Z, noise):
    """Y recursion for given controls and precomputed Z_n . dW_n, shape (N+1, B)."""
    grid = paths.grid
    N, dt, t = grid.steps, grid.dt, grid.nodes
    Y = np.empty((N + 1, paths.count))
    Y[0] = xi
    dh_dy, dh_dz = [], []
    for n in range(N):
        aux_n = None if aux is None else aux[:, n]
        h, hy, hz = problem.driver(t[n], paths.states[:, n], aux_n, Y[n], Z[n])
        Y[n + 1] = Y[n] - h * dt + noise[n]
        dh_dy.append(hy)
        dh_dz.append(hz)
    return Y, dh_dy, dh_dz


def _rollout(problem: BsdeProblem, paths: PathBatch, aux, xi, nets, inputs=None, work=None) -> _Rollout:
    N = paths.grid.steps
    if nets.stack_shape != (N,):
        raise ValueError(f"expected {N} networks, got stack shape {nets.stack_shape}")
    if nets.dims[-1] != paths.dim or nets.dims[-1] != problem.control_dim:
        raise ValueError("network output dim must equal the Brownian dimension")
    if inputs is None:
        inputs = problem.inputs(paths, aux)
    Z, cache = forward(nets, inputs, work)
    noise = np.einsum("nbd,bnd->nb", Z, paths.increments)
    Y, dh_dy, dh_dz = _integrate(problem, paths, aux, xi, Z, noise)
    return _Rollout(Y.T, Z, cache, dh_dy, dh_dz)


def rollout(problem: BsdeProblem, paths: PathBatch, xi: float, nets, aux=None) -> ValuePaths:
    """Step the parametrized backward equation forward along ``paths``."""
    if isinstance(nets, (list, tuple)):
        nets = NetworkParams.stack(nets)
    if aux is None:
        aux = problem.aux_for(paths)
    r = _rollout(problem, paths, aux, xi, nets)
    return ValuePaths(paths.grid, r.values, np.swapaxes(r.controls, 0, 1))


def loss(terminal_values, targets) -> float:
    """Mean squared terminal mismatch."""
    y = np.asarray(terminal_values, dtype=float)
    g = np.asarray(targets, dtype=float)
    if y.shape != g.shape:
        raise ValueError("terminal values and targets differ in length")
    if y.size == 0:
        raise ValueError("empty batch")
    return float(np.mean((g - y) ** 2))


def loss_and_gradients(problem: BsdeProblem, paths: PathBatch, aux, xi: float, nets: NetworkParams,
                       inputs=None, work: Workspace | None = None):
    """Loss, d loss / d xi and d loss / d (weights, biases) through the unrolled recursion."""
    r = _rollout(problem, paths, aux, xi, nets, inputs, work)
    N, dt = paths.grid.steps, paths.grid.dt
    target = problem.terminal(paths.states[:, -1], None if aux is None else aux[:, -1])
    resid = target - r.values[:, -1]
    value = float(np.mean(resid**2))
    gY = -2.0 * resid / paths.count
    gZ = np.empty_like(r.controls)
    for n in range(N - 1, -1, -1):
        dW = paths.increments[:, n]
        hz = r.dh_dz[n]
        gZ[n] = gY[:, None] * (dW if hz is None else dW - hz * dt)
        gY = gY * (1.0 - r.dh_dy[n] * dt)
    gW, gb = backward(nets, r.cache, gZ, work)
    return value, float(gY.sum()), gW, gb, r


def _standardization(problem: BsdeProblem, model, grid, config) -> tuple[np.ndarray, np.ndarray]:
    if problem.input_moments is not None:
        shift, scale = problem.input_moments(grid)
    else:
        pilot = simulate(model, grid, config.pilot_size, derive_seed(config.seed, 3), config.scheme)
        x = problem.inputs(pilot, problem.aux_for(pilot))
        shift, scale = x.mean(axis=1), x.std(axis=1)
    shift = np.asarray(shift, dtype=float).reshape(grid.steps, problem.input_dim)
    scale = np.asarray(scale, dtype=float).reshape(grid.steps, problem.input_dim)
    # degenerate inputs (e.g. the deterministic state at t_0) keep unit scale
    scale = np.where(scale > 1e-8 * (1.0 + np.abs(shift)), scale, 1.0)
    return shift, scale


def _output_scale(problem, model, grid, config) -> float:
    """Typical control size std(g) / sqrt(T d) from the pilot batch, 1 when g is degenerate.

    The per-step networks then learn O(1) outputs whatever the notional,
    which the fixed Adam step size needs to resolve the hedge accurately.
    """
    if config.output_scaling == "none":
        return 1.0
    pilot = simulate(model, grid, config.pilot_size, derive_seed(config.seed, 3), config.scheme)
    aux = problem.aux_for(pilot)
    spread = float(np.std(problem.terminal(pilot.states[:, -1], None if aux is None else aux[:, -1])))
    scale = spread / np.sqrt(grid.horizon * problem.control_dim)
    return scale if scale > 1e-12 else 1.0


def _pilot_xi(problem, model, grid, config, nets) -> float:
    """xi matching the pilot-batch mean payoff with zero controls (secant on xi)."""
    pilot = simulate(model, grid, config.pilot_size, derive_seed(config.seed, 3), config.scheme)
    aux = problem.aux_for(pilot)
    zero = nets.copy()
    for a in zero.arrays():
        a[...] = 0.0
    target = float(np.mean(problem.terminal(pilot.states[:, -1], None if aux is None else aux[:, -1])))
    y0 = float(np.mean(_rollout(problem, pilot, aux, 0.0, zero).values[:, -1]))
    y1 = float(np.mean(_rollout(problem, pilot, aux, 1.0, zero).values[:, -1]))
    slope = y1 - y0
    return (target - y0) / slope if abs(slope) > 1e-12 else target


def fit(problem: BsdeProblem, grid: TimeGrid, config: SolverConfig, draw_batch, validation,
        nets: NetworkParams, xi: float) -> TrainedBsde:
    """Adam on (xi, nets); ``draw_batch(it)`` returns (PathBatch, aux) for iteration ``it``.

    ``validation`` is a fixed (PathBatch, aux) scored every ``validate_every``
    iterations and after the last one; the best-scoring parameters are returned.
    """
    adam_cfg = AdamConfig(**{**config.adam.__dict__, "total_steps": config.adam.total_steps
                             or config.iterations})
    xi_arr = np.array([xi], dtype=float)
    params = [xi_arr, *nets.arrays()]
    state = AdamState.zeros_like(params, adam_cfg)
    val_paths, val_aux = validation
    val_inputs = problem.inputs(val_paths, val_aux)
    val_target = problem.terminal(val_paths.states[:, -1], None if val_aux is None else val_aux[:, -1])

    def score(xi_value, candidate):
        r = _rollout(problem, val_paths, val_aux, xi_value, candidate, val_inputs, val_work)
        return loss(r.values[:, -1], val_target)

    work, val_work = Workspace(), Workspace()
    history = np.empty(config.iterations)
    val_hist: list[tuple[int, float]] = []
    best = (np.inf, -1, float(xi_arr[0]), nets.copy())
    for it in range(config.iterations):
        paths, aux = draw_batch(it)
        value, g_xi, gW, gb, _ = loss_and_gradients(problem, paths, aux, float(xi_arr[0]), nets, work=work)
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise TrainingDiverged(it, value)
        history[it] = value
        adam_step(state, params, [np.array([g_xi]), *gW, *gb])
        done = it + 1
        if done % config.validate_every == 0 or done == config.iterations:
            v = score(float(xi_arr[0]), nets)
            val_hist.append((done, v))
            if v < best[0]:
                best = (v, done, float(xi_arr[0]), nets.copy())
            log.debug("iter %d loss %.6g val %.6g xi %.6f", done, value, v, xi_arr[0])
    v, best_it, best_xi, best_nets = best
    return TrainedBsde(grid, best_xi, best_nets, history, val_hist, best_it, v)


def _xi_gradient_terms(problem, paths, aux, xi, Z, noise):
    """Sum over paths of resid * dY_N/dxi, the xi-gradient of the loss up to -2/B."""
    Y, dh_dy, _ = _integrate(problem, paths, aux, xi, Z, noise)
    sens = np.ones(paths.count)
    for hy in dh_dy:
        sens = sens * (1.0 - hy * paths.grid.dt)
    target = problem.terminal(paths.states[:, -1], None if aux is None else aux[:, -1])
    return float(np.sum((target - Y[-1]) * sens))


def polish_xi(problem: BsdeProblem, model, trained: TrainedBsde, count: int, seed: int,
              scheme: str = "exact", chunk: int = 1024) -> float:
    """Refit xi alone on ``count`` fresh paths with the trained controls frozen.

    The loss is minimised in xi by one secant step on its exact gradient,
    which is exact when the driver is affine in y and a second-order
    approximation otherwise. The result has Monte Carlo error of order
    sqrt(terminal loss / count), far below the SGD noise left in xi.
    """
    if count < 2:
        raise ValueError("polish needs at least two paths")
    grid = trained.grid
    xi0 = trained.xi
    xi1 = xi0 + 0.01 * (1.0 + abs(xi0))
    g0 = g1 = 0.0
    work = Workspace()
    for first in range(0, count, chunk):
        paths = simulate(model, grid, min(chunk, count - first), seed, scheme, first_path=first)
        aux = problem.aux_for(paths)
        Z, _ = forward(trained.nets, problem.inputs(paths, aux), work)
        noise = np.einsum("nbd,bnd->nb", Z, paths.increments)
        g0 += _xi_gradient_terms(problem, paths, aux, xi0, Z, noise)
        g1 += _xi_gradient_terms(problem, paths, aux, xi1, Z, noise)
    if g0 == g1:
        return xi0
    return xi0 - g0 * (xi1 - xi0) / (g1 - g0)


def init_parameters(problem: BsdeProblem, model, grid: TimeGrid, config: SolverConfig):
    dims = (problem.input_dim, *config.hidden, problem.control_dim)
    nets = init_network(dims, derive_seed(config.seed, 4) % (1 << 63), stack=grid.steps)
    nets.shift[...], nets.scale[...] = _standardization(problem, model, grid, config)
    nets.out_scale[...] = _output_scale(problem, model, grid, config)
    # controls start at exactly zero, so the first rollout is the deterministic
    # recursion from xi and early steps are not spent undoing random outputs
    nets.weights[-1][...] = 0.0
    if config.xi_init == "pilot":
        xi = _pilot_xi(problem, model, grid, config, nets)
    elif config.xi_init == "uniform":
        lo, hi = config.xi_bracket
        xi = float(np.random.default_rng(derive_seed(config.seed, 5) % (1 << 63)).uniform(lo, hi))
    else:
        raise ValueError(f"unknown xi_init {config.xi_init!r}")
    return nets, xi


def train(problem: BsdeProblem, model: MarketModel, grid: TimeGrid, config: SolverConfig) -> TrainedBsde:
    """Fresh paths every iteration; best parameters on a held-out batch of 4L paths."""
    nets, xi = init_parameters(problem, model, grid, config)

    def draw(it):
        paths = simulate(model, grid, config.batch_size, derive_seed(config.seed, 1, it), config.scheme)
        return paths, problem.aux_for(paths)

    n_val = config.validation_size or 4 * config.batch_size
    val_paths = simulate(model, grid, n_val, derive_seed(config.seed, 2), config.scheme)
    trained = fit(problem, grid, config, draw, (val_paths, problem.aux_for(val_paths)), nets, xi)
    if config.xi_polish:
        trained.xi_sgd = trained.xi
        trained.xi = polish_xi(problem, model, trained, config.xi_polish, derive_seed(config.seed, 6),
                               config.scheme)
    return trained


def evaluate(trained: TrainedBsde, problem: BsdeProblem, paths: PathBatch, aux=None) -> ValuePaths:
    """Roll out frozen (xi*, rho*) on a new path batch."""
    if paths.grid != trained.grid:
        raise ValueError("path grid does not match the trained grid")
    return rollout(problem, paths, trained.xi, trained.nets, aux)


# -- serialization -----------------------------------------------------------

def trained_to_bytes(trained: TrainedBsde, extra: dict | None = None) -> bytes:
    header = {
        "kind": "trained_bsde",
        "grid": {"horizon": trained.grid.horizon.hex(), "steps": trained.grid.steps},
        "dims": list(trained.nets.dims),
        "xi": trained.xi.hex(),
        "best_iteration": trained.best_iteration,
        "validation_loss": float(trained.validation_loss).hex(),
        "validation_history": [[i, float(v).hex()] for i, v in trained.validation_history],
        "loss_history": [float(v).hex() for v in trained.loss_history],
        "networks": len(trained.nets),
        "xi_sgd": None if trained.xi_sgd is None else float(trained.xi_sgd).hex(),
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode()
    blob = (CONTAINER_MAGIC + struct.pack("<II", CONTAINER_VERSION, len(head)) + head
            + b"".join(network_to_bytes(net) for net in trained.networks))
    return blob + struct.pack("<I", zlib.crc32(blob))


def trained_from_bytes(blob: bytes) -> tuple[TrainedBsde, dict]:
    if blob[:4] != CONTAINER_MAGIC or len(blob) < 16:
        raise ValueError("not a trained-solution file (bad magic)")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"incompatible solution format version {version}, expected {CONTAINER_VERSION}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(blob[:-4]):
        raise ValueError("solution checksum mismatch")
    try:
        header = json.loads(blob[12:12 + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError("corrupted solution header") from exc
    grid = TimeGrid(float.fromhex(header["grid"]["horizon"]), header["grid"]["steps"])
    offset = 12 + head_len
    nets = []
    for _ in range(header["networks"]):
        net, used = network_from_bytes(blob[offset:])
        nets.append(net)
        offset += used
    if offset != len(blob) - 4 or list(nets[0].dims) != header["dims"]:
        raise ValueError("solution payload does not match its header")
    trained = TrainedBsde(
        grid, float.fromhex(header["xi"]), NetworkParams.stack(nets),
        np.array([float.fromhex(v) for v in header["loss_history"]]),
        [(i, float.fromhex(v)) for i, v in header["validation_history"]],
        header["best_iteration"], float.fromhex(header["validation_loss"]),
        None if header.get("xi_sgd") is None else float.fromhex(header["xi_sgd"]))
    return trained, header.get("extra", {})


def save_trained(trained: TrainedBsde, path, extra: dict | None = None) -> None:
    blob = trained_to_bytes(trained, extra)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_trained(path) -> tuple[TrainedBsde, dict]:
    with open(path, "rb") as fh:
        return trained_from_bytes(fh.read())
