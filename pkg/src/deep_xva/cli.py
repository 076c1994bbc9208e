"""Command-line runner: ``deep-xva <command> --config <path> [--out <dir>]``.

Commands train or load the clean-value solvers named in the configuration
and write CSV artifacts plus a ``manifest.json`` to the output directory.
Trained solutions are saved next to the CSVs and reused by later commands run
with the same configuration bytes.

Exit status: 0 success, 1 a ``validate`` check failed, 2 configuration error,
3 runtime error (divergence, missing artifacts, busy output directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsde import TrainingDiverged, trained_from_bytes, trained_to_bytes
from .config import ClaimSpec, ConfigError, ExperimentConfig, parse_config
from .market import derive_seed
from .oracles import bs_call, forward_exposures, fva_by_discounting, mc_price
from .xva import (Adjustment, ClaimSolution, CollateralSpec, XvaRates, XvaSolution, adjustment_mc, clean_claim_problem,
                  collateral, exposure_profile, outer_paths, portfolio_paths, sensitivities, solve_xva,
                  train_claims, xva_paths, xva_problem)

log = logging.getLogger(__name__)

COMMANDS = ("train-clean", "exposure", "xva-mc", "xva-bsde", "sensitivities", "collateral", "validate")
EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
LOCK_NAME = ".deep-xva.lock"
SOLUTION_SUFFIX = ".dxbs"


class RunError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    files: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    passed: bool = True

    def to_json(self) -> str:
        return json.dumps({"command": self.command, "config_hash": self.config_hash, "files": self.files,
                           "timings": self.timings, "diagnostics": self.diagnostics, "passed": self.passed},
                          indent=2, sort_keys=True)


# -- persistence -------------------------------------------------------------

def save_solution(solution, path, config_hash: str = "") -> None:
    """Write a claim or xVA solution; the header carries what is needed to rebuild it."""
    if isinstance(solution, XvaSolution):
        extra = {"type": "xva", "control_input": solution.control_input,
                 "framework": {"rates": solution.rates.to_dict(),
                               "collateral": {"receiving_threshold": solution.spec.receiving_threshold,
                                              "posting_threshold": solution.spec.posting_threshold,
                                              "enabled": solution.spec.enabled}},
                 "dim": solution.trained.nets.dims[-1]}
    elif isinstance(solution, ClaimSolution):
        spec = solution.spec
        if not isinstance(spec, ClaimSpec) or solution.rates is None:
            raise ValueError("claim solution needs its ClaimSpec and rates to be saved")
        extra = {"type": "claim", "claim": spec.to_dict(), "rates": solution.rates.to_dict(),
                 "dim": solution.trained.nets.dims[-1]}
    else:
        raise TypeError(f"cannot save {type(solution).__name__}")
    extra["config_hash"] = config_hash
    blob = trained_to_bytes(solution.trained, extra)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_solution(path, claims: list[ClaimSolution] | None = None):
    """Inverse of :func:`save_solution`. xVA solutions need the clean claim solutions."""
    trained, extra = trained_from_bytes(Path(path).read_bytes())
    kind = extra.get("type")
    if kind == "claim":
        spec = ClaimSpec.from_dict(extra["claim"])
        rates = XvaRates.from_dict(extra["rates"])
        claim = spec.build()
        problem = clean_claim_problem(claim, rates, dim=extra["dim"])
        return ClaimSolution(claim, problem, trained, rates, spec, extra.get("config_hash", ""))
    if kind == "xva":
        if claims is None:
            raise ValueError("loading an xVA solution requires the clean claim solutions")
        fw = extra["framework"]
        rates = XvaRates.from_dict(fw["rates"])
        spec = CollateralSpec(**fw["collateral"])
        problem = xva_problem(claims, rates, spec, extra["dim"], extra["control_input"])
        return XvaSolution(trained, problem, rates, spec, extra["control_input"],
                           config_hash=extra.get("config_hash", ""))
    raise ValueError("file does not hold a claim or xVA solution")


# -- CSV ---------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# -- pipeline ----------------------------------------------------------------

class _Run:
    def __init__(self, config: ExperimentConfig, out: Path, command: str):
        self.config = config
        self.out = out
        self.manifest = RunManifest(command, config.source_hash)
        self.model = config.market_model()
        self.grid = config.grid()
        self.rates = config.xva_rates()
        self.spec = config.collateral_spec()
        self._claims: list[ClaimSolution] | None = None
        self._outer = None

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        yield
        self.manifest.timings[name] = round(time.perf_counter() - t0, 6)

    def emit(self, name: str, header, rows):
        write_csv(self.out / name, header, rows)
        if name not in self.manifest.files:
            self.manifest.files.append(name)

    def claim_path(self, spec: ClaimSpec) -> Path:
        return self.out / f"claim_{spec.label}{SOLUTION_SUFFIX}"

    def claims(self, force_train: bool = False) -> list[ClaimSolution]:
        if self._claims is not None:
            return self._claims
        specs = self.config.claims
        cached = [self.claim_path(s) for s in specs]
        if not force_train and all(p.exists() for p in cached):
            loaded = [load_solution(p) for p in cached]
            if all(s.config_hash == self.config.source_hash for s in loaded):
                log.info("reusing %d trained claim solutions", len(loaded))
                self._claims = loaded
                for p in cached:
                    self._list(p.name)
                return loaded
        with self.phase("train_clean"):
            sols = train_claims(self.config.built_claims(), self.model, self.rates, self.grid,
                                self.config.solver_config())
        for spec, sol in zip(specs, sols):
            sol.spec = spec
            if self.config.outputs["save_solutions"]:
                save_solution(sol, self.claim_path(spec), self.config.source_hash)
                self._list(self.claim_path(spec).name)
        self._claims = sols
        return sols

    def _list(self, name):
        if name not in self.manifest.files:
            self.manifest.files.append(name)

    def outer(self):
        if self._outer is None:
            t = self.config.training
            self._outer = outer_paths(self.model, self.grid, t["outer_paths"], t["outer_seed"],
                                      self.config.market["scheme"])
        return self._outer

    # -- commands ------------------------------------------------------------

    def train_clean(self):
        sols = self.claims(force_train=True)
        rows = []
        for spec, sol in zip(self.config.claims, sols):
            tr = sol.trained
            rows.append([spec.label, tr.xi, tr.xi if tr.xi_sgd is None else tr.xi_sgd, tr.validation_loss,
                         tr.best_iteration])
            self.manifest.diagnostics[spec.label] = {"xi": tr.xi, "validation_loss": tr.validation_loss,
                                                     "best_iteration": tr.best_iteration}
        self.emit("clean.csv", ["label", "xi", "xi_sgd", "validation_loss", "best_iteration"], rows)

    def exposure(self):
        sols = self.claims()
        with self.phase("outer_evaluation"):
            vp = portfolio_paths(sols, self.outer())
            prof = exposure_profile(vp, self.rates)
        self.emit("exposure.csv", ["t", "depe", "dene", "depe_se", "dene_se"],
                  zip(prof.times, prof.depe, prof.dene, prof.depe_se, prof.dene_se))
        self.manifest.diagnostics["depe_0"] = float(prof.depe[0])
        return prof

    def xva_mc(self):
        sols = self.claims()
        rows = []
        with self.phase("outer_evaluation"):
            for kind in Adjustment:
                est, se = adjustment_mc(sols, self.model, self.rates, self.spec, kind, self.grid,
                                        self.outer().count, 0, paths=self.outer())
                rows.append([kind.value, est, se])
                self.manifest.diagnostics[kind.value] = {"estimate": est, "stderr": se}
        self.emit("adjustments.csv", ["adjustment", "estimate", "stderr"], rows)

    def xva_bsde(self):
        sols = self.claims()
        with self.phase("train_xva"):
            sol = solve_xva(sols, self.model, self.rates, self.spec, self.grid, self.config.solver_config(xva=True),
                            paths=self.outer(), control_input=self.config.network["xva_input"],
                            training=self.config.training["xva_training"])
        vp = xva_paths(sol, self.outer())
        n = vp.count
        self.emit("xva.csv", ["t", "xva_mean", "xva_se"],
                  zip(self.grid.nodes, vp.values.mean(axis=0), vp.values.std(axis=0, ddof=1) / np.sqrt(n)))
        if self.config.outputs["save_solutions"]:
            save_solution(sol, self.out / f"xva{SOLUTION_SUFFIX}", self.config.source_hash)
            self._list(f"xva{SOLUTION_SUFFIX}")
        self.manifest.diagnostics["xva"] = {"gamma": sol.adjustment,
                                            "validation_loss": sol.trained.validation_loss,
                                            "best_iteration": sol.trained.best_iteration}
        return sol

    def sensitivities(self):
        sols = self.claims()
        paths = self.outer()
        with self.phase("sensitivities"):
            per_claim = [sensitivities(s, paths, self.model, gamma=True) for s in sols]
            deltas = sum(p.delta for p in per_claim)
            gammas = sum(p.gamma for p in per_claim)
        n = paths.count
        rows = []
        idx = np.arange(self.model.dim)
        g_diag = gammas[..., idx, idx]
        for k, t in enumerate(self.grid.nodes[:-1]):
            for i in range(self.model.dim):
                col = deltas[:, k, i]
                rows.append([t, i, col.mean(), col.std(ddof=1) / np.sqrt(n), g_diag[:, k, i].mean()])
        self.emit("sensitivities.csv", ["t", "asset", "delta_mean", "delta_se", "gamma_mean"], rows)
        self.manifest.diagnostics["delta_0"] = [float(x) for x in deltas[:, 0].mean(axis=0)]

    def collateral(self):
        sols = self.claims()
        paths = self.outer()
        count = min(self.config.outputs["collateral_paths"], paths.count)
        vp = portfolio_paths(sols, paths)
        v = vp.values[:count]
        c = collateral(self.spec, v)
        rows = [[p, t, v[p, k], c[p, k], v[p, k] - c[p, k]]
                for p in range(count) for k, t in enumerate(self.grid.nodes)]
        self.emit("collateral.csv", ["path", "t", "v", "c", "v_minus_c"], rows)

    def validate(self):
        """Oracle cross-checks for the configured claims; one row per check."""
        sols = self.claims()
        checks = []
        m, r, T = self.model, self.rates, self.grid.horizon
        constant_r = len(r.r.values) == 1 and np.allclose(m.rates, r.r.values[0])
        rf = float(r.r.values[0])
        for spec, sol in zip(self.config.claims, sols):
            ref = tol = None
            if spec.kind == "forward" and constant_r:
                ref = spec.position * (m.s0[spec.asset] - spec.strike * np.exp(-rf * T))
                tol = 0.05 * max(1.0, abs(spec.position))
            elif spec.kind == "call" and constant_r:
                ref = spec.position * bs_call(m.s0[spec.asset], spec.strike, rf, m.vols[spec.asset], T).value
                tol = 0.0025 * abs(ref) + 1e-3
            elif spec.kind == "basket_call" and constant_r:
                oracle = mc_price(m, lambda s: np.maximum(s.sum(axis=1) - s.shape[1] * spec.strike, 0.0),
                                  rf, T, 100_000, derive_seed(self.config.training["seed"], 600))
                ref = spec.position * oracle.value
                tol = abs(spec.position) * (oracle.interval[1] - oracle.value) + 0.0025 * abs(ref)
            if ref is not None:
                checks.append([f"price:{spec.label}", sol.trained.xi, ref, tol, abs(sol.trained.xi - ref) <= tol])
        single = len(self.config.claims) == 1 and m.dim == 1
        if single and constant_r and self.config.claims[0].kind == "forward" and self.config.claims[0].position == 1:
            spec = self.config.claims[0]
            prof = self.exposure()
            t = prof.times[1:]
            depe, dene = forward_exposures(m.s0[0], spec.strike, rf, m.vols[0], t, T)
            err = max(np.max(np.abs(prof.depe[1:] - depe)), np.max(np.abs(prof.dene[1:] - dene)))
            checks.append(["exposure:forward", err, 0.0, 0.30, err <= 0.30])
            no_default = max(r.intensity_bank.values + r.intensity_counterparty.values) == 0
            flat = [len(getattr(r, f).values) == 1 for f in ("funding_lending", "funding_borrowing")]
            if no_default and all(flat) and not self.spec.enabled \
                    and r.funding_lending.values == r.funding_borrowing.values \
                    and r.funding_lending.values[0] != rf:
                _, _, fva = fva_by_discounting(m.s0[0], spec.strike, rf, r.funding_lending.values[0], m.vols[0], T)
                gamma = self.xva_bsde().adjustment
                checks.append(["fva:forward", gamma, fva, 0.002, abs(gamma - fva) <= 0.002])
        self.emit("validation.csv", ["check", "value", "reference", "tolerance", "passed"], checks)
        self.manifest.passed = all(c[-1] for c in checks)
        self.manifest.diagnostics["checks"] = {c[0]: bool(c[-1]) for c in checks}


@contextmanager
def _locked(out: Path):
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"output directory {out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def run(config: ExperimentConfig, command: str, out=None) -> RunManifest:
    """Execute ``command`` and write its artifacts and ``manifest.json`` to the output directory."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    out = Path(out if out is not None else config.outputs["directory"])
    out.mkdir(parents=True, exist_ok=True)
    with _locked(out):
        job = _Run(config, out, command)
        with job.phase("total"):
            getattr(job, command.replace("-", "_"))()
        missing = [f for f in job.manifest.files if not (out / f).exists()]
        if missing:
            raise RunError(f"artifacts missing after run: {missing}")
        (out / "manifest.json").write_text(job.manifest.to_json())
    return job.manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="deep-xva", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment INI file")
    parser.add_argument("--out", default=None, help="output directory (overrides [outputs] directory)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(config, args.command, args.out)
    except (TrainingDiverged, RunError, OSError, ValueError, RuntimeError) as exc:
        print(f"deep-xva {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(manifest.to_json())
    return EXIT_OK if manifest.passed else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
