"""Experiment configuration: an INI file with named sections, validated in full.

Example::

    [market]
    s0 = 100
    vols = 0.25
    maturity = 1.0

    [claim:call]
    kind = call
    strike = 100

    [rates]
    r = 0.01

    [network]
    width = 21
    depth = 2

    [training]
    steps = 200
    batch_size = 64
    outer_paths = 2048
    iterations = 4000
    seed = 1
    outer_seed = 2

Every problem found is reported (not only the first) as ``section.key: message``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsde import OUTPUT_SCALINGS, SolverConfig
from .market import MarketModel, TimeGrid
from .neural import AdamConfig
from .xva import (XVA_TRAINING_MODES, CollateralSpec, EuropeanClaim, XvaRates, basket_call_claim, call_claim,
                  forward_claim)

CLAIM_KINDS = ("forward", "call", "basket_call")
CLAIM_PREFIX = "claim:"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    parse.__name__ = "one of " + "/".join(options)
    return parse


REQUIRED = object()
TYPE_NAMES = {float: "number", _int: "integer", _floats: "list of numbers", _bool: "boolean", str: "text"}

# section -> key -> (parser, default); REQUIRED marks mandatory keys
SCHEMA = {
    "market": {
        "s0": (_floats, REQUIRED),
        "vols": (_floats, REQUIRED),
        "maturity": (float, REQUIRED),
        "dim": (_int, None),
        "drift": (_floats, None),              # defaults to rates.r
        "correlation": (float, 0.0),           # common pairwise correlation
        "scheme": (_choice("exact", "euler"), "exact"),
    },
    "rates": {
        "r": (float, REQUIRED),
        "funding_lending": (float, None),
        "funding_borrowing": (float, None),
        "collateral_lending": (float, None),
        "collateral_borrowing": (float, None),
        "intensity_bank": (float, 0.0),
        "intensity_counterparty": (float, 0.0),
        "recovery_bank": (float, 0.0),
        "recovery_counterparty": (float, 0.0),
    },
    "collateral": {
        "enabled": (_bool, False),
        "receiving_threshold": (float, 0.0),
        "posting_threshold": (float, 0.0),
    },
    "network": {
        "width": (_int, REQUIRED),
        "depth": (_int, 2),
        "xva_width": (_int, None),             # defaults to width
        "xva_input": (_choice("value", "state"), "value"),
    },
    "training": {
        "steps": (_int, REQUIRED),
        "batch_size": (_int, REQUIRED),
        "outer_paths": (_int, REQUIRED),
        "iterations": (_int, REQUIRED),
        "seed": (_int, REQUIRED),
        "outer_seed": (_int, REQUIRED),
        "xva_iterations": (_int, None),        # defaults to iterations
        "learning_rate": (float, 5e-3),
        "decay_factor": (float, 0.2),
        "decay_points": (_floats, [0.6, 0.85]),
        "validate_every": (_int, 50),
        "validation_size": (_int, None),
        "xi_init": (_choice("pilot", "uniform"), "pilot"),
        "xi_low": (float, 0.0),
        "xi_high": (float, 1.0),
        "xi_polish": (_int, 0),
        "xva_training": (_choice(*XVA_TRAINING_MODES), "fresh"),
        "output_scaling": (_choice(*OUTPUT_SCALINGS), "payoff"),
    },
    "outputs": {
        "directory": (str, "deep_xva_out"),
        "save_solutions": (_bool, True),
        "collateral_paths": (_int, 16),
    },
}
CLAIM_SCHEMA = {
    "kind": (_choice(*CLAIM_KINDS), REQUIRED),
    "strike": (float, REQUIRED),
    "asset": (_int, 0),
    "position": (float, 1.0),
}
REQUIRED_SECTIONS = ("market", "rates", "network", "training")


@dataclass(frozen=True)
class ClaimSpec:
    label: str
    kind: str
    strike: float
    asset: int = 0
    position: float = 1.0

    def build(self) -> EuropeanClaim:
        if self.kind == "forward":
            claim = forward_claim(self.strike, self.asset, self.label)
        elif self.kind == "call":
            claim = call_claim(self.strike, self.asset, self.label)
        elif self.kind == "basket_call":
            claim = basket_call_claim(self.strike, self.label)
        else:
            raise ValueError(f"unknown claim kind {self.kind!r}")
        return claim if self.position == 1.0 else claim.scaled(self.position)

    def to_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind, "strike": self.strike.hex(),
                "asset": self.asset, "position": self.position.hex()}

    @classmethod
    def from_dict(cls, data: dict) -> "ClaimSpec":
        return cls(data["label"], data["kind"], float.fromhex(data["strike"]), data["asset"],
                   float.fromhex(data["position"]))


@dataclass
class ExperimentConfig:
    market: dict
    claims: list[ClaimSpec]
    rates: dict
    collateral: dict
    network: dict
    training: dict
    outputs: dict
    source_hash: str = ""
    source_path: str | None = field(default=None, compare=False)

    # -- derived objects -----------------------------------------------------

    @property
    def dim(self) -> int:
        return self.market["dim"] or max(len(self.market["s0"]), len(self.market["vols"]))

    def market_model(self) -> MarketModel:
        d = self.dim
        drift = self.market["drift"] if self.market["drift"] is not None else [self.rates["r"]]
        corr = np.full((d, d), self.market["correlation"])
        np.fill_diagonal(corr, 1.0)
        return MarketModel(_broadcast(self.market["s0"], d), _broadcast(drift, d),
                           _broadcast(self.market["vols"], d), corr)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.market["maturity"], self.training["steps"])

    def xva_rates(self) -> XvaRates:
        return XvaRates(**self.rates)

    def collateral_spec(self) -> CollateralSpec:
        return CollateralSpec(**self.collateral)

    def solver_config(self, xva: bool = False) -> SolverConfig:
        t, net = self.training, self.network
        width = (net["xva_width"] or net["width"]) if xva else net["width"]
        iterations = (t["xva_iterations"] or t["iterations"]) if xva else t["iterations"]
        return SolverConfig(
            batch_size=t["batch_size"], iterations=iterations, hidden=(width,) * net["depth"],
            adam=AdamConfig(learning_rate=t["learning_rate"], decay_factor=t["decay_factor"],
                            decay_points=tuple(t["decay_points"])),
            validation_size=t["validation_size"], validate_every=t["validate_every"], seed=t["seed"],
            scheme=self.market["scheme"], xi_init=t["xi_init"], xi_bracket=(t["xi_low"], t["xi_high"]),
            xi_polish=0 if xva else t["xi_polish"], output_scaling=t["output_scaling"])

    def built_claims(self) -> list[EuropeanClaim]:
        return [c.build() for c in self.claims]


def _broadcast(values, d):
    values = list(values)
    if len(values) == 1:
        return values * d
    if len(values) != d:
        raise ValueError(f"expected 1 or {d} values, got {len(values)}")
    return values


def _parse_section(name, section, schema, errors) -> dict:
    out = {}
    for key in section:
        if key not in schema:
            errors.append(f"{name}.{key}: unknown key")
    for key, (parse, default) in schema.items():
        if key not in section:
            if default is REQUIRED:
                errors.append(f"{name}.{key}: missing required field")
            out[key] = None if default is REQUIRED else default
            continue
        try:
            out[key] = parse(section[key])
        except ValueError as exc:
            kind = TYPE_NAMES.get(parse, getattr(parse, "__name__", "value"))
            errors.append(f"{name}.{key}: type mismatch ({kind}): {exc}")
            out[key] = None
    return out


def _check_values(cfg: dict, claims: list[ClaimSpec], errors: list[str]) -> None:
    m, t, net = cfg["market"], cfg["training"], cfg["network"]
    lengths = {len(v) for v in (m["s0"] or [], m["vols"] or [], m["drift"] or []) if len(v) > 1}
    if m["dim"] is not None:
        lengths.add(m["dim"])
    if len(lengths) > 1:
        errors.append("market: s0, vols, drift and dim disagree on the number of assets")
    d = max(lengths) if lengths else 1
    if m["s0"] is not None and any(x <= 0 for x in m["s0"]):
        errors.append("market.s0: initial prices must be positive")
    if m["vols"] is not None and any(x < 0 for x in m["vols"]):
        errors.append("market.vols: volatilities must be nonnegative")
    if m["maturity"] is not None and m["maturity"] <= 0:
        errors.append("market.maturity: must be positive")
    if m["correlation"] is not None and d > 1 and not -1.0 / (d - 1) <= m["correlation"] <= 1.0:
        errors.append("market.correlation: common correlation outside the positive-semidefinite range")
    for key in ("steps", "batch_size", "iterations", "validate_every", "xva_iterations", "validation_size",
                "outer_paths"):
        if t.get(key) is not None and t[key] < (2 if key == "outer_paths" else 1):
            errors.append(f"training.{key}: must be positive" + (" and at least 2" if key == "outer_paths" else ""))
    if t.get("xi_polish") is not None and t["xi_polish"] < 0:
        errors.append("training.xi_polish: must be nonnegative")
    for key in ("width", "depth", "xva_width"):
        if net.get(key) is not None and net[key] < 1:
            errors.append(f"network.{key}: must be positive")
    for key in ("intensity_bank", "intensity_counterparty"):
        if cfg["rates"].get(key) is not None and cfg["rates"][key] < 0:
            errors.append(f"rates.{key}: must be nonnegative")
    for key in ("recovery_bank", "recovery_counterparty"):
        if cfg["rates"].get(key) is not None and not 0.0 <= cfg["rates"][key] <= 1.0:
            errors.append(f"rates.{key}: must lie in [0, 1]")
    for key in ("receiving_threshold", "posting_threshold"):
        if cfg["collateral"].get(key) is not None and cfg["collateral"][key] < 0:
            errors.append(f"collateral.{key}: must be nonnegative")
    for c in claims:
        if c.kind != "basket_call" and not 0 <= c.asset < d:
            errors.append(f"claim:{c.label}.asset: index {c.asset} outside 0..{d - 1}")


def parse_config_text(text: str, source_path: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    errors: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    for name in parser.sections():
        if name not in SCHEMA and not name.startswith(CLAIM_PREFIX):
            errors.append(f"{name}: unknown section")
    for name in REQUIRED_SECTIONS:
        if not parser.has_section(name):
            errors.append(f"{name}: missing required section")
    claim_sections = [n for n in parser.sections() if n.startswith(CLAIM_PREFIX)]
    if not claim_sections:
        errors.append("claim:<label>: missing required section (at least one claim)")
    cfg = {name: _parse_section(name, parser[name] if parser.has_section(name) else {}, schema,
                                errors if parser.has_section(name) or name not in REQUIRED_SECTIONS else [])
           for name, schema in SCHEMA.items()}
    claims = []
    for name in claim_sections:
        label = name[len(CLAIM_PREFIX):].strip()
        if not label:
            errors.append(f"{name}: empty claim label")
        values = _parse_section(name, parser[name], CLAIM_SCHEMA, errors)
        if values["kind"] is not None and values["strike"] is not None:
            claims.append(ClaimSpec(label, values["kind"], values["strike"], values["asset"] or 0,
                                    values["position"] if values["position"] is not None else 1.0))
    if not errors:
        _check_values(cfg, claims, errors)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(claims=claims, source_hash=hashlib.sha256(text.encode()).hexdigest(),
                            source_path=source_path, **cfg)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read configuration ({exc.strerror})"]) from exc
    return parse_config_text(text, str(path))
