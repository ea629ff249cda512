"""Scenario configuration: strict TOML schema, loading, and stable hashing.

The config file carries the calibration table verbatim: per-time-step rates
(fuel price, inverse demand intercept and slope) are written as raw
per-step dollar values together with the step length in years
(``rate_step_years``); the loader divides them into per-year rates for
:class:`~carbonfield.model.ProducerParams`.

Unknown sections or keys are rejected, and the two policy-search constants
without published values (``pbar_target`` and ``walkaway_threshold``) are
mandatory — there are no hidden defaults for them.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass

from .equilibria import FixedPointConfig, SearchConfig
from .model import InvalidParams, ProducerParams, RegulatorPolicy
from .numkernel import TimeGrid
from .regulator import RegulatorParams
from .simulate import SimConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(Exception):
    """The scenario file is missing, malformed, or violates the schema."""


_NUMBER = (int, float)

# section -> {key: (type tag, required)}; type tags: "num", "pos", "nonneg",
# "int", "bool", "vec5", "vec2", "numlist"
_SCHEMA = {
    "producer": {
        "c1": ("num", True), "c3": ("num", True),
        "p1": ("num", True), "p2": ("num", True),
        "rho0": ("num", True), "rho1": ("num", True),
        "rate_step_years": ("pos", True),
        "kappa1": ("num", True), "kappa2": ("num", True),
        "alpha": ("num", True), "theta": ("num", True),
        "sigma0": ("num", True), "sigma1": ("num", True),
        "delta": ("num", True),
        "demand_base": ("num", True), "demand_amplitude": ("num", True),
        "demand_frequency": ("num", True),
        "xbar0": ("vec5", True), "var0": ("vec5", True),
        "re_bounds": ("vec2", True),
    },
    "grid": {"horizon": ("pos", True), "n_steps": ("int", True)},
    "policy": {"tau": ("nonneg", True), "c2": ("nonneg", True)},
    "regulator": {
        "alpha1": ("nonneg", True), "alpha2": ("nonneg", True),
        "alpha3": ("nonneg", True), "alpha4": ("nonneg", True),
        "alpha5": ("nonneg", True),
        "pbar_target": ("num", True),
        "walkaway_threshold": ("num", True),
        "tau_grid": ("numlist", True), "c2_grid": ("numlist", True),
    },
    "fixed_point": {
        "epsilon": ("pos", False), "max_iters": ("int", True),
        "damping": ("pos", True), "oscillation_window": ("int", True),
    },
    "search": {"coarse_points": ("int", True), "refine_rel_width": ("pos", True)},
    "sim": {
        "n_paths": ("int", True), "seed": ("int", True),
        "antithetic": ("bool", True), "n_deviations": ("int", True),
    },
    "output": {"directory": ("str", False)},
}
_OPTIONAL_SECTIONS = {"output"}


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario: model, grids, solver knobs, and run settings."""

    producer: ProducerParams
    policy: RegulatorPolicy
    regulator: RegulatorParams
    grid: TimeGrid
    fixed_point: FixedPointConfig
    search: SearchConfig
    n_paths: int
    seed: int
    antithetic: bool
    n_deviations: int
    output_directory: str
    config_hash: str

    def sim_config(self, seed: int | None = None) -> SimConfig:
        return SimConfig(n_paths=self.n_paths,
                         seed=self.seed if seed is None else seed,
                         grid=self.grid, antithetic=self.antithetic)


def _check_value(section: str, key: str, tag: str, value):
    path = f"{section}.{key}"
    if tag == "num":
        if not isinstance(value, _NUMBER) or isinstance(value, bool):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tag == "pos":
        v = _check_value(section, key, "num", value)
        if not v > 0:
            raise ConfigError(f"{path} must be > 0")
        return v
    if tag == "nonneg":
        v = _check_value(section, key, "num", value)
        if not v >= 0:
            raise ConfigError(f"{path} must be >= 0")
        return v
    if tag == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path} must be an integer")
        if value < 0:
            raise ConfigError(f"{path} must be >= 0")
        return value
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if tag in ("vec5", "vec2", "numlist"):
        if not isinstance(value, list) or any(
            not isinstance(v, _NUMBER) or isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{path} must be a list of numbers")
        if tag == "vec5" and len(value) != 5:
            raise ConfigError(f"{path} must have exactly 5 entries")
        if tag == "vec2" and len(value) != 2:
            raise ConfigError(f"{path} must have exactly 2 entries")
        if tag == "numlist" and len(value) == 0:
            raise ConfigError(f"{path} must be nonempty")
        return [float(v) for v in value]
    raise AssertionError(f"unknown schema tag {tag}")


def _validate_schema(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a table of sections")
    out: dict = {}
    for section in doc:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(doc[section], dict):
            raise ConfigError(f"[{section}] must be a table")
    for section, keys in _SCHEMA.items():
        if section not in doc:
            if section in _OPTIONAL_SECTIONS:
                continue
            raise ConfigError(f"missing section [{section}]")
        body = doc[section]
        for key in body:
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
        parsed = {}
        for key, (tag, required) in keys.items():
            if key not in body:
                if required:
                    raise ConfigError(f"missing key {section}.{key}")
                continue
            parsed[key] = _check_value(section, key, tag, body[key])
        out[section] = parsed
    return out


def config_hash(doc: dict) -> str:
    """SHA-256 of the canonical JSON form; stable under key reordering."""
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config(doc: dict, seed_override: int | None = None,
                 out_override: str | None = None) -> ScenarioConfig:
    """Validate a parsed TOML document and build the typed scenario."""
    parsed = _validate_schema(doc)
    if seed_override is not None:
        parsed["sim"]["seed"] = int(seed_override)
    p = parsed["producer"]
    step = p["rate_step_years"]
    try:
        producer = ProducerParams(
            c1=p["c1"], c3=p["c3"], p1=p["p1"] / step, p2=p["p2"],
            rho0=p["rho0"] / step, rho1=p["rho1"] / step,
            kappa1=p["kappa1"], kappa2=p["kappa2"], alpha=p["alpha"],
            theta=p["theta"], sigma0=p["sigma0"], sigma1=p["sigma1"],
            delta=p["delta"], demand_base=p["demand_base"],
            demand_amplitude=p["demand_amplitude"],
            demand_frequency=p["demand_frequency"],
            xbar0=p["xbar0"], var0=p["var0"],
            re_bounds=tuple(p["re_bounds"]),
        )
        policy = RegulatorPolicy(tau=parsed["policy"]["tau"],
                                 c2=parsed["policy"]["c2"])
        g = parsed["grid"]
        grid = TimeGrid(horizon=g["horizon"], n_steps=g["n_steps"])
        reg = parsed["regulator"]
        regulator = RegulatorParams(
            alpha1=reg["alpha1"], alpha2=reg["alpha2"], alpha3=reg["alpha3"],
            alpha4=reg["alpha4"], alpha5=reg["alpha5"],
            pbar_target=reg["pbar_target"],
            walkaway_threshold=reg["walkaway_threshold"],
            tau_grid=tuple(reg["tau_grid"]), c2_grid=tuple(reg["c2_grid"]),
        )
        fp = parsed["fixed_point"]
        fixed_point = FixedPointConfig(
            epsilon=fp.get("epsilon"), max_iters=fp["max_iters"],
            damping=fp["damping"],
            oscillation_window=fp["oscillation_window"],
        )
        s = parsed["search"]
        search = SearchConfig(coarse_points=s["coarse_points"],
                              refine_rel_width=s["refine_rel_width"])
        sim = parsed["sim"]
        # constructing a throwaway SimConfig exercises its validation here
        SimConfig(n_paths=sim["n_paths"], seed=sim["seed"], grid=grid,
                  antithetic=sim["antithetic"])
    except (InvalidParams, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    out_dir = parsed.get("output", {}).get("directory", "runs")
    if out_override is not None:
        out_dir = out_override
    return ScenarioConfig(
        producer=producer, policy=policy, regulator=regulator, grid=grid,
        fixed_point=fixed_point, search=search,
        n_paths=sim["n_paths"], seed=sim["seed"],
        antithetic=sim["antithetic"], n_deviations=sim["n_deviations"],
        output_directory=out_dir, config_hash=config_hash(parsed),
    )


def load_config(path: str, seed_override: int | None = None,
                out_override: str | None = None) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return parse_config(doc, seed_override=seed_override,
                        out_override=out_override)
