"""Experiment configuration: JSON schema, typed view, bundled configs and output paths."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .jko import REGULARIZERS, JKOConfig
from .kernels import build_kernel
from .potentials import TARGET_NAMES

OUTPUT_ROOT_ENV = "DCFLOW_OUTPUT_ROOT"
EVAL_METRICS = ("free_energy", "kl", "grad_mapping", "w2_to_prev")

_RANGE_RATES = {
    "oneOf": [
        {"type": "number", "exclusiveMinimum": 0},
        {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "prefixItems": [
                    {"type": "integer", "minimum": 1},
                    {"type": "integer", "minimum": 1},
                    {"type": "number", "exclusiveMinimum": 0},
                ],
                "minItems": 3,
                "maxItems": 3,
            },
        },
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["seed", "scheme", "target", "base", "eta", "outer_iters"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "scheme": {"enum": ["semi_fb", "fb", "ula"]},
        "target": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {"name": {"enum": list(TARGET_NAMES)}, "params": {"type": "object"}},
        },
        "base": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["normal", "dirac"]},
                "params": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "mean": {"type": "array", "items": {"type": "number"}},
                        "variance": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "outer_iters": {"type": "integer", "minimum": 0},
        "regularizer": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {"kind": {"enum": list(REGULARIZERS)}, "kernel": {"type": "object"}},
        },
        "jko": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "inner_iters": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": _RANGE_RATES,
                "adam_betas": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "eta0": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "hidden_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "init_scale": {"type": "number", "minimum": 0},
                "cache_batches": {"type": "boolean"},
                "tail_average": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": {"type": "integer", "minimum": 2},
                "exact_subsample": {"type": "integer", "minimum": 1},
                "metrics": {"type": "array", "items": {"enum": list(EVAL_METRICS)}},
            },
        },
        "ula": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "n_chains": {"type": "integer", "minimum": 1},
                "n_iters": {"type": "integer", "minimum": 0},
                "eta": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output_dir": {"type": ["string", "null"]},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass(frozen=True)
class JKOSettings:
    inner_iters: int = 300
    batch_size: int = 512
    learning_rate: tuple = ((1, 20, 5e-3), (21, 40, 2e-3))
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    eta0: Optional[float] = None
    hidden_widths: tuple = (64, 64)
    init_scale: float = 1e-3
    cache_batches: bool = True
    tail_average: float = 0.5

    def outer_rate(self, k: int) -> float:
        for first, last, rate in self.learning_rate:
            if first <= k <= last:
                return rate
        raise ConfigError(f"jko.learning_rate: outer iteration {k} not covered")

    def for_step(self, k: int, eta: float, seed: int) -> JKOConfig:
        """Inner-loop config of outer iteration k (constant rate within the step)."""
        n = self.inner_iters
        return JKOConfig(
            eta=eta,
            inner_iters=n,
            batch_size=self.batch_size,
            learning_rate_schedule=((1, max(n, 1), self.outer_rate(k)),),
            adam_betas=self.adam_betas,
            adam_eps=self.adam_eps,
            seed=seed,
            eta0=float("inf") if self.eta0 is None else self.eta0,
            hidden_widths=self.hidden_widths,
            init_scale=self.init_scale,
            cache_batches=self.cache_batches,
            tail_average=self.tail_average,
        )


@dataclass(frozen=True)
class EvalSettings:
    n_samples: int = 4096
    exact_subsample: int = 512
    metrics: tuple = EVAL_METRICS


@dataclass(frozen=True)
class UlaSettings:
    enabled: bool = False
    n_chains: int = 10000
    n_iters: int = 4000
    eta: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scheme: str
    target: dict
    base: dict
    eta: float
    outer_iters: int
    name: str = "experiment"
    regularizer: dict = field(default_factory=lambda: {"kind": "negative_entropy"})
    jko: JKOSettings = JKOSettings()
    eval: EvalSettings = EvalSettings()
    ula: UlaSettings = UlaSettings()
    output_dir: Optional[str] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def with_overrides(self, *, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["seed"] = int(seed)
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
        return parse_config(raw)


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def _schedule(value, outer_iters: int) -> tuple:
    if isinstance(value, (int, float)):
        return ((1, max(outer_iters, 1), float(value)),)
    sched = tuple(sorted((int(a), int(b), float(r)) for a, b, r in value))
    expect = 1
    for first, last, _ in sched:
        if first != expect or last < first:
            raise ConfigError(f"jko.learning_rate: ranges must tile [1, outer_iters], got {list(sched)}")
        expect = last + 1
    if outer_iters > 0 and expect <= outer_iters:
        raise ConfigError(f"jko.learning_rate: covers only up to {expect - 1} < outer_iters={outer_iters}")
    return sched


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config tree and return its typed view; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"{_path(err)}: {err.message}")
    raw = copy.deepcopy(raw)
    jko_raw = raw.get("jko", {})
    outer = int(raw["outer_iters"])
    jko = JKOSettings(
        inner_iters=int(jko_raw.get("inner_iters", 300)),
        batch_size=int(jko_raw.get("batch_size", 512)),
        learning_rate=_schedule(
            jko_raw.get("learning_rate", [[1, 20, 5e-3], [21, 40, 2e-3]]), outer if raw["scheme"] != "ula" else 0
        ),
        adam_betas=tuple(float(b) for b in jko_raw.get("adam_betas", (0.9, 0.999))),
        adam_eps=float(jko_raw.get("adam_eps", 1e-8)),
        eta0=jko_raw.get("eta0"),
        hidden_widths=tuple(int(w) for w in jko_raw.get("hidden_widths", (64, 64))),
        init_scale=float(jko_raw.get("init_scale", 1e-3)),
        cache_batches=bool(jko_raw.get("cache_batches", True)),
        tail_average=float(jko_raw.get("tail_average", 0.5)),
    )
    if jko.eta0 is not None and not raw["eta"] < jko.eta0:
        raise ConfigError(f"eta: {raw['eta']} must be below jko.eta0={jko.eta0}")
    ev = raw.get("eval", {})
    eval_settings = EvalSettings(
        n_samples=int(ev.get("n_samples", 4096)),
        exact_subsample=int(ev.get("exact_subsample", 512)),
        metrics=tuple(ev.get("metrics", EVAL_METRICS)),
    )
    ula_raw = raw.get("ula", {})
    ula = UlaSettings(
        enabled=bool(ula_raw.get("enabled", raw["scheme"] == "ula")),
        n_chains=int(ula_raw.get("n_chains", 10000)),
        n_iters=int(ula_raw.get("n_iters", 4000)),
        eta=float(ula_raw.get("eta", 1e-3)),
    )
    reg = raw.get("regularizer", {"kind": "negative_entropy"})
    if reg["kind"] == "interaction_energy":
        if "kernel" not in reg:
            raise ConfigError("regularizer.kernel: required for the interaction energy")
        try:
            build_kernel(reg["kernel"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"regularizer.kernel: {exc}") from exc
        if raw["scheme"] != "ula" and "kl" in eval_settings.metrics:
            raise ConfigError("eval.metrics: kl needs the negative-entropy regularizer")
    elif "kernel" in reg:
        raise ConfigError("regularizer.kernel: only allowed for the interaction energy")
    base = raw["base"]
    if base["name"] == "dirac" and raw["scheme"] != "ula":
        raise ConfigError("base.name: map-based schemes need a base with a density")
    if base["name"] == "normal" and base.get("params", {}).get("variance", 1.0) <= 0:
        raise ConfigError("base.params.variance: must be positive")
    return ExperimentConfig(
        seed=int(raw["seed"]),
        scheme=raw["scheme"],
        target=raw["target"],
        base=base,
        eta=float(raw["eta"]),
        outer_iters=outer,
        name=raw.get("name", "experiment"),
        regularizer=reg,
        jko=jko,
        eval=eval_settings,
        ula=ula,
        output_dir=raw.get("output_dir"),
        raw=raw,
    )


def bundled_configs() -> list[str]:
    root = resources.files("dcflow") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_config_path(name: str) -> Path:
    path = resources.files("dcflow") / "configs" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}; available: {bundled_configs()}")
    return Path(str(path))


def load_config(path_or_name) -> ExperimentConfig:
    """Load a config file, or a bundled config by name."""
    path = Path(path_or_name)
    if not path.exists() and path.suffix == "" and path.name in bundled_configs():
        path = bundled_config_path(path.name)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        if path.suffix == "":
            raise ConfigError(f"no bundled config named {path.name!r}; available: {bundled_configs()}") from exc
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON in {path}: {exc}") from exc
    return parse_config(raw)


def resolve_output_dir(cfg: ExperimentConfig, override: Optional[str] = None) -> Path:
    """--output-dir, else config output_dir, else <root>/<name>_seed<seed>.

    Relative paths are taken under the output root, which is
    ``$DCFLOW_OUTPUT_ROOT`` when set and ``./runs`` otherwise.
    """
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    chosen = override or cfg.output_dir or f"{cfg.name}_seed{cfg.seed}"
    path = Path(chosen)
    return path if path.is_absolute() or override else root / path


def derive_seed(seed: int, tag: str) -> int:
    """Independent 32-bit seed for a named random stream of a run."""
    key = int.from_bytes(tag.encode(), "little")
    return int(np.random.SeedSequence([int(seed), key]).generate_state(1)[0])
