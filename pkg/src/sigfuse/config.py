"""Run configuration: one TOML file with a table per stage."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .embedding import ModelConfig
from .mutation import FAMILY_IDS
from .traffic import GeneratorConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


_SECTIONS: dict[str, dict[str, type | tuple]] = {
    "paths": {"workdir": str, "cache": str},
    "generator": {
        "n_subscribers": int,
        "minutes": int,
        "activity_rate": (int, float),
        "rng_seed": int,
        "target_mean_tokens": int,
        "max_burst": int,
        "start": str,
        "n_visited_networks": int,
        "nodes_per_network": int,
        "protocol_coupling": (int, float),
    },
    "mutation": {"rng_seed": int, "split_seed": int, "max_retries": int, "families": list, "candidate_factor": (int, float)},
    "embedding": {"min_coverage": (int, float)},
    "detector": {
        "pool_seed": int,
        "pool_fraction": (int, float),
        "contamination": (int, float),
        "subsample_size": int,
        "n_trees": int,
    },
    "evaluation": {"distance_space": str, "fixture": str, "figures": bool},
}
_REQUIRED_SEEDS = (("generator", "rng_seed"), ("mutation", "rng_seed"), ("mutation", "split_seed"), ("detector", "pool_seed"))
_SEED_ALIASES = {
    "generator": ("generator", "rng_seed"),
    "mutation": ("mutation", "rng_seed"),
    "split": ("mutation", "split_seed"),
    "pool": ("detector", "pool_seed"),
}
_MODEL_KEYS = set(ModelConfig.__dataclass_fields__) | {"name"}


@dataclass
class RunConfig:
    workdir: Path
    cache: Path
    generator: GeneratorConfig
    models: list[ModelConfig]
    mutation_seed: int
    split_seed: int
    pool_seed: int
    max_retries: int = 3
    families: tuple[str, ...] = FAMILY_IDS
    candidate_factor: float = 2.0
    min_coverage: float = 1.0
    pool_fraction: float = 0.05
    contamination: float = 0.01
    subsample_size: int = 256
    n_trees: int = 100
    distance_space: str = "decision"
    fixture: str | None = None
    figures: bool = True
    source: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.workdir / name

    def seeds(self) -> dict[str, int]:
        out = {
            "generator": self.generator.rng_seed,
            "mutation": self.mutation_seed,
            "split": self.split_seed,
            "pool": self.pool_seed,
        }
        out.update({f"model:{m.model_name}": m.seed for m in self.models})
        return out


def _type_errors(section: str, table: dict, spec: dict[str, Any]) -> list[str]:
    errors = []
    for key, value in table.items():
        if key not in spec:
            errors.append(f"{section}.{key}: unknown key")
            continue
        want = spec[key]
        if isinstance(value, bool) and want is not bool:
            errors.append(f"{section}.{key}: expected {_name(want)}, got a boolean")
        elif not isinstance(value, want):
            errors.append(f"{section}.{key}: expected {_name(want)}, got {type(value).__name__}")
    return errors


def _name(want) -> str:
    if isinstance(want, tuple):
        return "number"
    return want.__name__


def validate_config(raw: dict) -> list[str]:
    """Every problem found in a parsed config mapping (empty list = valid)."""
    errors: list[str] = []
    for section in raw:
        if section not in _SECTIONS and section != "models":
            errors.append(f"{section}: unknown section")
    for section, spec in _SECTIONS.items():
        table = raw.get(section, {})
        if not isinstance(table, dict):
            errors.append(f"{section}: expected a table")
            continue
        errors.extend(_type_errors(section, table, spec))
    for section, key in _REQUIRED_SEEDS:
        if key not in raw.get(section, {}):
            errors.append(f"{section}.{key}: missing seed (seeds must be explicit)")
    gen = raw.get("generator", {})
    for key in ("n_subscribers", "minutes"):
        if key not in gen:
            errors.append(f"generator.{key}: missing")
        elif isinstance(gen[key], int) and gen[key] < 1:
            errors.append(f"generator.{key}: must be positive")
    rate = gen.get("activity_rate")
    if isinstance(rate, (int, float)) and not 0 < rate <= 1:
        errors.append("generator.activity_rate: must lie in (0, 1]")
    det = raw.get("detector", {})
    c = det.get("contamination", 0.01)
    if isinstance(c, (int, float)) and not 0 < c < 0.5:
        errors.append(f"detector.contamination: {c} outside (0, 0.5)")
    f = det.get("pool_fraction", 0.05)
    if isinstance(f, (int, float)) and not 0 < f < 1:
        errors.append(f"detector.pool_fraction: {f} outside (0, 1)")
    for key in ("subsample_size", "n_trees"):
        v = det.get(key)
        if isinstance(v, int) and v < 1:
            errors.append(f"detector.{key}: must be positive")
    mc = raw.get("embedding", {}).get("min_coverage")
    if isinstance(mc, (int, float)) and not 0 <= mc <= 1:
        errors.append("embedding.min_coverage: must lie in [0, 1]")
    fams = raw.get("mutation", {}).get("families")
    if isinstance(fams, list):
        for fid in fams:
            if fid not in FAMILY_IDS:
                errors.append(f"mutation.families: unknown family {fid!r}")
    space = raw.get("evaluation", {}).get("distance_space", "decision")
    if space not in ("decision", "embedding", "both"):
        errors.append(f"evaluation.distance_space: {space!r} is not decision, embedding or both")

    models = raw.get("models")
    if not isinstance(models, list) or not models:
        errors.append("models: at least one [[models]] entry is required")
        models = []
    names: set[str] = set()
    for i, entry in enumerate(models):
        where = f"models[{i}]"
        if not isinstance(entry, dict):
            errors.append(f"{where}: expected a table")
            continue
        for key in entry:
            if key not in _MODEL_KEYS:
                errors.append(f"{where}.{key}: unknown key")
        name = entry.get("model_name", entry.get("name"))
        if not isinstance(name, str) or not name:
            errors.append(f"{where}: missing model_name")
        elif name in names:
            errors.append(f"{where}: duplicate model name {name!r}")
        else:
            names.add(name)
        for key in ("dimension", "context_window"):
            v = entry.get(key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                errors.append(f"{where}.{key}: positive integer required")
        if entry.get("endpoint", "offline") == "offline" and "seed" not in entry:
            errors.append(f"{where}.seed: missing seed for an offline embedder")
    return errors


def parse_config(raw: dict, base: Path | None = None) -> RunConfig:
    errors = validate_config(raw)
    if errors:
        raise ConfigError(errors)
    base = base or Path.cwd()
    paths = raw.get("paths", {})
    workdir = Path(paths.get("workdir", "run"))
    workdir = workdir if workdir.is_absolute() else base / workdir
    cache = Path(os.environ.get("SIGFUSE_CACHE") or paths.get("cache") or workdir / "cache.jsonl")
    cache = cache if cache.is_absolute() else base / cache
    endpoint = os.environ.get("SIGFUSE_EMBED_ENDPOINT")
    models = []
    for entry in raw["models"]:
        model = ModelConfig.from_json(entry)
        if endpoint and not model.offline:
            model = replace(model, endpoint=endpoint)
        models.append(model)
    mut = raw["mutation"]
    det = raw["detector"]
    emb = raw.get("embedding", {})
    ev = raw.get("evaluation", {})
    return RunConfig(
        workdir=workdir,
        cache=cache,
        generator=GeneratorConfig(**raw["generator"]),
        models=models,
        mutation_seed=mut["rng_seed"],
        split_seed=mut["split_seed"],
        pool_seed=det["pool_seed"],
        max_retries=mut.get("max_retries", 3),
        families=tuple(mut.get("families", FAMILY_IDS)),
        candidate_factor=float(mut.get("candidate_factor", 2.0)),
        min_coverage=float(emb.get("min_coverage", 1.0)),
        pool_fraction=float(det.get("pool_fraction", 0.05)),
        contamination=float(det.get("contamination", 0.01)),
        subsample_size=det.get("subsample_size", 256),
        n_trees=det.get("n_trees", 100),
        distance_space=ev.get("distance_space", "decision"),
        fixture=ev.get("fixture"),
        figures=ev.get("figures", True),
        source=raw,
    )


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as TOML scalars).

    ``generator``, ``mutation``, ``split`` and ``pool`` are shorthands for
    the four run seeds.
    """
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected KEY=VALUE"])
        key, value = item.split("=", 1)
        if "." in key:
            section, name = key.split(".", 1)
        elif key in _SEED_ALIASES:
            section, name = _SEED_ALIASES[key]
        else:
            raise ConfigError([f"override {item!r}: use section.key or one of {sorted(_SEED_ALIASES)}"])
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value
        raw.setdefault(section, {})[name] = parsed
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file (the packaged demo when ``path`` is None)."""
    if path is None:
        text = resources.files("sigfuse").joinpath("data/demo.toml").read_text(encoding="utf-8")
        base = Path.cwd()
    else:
        text = Path(path).read_text(encoding="utf-8")
        base = Path(path).resolve().parent
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path or 'demo.toml'}: {exc}"]) from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_config(raw, base)


def load_models(path: str | Path) -> list[ModelConfig]:
    """A roster file holding only ``[[models]]`` entries."""
    raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    models = raw.get("models")
    if not models:
        raise ConfigError([f"{path}: no [[models]] entries"])
    names = [m.get("model_name", m.get("name")) for m in models]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError([f"{path}: duplicate model names {dupes}"])
    return [ModelConfig.from_json(m) for m in models]
