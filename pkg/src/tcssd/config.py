"""Merged run configuration with a flat dotted-key text format.

A config file holds ``section.field = value`` lines (``#`` comments
allowed); CLI flags override file values, which override the preset.  The
effective configuration hashes into every output's provenance header.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, replace

from .analysis import SimConfig
from .cm_temporal import Cm1Config, toy_cm1_config
from .encoder import EncoderConfig, toy_encoder_config
from .errors import DataError
from .frontend import AugmentPolicy
from .training import AamConfig, TrainConfig, toy_train_config


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cm1: Cm1Config = field(default_factory=Cm1Config)
    train: TrainConfig = field(default_factory=TrainConfig)
    aam: AamConfig = field(default_factory=AamConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    sim: SimConfig = field(default_factory=SimConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives the run: training and simulation inherit it."""
        return replace(self, seed=seed,
                       train=replace(self.train, seed=seed),
                       sim=replace(self.sim, seed=seed))


def full_config() -> RunConfig:
    return RunConfig()


def toy_config() -> RunConfig:
    enc = toy_encoder_config()
    return RunConfig(encoder=enc, cm1=toy_cm1_config(enc.mfa_dim),
                     train=toy_train_config())


PRESETS = {"full": full_config, "toy": toy_config}

_SECTIONS = ("encoder", "cm1", "train", "aam", "augment", "sim")


def parse_config_file(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise DataError(f"missing config file: {path}") from None
    flat = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def _coerce(value: str, target_type):
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value}")
    if target_type is str:
        return value
    # remaining case: tuple of ints (block dilations)
    return tuple(int(v) for v in value.replace(",", " ").split())


def apply_flat_overrides(cfg: RunConfig, flat: dict[str, str]) -> RunConfig:
    section_updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    top_updates: dict = {}
    for key, value in flat.items():
        if key == "seed":
            top_updates["seed"] = int(value)
            continue
        section, _, fname = key.partition(".")
        if section not in _SECTIONS or not fname:
            raise DataError(f"unknown config key '{key}'")
        sub = getattr(cfg, section)
        field_types = {f.name: f.type for f in dataclasses.fields(sub)}
        if fname not in field_types:
            raise DataError(f"unknown config key '{key}'")
        current = getattr(sub, fname)
        try:
            section_updates[section][fname] = _coerce(
                value, type(current) if not isinstance(current, tuple) else tuple)
        except ValueError as exc:
            raise DataError(f"bad value for '{key}': {exc}") from None
    new_sections = {s: replace(getattr(cfg, s), **updates) if updates
                    else getattr(cfg, s)
                    for s, updates in section_updates.items()}
    return replace(cfg, **top_updates, **new_sections)


def flat_dict(cfg: RunConfig) -> dict[str, str]:
    flat = {"seed": str(cfg.seed)}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            flat[f"{section}.{f.name}"] = text
    return flat


def config_hash(cfg: RunConfig) -> str:
    canonical = "\n".join(f"{k}={v}" for k, v in sorted(flat_dict(cfg).items()))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]
