"""Run configuration: defaults, flat key=value files, overrides, hashing.

Precedence is defaults, then the config file, then --set overrides. Keys are
a closed set; anything unknown is rejected with the offending key named, and
a duplicated key inside one file is an error rather than last-one-wins.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .filters import FilterParams, known_filters


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class RunConfig:
    mode: str = "untargeted"
    target_class: int = -1
    prob_threshold: float = 0.0  # 0 disables threshold termination
    max_iter: int = 3500
    l2_budget: float = 0.0  # 0 disables the budget
    patch_size: int = 2
    filters: tuple[str, ...] = ("gaussian_noise",)
    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    brightness_delta: float = -0.1
    deadpixel_fraction: float = 0.5
    epsilon0: float = 0.1
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    seed: int = 0
    skip_misclassified: bool = True
    max_batch: int = 128
    state_top_k: int = 32
    gamma: float = 0.99
    lr: float = 1e-3
    replay_capacity: int = 10_000
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 5_000
    target_sync: int = 500
    train_episodes: int = 40
    eval_cache_size: int = 100_000

    def __post_init__(self) -> None:
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigError(f"mode must be untargeted or targeted, got {self.mode!r}")
        if self.mode == "targeted" and self.target_class < 0:
            raise ConfigError("targeted mode requires target_class >= 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if not self.filters:
            raise ConfigError("at least one filter is required")
        unknown = [f for f in self.filters if f not in known_filters()]
        if unknown:
            raise ConfigError(f"unknown filters: {', '.join(unknown)}")
        sev = self.severities
        if not sev or sev[0] != 1 or any(b <= a for a, b in zip(sev, sev[1:])):
            raise ConfigError("severities must be ascending and start at 1")
        if any(s < 1 for s in sev):
            raise ConfigError("severities must be positive")
        if not 0.0 <= self.prob_threshold < 1.0:
            raise ConfigError("prob_threshold must lie in [0, 1)")

    def filter_params(self) -> FilterParams:
        return FilterParams(
            noise_sigma=self.noise_sigma,
            blur_sigma=self.blur_sigma,
            brightness_delta=self.brightness_delta,
            deadpixel_fraction=self.deadpixel_fraction,
            epsilon0=self.epsilon0,
        )

    def effective_severities(self) -> tuple[int, ...]:
        """Threshold-terminated runs produce a single level: the threshold
        already fixes the distortion strength, so multipliers do not apply."""
        if self.prob_threshold > 0.0:
            return (1,)
        return self.severities

    def to_flat_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                out[f.name] = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            else:
                out[f.name] = repr(value) if isinstance(value, float) else str(value)
        return out


_PARSERS = {
    "mode": str,
    "target_class": int,
    "prob_threshold": float,
    "max_iter": int,
    "l2_budget": float,
    "patch_size": int,
    "filters": _parse_str_list,
    "noise_sigma": float,
    "blur_sigma": float,
    "brightness_delta": float,
    "deadpixel_fraction": float,
    "epsilon0": float,
    "severities": _parse_int_list,
    "seed": int,
    "skip_misclassified": _parse_bool,
    "max_batch": int,
    "state_top_k": int,
    "gamma": float,
    "lr": float,
    "replay_capacity": int,
    "batch_size": int,
    "eps_start": float,
    "eps_end": float,
    "eps_decay_steps": int,
    "target_sync": int,
    "train_episodes": int,
    "eval_cache_size": int,
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment; duplicate keys rejected."""
    values: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _convert(values: dict[str, str], source: str) -> dict:
    converted = {}
    for key, text in values.items():
        parser = _PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            converted[key] = parser(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc
    return converted


def resolve_config(
    config_path=None,
    overrides: list[str] | None = None,
    extra: dict | None = None,
) -> RunConfig:
    """defaults <- config file <- --set key=value overrides <- extra kwargs."""
    merged: dict = {}
    if config_path is not None:
        text = Path(config_path).read_text()
        merged.update(_convert(parse_config_text(text, str(config_path)), str(config_path)))
    if overrides:
        pairs: dict[str, str] = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = (part.strip() for part in item.split("=", 1))
            pairs[key] = value
        merged.update(_convert(pairs, "--set"))
    if extra:
        merged.update(extra)
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: RunConfig) -> str:
    """Hash of the canonical sorted key=value dump; stable across runs."""
    flat = cfg.to_flat_dict()
    canonical = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def dump_config(cfg: RunConfig) -> str:
    flat = cfg.to_flat_dict()
    lines = [f"{k} = {flat[k]}" for k in sorted(flat)]
    return "\n".join(lines) + "\n"
