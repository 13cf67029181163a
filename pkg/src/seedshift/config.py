"""Translation configuration and the flat key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS

INIT_NULL_TEXT = "null-text"
INIT_PREVIOUS_STEP = "previous-step"


@dataclass
class HistogramConfig:
    """Soft-histogram settings used by the per-step appearance loss."""

    bins: int = 64
    lo: float = -4.0
    hi: float = 4.0
    bandwidth: float | None = None  # None -> one bin width

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.hi <= self.lo:
            raise ValueError("histogram range must satisfy hi > lo")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")

    def resolved_bandwidth(self) -> float:
        return self.bandwidth if self.bandwidth is not None else (self.hi - self.lo) / self.bins


@dataclass
class TranslationConfig:
    """Loss weights, iteration counts, rates, and sampler settings.

    Learning rates and loss weights are desk-scale calibrations: they were
    chosen on the bundled toy fixtures so that the weighted loss terms start
    at comparable magnitudes and the optimizations make visible progress in
    the default iteration budgets.
    """

    # Seed-translation phase
    lambda_app_st: float = 1.0
    lambda_str_st: float = 1.5
    n_st: int = 10
    lr_st: float = 0.05
    # Sampling
    omega: float = 3.0
    ddim_steps: int = 20
    # Fixed-point refinements per inversion step (0 = plain explicit step);
    # each pass re-estimates the noise at the predicted endpoint so the
    # inversion step converges to the exact inverse of the sampling step.
    invert_refine_iters: int = 2
    # Trajectory-optimization phase
    lambda_app_to: float = 7e4
    lambda_str_to: float = 2.0
    n_to: int = 10
    lr_to: float = 0.02
    to_early_stop: float = 1e-6  # stop a timestep's inner loop on tiny improvement; 0 disables
    to_init_mode: str = INIT_PREVIOUS_STEP
    # Memory mode: recompute forward segments during backward instead of
    # retaining the whole sampling chain.
    grad_checkpoint: bool = False
    # Histogram appearance settings
    hist: HistogramConfig = dataclasses.field(default_factory=HistogramConfig)
    # Diffusion schedule constants, pinned here for reproducibility
    schedule_timesteps: int = DEFAULT_TIMESTEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        for name in ("n_st", "n_to", "ddim_steps", "invert_refine_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        for name in ("lr_st", "lr_to"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lambda_app_st", "lambda_str_st", "lambda_app_to", "lambda_str_to",
                     "omega", "to_early_stop"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.to_init_mode not in (INIT_NULL_TEXT, INIT_PREVIOUS_STEP):
            raise ValueError(f"unknown to_init_mode: {self.to_init_mode!r}")


# Config files address HistogramConfig fields with a "hist_" prefix.
_HIST_PREFIX = "hist_"


def config_to_text(config: TranslationConfig) -> str:
    """Render a config as flat key=value lines (the on-disk format)."""
    lines = []
    for f in dataclasses.fields(TranslationConfig):
        value = getattr(config, f.name)
        if f.name == "hist":
            for hf in dataclasses.fields(HistogramConfig):
                lines.append(f"{_HIST_PREFIX}{hf.name} = {getattr(value, hf.name)}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: TranslationConfig | None = None) -> TranslationConfig:
    """Parse flat key=value lines ('#' starts a comment) into a config."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return apply_config_overrides(base or TranslationConfig(), values)


def apply_config_overrides(base: TranslationConfig, overrides: dict[str, str]) -> TranslationConfig:
    """Apply string-valued overrides (config file or CLI) on top of a config."""
    cfg_kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(TranslationConfig)}
    hist_kwargs = {f.name: getattr(base.hist, f.name) for f in dataclasses.fields(HistogramConfig)}
    field_types = {f.name: f for f in dataclasses.fields(TranslationConfig)}
    hist_types = {f.name: f for f in dataclasses.fields(HistogramConfig)}

    for key, val in overrides.items():
        if key.startswith(_HIST_PREFIX) and key[len(_HIST_PREFIX):] in hist_types:
            name = key[len(_HIST_PREFIX):]
            hist_kwargs[name] = _coerce(val, name)
        elif key in field_types and key != "hist":
            cfg_kwargs[key] = _coerce(val, key)
        else:
            raise ValueError(f"unknown config key: {key!r}")

    cfg_kwargs["hist"] = HistogramConfig(**hist_kwargs)
    return TranslationConfig(**cfg_kwargs)


_INT_KEYS = {"n_st", "n_to", "ddim_steps", "schedule_timesteps", "bins", "invert_refine_iters"}
_BOOL_KEYS = {"grad_checkpoint"}
_STR_KEYS = {"to_init_mode"}
_OPTIONAL_FLOAT_KEYS = {"bandwidth"}


def _coerce(val: str, key: str):
    if not isinstance(val, str):
        return val
    if key in _STR_KEYS:
        return val
    if key in _BOOL_KEYS:
        low = val.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {val!r}")
    if key in _OPTIONAL_FLOAT_KEYS and val.lower() in ("none", ""):
        return None
    if key in _INT_KEYS:
        return int(val)
    return float(val)


def load_config(path: str, base: TranslationConfig | None = None) -> TranslationConfig:
    with open(path) as f:
        return parse_config_text(f.read(), base=base)
