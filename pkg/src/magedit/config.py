"""Flat run configuration shared by the CLI and the scripts.

Precedence: built-in defaults < edit-type preset < config file < command-line flags.
Fields left as ``None`` are resolved from the preset/constraint at build time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from magedit.constraints import KIND_ALIASES, TOKEN_RATIO, ConstraintSpec
from magedit.errors import ConfigError
from magedit.guidance import CONSTANT, SNR_SCHEDULE, GuidanceConfig
from magedit.pipeline import InversionSettings
from magedit.schedule import DiffusionSchedule, make_schedule

EDIT_PRESETS = {
    "color": {"tau1": 10, "constraint": "tr"},
    "texture": {"tau1": 10, "constraint": "tr"},
    "shape": {"tau1": 40, "constraint": "sr"},
}


@dataclass
class RunConfig:
    image: str | None = None
    mask: str | None = None
    source_prompt: str | None = None
    target_prompt: str | None = None
    negative_tokens: list[str] = field(default_factory=list)
    constraint: str | None = None
    edit_type: str | None = None
    max_it: int = 15
    tau1: int | None = None
    tau2: int = 25
    sa_window_end: int = 25
    blend_window_start: int = 15
    delta_mode: str | None = None
    delta_constant: float = 1.0
    asymmetric: bool = True
    lambda_sr: float = 3.0
    lambda_p: float = 2.5
    lambda_ng: float = 5.5
    weights: list[float] | None = None
    guidance_scale: float = 7.5
    num_train_steps: int = 1000
    num_sample_steps: int = 50
    beta_start: float = 0.00085
    beta_end: float = 0.012
    eta: float = 0.0
    backend: str = "toy"
    backend_path: str | None = None
    backend_options: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "magedit-out"
    cache_dir: str | None = None
    null_inner_steps: int = 10
    null_lr: float = 0.01
    null_early_stop: float = 1e-5
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.edit_type is not None and self.edit_type not in EDIT_PRESETS:
            raise ConfigError(f"unknown edit type {self.edit_type!r}")
        if self.constraint is not None and self.constraint not in KIND_ALIASES:
            raise ConfigError(f"unknown constraint {self.constraint!r}")
        if self.backend not in ("toy", "external"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def updated(self, **overrides) -> "RunConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)

    # --- resolution -----------------------------------------------------------

    @property
    def preset(self) -> dict:
        return EDIT_PRESETS.get(self.edit_type or "", {})

    def resolved_constraint(self) -> str:
        return KIND_ALIASES[self.constraint or self.preset.get("constraint", "sr")]

    def resolved_tau1(self) -> int:
        if self.tau1 is not None:
            return self.tau1
        return self.preset.get("tau1", 10)

    def resolved_delta_mode(self) -> str:
        if self.delta_mode is not None:
            return self.delta_mode
        return SNR_SCHEDULE if self.resolved_constraint() == TOKEN_RATIO else CONSTANT

    def resolved(self) -> dict:
        """Snapshot with every derived knob filled in, as written to manifests."""
        d = self.to_dict()
        d.update(
            constraint=self.resolved_constraint(),
            tau1=self.resolved_tau1(),
            delta_mode=self.resolved_delta_mode(),
        )
        return d

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(
            self.num_train_steps, self.num_sample_steps, (self.beta_start, self.beta_end), self.eta
        )

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(
            max_it=self.max_it,
            tau1=self.resolved_tau1(),
            tau2=self.tau2,
            delta_mode=self.resolved_delta_mode(),
            delta_constant=self.delta_constant,
            sa_window_end=self.sa_window_end,
            blend_window_start=self.blend_window_start,
            asymmetric=self.asymmetric,
            guidance_scale=self.guidance_scale,
            fd_step=self.fd_step,
        )

    def constraint_spec(self) -> ConstraintSpec:
        return ConstraintSpec(
            kind=self.resolved_constraint(),
            lambda_sr=self.lambda_sr,
            lambda_p=self.lambda_p,
            lambda_ng=self.lambda_ng,
        )

    def inversion(self) -> InversionSettings:
        return InversionSettings(self.null_inner_steps, self.null_lr, self.null_early_stop)

    def backend_kwargs(self) -> dict:
        opts = dict(self.backend_options)
        if self.backend == "toy":
            opts.setdefault("seed", self.seed)
        return opts
