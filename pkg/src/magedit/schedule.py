"""DDIM timestep arithmetic.

Timesteps are 1-based: ``alpha_bar[t]`` is the cumulative product of ``1 - beta_s``
for ``s <= t`` and ``alpha_bar[0] == 1``. The sample grid uses "leading" spacing,
``t = stride * k`` for ``k = n, ..., 1``, so the last step always lands on ``t = 0``.

All update rules accept python floats or tensors for the latents; the schedule
coefficients are plain floats.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import torch

from magedit.errors import ContractError, ScheduleError


@dataclass(frozen=True)
class DiffusionSchedule:
    num_train_steps: int
    sample_steps: tuple[int, ...]
    alpha_bar: tuple[float, ...]
    eta: float = 0.0
    beta_range: tuple[float, float] | None = None
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.alpha_bar) != self.num_train_steps + 1:
            raise ScheduleError("alpha_bar must cover timesteps 0..num_train_steps")
        if self.alpha_bar[0] != 1.0:
            raise ScheduleError("alpha_bar(0) must be 1")
        for a in self.alpha_bar:
            if not 0.0 < a <= 1.0:
                raise ScheduleError(f"alpha_bar value {a} outside (0, 1]")
        if any(b >= a for a, b in zip(self.alpha_bar, self.alpha_bar[1:])):
            raise ScheduleError("alpha_bar must be strictly decreasing in t")
        steps = tuple(int(s) for s in self.sample_steps)
        if not steps or any(b >= a for a, b in zip(steps, steps[1:])):
            raise ScheduleError("sample_steps must be non-empty and strictly descending")
        if steps[-1] < 1 or steps[0] > self.num_train_steps:
            raise ScheduleError("sample_steps outside [1, num_train_steps]")
        if self.eta < 0:
            raise ScheduleError("eta must be >= 0")
        object.__setattr__(self, "sample_steps", steps)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(steps)})
        for t, t_prev in self.pairs():
            if self.sigma(t, t_prev) ** 2 > 1.0 - self.alpha(t_prev) + 1e-15:
                raise ScheduleError(f"sigma^2 exceeds 1 - alpha_prev at t={t}; lower eta")

    @property
    def num_steps(self) -> int:
        return len(self.sample_steps)

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.num_train_steps:
            raise ScheduleError(f"timestep {t} outside the schedule")
        return self.alpha_bar[t]

    def prev_timestep(self, t: int) -> int:
        i = self._index.get(t)
        if i is None:
            raise ScheduleError(f"timestep {t} is not on the sample grid")
        return self.sample_steps[i + 1] if i + 1 < len(self.sample_steps) else 0

    def pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) for every denoising step, starting from the noisiest."""
        return [(t, self.prev_timestep(t)) for t in self.sample_steps]

    def step_number(self, t: int) -> int:
        """Position of ``t`` on the grid counted from the clean end: T, ..., 1."""
        i = self._index.get(t)
        if i is None:
            raise ScheduleError(f"timestep {t} is not on the sample grid")
        return len(self.sample_steps) - i

    def sigma(self, t: int, t_prev: int) -> float:
        if self.eta == 0:
            return 0.0
        a_t, a_prev = self.alpha(t), self.alpha(t_prev)
        if a_t >= 1.0:
            return 0.0
        return self.eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)

    def to_dict(self) -> dict:
        return {
            "num_train_steps": self.num_train_steps,
            "num_sample_steps": self.num_steps,
            "beta_range": list(self.beta_range) if self.beta_range else None,
            "eta": self.eta,
            "sample_steps": list(self.sample_steps),
        }

    def digest(self) -> str:
        payload = json.dumps(
            {"alpha_bar": [repr(a) for a in self.alpha_bar], **self.to_dict()}, sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class NoisePrediction:
    conditional: object
    unconditional: object
    guidance_weight: float = 7.5

    def __post_init__(self):
        if _shape(self.conditional) != _shape(self.unconditional):
            raise ContractError("conditional and unconditional predictions differ in shape")


def _shape(x):
    return tuple(x.shape) if hasattr(x, "shape") else ()


def make_schedule(
    num_train_steps: int = 1000,
    num_sample_steps: int = 50,
    beta_range: tuple[float, float] = (0.00085, 0.012),
    eta: float = 0.0,
) -> DiffusionSchedule:
    """Linear-beta schedule subsampled to ``num_sample_steps`` evenly strided steps."""
    if num_train_steps < 1:
        raise ScheduleError("num_train_steps must be positive")
    if not 1 <= num_sample_steps <= num_train_steps:
        raise ScheduleError("num_sample_steps must be in [1, num_train_steps]")
    b0, b1 = float(beta_range[0]), float(beta_range[1])
    if not 0 < b0 <= b1 < 1:
        raise ScheduleError(f"invalid beta range {beta_range}")
    if num_train_steps == 1:
        betas = [b0]
    else:
        betas = [b0 + (b1 - b0) * i / (num_train_steps - 1) for i in range(num_train_steps)]
    alpha_bar = [1.0]
    for b in betas:
        alpha_bar.append(alpha_bar[-1] * (1.0 - b))
    stride = num_train_steps // num_sample_steps
    steps = tuple(stride * k for k in range(num_sample_steps, 0, -1))
    return DiffusionSchedule(
        num_train_steps=num_train_steps,
        sample_steps=steps,
        alpha_bar=tuple(alpha_bar),
        eta=float(eta),
        beta_range=(b0, b1),
    )


def cfg_combine(pred: NoisePrediction):
    """Classifier-free guidance: ``w * cond + (1 - w) * uncond``."""
    w = pred.guidance_weight
    return w * pred.conditional + (1 - w) * pred.unconditional


def _check_alphas(alpha_t, alpha_prev):
    for a in (alpha_t, alpha_prev):
        if not 0.0 < a <= 1.0:
            raise ScheduleError(f"alpha {a} outside (0, 1]")


def ddim_update(z_t, eps, alpha_t: float, alpha_prev: float):
    _check_alphas(alpha_t, alpha_prev)
    coef = math.sqrt(1 / alpha_prev - 1) - math.sqrt(1 / alpha_t - 1)
    return math.sqrt(alpha_prev / alpha_t) * z_t + coef * math.sqrt(alpha_prev) * eps


def ddim_inverse_update(z_prev, eps, alpha_prev: float, alpha_t: float):
    _check_alphas(alpha_t, alpha_prev)
    coef = math.sqrt(1 / alpha_t - 1) - math.sqrt(1 / alpha_prev - 1)
    return math.sqrt(alpha_t / alpha_prev) * z_prev + coef * math.sqrt(alpha_t) * eps


def ddim_step(z_t, eps, t: int, t_prev: int, sched: DiffusionSchedule):
    """Deterministic DDIM step from ``t`` to ``t_prev``."""
    if t <= t_prev:
        raise ContractError("ddim_step needs t > t_prev")
    return ddim_update(z_t, eps, sched.alpha(t), sched.alpha(t_prev))


def ddim_inversion_step(z_t_prev, eps, t_prev: int, t: int, sched: DiffusionSchedule):
    """Inverse of :func:`ddim_step` under the fixed-noise assumption."""
    if t <= t_prev:
        raise ContractError("ddim_inversion_step needs t > t_prev")
    return ddim_inverse_update(z_t_prev, eps, sched.alpha(t_prev), sched.alpha(t))


def guided_update(z_opt, eps_opt, eps_raw, alpha_t: float, alpha_prev: float, sigma: float = 0.0):
    """Predicted-x0 update whose direction term may use a different noise estimate.

    Passing ``eps_raw = eps_opt`` gives the symmetric form. The ``sigma * z_opt``
    term is kept exactly as the method writes it and vanishes for ``sigma = 0``.
    """
    _check_alphas(alpha_t, alpha_prev)
    direction = 1.0 - alpha_prev - sigma**2
    if direction < 0:
        raise ScheduleError("sigma^2 exceeds 1 - alpha_prev")
    x0 = (z_opt - math.sqrt(1 - alpha_t) * eps_opt) / math.sqrt(alpha_t)
    out = math.sqrt(alpha_prev) * x0 + math.sqrt(direction) * eps_raw
    if sigma != 0.0:
        out = out + sigma * z_opt
    return out


def asymmetric_step(z_opt, z_raw, eps_opt, eps_raw, t: int, t_prev: int, sched: DiffusionSchedule):
    """Step the optimized latent, taking the direction term from the un-optimized prediction.

    ``z_raw`` is accepted for call-site symmetry and shape checking; only its
    noise prediction ``eps_raw`` enters the update.
    """
    if t <= t_prev:
        raise ContractError("asymmetric_step needs t > t_prev")
    if _shape(z_opt) != _shape(z_raw):
        raise ContractError("optimized and raw latents differ in shape")
    return guided_update(
        z_opt, eps_opt, eps_raw, sched.alpha(t), sched.alpha(t_prev), sched.sigma(t, t_prev)
    )


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)
