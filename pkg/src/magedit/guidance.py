"""Masked gradient guidance on the editing-branch latent.

Windows are counted in denoising steps on the sample grid, ``T`` (noisiest)
down to 1. A window ``[T, tau]`` includes ``T`` and excludes ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

from magedit.attention import (
    RECONSTRUCTION,
    AttentionBundle,
    EditMask,
    in_mask_mean,
    in_out_ratio,
    inject,
    reweight,
)
from magedit.constraints import ConstraintSpec, total_loss
from magedit.errors import BackendError, ConfigError, ContractError, NumericAbort
from magedit.schedule import DiffusionSchedule, asymmetric_step, cfg_combine, ddim_step

SNR_SCHEDULE = "snr_schedule"
CONSTANT = "constant"


@dataclass(frozen=True)
class GuidanceConfig:
    max_it: int = 15
    tau1: int = 10
    tau2: int = 25
    delta_mode: str = SNR_SCHEDULE
    delta_constant: float = 1.0
    sa_window_end: int = 25
    blend_window_start: int = 15
    asymmetric: bool = True
    guidance_scale: float = 7.5
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.max_it < 1:
            raise ConfigError("max_it must be >= 1")
        if self.delta_mode not in (SNR_SCHEDULE, CONSTANT):
            raise ConfigError(f"unknown delta mode {self.delta_mode!r}")
        for name in ("tau1", "tau2", "sa_window_end", "blend_window_start"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def validate(self, num_steps: int) -> None:
        for name in ("tau1", "tau2", "sa_window_end", "blend_window_start"):
            if not 0 <= getattr(self, name) <= num_steps:
                raise ConfigError(f"{name}={getattr(self, name)} outside [0, {num_steps}]")

    def injects_attention(self, step: int) -> bool:
        return step > self.tau1

    def optimizes(self, step: int) -> bool:
        return step > self.tau2

    def injects_self_attention(self, step: int) -> bool:
        return step > self.sa_window_end

    def blends(self, step: int) -> bool:
        return step <= self.blend_window_start

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LatentState:
    z: torch.Tensor
    t: int
    branch: str = "editing"


@dataclass
class StepTrace:
    step: int
    t: int
    optimized: bool
    injected: bool
    delta: float | None = None
    losses: list[float] = field(default_factory=list)
    per_group: list[list[float]] = field(default_factory=list)
    in_mask_before: float | None = None
    in_mask_after: float | None = None
    in_out_ratio: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def delta_at(t: int, sched: DiffusionSchedule, cfg: GuidanceConfig) -> float:
    if cfg.delta_mode == CONSTANT:
        return cfg.delta_constant
    a = sched.alpha(t)
    return math.sqrt((1 - a) / a)


def masked_latent_update(z: torch.Tensor, grad: torch.Tensor, mask, delta: float) -> torch.Tensor:
    """Gradient step inside the mask; cells outside keep their exact values."""
    if grad.shape != z.shape:
        raise ContractError(f"gradient shape {tuple(grad.shape)} != latent {tuple(z.shape)}")
    m = mask.latent_mask if isinstance(mask, EditMask) else mask
    m = torch.as_tensor(m, dtype=torch.bool)
    if tuple(m.shape) != tuple(z.shape[-2:]):
        raise ContractError(f"mask shape {tuple(m.shape)} != latent spatial {tuple(z.shape[-2:])}")
    return torch.where(m, z - delta * grad, z)


def edit_positions(pair) -> list[int]:
    return [p for g in pair.groups for p in g] or list(pair.new_target)


def _attention_edit(recon_bundle, pair, reweight_scale):
    def edit(bundle: AttentionBundle) -> AttentionBundle:
        mixed = inject(recon_bundle, bundle, pair)
        if reweight_scale is not None:
            for p in pair.new_target:
                mixed = reweight(mixed, p, reweight_scale)
        return mixed

    return edit


def _call(fn, what, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (BackendError, NumericAbort, ContractError, ConfigError):
        raise
    except Exception as exc:
        raise BackendError(f"backend failed during {what}: {exc}") from exc


def guidance_loss_fn(recon_bundle, pair, spec: ConstraintSpec, mask, sink: list | None = None):
    """Objective on the editing-branch bundles: inject, then constrain.

    Takes one bundle for the target prompt plus one per negative prompt. Per-group
    losses are appended to ``sink`` when given.
    """

    def loss_fn(edit_bundle, *negative_bundles):
        mixed = inject(recon_bundle, edit_bundle, pair)
        negs = [inject(recon_bundle, b, n) for n, b in zip(pair.negatives, negative_bundles)]
        loss, per_group = total_loss(spec, mixed, pair, mask, negs)
        if sink is not None:
            sink.append([float(g.detach()) if torch.is_tensor(g) else float(g) for g in per_group])
        return loss

    return loss_fn


def guidance_prompts(pair) -> list:
    return [pair.target] + [n.tokens for n in pair.negatives]


def guide_latent(
    z: torch.Tensor,
    t: int,
    pair,
    mask: EditMask,
    spec: ConstraintSpec,
    cfg: GuidanceConfig,
    backend,
    recon_bundle: AttentionBundle,
    delta: float,
    trace: StepTrace | None = None,
) -> torch.Tensor:
    """``cfg.max_it`` masked gradient steps on the editing latent."""
    trace = trace if trace is not None else StepTrace(step=0, t=t, optimized=True, injected=True)
    step = trace.step
    positions = edit_positions(pair)
    groups_seen: list[list[float]] = []
    loss_fn = guidance_loss_fn(recon_bundle.detach(), pair, spec, mask, groups_seen)
    prompts = guidance_prompts(pair)
    z = z.detach()
    for it in range(cfg.max_it):
        try:
            res = backend.loss_and_gradient(
                z, prompts, t, loss_fn, cells=mask.latent_mask, h=cfg.fd_step
            )
        except NumericAbort as exc:
            raise NumericAbort(f"step {step} iteration {it}: {exc}", trace.losses) from exc
        except (BackendError, ContractError, ConfigError):
            raise
        except Exception as exc:
            raise BackendError(f"backend failed at step {step} iteration {it}: {exc}") from exc
        if not math.isfinite(res.loss):
            raise NumericAbort(f"non-finite loss at step {step} iteration {it}", trace.losses)
        trace.losses.append(res.loss)
        trace.per_group.append(groups_seen[-1])
        if it == 0:
            trace.in_mask_before = in_mask_mean(res.bundles[0], positions, mask) if positions else None
        z = masked_latent_update(z, res.grad, mask, delta)
    return z


def mag_denoise_step(
    z_recon: LatentState,
    z_edit: LatentState,
    pair,
    mask: EditMask,
    spec: ConstraintSpec,
    cfg: GuidanceConfig,
    backend,
    sched: DiffusionSchedule,
    uncond_embedding=None,
    recon_bundle: AttentionBundle | None = None,
    reweight_scale: float | None = None,
) -> tuple[LatentState, StepTrace]:
    """One editing-branch denoising step with mask-based attention guidance.

    The reconstruction bundle is computed once per step (its latent is fixed),
    then up to ``max_it`` masked gradient updates are applied to the editing
    latent before the final injected, guided DDIM update.
    """
    if z_recon.t != z_edit.t:
        raise ContractError("both branches must be at the same timestep")
    t = z_edit.t
    t_prev = sched.prev_timestep(t)
    step = sched.step_number(t)
    optimize = cfg.optimizes(step) and bool(pair.groups) and reweight_scale is None
    injected = cfg.injects_attention(step)
    trace = StepTrace(step=step, t=t, optimized=optimize, injected=injected)
    positions = edit_positions(pair)

    if recon_bundle is None:
        recon_bundle = _call(
            backend.capture, "reconstruction capture", z_recon.z, pair.source, t,
            branch=RECONSTRUCTION,
        )
    recon_bundle = recon_bundle.detach()

    z_raw = z_edit.z.detach()
    z = z_raw
    if optimize:
        trace.delta = delta_at(t, sched, cfg)
        z = guide_latent(z_raw, t, pair, mask, spec, cfg, backend, recon_bundle, trace.delta, trace)

    edit_fn = _attention_edit(recon_bundle, pair, reweight_scale) if injected else None
    sa = cfg.injects_self_attention(step)
    with torch.no_grad():
        pred, bundle = _call(
            backend.predict, "final forward", z, pair.target, t,
            uncond_embedding=uncond_embedding, attention_edit=edit_fn,
            guidance_weight=cfg.guidance_scale, inject_self_attention=sa,
        )
        eps = cfg_combine(pred)
        if positions:
            trace.in_mask_after = in_mask_mean(bundle, positions, mask)
            trace.in_out_ratio = in_out_ratio(bundle, positions, mask)
        if not optimize:
            z_next = ddim_step(z, eps, t, t_prev, sched)
        else:
            if cfg.asymmetric:
                raw_pred, _ = _call(
                    backend.predict, "un-optimized forward", z_raw, pair.target, t,
                    uncond_embedding=uncond_embedding, attention_edit=edit_fn,
                    guidance_weight=cfg.guidance_scale, inject_self_attention=sa,
                )
                eps_raw = cfg_combine(raw_pred)
            else:
                eps_raw = eps
            z_next = asymmetric_step(z, z_raw, eps, eps_raw, t, t_prev, sched)
    if not torch.isfinite(z_next).all():
        raise NumericAbort(f"non-finite latent after step {step}", trace.losses)
    return LatentState(z_next, t_prev, z_edit.branch), trace
