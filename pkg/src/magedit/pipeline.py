"""Two-branch editing runs: inversion, guided denoising, latent blending, manifests."""

from __future__ import annotations

import json
import os
import platform
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import torch

from magedit import __version__
from magedit.attention import RECONSTRUCTION, EditMask
from magedit.constraints import ConstraintSpec, check_weights
from magedit.errors import BackendError, ConfigError, ContractError, MagEditError, MissingTrajectory
from magedit.guidance import GuidanceConfig, LatentState, mag_denoise_step
from magedit.inversion import InversionTrajectory, ddim_invert, null_text_optimize
from magedit.prompts import PromptPair
from magedit.schedule import DiffusionSchedule, cfg_combine, ddim_step

BLEND_NOTE = (
    "blend_window_start counts denoising steps on the sample grid: blending applies "
    "to the last blend_window_start steps"
)


@dataclass(frozen=True)
class InversionSettings:
    inner_steps: int = 10
    lr: float = 0.01
    early_stop: float = 1e-5


@dataclass
class EditSession:
    source: torch.Tensor | None
    mask: EditMask
    pair: PromptPair
    spec: ConstraintSpec
    cfg: GuidanceConfig
    sched: DiffusionSchedule
    backend: Any
    seed: int = 0
    trajectory: InversionTrajectory | None = None
    inversion: InversionSettings = InversionSettings()
    reweight_scale: float | None = None
    name: str = "edit"
    config_snapshot: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    schedule_hash: str = ""
    alignment: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    status: str = "running"
    error: dict | None = None
    version: str = __version__
    # in-memory only
    reconstruction_latent: torch.Tensor | None = field(default=None, repr=False)

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def fail(self, exc: BaseException) -> None:
        self.status = "error"
        self.error = {"class": type(exc).__name__, "message": str(exc)}
        trace = getattr(exc, "trace", None)
        if trace:
            self.error["trace"] = list(trace)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("reconstruction_latent")
        d["python"] = platform.python_version()
        d["torch"] = torch.__version__
        return d

    def write(self, path) -> Path:
        return write_json_atomic(path, self.to_dict())


def write_json_atomic(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
    os.replace(tmp, path)
    return path


def invert_source(
    z0: torch.Tensor,
    prompt,
    backend,
    sched: DiffusionSchedule,
    settings: InversionSettings = InversionSettings(),
    guidance_scale: float = 7.5,
) -> InversionTrajectory:
    traj = ddim_invert(z0, prompt, backend, sched)
    return null_text_optimize(
        traj, prompt, backend, sched,
        inner_steps=settings.inner_steps, lr=settings.lr, early_stop=settings.early_stop,
        guidance_weight=guidance_scale,
    )


def _check_session(session: EditSession) -> None:
    session.cfg.validate(session.sched.num_steps)
    shape = tuple(session.backend.latent_shape[1:])
    if tuple(session.mask.latent_mask.shape) != shape:
        raise ContractError(
            f"latent mask {session.mask.latent_mask.shape} does not match backend latent {shape}"
        )
    if session.reweight_scale is not None and session.reweight_scale <= 0:
        raise ConfigError("re-weighting scale must be positive")


def _check_trajectory(traj: InversionTrajectory, sched: DiffusionSchedule) -> None:
    expected = sorted(list(sched.sample_steps) + [0])
    if sorted(traj.latents) != expected:
        raise MissingTrajectory("trajectory timesteps do not match the sample grid")


def run_edit(session: EditSession, command: str = "edit") -> tuple[torch.Tensor, RunManifest]:
    """Edit ``session.source`` and return the final edited latent with its manifest."""
    manifest = RunManifest(
        command=command,
        config=dict(session.config_snapshot),
        schedule=session.sched.to_dict(),
        schedule_hash=session.sched.digest(),
        alignment=session.pair.to_dict(),
        notes=[BLEND_NOTE],
    )
    try:
        return _run_edit(session, manifest)
    except MagEditError as exc:
        exc.manifest = manifest
        raise
    except (RuntimeError, ValueError, TypeError) as exc:  # adapter failures
        err = BackendError(f"backend failed: {exc}")
        err.manifest = manifest
        raise err from exc


def _run_edit(session: EditSession, manifest: RunManifest) -> tuple[torch.Tensor, RunManifest]:
    _check_session(session)
    torch.manual_seed(session.seed)
    backend, sched, cfg, pair = session.backend, session.sched, session.cfg, session.pair

    traj = session.trajectory
    if traj is None:
        if session.source is None:
            raise MissingTrajectory("no trajectory and no source latent to invert")
        with manifest.phase("inversion"):
            traj = invert_source(
                session.source, pair.source, backend, sched, session.inversion, cfg.guidance_scale
            )
    _check_trajectory(traj, sched)
    manifest.outputs["inversion_reconstruction_error"] = traj.reconstruction_error

    latent_mask = session.mask.latent_tensor()
    z_rec = z_edit = traj.z_T()
    with manifest.phase("denoising"):
        for t, t_prev in sched.pairs():
            null = traj.null_for(t)
            with torch.no_grad():
                pred, recon_bundle = backend.predict(
                    z_rec, pair.source, t, uncond_embedding=null,
                    guidance_weight=cfg.guidance_scale, branch=RECONSTRUCTION,
                )
                z_rec_next = ddim_step(z_rec, cfg_combine(pred), t, t_prev, sched)
            state, trace = mag_denoise_step(
                LatentState(z_rec, t, RECONSTRUCTION),
                LatentState(z_edit, t),
                pair, session.mask, session.spec, cfg, backend, sched,
                uncond_embedding=null, recon_bundle=recon_bundle,
                reweight_scale=session.reweight_scale,
            )
            z_next = state.z
            blended = cfg.blends(trace.step)
            if blended:
                z_next = torch.where(latent_mask, z_next, z_rec_next)
            if trace.optimized:
                manifest.traces.append(
                    {"step": trace.step, "t": t, "delta": trace.delta,
                     "losses": trace.losses, "per_group": trace.per_group,
                     "in_mask_before": trace.in_mask_before, "in_mask_after": trace.in_mask_after}
                )
            manifest.diagnostics.append(
                {"step": trace.step, "t": t, "optimized": trace.optimized,
                 "injected": trace.injected, "blended": blended,
                 "self_attention_injected": cfg.injects_self_attention(trace.step),
                 "in_mask_attention_mean": trace.in_mask_after,
                 "in_out_ratio": trace.in_out_ratio}
            )
            z_rec, z_edit = z_rec_next, z_next
    manifest.reconstruction_latent = z_rec
    manifest.status = "ok"
    return z_edit, manifest


def run_edit_multi(session: EditSession) -> tuple[torch.Tensor, RunManifest]:
    """Edit with several new-token groups weighted by ``pair.per_new_token_weight``."""
    pair = session.pair
    if len(pair.groups) < 2:
        raise ConfigError("multi-prompt editing needs at least two edit groups")
    weights = session.spec.per_prompt_weights or pair.per_new_token_weight
    if not weights:
        raise ConfigError("multi-prompt editing needs one weight per edit group")
    if len(weights) != len(pair.groups):
        raise ConfigError(f"got {len(weights)} weights for {len(pair.groups)} edit groups")
    check_weights(weights)
    return run_edit(session, command="edit-multi")


def run_reweight_baseline(session: EditSession, scale: float) -> tuple[torch.Tensor, RunManifest]:
    """Ablation: scale the new tokens' injected maps instead of optimizing the latent."""
    if scale <= 0:
        raise ConfigError("re-weighting scale must be positive")
    return run_edit(replace(session, reweight_scale=scale), command="reweight-baseline")


def run_iterative(sessions) -> list[tuple[torch.Tensor, RunManifest]]:
    """Chain edits; each session edits the previous session's output.

    On failure the exception carries the finished results as ``partial_results``.
    """
    outputs: list[tuple[torch.Tensor, RunManifest]] = []
    previous = None
    for session in sessions:
        if previous is not None:
            session = replace(session, source=previous, trajectory=None)
        try:
            result = run_edit(session, command="iterate")
        except MagEditError as exc:
            exc.partial_results = outputs
            raise
        outputs.append(result)
        previous = result[0]
    return outputs
