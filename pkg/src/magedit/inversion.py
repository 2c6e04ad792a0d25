"""DDIM inversion, null-text optimization and the on-disk trajectory cache."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from magedit.errors import BackendError, ConfigError, MissingTrajectory, NumericAbort
from magedit.schedule import DiffusionSchedule, cfg_combine, ddim_inversion_step, ddim_step


@dataclass
class InversionTrajectory:
    latents: dict[int, torch.Tensor]
    null_embeddings: dict[int, torch.Tensor] = field(default_factory=dict)
    reconstruction_error: float | None = None
    plain_replay_error: float | None = None
    aborted_at: int | None = None

    @property
    def timesteps(self) -> list[int]:
        return sorted(self.latents, reverse=True)

    @property
    def z0(self) -> torch.Tensor:
        return self.latents[0]

    def z_T(self) -> torch.Tensor:
        return self.latents[max(self.latents)]

    def null_for(self, t: int):
        return self.null_embeddings.get(t)


def _predict(backend, z, prompt, t, **kw):
    try:
        return backend.predict(z, prompt, t, **kw)
    except (BackendError, NumericAbort):
        raise
    except Exception as exc:  # adapter failures surface with the timestep
        raise BackendError(f"backend failed at t={t}: {exc}") from exc


def ddim_invert(z0, prompt, backend, sched: DiffusionSchedule) -> InversionTrajectory:
    """Run the DDIM update backwards with conditional noise (guidance weight 1)."""
    z0 = torch.as_tensor(z0, dtype=torch.float64)
    if not torch.isfinite(z0).all():
        raise ConfigError("z0 contains non-finite values")
    latents = {0: z0.clone()}
    z = z0
    with torch.no_grad():
        for t in reversed(sched.sample_steps):
            t_prev = sched.prev_timestep(t)
            pred, _ = _predict(backend, z, prompt, t, guidance_weight=1.0)
            z = ddim_inversion_step(z, pred.conditional, t_prev, t, sched)
            latents[t] = z.clone()
    return InversionTrajectory(latents)


def replay(
    traj: InversionTrajectory,
    prompt,
    backend,
    sched: DiffusionSchedule,
    guidance_weight: float = 7.5,
    null_embeddings: dict | None = None,
) -> torch.Tensor:
    """Denoise from the trajectory's noisiest latent back to t = 0."""
    z = traj.z_T()
    with torch.no_grad():
        for t, t_prev in sched.pairs():
            null = (null_embeddings or {}).get(t)
            pred, _ = _predict(
                backend, z, prompt, t, uncond_embedding=null, guidance_weight=guidance_weight
            )
            eps = pred.conditional if guidance_weight == 1.0 else cfg_combine(pred)
            z = ddim_step(z, eps, t, t_prev, sched)
    return z


def _step_loss(backend, z, prompt, t, t_prev, sched, emb, w, target):
    pred, _ = _predict(backend, z, prompt, t, uncond_embedding=emb, guidance_weight=w)
    z_prev = ddim_step(z, cfg_combine(pred), t, t_prev, sched)
    return ((z_prev - target) ** 2).sum()


def null_text_optimize(
    traj: InversionTrajectory,
    prompt,
    backend,
    sched: DiffusionSchedule,
    inner_steps: int = 10,
    lr: float = 0.01,
    early_stop: float = 1e-5,
    guidance_weight: float = 7.5,
) -> InversionTrajectory:
    """Fit one unconditional embedding per step so the guided replay retraces ``traj``.

    Each step starts from the previous step's embedding and keeps the best of the
    default null embedding, the carried-over one and every Adam iterate. If the
    finished replay still loses to the plain replay, the default embeddings are kept.
    """
    if inner_steps < 1:
        raise ConfigError("inner_steps must be >= 1")
    default = backend.null_embedding().detach()
    carried = default.clone()
    z = traj.z_T()
    nulls: dict[int, torch.Tensor] = {}
    aborted = None
    for t, t_prev in sched.pairs():
        target = traj.latents[t_prev]

        def loss_of(e):
            return _step_loss(backend, z, prompt, t, t_prev, sched, e, guidance_weight, target)

        with torch.no_grad():
            candidates = [(float(loss_of(default)), default), (float(loss_of(carried)), carried)]
        best_loss, best = min(candidates, key=lambda c: c[0])
        emb = carried.clone().requires_grad_(True)
        opt = torch.optim.Adam([emb], lr=lr)
        for _ in range(inner_steps):
            if best_loss < early_stop:
                break
            with torch.enable_grad():
                loss = loss_of(emb)
                value = float(loss.detach())
                if not math.isfinite(value):
                    aborted = t
                    break
                if value < best_loss:
                    best_loss, best = value, emb.detach().clone()
                if not loss.requires_grad:  # embedding has no effect on this step
                    break
                opt.zero_grad()
                loss.backward()
            opt.step()
        if aborted is not None:
            break
        with torch.no_grad():
            value = float(loss_of(emb))
            if math.isfinite(value) and value < best_loss:
                best_loss, best = value, emb.detach().clone()
            nulls[t] = best.detach().clone()
            carried = nulls[t]
            pred, _ = _predict(
                backend, z, prompt, t, uncond_embedding=nulls[t], guidance_weight=guidance_weight
            )
            z = ddim_step(z, cfg_combine(pred), t, t_prev, sched)

    plain = float(torch.linalg.vector_norm(replay(traj, prompt, backend, sched, guidance_weight) - traj.z0))
    out = InversionTrajectory(dict(traj.latents), nulls, None, plain, aborted)
    if aborted is not None:
        return out
    err = float(torch.linalg.vector_norm(z - traj.z0))
    if err > plain:
        out.null_embeddings = {t: default.clone() for t in sched.sample_steps}
        err = plain
    out.reconstruction_error = err
    return out


# --- cache -----------------------------------------------------------------

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def cache_key(image_hash: str, prompt_hash: str, schedule_hash: str, extra: str = "") -> str:
    return sha256_bytes("|".join([image_hash, prompt_hash, schedule_hash, extra]).encode())[:24]


def _write_raw(path: Path, tensor: torch.Tensor) -> None:
    tensor.detach().cpu().numpy().astype("<f4").tofile(path)


def _read_raw(path: Path, shape) -> torch.Tensor:
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise MissingTrajectory(f"{path} does not hold {tuple(shape)} values")
    return torch.as_tensor(arr.reshape(shape).astype(np.float64))


def save_trajectory(traj: InversionTrajectory, directory, hashes: dict | None = None) -> Path:
    """Write a manifest plus one little-endian float32 file per latent and embedding."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=directory.parent))
    steps = traj.timesteps
    shape = list(traj.z0.shape)
    null_shape = None
    for t in steps:
        _write_raw(tmp / f"z_{t:04d}.f32", traj.latents[t])
    for t, emb in traj.null_embeddings.items():
        null_shape = list(emb.shape)
        _write_raw(tmp / f"null_{t:04d}.f32", emb)
    manifest = {
        "shape": shape,
        "dtype": "float32-le",
        "timesteps": steps,
        "null_timesteps": sorted(traj.null_embeddings, reverse=True),
        "null_shape": null_shape,
        "hashes": hashes or {},
        "reconstruction_error": traj.reconstruction_error,
        "plain_replay_error": traj.plain_replay_error,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if directory.exists():
        for f in directory.iterdir():
            f.unlink()
        directory.rmdir()
    os.replace(tmp, directory)
    return directory


def load_trajectory(directory, expect_hashes: dict | None = None) -> InversionTrajectory:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise MissingTrajectory(f"no trajectory cache at {directory}")
    manifest = json.loads(path.read_text())
    if expect_hashes:
        stored = manifest.get("hashes", {})
        for key, value in expect_hashes.items():
            if stored.get(key) != value:
                raise MissingTrajectory(f"cache hash mismatch on {key!r}")
    shape = manifest["shape"]
    latents = {t: _read_raw(directory / f"z_{t:04d}.f32", shape) for t in manifest["timesteps"]}
    nulls = {
        t: _read_raw(directory / f"null_{t:04d}.f32", manifest["null_shape"])
        for t in manifest["null_timesteps"]
    }
    return InversionTrajectory(
        latents,
        nulls,
        manifest.get("reconstruction_error"),
        manifest.get("plain_replay_error"),
    )
