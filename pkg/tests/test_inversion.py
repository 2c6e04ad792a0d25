import json
import math

import pytest
import torch

from magedit.backend import ToyDenoiser
from magedit.errors import BackendError, ConfigError, MissingTrajectory
from magedit.fixtures import random_latent
from magedit.inversion import (
    ddim_invert,
    load_trajectory,
    null_text_optimize,
    replay,
    save_trajectory,
)
from magedit.schedule import NoisePrediction, make_schedule

sched = make_schedule()


class ConstantEps(ToyDenoiser):
    def __init__(self, value, **kw):
        super().__init__(**kw)
        self.value = value

    def predict(self, z, prompt, t, uncond_embedding=None, guidance_weight=7.5, **kw):
        _, bundle = super().predict(z, prompt, t, uncond_embedding=uncond_embedding, **kw)
        eps = torch.full_like(z, self.value)
        return NoisePrediction(eps, eps.clone(), guidance_weight), bundle


class NoUncond(ToyDenoiser):
    """Unconditional prediction equals the conditional one, whatever the embedding."""

    def predict(self, z, prompt, t, uncond_embedding=None, guidance_weight=7.5, **kw):
        pred, bundle = super().predict(z, prompt, t, uncond_embedding=uncond_embedding, **kw)
        return NoisePrediction(pred.conditional, pred.conditional.clone(), guidance_weight), bundle


class Broken(ToyDenoiser):
    def predict(self, *a, **kw):
        raise RuntimeError("device lost")


def test_zero_noise_closed_form():
    be = ConstantEps(0.0)
    z0 = random_latent(0)
    traj = ddim_invert(z0, be.tokenize("a cat"), be, sched)
    for t in sched.sample_steps:
        assert torch.allclose(traj.latents[t], math.sqrt(sched.alpha(t)) * z0, atol=1e-12)


def test_single_step_grid():
    s = make_schedule(1000, 1)
    be = ToyDenoiser()
    traj = ddim_invert(random_latent(0), be.tokenize("a cat"), be, s)
    assert sorted(traj.latents) == [0, 1000]


def test_constant_noise_exact_round_trip():
    be = ConstantEps(0.3)
    z0, p = random_latent(1), be.tokenize("a cat")
    traj = ddim_invert(z0, p, be, sched)
    assert float((replay(traj, p, be, sched, 1.0) - z0).abs().max()) < 1e-8


def test_toy_round_trip_w1():
    be = ToyDenoiser(seed=3)
    z0, p = random_latent(3), be.tokenize("a green sofa in a room")
    traj = ddim_invert(z0, p, be, sched)
    assert float((replay(traj, p, be, sched, 1.0) - z0).abs().max()) < 1e-3


def test_aligned_trajectory_keeps_embeddings():
    be = NoUncond(seed=2)
    z0, p = random_latent(2), be.tokenize("a cat")
    traj = ddim_invert(z0, p, be, sched)
    out = null_text_optimize(traj, p, be, sched, inner_steps=3)
    default = be.null_embedding()
    assert all(torch.equal(e, default) for e in out.null_embeddings.values())


def test_inner_steps_must_be_positive():
    be = ToyDenoiser()
    traj = ddim_invert(random_latent(0), be.tokenize("a cat"), be, sched)
    with pytest.raises(ConfigError):
        null_text_optimize(traj, be.tokenize("a cat"), be, sched, inner_steps=0)


def test_null_text_beats_plain_replay():
    be = ToyDenoiser(seed=5)
    z0, p = random_latent(5), be.tokenize("a green sofa in a room")
    out = null_text_optimize(ddim_invert(z0, p, be, sched), p, be, sched)
    assert out.reconstruction_error < out.plain_replay_error
    replayed = replay(out, p, be, sched, 7.5, out.null_embeddings)
    assert float(torch.linalg.vector_norm(replayed - z0)) == pytest.approx(out.reconstruction_error, rel=1e-9)


def test_backend_failure_names_timestep():
    with pytest.raises(BackendError, match="t=20"):
        ddim_invert(random_latent(0), ToyDenoiser().tokenize("a"), Broken(), sched)


def test_cache_round_trip(tmp_path):
    be = ToyDenoiser(seed=6)
    z0, p = random_latent(6), be.tokenize("a cat")
    traj = null_text_optimize(ddim_invert(z0, p, be, sched), p, be, sched, inner_steps=2)
    d = save_trajectory(traj, tmp_path / "key", {"image": "abc"})
    assert len(list(d.glob("z_*.f32"))) == 51
    assert json.loads((d / "manifest.json").read_text())["dtype"] == "float32-le"
    back = load_trajectory(d, {"image": "abc"})
    assert back.timesteps == traj.timesteps
    for t in traj.timesteps:
        assert torch.allclose(back.latents[t], traj.latents[t], atol=1e-6)
    for t, e in traj.null_embeddings.items():
        assert torch.allclose(back.null_for(t), e, atol=1e-6)
    with pytest.raises(MissingTrajectory):
        load_trajectory(d, {"image": "other"})
    with pytest.raises(MissingTrajectory):
        load_trajectory(tmp_path / "absent")


def test_save_replaces_existing(tmp_path):
    be = ConstantEps(0.0)
    p = be.tokenize("a cat")
    a = ddim_invert(random_latent(0), p, be, sched)
    b = ddim_invert(random_latent(1), p, be, sched)
    save_trajectory(a, tmp_path / "k")
    save_trajectory(b, tmp_path / "k")
    assert torch.allclose(load_trajectory(tmp_path / "k").z0, b.z0, atol=1e-6)
    assert [x.name for x in tmp_path.iterdir()] == ["k"]
