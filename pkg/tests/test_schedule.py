import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from magedit.errors import ContractError, ScheduleError
from magedit.schedule import (
    DiffusionSchedule,
    NoisePrediction,
    asymmetric_step,
    cfg_combine,
    ddim_inverse_update,
    ddim_inversion_step,
    ddim_step,
    ddim_update,
    guided_update,
    make_schedule,
)

alphas = st.floats(0.001, 1.0)
values = st.floats(-5, 5)


def test_single_factor_alpha_bar():
    s = make_schedule(1, 1, (0.5, 0.5))
    assert s.alpha(1) == 0.5


def test_two_step_cumulative_product():
    s = make_schedule(2, 2, (0.1, 0.3))
    assert s.alpha(2) == pytest.approx(0.63, abs=1e-12)


def test_eta_zero_means_no_noise():
    s = make_schedule()
    assert all(s.sigma(t, tp) == 0.0 for t, tp in s.pairs())


def test_default_grid():
    s = make_schedule()
    assert s.num_steps == 50
    assert s.sample_steps[0] == 1000 and s.sample_steps[-1] == 20
    assert s.pairs()[-1] == (20, 0)
    assert s.step_number(1000) == 50 and s.step_number(20) == 1
    assert s.alpha(0) == 1.0


def test_invalid_schedules_rejected():
    with pytest.raises(ScheduleError):
        make_schedule(10, 20)
    with pytest.raises(ScheduleError):
        make_schedule(beta_range=(0.2, 0.1))
    with pytest.raises(ScheduleError):
        DiffusionSchedule(2, (2, 1), (1.0, 0.5, 0.6))
    with pytest.raises(ScheduleError):
        make_schedule().prev_timestep(7)


def test_large_eta_violates_direction_term():
    # with a coarse grid the eta-derived sigma stays valid; check the guard directly instead
    with pytest.raises(ScheduleError):
        guided_update(1.0, 0.0, 0.0, 0.5, 0.9, sigma=0.5)


def test_cfg_identities():
    c, u = torch.randn(3), torch.randn(3)
    assert torch.equal(cfg_combine(NoisePrediction(c, u, 1.0)), c)
    assert torch.equal(cfg_combine(NoisePrediction(c, u, 0.0)), u)
    assert cfg_combine(NoisePrediction(1.0, 0.0, 7.5)) == 7.5


def test_cfg_shape_mismatch():
    with pytest.raises(ContractError):
        NoisePrediction(torch.zeros(2), torch.zeros(3))


def test_ddim_examples():
    assert ddim_update(1.0, 0.0, 0.3, 0.3) == pytest.approx(1.0, abs=1e-15)
    assert ddim_update(1.0, 1.0, 0.25, 1.0) == pytest.approx((1 - math.sqrt(0.75)) / 0.5, abs=1e-12)
    assert ddim_update(1.0, 0.0, 0.25, 0.64) == pytest.approx(1.6, abs=1e-12)


def test_inverse_examples():
    x = (1 - math.sqrt(0.75)) / 0.5
    assert ddim_inverse_update(x, 1.0, 1.0, 0.25) == pytest.approx(1.0, abs=1e-12)
    assert ddim_inverse_update(0.7, 3.0, 0.4, 0.4) == pytest.approx(0.7, abs=1e-15)


def test_alpha_out_of_range():
    with pytest.raises(ScheduleError):
        ddim_update(1.0, 0.0, 0.0, 0.5)
    with pytest.raises(ScheduleError):
        ddim_update(1.0, 0.0, 0.5, 1.5)


@given(values, values, alphas, alphas)
def test_inverse_round_trip(z, eps, a, b):
    a_t, a_prev = min(a, b), max(a, b)
    back = ddim_inverse_update(ddim_update(z, eps, a_t, a_prev), eps, a_prev, a_t)
    assert back == pytest.approx(z, abs=1e-9 * max(1.0, 1 / a_t))


def test_step_wrappers_use_grid():
    s = make_schedule()
    z, eps = torch.randn(4, 2, 2, dtype=torch.float64), torch.randn(4, 2, 2, dtype=torch.float64)
    out = ddim_step(z, eps, 1000, 980, s)
    assert torch.allclose(ddim_inversion_step(out, eps, 980, 1000, s), z, atol=1e-12)
    with pytest.raises(ContractError):
        ddim_step(z, eps, 980, 1000, s)


def test_guided_update_example():
    out = guided_update(1.0, 0.2, 0.5, 0.25, 0.64)
    assert out == pytest.approx(0.8 * (1 - math.sqrt(0.75) * 0.2) / 0.5 + 0.6 * 0.5, abs=1e-12)
    assert out == pytest.approx(1.622872, abs=1e-6)


@settings(max_examples=200)
@given(values, values, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_symmetric_guided_update_is_ddim(z, eps, a, b):
    a_t, a_prev = min(a, b), max(a, b)
    assert guided_update(z, eps, eps, a_t, a_prev) == pytest.approx(
        ddim_update(z, eps, a_t, a_prev), abs=1e-10
    )


def test_asymmetric_step_equal_inputs():
    s = make_schedule()
    z, eps = torch.randn(4, 3, 3, dtype=torch.float64), torch.randn(4, 3, 3, dtype=torch.float64)
    out = asymmetric_step(z, z, eps, eps, 500, 480, s)
    assert torch.equal(out, guided_update(z, eps, eps, s.alpha(500), s.alpha(480)))
    assert torch.allclose(out, ddim_step(z, eps, 500, 480, s), atol=1e-12)


def test_eta_schedule_sigma_positive():
    s = make_schedule(eta=1.0)
    sig = [s.sigma(t, tp) for t, tp in s.pairs()]
    assert all(x > 0 for x in sig[:-1])
    assert s.digest() != make_schedule().digest()
