import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from magedit.attention import AttentionBundle, EditMask
from magedit.backend import ToyDenoiser
from magedit.constraints import (
    ConstraintSpec,
    combine_multi_prompt,
    combine_with_negative,
    phrase_loss,
    spatial_ratio_loss,
    spatial_ratio_value,
    token_ratio_loss,
    total_loss,
)
from magedit.errors import ConfigError
from magedit.prompts import align_prompts, with_groups


def bundle(*maps):
    return AttentionBundle(torch.stack([torch.as_tensor(m, dtype=torch.float64) for m in maps]))


def full(v):
    return np.full((16, 16), v)


def half_mask():
    m = np.zeros((16, 16), bool)
    m[:8] = True
    return m


def test_token_ratio_symmetric_case():
    assert float(token_ratio_loss(bundle(full(0.3), full(0.3)), 0, [1], half_mask())) == pytest.approx(0.25, abs=1e-9)


def test_token_ratio_zero_attention():
    assert float(token_ratio_loss(bundle(full(0.0), full(0.5)), 0, [1], half_mask())) == pytest.approx(1.0, abs=1e-9)


def test_token_ratio_single_cell():
    m = np.zeros((16, 16), bool)
    m[3, 4] = True
    loss = token_ratio_loss(bundle(full(0.2), full(0.6)), 0, [1], m)
    assert float(loss) == pytest.approx(0.5625, abs=1e-9)


def test_spatial_ratio_examples():
    a = np.random.default_rng(0).random((16, 16))
    assert float(spatial_ratio_loss(bundle(a), 0, np.ones((16, 16), bool), 7.0)) == pytest.approx(-1.0, abs=1e-9)
    outside = np.where(half_mask(), 0.0, 0.4)
    assert float(spatial_ratio_loss(bundle(outside), 0, half_mask(), 3.0)) == pytest.approx(3.0, abs=1e-9)
    assert spatial_ratio_value(0.5, 3.0) == pytest.approx(1.0, abs=1e-12)


def test_all_zero_map_is_finite():
    loss = spatial_ratio_loss(bundle(full(0.0)), 0, half_mask())
    assert math.isfinite(float(loss))
    loss = token_ratio_loss(bundle(full(0.0), full(0.0)), 0, [1], half_mask())
    assert math.isfinite(float(loss))


def test_negative_balance():
    assert combine_with_negative(0.4, 0.9, 2.5, 0.0) == pytest.approx(1.0)
    assert combine_with_negative(0.3, 0.3, 2.0, 2.0) == 0.0
    assert combine_with_negative(0.25, 0.81) == pytest.approx(-3.83, abs=1e-12)


def test_multi_prompt_examples():
    assert combine_multi_prompt([0.37], [1.0]) == 0.37
    assert combine_multi_prompt([0.2, 0.8], [0.5, 0.5]) == pytest.approx(0.5, abs=1e-12)
    assert combine_multi_prompt([0.123, 9.0], [1.0, 0.0]) == 0.123
    with pytest.raises(ConfigError):
        combine_multi_prompt([0.1, 0.2], [0.5, 0.6])
    with pytest.raises(ConfigError):
        combine_multi_prompt([0.1], [0.5, 0.5])


@given(st.floats(0, 1), st.floats(0.1, 10))
def test_spatial_ratio_linear_in_r(r, lam):
    assert spatial_ratio_value(r, lam) == pytest.approx(lam - (lam + 1) * r, abs=1e-12)


def test_phrase_loss_averages_tokens():
    spec = ConstraintSpec("sr")
    rng = np.random.default_rng(1)
    b = bundle(rng.random((16, 16)), rng.random((16, 16)), rng.random((16, 16)))
    avg = phrase_loss(spec, b, [0, 1], [2], half_mask())
    each = [float(spatial_ratio_loss(b, p, half_mask())) for p in (0, 1)]
    assert float(avg) == pytest.approx(sum(each) / 2, abs=1e-12)


def test_total_loss_weights_groups():
    toy = ToyDenoiser()
    pair = align_prompts(toy.tokenize("a cat and a hat"), toy.tokenize("a dog and a cap"))
    pair = with_groups(pair, weights=[0.25, 0.75])
    mask = EditMask.from_image_mask(np.kron(half_mask(), np.ones((8, 8), bool)))
    rng = np.random.default_rng(2)
    b = bundle(*[rng.random((16, 16)) for _ in range(len(pair.target))])
    loss, per_group = total_loss(ConstraintSpec("tr"), b, pair, mask)
    assert float(loss) == pytest.approx(0.25 * float(per_group[0]) + 0.75 * float(per_group[1]), abs=1e-12)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ConstraintSpec("bogus")
    assert ConstraintSpec("tr").kind == "token_ratio"
