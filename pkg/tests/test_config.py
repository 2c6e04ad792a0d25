import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from magedit.config import RunConfig
from magedit.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    g, c, s = cfg.guidance(), cfg.constraint_spec(), cfg.schedule()
    assert (g.max_it, g.tau1, g.tau2, g.guidance_scale) == (15, 10, 25, 7.5)
    assert (c.kind, c.lambda_sr, c.lambda_p, c.lambda_ng) == ("spatial_ratio", 3.0, 2.5, 5.5)
    assert s.num_steps == 50 and g.delta_mode == "constant"


def test_presets():
    color = RunConfig(edit_type="color")
    assert color.resolved_tau1() == 10 and color.resolved_constraint() == "token_ratio"
    assert color.resolved_delta_mode() == "snr_schedule"
    shape = RunConfig(edit_type="shape")
    assert shape.resolved_tau1() == 40 and shape.resolved_constraint() == "spatial_ratio"
    assert RunConfig(edit_type="shape", tau1=5).resolved_tau1() == 5


def test_round_trip(tmp_path):
    cfg = RunConfig(image="x.png", weights=[0.5, 0.5], negative_tokens=["black"], edit_type="texture")
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    again = RunConfig.load(path)
    assert again == cfg and again.dumps() == cfg.dumps()


@given(st.integers(1, 40), st.floats(0.1, 20), st.sampled_from(["tr", "sr", None]))
def test_round_trip_property(max_it, lam, kind):
    cfg = RunConfig(max_it=max_it, lambda_sr=lam, constraint=kind)
    assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg


def test_unknown_keys_and_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"max_iter": 3})
    with pytest.raises(ConfigError):
        RunConfig(edit_type="style")
    with pytest.raises(ConfigError):
        RunConfig(backend="cuda")


def test_updated_ignores_none():
    cfg = RunConfig(max_it=7).updated(max_it=None, tau2=30)
    assert cfg.max_it == 7 and cfg.tau2 == 30
