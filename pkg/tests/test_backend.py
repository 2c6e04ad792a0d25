import numpy as np
import pytest
import torch

from magedit.attention import EditMask
from magedit.backend import DenoiserBackend, ToyDenoiser, finite_difference_gradient, load_backend
from magedit.constraints import ConstraintSpec, spatial_ratio_loss
from magedit.errors import BackendError, ContractError
from magedit.fixtures import random_latent
from magedit.schedule import NoisePrediction

# frozen once from ToyDenoiser(seed=42), random_latent(42), "a blue sofa in a room", t=981
GOLDEN = {
    "ids": (17140, 49297, 34289, 4236, 17140, 24486),
    "cond_sum": -0.19390140361165364,
    "cond_abs_sum": 0.6070707783775797,
    "uncond_sum": -0.022490628115829595,
    "cond_1_3_5": 3.355214474736254e-05,
    "map2_max": 0.3358317002293384,
}


@pytest.fixture
def toy():
    return ToyDenoiser(seed=42)


def test_golden_prediction(toy):
    prompt = toy.tokenize("a blue sofa in a room")
    assert prompt.ids == GOLDEN["ids"]
    pred, b = toy.predict(random_latent(42), prompt, 981)
    c, u = pred.conditional, pred.unconditional
    assert float(c.sum()) == pytest.approx(GOLDEN["cond_sum"], rel=1e-10)
    assert float(c.abs().sum()) == pytest.approx(GOLDEN["cond_abs_sum"], rel=1e-10)
    assert float(u.sum()) == pytest.approx(GOLDEN["uncond_sum"], rel=1e-10)
    assert float(c[1, 3, 5]) == pytest.approx(GOLDEN["cond_1_3_5"], rel=1e-10)
    assert float(b.maps[2].max()) == pytest.approx(GOLDEN["map2_max"], rel=1e-10)


def test_deterministic(toy):
    prompt = toy.tokenize("a blue sofa")
    z = random_latent(3)
    a, ba = toy.predict(z, prompt, 500)
    b, bb = ToyDenoiser(seed=42).predict(z, prompt, 500)
    assert torch.equal(a.conditional, b.conditional) and torch.equal(ba.maps, bb.maps)


def test_single_token_rows_are_one(toy):
    b = toy.capture(random_latent(1), toy.tokenize("dog"), 10)
    assert torch.equal(b.maps, torch.ones_like(b.maps))


def test_identical_tokens_uniform(toy):
    b = toy.capture(random_latent(1), toy.tokenize("dog dog dog"), 10)
    assert torch.allclose(b.maps, torch.full_like(b.maps, 1 / 3), atol=1e-15)


def test_zero_latent_zero_query_uniform(toy):
    toy.W_q = torch.zeros_like(toy.W_q)
    b = toy.capture(torch.zeros(4, 16, 16, dtype=torch.float64), toy.tokenize("a blue sofa"), 10)
    assert torch.allclose(b.maps, torch.full_like(b.maps, 1 / 3), atol=1e-15)


def test_output_head_linearity(toy):
    z, prompt = random_latent(5), toy.tokenize("a red car")
    base, _ = toy.predict(z, prompt, 100)
    toy.W_o = 2 * toy.W_o
    doubled, _ = toy.predict(z, prompt, 100)
    lin = toy.skip * z
    assert torch.allclose(doubled.conditional - lin, 2 * (base.conditional - lin), atol=1e-15)


def test_rows_sum_to_one(toy):
    b = toy.capture(random_latent(2), toy.tokenize("a photo of a cat on a mat"), 10)
    assert torch.allclose(b.row_sums(), torch.ones(16, 16, dtype=torch.float64), atol=1e-12)


def test_contract_errors(toy):
    with pytest.raises(ContractError):
        toy.tokenize(" ".join(["word"] * 78))
    with pytest.raises(ContractError):
        toy.predict(torch.zeros(3, 16, 16, dtype=torch.float64), toy.tokenize("a"), 1)


def test_constant_loss_zero_gradient(toy):
    g = toy.loss_gradient(random_latent(0), toy.tokenize("a dog"), 10, lambda b: torch.tensor(1.5))
    assert torch.equal(g, torch.zeros(4, 16, 16, dtype=torch.float64))


def test_gradient_scales_linearly(toy):
    mask = np.zeros((16, 16), bool)
    mask[4:9, 4:12] = True
    z, p = random_latent(0), toy.tokenize("a blue dog")

    def f(b):
        return spatial_ratio_loss(b, 1, mask)

    g1 = toy.loss_gradient(z, p, 10, f)
    g2 = toy.loss_gradient(z, p, 10, lambda b: 2 * f(b))
    assert torch.equal(g2, 2 * g1)


def test_analytic_matches_finite_difference(toy):
    mask = np.zeros((16, 16), bool)
    mask[2:6, 3:9] = True
    z, p = random_latent(9), toy.tokenize("a blue dog")

    def f(b):
        return spatial_ratio_loss(b, 1, mask)

    analytic = toy.loss_gradient(z, p, 10, f)
    fd = finite_difference_gradient(lambda zz: float(f(toy.capture(zz, p, 10))), z, h=1e-4)
    assert float((analytic - fd).abs().max() / fd.abs().max()) < 1e-6


class ForwardOnly(DenoiserBackend):
    """Adapter without gradients: exercises the finite-difference fallback."""

    def __init__(self):
        self.inner = ToyDenoiser(seed=1)

    def tokenize(self, text):
        return self.inner.tokenize(text)

    def predict(self, z, prompt, t, **kw):
        return self.inner.predict(z, prompt, t, **kw)

    def null_embedding(self):
        return self.inner.null_embedding()


def test_fallback_gradient_matches_toy():
    be = ForwardOnly()
    mask = np.zeros((16, 16), bool)
    mask[5:8, 5:8] = True
    z, p = random_latent(4), be.tokenize("a blue dog")

    def f(b):
        return spatial_ratio_loss(b, 1, mask)

    fd = be.loss_and_gradient(z, [p], 10, f, cells=mask).grad
    exact = be.inner.loss_gradient(z, p, 10, f)
    assert torch.all(fd[:, ~torch.as_tensor(mask)] == 0)
    inside = torch.as_tensor(mask)
    assert torch.allclose(fd[:, inside], exact[:, inside], rtol=1e-5, atol=1e-10)


def test_fallback_has_no_codec():
    with pytest.raises(BackendError):
        ForwardOnly().encode(np.zeros((128, 128, 3)))


def test_encode_decode_round_trip(toy):
    img = np.zeros((128, 128, 3), np.uint8)
    img[:, 64:] = (200, 40, 10)
    z = toy.encode(img)
    assert z.shape == (4, 16, 16)
    back = toy.decode(z)
    assert back.shape == img.shape
    assert np.abs(back.astype(int) - img.astype(int)).max() <= 1


def test_load_backend():
    assert isinstance(load_backend("toy", options={"seed": 3}), ToyDenoiser)
    be = load_backend("external", "magedit.backend:ToyDenoiser", {"seed": 2})
    assert be.seed == 2
    with pytest.raises(BackendError):
        load_backend("external", "no.such.module:thing")
    with pytest.raises(BackendError):
        load_backend("external", None)


def test_noise_prediction_carries_weight(toy):
    pred, _ = toy.predict(random_latent(0), toy.tokenize("a cat"), 10, guidance_weight=3.0)
    assert isinstance(pred, NoisePrediction) and pred.guidance_weight == 3.0
