"""Backends used by the CLI tests through ``--backend external``."""

import torch

from magedit.backend import ToyDenoiser


class NaNDenoiser(ToyDenoiser):
    def capture(self, z, prompt, t, attention_edit=None, branch="editing"):
        b = super().capture(z, prompt, t, attention_edit, branch)
        return b.with_maps(b.maps * float("nan"))


class FlakyDenoiser(ToyDenoiser):
    def predict(self, *args, **kwargs):
        raise RuntimeError("out of device memory")


def nan_backend(**kw):
    return NaNDenoiser(**kw)


def flaky_backend(**kw):
    return FlakyDenoiser(**kw)


def toy_backend(**kw):
    return ToyDenoiser(**kw)
