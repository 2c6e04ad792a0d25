"""Denoiser contract and the built-in toy denoiser.

A backend turns ``(latent, prompt, timestep)`` into a noise prediction plus the
cross-attention bundle captured at the working resolution. Backends whose
``predict`` is differentiable in torch declare ``analytic_gradient``; the rest
fall back to central finite differences restricted to the edit cells.

Adapting a real latent-diffusion model means implementing :class:`DenoiserBackend`
with these hooks:

* cross-attention taps on every 16x16 layer, returning post-softmax
  probabilities ``(heads, 256, tokens)`` to :func:`magedit.attention.aggregate`;
* an override hook that substitutes the edited bundle into those layers for the
  conditional pass (``attention_edit``);
* self-attention replacement from the reconstruction pass when
  ``inject_self_attention`` is set;
* gradient access from the latent input to the captured bundle (or accept the
  finite-difference fallback);
* optionally ``encode``/``decode`` between images and latents.
"""

from __future__ import annotations

import abc
import importlib
import math
import re
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from magedit.attention import EDITING, AttentionBundle
from magedit.errors import BackendError, ContractError, NumericAbort
from magedit.prompts import TokenSequence
from magedit.schedule import NoisePrediction

AttentionEdit = Callable[[AttentionBundle], AttentionBundle]


@dataclass(frozen=True)
class Capabilities:
    concurrent_safe: bool = False
    analytic_gradient: bool = False


class GradientResult(NamedTuple):
    loss: float
    grad: torch.Tensor
    bundles: tuple


def finite_difference_gradient(
    loss_at: Callable[[torch.Tensor], float],
    z: torch.Tensor,
    cells: np.ndarray | torch.Tensor | None = None,
    h: float = 1e-4,
) -> torch.Tensor:
    """Central differences of ``loss_at`` w.r.t. ``z``.

    ``cells`` is an optional ``(H, W)`` boolean raster; only those spatial cells
    (all channels) are perturbed and every other entry of the result is zero.
    """
    z = z.detach()
    grad = torch.zeros_like(z)
    if cells is None:
        index = list(np.ndindex(*z.shape))
    else:
        cells = np.asarray(cells, dtype=bool)
        index = [(c, i, j) for c in range(z.shape[0]) for i, j in zip(*np.nonzero(cells))]
    for idx in index:
        zp = z.clone()
        zp[idx] += h
        zm = z.clone()
        zm[idx] -= h
        g = (loss_at(zp) - loss_at(zm)) / (2 * h)
        if not math.isfinite(g):
            raise NumericAbort(f"non-finite finite-difference gradient at cell {idx}")
        grad[idx] = g
    return grad


class DenoiserBackend(abc.ABC):
    """Contract every denoiser adapter satisfies."""

    latent_shape: tuple[int, int, int] = (4, 16, 16)
    capabilities: Capabilities = Capabilities()
    max_prompt_length: int = 77

    @abc.abstractmethod
    def tokenize(self, text: str) -> TokenSequence: ...

    @abc.abstractmethod
    def predict(
        self,
        z: torch.Tensor,
        prompt: TokenSequence,
        t: int,
        uncond_embedding: torch.Tensor | None = None,
        attention_edit: AttentionEdit | None = None,
        guidance_weight: float = 7.5,
        branch: str = EDITING,
        inject_self_attention: bool = False,
    ) -> tuple[NoisePrediction, AttentionBundle]: ...

    @abc.abstractmethod
    def null_embedding(self) -> torch.Tensor: ...

    def identity(self) -> str:
        return type(self).__name__

    def capture(
        self, z, prompt, t, attention_edit=None, branch: str = EDITING
    ) -> AttentionBundle:
        return self.predict(z, prompt, t, attention_edit=attention_edit, branch=branch)[1]

    def loss_and_gradient(
        self,
        z: torch.Tensor,
        prompts: Sequence[TokenSequence],
        t: int,
        loss_fn: Callable[..., torch.Tensor],
        cells=None,
        h: float = 1e-4,
    ) -> GradientResult:
        """Finite-difference fallback; ``loss_fn`` receives one bundle per prompt."""

        def loss_at(zz):
            with torch.no_grad():
                return float(loss_fn(*[self.capture(zz, p, t) for p in prompts]))

        with torch.no_grad():
            bundles = tuple(self.capture(z, p, t) for p in prompts)
            loss = float(loss_fn(*bundles))
        if not math.isfinite(loss):
            raise NumericAbort(f"non-finite loss {loss}")
        grad = finite_difference_gradient(loss_at, z, cells, h)
        return GradientResult(loss, grad, bundles)

    def loss_gradient(self, z, prompt, t, loss_fn, cells=None, h: float = 1e-4) -> torch.Tensor:
        return self.loss_and_gradient(z, [prompt], t, loss_fn, cells=cells, h=h).grad

    def encode(self, image: np.ndarray) -> torch.Tensor:
        raise BackendError(f"{self.identity()} has no image encoder")

    def decode(self, z: torch.Tensor) -> np.ndarray:
        raise BackendError(f"{self.identity()} has no image decoder")

    def _check_inputs(self, z, prompt):
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ContractError(f"latent shape {tuple(z.shape)} != {tuple(self.latent_shape)}")
        if len(prompt) > self.max_prompt_length:
            raise ContractError(f"prompt longer than {self.max_prompt_length} tokens")
        if not len(prompt):
            raise ContractError("empty prompt")


_WORD = re.compile(r"[\w'-]+")


class ToyDenoiser(DenoiserBackend):
    """Single cross-attention layer over a 16x16 latent, with a linear skip term.

    ``eps = W_o (A V) + skip * z`` with ``A = softmax(Q K^T / sqrt(d_k))``, queries from
    the latent channels and keys/values from seeded unit token embeddings. The
    timestep is ignored. The unconditional pass attends over ``n_null`` reserved
    null embeddings, which null-text optimization may replace.

    The skip and output gains are small on purpose: the 50-step DDIM inversion
    defect grows with how strongly ``eps`` depends on ``z`` (about ``0.25 * skip``
    relative for the linear term alone), while the attention response that
    guidance acts on depends only on ``query_gain``.
    """

    capabilities = Capabilities(concurrent_safe=True, analytic_gradient=True)

    def __init__(
        self,
        seed: int = 0,
        vocab_size: int = 49408,
        embed_dim: int = 32,
        key_dim: int = 16,
        value_dim: int = 16,
        latent_shape: tuple[int, int, int] = (4, 16, 16),
        n_null: int = 4,
        query_gain: float = 3.0,
        output_gain: float = 0.005,
        skip: float = 0.001,
    ):
        if tuple(latent_shape[1:]) != (16, 16):
            raise ContractError("the toy denoiser works at 16x16 latent resolution")
        self.seed = seed
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.latent_shape = tuple(latent_shape)
        self.n_null = n_null
        self.query_gain = query_gain
        self.output_gain = output_gain
        self.skip = skip
        c = latent_shape[0]
        rng = np.random.default_rng([seed, 0])

        def draw(rows, cols, gain):
            return torch.as_tensor(rng.standard_normal((rows, cols)) * gain / math.sqrt(cols))

        self.W_q = draw(key_dim, c, query_gain)
        self.W_k = draw(key_dim, embed_dim, 1.0)
        self.W_v = draw(value_dim, embed_dim, 1.0)
        self.W_o = draw(c, value_dim, output_gain)
        self._null = torch.stack([self._unit([seed, 2, p]) for p in range(n_null)])

    def identity(self) -> str:
        return (
            f"toy(seed={self.seed},vocab={self.vocab_size},d={self.embed_dim},"
            f"dk={self.key_dim},dv={self.value_dim},shape={self.latent_shape},"
            f"null={self.n_null},gq={self.query_gain},go={self.output_gain},skip={self.skip})"
        )

    def _unit(self, key) -> torch.Tensor:
        v = np.random.default_rng(key).standard_normal(self.embed_dim)
        return torch.as_tensor(v / np.linalg.norm(v))

    @lru_cache(maxsize=4096)
    def token_embedding(self, token_id: int) -> torch.Tensor:
        return self._unit([self.seed, 1, int(token_id)])

    def token_id(self, word: str) -> int:
        return 1 + zlib.crc32(word.encode()) % (self.vocab_size - 1)

    def tokenize(self, text: str) -> TokenSequence:
        words = _WORD.findall(text.lower())
        seq = TokenSequence.from_pieces([(w, self.token_id(w)) for w in words])
        if len(seq) > self.max_prompt_length:
            raise ContractError(f"prompt longer than {self.max_prompt_length} tokens")
        return seq

    def null_embedding(self) -> torch.Tensor:
        return self._null.clone()

    def embed(self, prompt: TokenSequence) -> torch.Tensor:
        return torch.stack([self.token_embedding(i) for i in prompt.ids])

    def _attend(self, z, keys_from):
        c = z.shape[0]
        x = z.reshape(c, -1).transpose(0, 1)
        q = x @ self.W_q.T
        k = keys_from @ self.W_k.T
        logits = q @ k.T / math.sqrt(self.key_dim)
        return torch.softmax(logits, dim=1), keys_from @ self.W_v.T

    def _head(self, z, attn, values):
        out = (attn @ values) @ self.W_o.T
        return out.transpose(0, 1).reshape(z.shape) + self.skip * z

    def capture(self, z, prompt, t, attention_edit=None, branch: str = EDITING):
        self._check_inputs(z, prompt)
        attn, _ = self._attend(z, self.embed(prompt))
        return self._bundle(attn, t, branch)

    def _bundle(self, attn, t, branch):
        maps = attn.transpose(0, 1).reshape(-1, *self.latent_shape[1:])
        return AttentionBundle(maps, branch=branch, timestep=int(t))

    def predict(
        self,
        z,
        prompt,
        t,
        uncond_embedding=None,
        attention_edit=None,
        guidance_weight: float = 7.5,
        branch: str = EDITING,
        inject_self_attention: bool = False,
    ):
        # no self-attention layers here, so inject_self_attention is a no-op
        self._check_inputs(z, prompt)
        attn, values = self._attend(z, self.embed(prompt))
        bundle = self._bundle(attn, t, branch)
        used = attn
        if attention_edit is not None:
            edited = attention_edit(bundle)
            used = edited.maps.reshape(len(edited), -1).transpose(0, 1)
        cond = self._head(z, used, values)
        null = self._null if uncond_embedding is None else uncond_embedding
        null = null.reshape(-1, self.embed_dim).to(z.dtype)
        u_attn, u_values = self._attend(z, null)
        uncond = self._head(z, u_attn, u_values)
        return NoisePrediction(cond, uncond, guidance_weight), bundle

    def loss_and_gradient(self, z, prompts, t, loss_fn, cells=None, h: float = 1e-4):
        zz = z.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            bundles = tuple(self.capture(zz, p, t) for p in prompts)
            loss = loss_fn(*bundles)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericAbort(f"non-finite loss {value}")
            if not loss.requires_grad:
                grad = torch.zeros_like(zz)
            else:
                (grad,) = torch.autograd.grad(loss, zz, allow_unused=True)
                if grad is None:
                    grad = torch.zeros_like(zz)
        bad = torch.nonzero(~torch.isfinite(grad))
        if len(bad):
            raise NumericAbort(f"non-finite gradient at cell {tuple(bad[0].tolist())}")
        return GradientResult(value, grad.detach(), tuple(b.detach() for b in bundles))

    # images are 8x the latent resolution: RGB average-pooled into channels 0-2,
    # luminance in channel 3
    def encode(self, image: np.ndarray) -> torch.Tensor:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        img = img[..., :3] / 127.5 - 1.0
        h, w = self.latent_shape[1:]
        if img.shape[0] % h or img.shape[1] % w:
            raise ContractError(f"image size {img.shape[:2]} is not a multiple of {h}x{w}")
        fh, fw = img.shape[0] // h, img.shape[1] // w
        pooled = img.reshape(h, fh, w, fw, 3).mean(axis=(1, 3))
        chans = [pooled[..., i] for i in range(3)] + [pooled.mean(axis=2)]
        chans = (chans + [np.zeros((h, w))] * self.latent_shape[0])[: self.latent_shape[0]]
        return torch.as_tensor(np.stack(chans))

    def decode(self, z: torch.Tensor, scale: int = 8) -> np.ndarray:
        rgb = z.detach().cpu().numpy()[:3]
        if rgb.shape[0] < 3:
            rgb = np.repeat(rgb[:1], 3, axis=0)
        img = np.transpose(rgb, (1, 2, 0))
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
        return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_backend(kind: str = "toy", path: str | None = None, options: dict | None = None):
    """Instantiate a backend: ``toy`` or ``external`` with a ``module:factory`` path."""
    options = dict(options or {})
    if kind == "toy":
        return ToyDenoiser(**options)
    if kind == "external":
        if not path or ":" not in path:
            raise BackendError("external backend needs a 'module:factory' path")
        module_name, attr = path.split(":", 1)
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise BackendError(f"cannot load backend {path!r}: {exc}") from exc
        backend = factory(**options)
        for name in ("tokenize", "predict", "null_embedding", "latent_shape"):
            if not hasattr(backend, name):
                raise BackendError(f"backend {path!r} lacks {name!r}")
        return backend
    raise BackendError(f"unknown backend kind {kind!r}")
