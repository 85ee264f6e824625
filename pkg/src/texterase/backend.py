"""Diffusion-model abstraction: schedule, loss, text encoding, DDIM sampling.

A :class:`DiffusionBackend` bundles a tokenizer + text encoder, a noise
predictor conditioned on the token embedding sequence, a noise schedule,
and an image codec. The loss is the standard noise-prediction MSE

    E_{x0, eps, t, y} || eps - denoiser(x_t, t, encode(y)) ||^2

with x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, and sampling is a
deterministic DDIM (eta = 0) reverse pass with classifier-free guidance.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
from torch import nn

from .masking import EncoderLayout


class InvalidTimestepError(ValueError):
    """Timestep outside [0, T)."""


class NumericalFailureError(RuntimeError):
    """A loss or sampler state became non-finite."""

    def __init__(self, message: str, timestep: int | None = None, batch_index: int | None = None):
        super().__init__(message)
        self.timestep = timestep
        self.batch_index = batch_index


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variance schedule with cached cumulative products."""

    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        return cls.from_betas(betas)

    @classmethod
    def from_betas(cls, betas: torch.Tensor) -> "NoiseSchedule":
        """Schedule from raw betas; cumulative products taken in float64."""
        if betas.dim() != 1 or betas.shape[0] < 1:
            raise ValueError("betas must be a non-empty 1-D tensor")
        alpha_bars = torch.cumprod(1.0 - betas.double(), dim=0)
        return cls(betas=betas.float(), alpha_bars=alpha_bars.float())

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.shape[0])

    def add_noise(self, x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor) -> torch.Tensor:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
        if x0.shape != eps.shape:
            raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t >= self.num_timesteps):
            raise InvalidTimestepError(f"t must be in [0, {self.num_timesteps}), got {t.tolist()}")
        abar = self.alpha_bars[t].float()
        while abar.dim() < x0.dim():
            abar = abar.unsqueeze(-1)
        return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


class PixelCodec:
    """Identity-scale codec between 8-bit RGB images and [-1, 1] tensors.

    Stands in for a learned latent autoencoder; the backend interface keeps
    the codec slot so one can be swapped in.
    """

    space = "pixel"

    def encode(self, images: np.ndarray) -> torch.Tensor:
        """uint8 [N, H, W, 3] -> float tensor [N, 3, H, W] in [-1, 1]."""
        if images.ndim == 3:
            images = images[None]
        x = torch.from_numpy(np.ascontiguousarray(images)).float() / 127.5 - 1.0
        return x.permute(0, 3, 1, 2).contiguous()

    def decode(self, latents: torch.Tensor) -> np.ndarray:
        """float tensor [N, 3, H, W] -> uint8 [N, H, W, 3]."""
        x = ((latents.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round()
        return x.permute(0, 2, 3, 1).to(torch.uint8).numpy()


@dataclass
class DiffusionBackend:
    """Handles to every stage of a text-conditioned diffusion pipeline."""

    tokenizer: "Tokenizer"
    text_encoder: nn.Module
    denoiser: nn.Module
    schedule: NoiseSchedule
    codec: PixelCodec
    layout: EncoderLayout
    image_size: int = 32
    channels: int = 3

    def latent_shape(self, batch: int) -> tuple[int, int, int, int]:
        return (batch, self.channels, self.image_size, self.image_size)

    def clone(self) -> "DiffusionBackend":
        """Independent copy of the mutable modules; the rest is shared."""
        return replace(
            self,
            text_encoder=copy.deepcopy(self.text_encoder),
            denoiser=copy.deepcopy(self.denoiser),
        )


class Tokenizer:
    """Protocol-ish base: maps caption strings to fixed-length id tensors."""

    max_length: int

    def __call__(self, texts: list[str]) -> torch.Tensor:  # pragma: no cover - interface
        raise NotImplementedError


def encode_text(backend: DiffusionBackend, captions: str | list[str]) -> torch.Tensor:
    """Token-wise conditioning embeddings [B, S, D] from the current encoder.

    The empty caption yields the unconditional embedding used by
    classifier-free guidance. Over-long captions are truncated by the
    tokenizer (which records a warning).
    """
    if isinstance(captions, str):
        captions = [captions]
    tokens = backend.tokenizer(captions)
    return backend.text_encoder(tokens)


def noise_prediction_loss(
    backend: DiffusionBackend,
    x0: torch.Tensor,
    caption: str | list[str],
    t: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Deterministic core of the diffusion loss for a frozen (t, eps) draw."""
    x_t = backend.schedule.add_noise(x0, t, eps)
    context = encode_text(backend, caption if isinstance(caption, list) else [caption] * x0.shape[0])
    pred = backend.denoiser(x_t, t, context)
    return torch.mean((eps - pred) ** 2)


def sd_loss(
    backend: DiffusionBackend,
    x0: torch.Tensor,
    caption: str,
    generator: torch.Generator,
) -> torch.Tensor:
    """One-sample Monte-Carlo estimate of the diffusion loss for a caption.

    Draws t ~ U[0, T) per batch element and eps ~ N(0, I), then evaluates
    the mean squared noise-prediction error. Differentiable w.r.t. the
    text-encoder parameters. Raises NumericalFailureError (carrying the
    offending t and batch index) if the result is non-finite.
    """
    batch = x0.shape[0]
    t = torch.randint(0, backend.schedule.num_timesteps, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    loss = noise_prediction_loss(backend, x0, caption, t, eps)
    if not torch.isfinite(loss):
        with torch.no_grad():
            x_t = backend.schedule.add_noise(x0, t, eps)
            context = encode_text(backend, [caption] * batch)
            per = torch.mean((eps - backend.denoiser(x_t, t, context)) ** 2, dim=(1, 2, 3))
            bad = torch.nonzero(~torch.isfinite(per)).flatten()
            idx = int(bad[0]) if len(bad) else 0
        raise NumericalFailureError(
            f"non-finite diffusion loss (t={int(t[idx])}, batch index {idx})",
            timestep=int(t[idx]),
            batch_index=idx,
        )
    return loss


def ddim_timesteps(num_train_steps: int, steps: int) -> torch.Tensor:
    """Descending timestep subsequence for a `steps`-step DDIM pass."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return torch.linspace(num_train_steps - 1, 0, steps).round().long()


def guided_noise_estimate(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, guidance: float) -> torch.Tensor:
    """eps_u + w (eps_c - eps_u); exact at the w=0 and w=1 endpoints."""
    if guidance == 0.0:
        return eps_uncond
    if guidance == 1.0:
        return eps_cond
    return eps_uncond + guidance * (eps_cond - eps_uncond)


@torch.no_grad()
def sample_latents(
    backend: DiffusionBackend,
    prompt: str,
    *,
    n: int = 1,
    guidance: float = 7.5,
    steps: int = 50,
    seed: int = 0,
) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) reverse pass from seeded Gaussian noise.

    Initial noise is drawn per image from seeds seed, seed+1, ..., so each
    sample is reproducible independent of n. With guidance 0 the pass is
    purely unconditional and never evaluates the prompt branch.
    """
    taus = ddim_timesteps(backend.schedule.num_timesteps, steps)
    abars = backend.schedule.alpha_bars

    init = []
    for i in range(n):
        g = torch.Generator().manual_seed(seed + i)
        init.append(torch.randn(backend.latent_shape(1), generator=g))
    x = torch.cat(init, dim=0)

    uncond_ctx = encode_text(backend, [""] * n)
    cond_ctx = encode_text(backend, [prompt] * n) if guidance != 0.0 else None

    for i in range(len(taus)):
        t = taus[i]
        t_batch = torch.full((n,), int(t), dtype=torch.long)
        eps_u = backend.denoiser(x, t_batch, uncond_ctx)
        if cond_ctx is None:
            eps_hat = eps_u
        else:
            eps_c = backend.denoiser(x, t_batch, cond_ctx)
            eps_hat = guided_noise_estimate(eps_c, eps_u, guidance)

        abar_t = abars[t]
        abar_prev = abars[taus[i + 1]] if i + 1 < len(taus) else torch.tensor(1.0)
        x0_pred = (x - (1.0 - abar_t).sqrt() * eps_hat) / abar_t.sqrt()
        # Data lives in [-1, 1] (pixel codec); clipping the denoised estimate
        # keeps high guidance weights from drifting out of range.
        x0_pred = x0_pred.clamp(-1.0, 1.0)
        x = abar_prev.sqrt() * x0_pred + (1.0 - abar_prev).sqrt() * eps_hat
        if not torch.isfinite(x).all():
            raise NumericalFailureError(f"non-finite sampler state at t={int(t)}", timestep=int(t))
    return x


def sample_images(
    backend: DiffusionBackend,
    prompt: str,
    *,
    n: int = 1,
    guidance: float = 7.5,
    steps: int = 50,
    seed: int = 0,
) -> np.ndarray:
    """DDIM-sample n images and decode them to uint8 [n, H, W, 3]."""
    was_training = (backend.denoiser.training, backend.text_encoder.training)
    backend.denoiser.eval()
    backend.text_encoder.eval()
    try:
        latents = sample_latents(backend, prompt, n=n, guidance=guidance, steps=steps, seed=seed)
    finally:
        backend.denoiser.train(was_training[0])
        backend.text_encoder.train(was_training[1])
    return backend.codec.decode(latents)


def sample_image(
    backend: DiffusionBackend,
    prompt: str,
    *,
    guidance: float = 7.5,
    steps: int = 50,
    seed: int = 0,
) -> np.ndarray:
    """Single-image convenience wrapper around :func:`sample_images`."""
    return sample_images(backend, prompt, n=1, guidance=guidance, steps=steps, seed=seed)[0]


LatentProvider = Callable[[int], torch.Tensor]
