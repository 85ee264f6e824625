"""Few-shot concept erasure by gradient ascent on masked encoder parameters.

The erase loop maximizes the diffusion loss for captions naming the target
concept, updating only the parameters selected by the update mask. The
denoiser and codec are never touched; the optimizer runs on the negated
loss so a stock minimizer performs the ascent.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, fields
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np
import torch
from PIL import Image

from .backend import DiffusionBackend, NumericalFailureError, sd_loss
from .masking import encoder_fingerprint, freeze_complement, select_targets, MaskVariant
from .templates import RenderedPrompt, TemplateKind, render, sample_template

logger = logging.getLogger(__name__)

DEFAULT_FEW_SHOT_K = 4


class InvalidConceptError(ValueError):
    """A ConceptSpec that cannot be trained on (e.g. few-shot with no images)."""


class NounClass(str, Enum):
    PROPER = "proper"
    COMMON = "common"


EPOCHS_BY_NOUN_CLASS = {NounClass.PROPER: 4, NounClass.COMMON: 5}


@dataclass(frozen=True)
class ConceptSpec:
    """What to erase: a concept name plus its training-source mode.

    Few-shot mode reads `images` (k paths, k defaulting to 4 at call sites
    that create the spec); zero-shot mode draws standard-normal latents and
    needs no images.
    """

    name: str
    noun_class: NounClass = NounClass.COMMON
    template_kind: TemplateKind = TemplateKind.OBJECT
    images: tuple[str, ...] = ()
    zero_shot: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidConceptError("concept name must be non-empty")
        if self.zero_shot and self.images:
            raise InvalidConceptError("zero-shot spec must not carry images")
        object.__setattr__(self, "noun_class", NounClass(self.noun_class))
        object.__setattr__(self, "template_kind", TemplateKind(self.template_kind))
        object.__setattr__(self, "images", tuple(self.images))

    @property
    def sample_count(self) -> int:
        """k: number of latents consumed per epoch."""
        return DEFAULT_FEW_SHOT_K if self.zero_shot else len(self.images)


@dataclass(frozen=True)
class ErasureConfig:
    """Optimizer and loop settings; defaults follow the reference recipe.

    `epochs=None` resolves by noun class: 4 for proper nouns, 5 for common
    nouns.
    """

    batch_size: int = 2
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    weight_decay: float = 1e-8
    epochs: int | None = None
    mask_variant: MaskVariant = MaskVariant.FULL
    drop_final_q_proj: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        object.__setattr__(self, "mask_variant", MaskVariant(self.mask_variant))

    def resolved_epochs(self, noun_class: NounClass) -> int:
        if self.epochs is not None:
            return self.epochs
        return EPOCHS_BY_NOUN_CLASS[NounClass(noun_class)]

    def echo(self) -> tuple[tuple[str, str], ...]:
        """Stable key/value rendering for persistence and manifests."""
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            out.append((f.name, "" if value is None else str(value)))
        return tuple(out)


@dataclass(frozen=True)
class EncoderDelta:
    """Post-erasure replacement values of the masked parameters.

    `base_fingerprint` hashes the encoder the erasure started from; applying
    the entries to that encoder reproduces the erased one bit-exactly.
    """

    base_fingerprint: bytes
    concepts: tuple[str, ...]
    config: tuple[tuple[str, str], ...]
    entries: tuple[tuple[str, torch.Tensor], ...]

    def __post_init__(self) -> None:
        if len(self.base_fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")

    def entry_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.entries)

    def paths(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.entries)


class TrainingBatch(NamedTuple):
    """One optimizer step's inputs. Latents are in backend space."""

    latents: torch.Tensor
    prompt: RenderedPrompt
    epoch: int


class EpochLog(NamedTuple):
    """Passed to the epoch callback after each epoch's last step."""

    epoch: int
    mean_loss: float
    backend: DiffusionBackend


EpochCallback = Callable[[EpochLog], None]


def load_concept_images(paths: tuple[str, ...], image_size: int) -> np.ndarray:
    """Read the k-shot images as uint8 [k, H, W, 3], resizing if needed."""
    arrays = []
    for p in paths:
        try:
            with Image.open(p) as img:
                img = img.convert("RGB")
                if img.size != (image_size, image_size):
                    img = img.resize((image_size, image_size), Image.LANCZOS)
                arrays.append(np.asarray(img, dtype=np.uint8))
        except OSError as exc:
            raise OSError(f"cannot read concept image {p!r}: {exc}") from exc
    return np.stack(arrays)


def steps_per_epoch(concept: ConceptSpec, config: ErasureConfig) -> int:
    return math.ceil(concept.sample_count / config.batch_size)


def _torch_generator(rng: random.Random) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(rng.getrandbits(63))
    return g


def build_training_batches(
    concept: ConceptSpec,
    config: ErasureConfig,
    backend: DiffusionBackend,
    rng: random.Random,
    epochs: int | None = None,
) -> list[TrainingBatch]:
    """Materialize the whole run's batch sequence, in training order.

    Few-shot images are encoded once and sliced per batch with a fresh
    shuffle each epoch; zero-shot latents are drawn fresh every iteration.
    One template is sampled uniformly per iteration.
    """
    if not concept.zero_shot and not concept.images:
        raise InvalidConceptError(f"few-shot erasure of {concept.name!r} requires at least one image")
    n_epochs = epochs if epochs is not None else config.resolved_epochs(concept.noun_class)
    gen = _torch_generator(rng)

    cached: torch.Tensor | None = None
    if not concept.zero_shot:
        cached = backend.codec.encode(load_concept_images(concept.images, backend.image_size))

    batches: list[TrainingBatch] = []
    k = concept.sample_count
    for epoch in range(1, n_epochs + 1):
        order = list(range(k))
        rng.shuffle(order)
        for start in range(0, k, config.batch_size):
            take = order[start : start + config.batch_size]
            if cached is not None:
                latents = cached[take]
            else:
                latents = torch.randn(backend.latent_shape(len(take)), generator=gen)
            template = sample_template(concept.template_kind, rng)
            batches.append(TrainingBatch(latents, render(template, concept.name), epoch))
    return batches


def unlearning_objective(
    backend: DiffusionBackend, x0: torch.Tensor, caption: str, generator: torch.Generator
) -> torch.Tensor:
    """Negated diffusion loss: minimizing this maximizes reconstruction error."""
    return sd_loss(backend, x0, caption, generator).neg()


def _flag_state(*modules: torch.nn.Module) -> list[tuple[torch.nn.Parameter, bool]]:
    return [(p, p.requires_grad) for m in modules for p in m.parameters()]


def erase(
    backend: DiffusionBackend,
    concept: ConceptSpec,
    config: ErasureConfig,
    rng: random.Random,
    *,
    epoch_callback: EpochCallback | None = None,
) -> tuple[DiffusionBackend, EncoderDelta]:
    """Unlearn `concept` in place; return the backend and the parameter delta.

    Runs epochs x ceil(k / batch_size) optimizer steps of Adam on the
    negated diffusion loss, over the masked encoder parameters only. The
    denoiser stays frozen; requires_grad flags are restored on exit.
    """
    mask = select_targets(backend.layout, config.mask_variant, drop_final_q_proj=config.drop_final_q_proj)
    fingerprint = encoder_fingerprint(backend.text_encoder)
    saved_flags = _flag_state(backend.text_encoder, backend.denoiser)

    try:
        trainable = freeze_complement(backend.text_encoder, mask)
        backend.denoiser.requires_grad_(False)
        optimizer = torch.optim.Adam(
            trainable,
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            weight_decay=config.weight_decay,
        )
        loss_gen = _torch_generator(rng)

        batches = build_training_batches(concept, config, backend, rng)
        epoch_losses: list[float] = []
        current_epoch = 1
        for step, batch in enumerate(batches):
            if batch.epoch != current_epoch:
                _finish_epoch(epoch_callback, current_epoch, epoch_losses, backend)
                epoch_losses = []
                current_epoch = batch.epoch
            try:
                objective = unlearning_objective(backend, batch.latents, batch.prompt.text, loss_gen)
            except NumericalFailureError as exc:
                raise NumericalFailureError(
                    f"erasure of {concept.name!r} aborted at step {step}: {exc}",
                    timestep=exc.timestep,
                    batch_index=exc.batch_index,
                ) from exc
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            epoch_losses.append(-float(objective.detach()))
        _finish_epoch(epoch_callback, current_epoch, epoch_losses, backend)
    finally:
        for param, flag in saved_flags:
            param.requires_grad_(flag)

    named = dict(backend.text_encoder.named_parameters())
    entries = tuple((p, named[p].detach().clone()) for p in mask.parameter_paths())
    delta = EncoderDelta(
        base_fingerprint=fingerprint,
        concepts=(concept.name,),
        config=config.echo(),
        entries=entries,
    )
    return backend, delta


def _finish_epoch(
    callback: EpochCallback | None, epoch: int, losses: list[float], backend: DiffusionBackend
) -> None:
    if not losses:
        return
    mean_loss = float(np.mean(losses))
    logger.info("erase epoch %d: mean diffusion loss %.4f", epoch, mean_loss)
    if callback is not None:
        callback(EpochLog(epoch=epoch, mean_loss=mean_loss, backend=backend))


def erase_many(
    backend: DiffusionBackend,
    concepts: list[ConceptSpec],
    config: ErasureConfig,
    rng: random.Random,
    *,
    epoch_callback: EpochCallback | None = None,
) -> tuple[DiffusionBackend, list[EncoderDelta]]:
    """Erase concepts sequentially; each delta is relative to the state it saw."""
    deltas: list[EncoderDelta] = []
    for concept in concepts:
        backend, delta = erase(backend, concept, config, rng, epoch_callback=epoch_callback)
        deltas.append(delta)
    return backend, deltas
