"""Shared fixtures. The expensive artifacts (probe, trained backend) are
session-scoped; set TEXTERASE_TEST_CACHE to a directory to reuse them
across runs while iterating. Without it every run trains from scratch.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from texterase.backend import (
    DiffusionBackend,
    NoiseSchedule,
    PixelCodec,
)
from texterase.masking import EncoderLayout
from texterase.toyworld import (
    ToyDatasetSpec,
    ToyDenoiser,
    ToyTextEncoder,
    ToyTrainConfig,
    WordTokenizer,
    generate_dataset,
    load_backend,
    load_probe,
    save_backend,
    save_probe,
    toy_tokenizer,
    train_companion_denoiser,
    train_probe_classifier,
    train_toy_pipeline,
    write_dataset,
)
from texterase.toyworld.pipeline import measure_detection_rates

DATASET_SEED = 0
TRAIN_SEED = 0
PROBE_SEED = 0
EVAL_SEED = 4242  # base seed for every detection-rate measurement in tests


def _cache_dir() -> Path | None:
    root = os.environ.get("TEXTERASE_TEST_CACHE")
    return Path(root) if root else None


def _cache_path(name: str, key: str) -> Path | None:
    root = _cache_dir()
    if root is None:
        return None
    root.mkdir(parents=True, exist_ok=True)
    tag = hashlib.sha256(key.encode()).hexdigest()[:12]
    return root / f"{name}-{tag}.pt"


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(ToyDatasetSpec(), seed=DATASET_SEED)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(ToyDatasetSpec(samples_per_concept=5), seed=DATASET_SEED)


@pytest.fixture(scope="session")
def probe(dataset):
    path = _cache_path("probe", f"{DATASET_SEED}-{PROBE_SEED}")
    if path is not None and path.exists():
        return load_probe(path)
    trained = train_probe_classifier(dataset, seed=PROBE_SEED)
    if path is not None:
        save_probe(trained, path)
    return trained


@pytest.fixture(scope="session")
def base_backend(dataset):
    """The converged toy pipeline every heavyweight test starts from."""
    config = ToyTrainConfig()
    path = _cache_path("backend", f"{DATASET_SEED}-{TRAIN_SEED}-{config}")
    if path is not None and path.exists():
        return load_backend(path)
    backend = train_toy_pipeline(dataset, config, seed=TRAIN_SEED)
    if path is not None:
        save_backend(backend, path)
    return backend


@pytest.fixture(scope="session")
def companion_backend(dataset, base_backend):
    """Second denoiser trained against a frozen copy of the base encoder."""
    config = ToyTrainConfig(steps=1500)
    path = _cache_path("companion", f"{DATASET_SEED}-{TRAIN_SEED}-{config}")
    if path is not None and path.exists():
        return load_backend(path)
    backend = train_companion_denoiser(dataset, base_backend, config, seed=TRAIN_SEED + 1)
    if path is not None:
        save_backend(backend, path)
    return backend


@pytest.fixture(scope="session")
def baseline_rates(base_backend, probe, dataset) -> dict[str, float]:
    """Pre-erasure detection rate of all 16 concepts, n=100 each."""
    return measure_detection_rates(
        base_backend, probe, dataset.concepts, n=100, seed=EVAL_SEED
    )


@pytest.fixture(scope="session")
def concept_images(dataset, tmp_path_factory) -> dict[str, tuple[str, ...]]:
    """First four dataset images of every concept, written out as PNGs."""
    root = tmp_path_factory.mktemp("fewshot")
    by_concept: dict[str, list[str]] = {c: [] for c in dataset.concepts}
    for rec in dataset.records:
        concept = f"{rec.color} {rec.shape}"
        if len(by_concept[concept]) >= 4:
            continue
        path = root / f"{concept.replace(' ', '_')}_{rec.index}.png"
        Image.fromarray(dataset.images[rec.index]).save(path)
        by_concept[concept].append(str(path))
    return {c: tuple(paths) for c, paths in by_concept.items()}


def make_tiny_backend(
    seed: int = 0,
    layers: int = 2,
    width: int = 32,
    heads: int = 4,
    base: int = 8,
    timesteps: int = 100,
    vocab: tuple[str, ...] | None = None,
) -> DiffusionBackend:
    """Small untrained backend for unit tests; deterministic in seed."""
    tokenizer = toy_tokenizer() if vocab is None else WordTokenizer(vocab, max_length=8)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        encoder = ToyTextEncoder(
            tokenizer.vocab_size, layers=layers, width=width, heads=heads, max_seq=8
        )
        denoiser = ToyDenoiser(context_dim=width, base=base)
    return DiffusionBackend(
        tokenizer=tokenizer,
        text_encoder=encoder,
        denoiser=denoiser,
        schedule=NoiseSchedule.linear(timesteps=timesteps),
        codec=PixelCodec(),
        layout=EncoderLayout(num_layers=layers),
        image_size=32,
        channels=3,
    )


@pytest.fixture()
def tiny_backend() -> DiffusionBackend:
    return make_tiny_backend()


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_dataset, tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("tinydata")
    write_dataset(tiny_dataset, root)
    return root


@pytest.fixture(scope="session")
def tiny_probe(tiny_dataset):
    """Ungated probe over the small dataset, for plumbing tests only."""
    return train_probe_classifier(tiny_dataset, seed=0, epochs=3, min_accuracy=0.0)


def write_images(images: np.ndarray, directory: Path, stem: str = "img") -> tuple[str, ...]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(images.shape[0]):
        p = directory / f"{stem}_{i:03d}.png"
        Image.fromarray(images[i]).save(p)
        paths.append(str(p))
    return tuple(paths)
