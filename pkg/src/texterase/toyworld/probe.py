"""Detection instrument: a small CNN classifier over the 16 concepts.

The probe is trained on the synthetic dataset with light augmentation so
it stays reliable on generated (slightly off-distribution) images. It must
clear a held-out accuracy bar before evaluation code may rely on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..backend import PixelCodec
from ..persistence import atomic_write
from .dataset import ToyDataset
from .models import ProbeNet


class TrainingFailureError(RuntimeError):
    """A toy training run missed its contract; carries per-item diagnostics."""

    def __init__(self, message: str, rates: dict[str, float] | None = None):
        super().__init__(message)
        self.rates = rates or {}


@dataclass
class ProbeClassifier:
    """Frozen classifier + its measured held-out accuracy."""

    model: ProbeNet
    classes: tuple[str, ...]
    held_out_accuracy: float
    codec: PixelCodec

    def __post_init__(self) -> None:
        self.model.eval()

    def class_index(self, concept: str) -> int:
        try:
            return self.classes.index(concept)
        except ValueError:
            raise KeyError(f"unknown concept {concept!r}") from None

    @torch.no_grad()
    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        """uint8 [N, H, W, 3] -> class probabilities [N, C]."""
        x = self.codec.encode(images)
        return torch.softmax(self.model(x), dim=1).numpy()

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)


def _stratified_split(
    labels: np.ndarray, holdout_fraction: float, gen: torch.Generator
) -> tuple[np.ndarray, np.ndarray]:
    train_idx, held_idx = [], []
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        perm = torch.randperm(len(members), generator=gen).numpy()
        n_held = max(1, round(holdout_fraction * len(members)))
        held_idx.extend(members[perm[:n_held]])
        train_idx.extend(members[perm[n_held:]])
    return np.array(sorted(train_idx)), np.array(sorted(held_idx))


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    noise_scale = torch.rand(x.shape[0], 1, 1, 1, generator=gen) * 0.15
    x = x + noise_scale * torch.randn(x.shape, generator=gen)
    shift = (torch.rand(x.shape[0], 1, 1, 1, generator=gen) - 0.5) * 0.2
    return x + shift


def train_probe_classifier(
    dataset: ToyDataset,
    seed: int = 0,
    *,
    holdout_fraction: float = 0.125,
    epochs: int = 25,
    batch_size: int = 128,
    learning_rate: float = 1e-3,
    min_accuracy: float = 0.95,
) -> ProbeClassifier:
    """Train and gate the probe. Raises TrainingFailureError below the bar."""
    if holdout_fraction < 0.10:
        raise ValueError("held-out split must be at least 10%")
    codec = PixelCodec()
    x_all = codec.encode(dataset.images)
    y_all = torch.from_numpy(dataset.labels())

    gen = torch.Generator().manual_seed(seed)
    train_idx, held_idx = _stratified_split(dataset.labels(), holdout_fraction, gen)
    x_train, y_train = x_all[train_idx], y_all[train_idx]
    x_held, y_held = x_all[held_idx], y_all[held_idx]

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ProbeNet(num_classes=len(dataset.concepts))
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)

    n = len(x_train)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            sel = perm[start : start + batch_size]
            xb = _augment(x_train[sel], gen)
            loss = F.cross_entropy(model(xb), y_train[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()

    model.eval()
    with torch.no_grad():
        pred = model(x_held).argmax(dim=1)
    accuracy = float((pred == y_held).float().mean())
    if accuracy < min_accuracy:
        raise TrainingFailureError(
            f"probe held-out accuracy {accuracy:.3f} below required {min_accuracy:.2f}"
        )
    return ProbeClassifier(
        model=model, classes=tuple(dataset.concepts), held_out_accuracy=accuracy, codec=codec
    )


def save_probe(probe: ProbeClassifier, path: str | Path) -> None:
    payload = {
        "format": "concept-probe",
        "version": 1,
        "classes": list(probe.classes),
        "held_out_accuracy": probe.held_out_accuracy,
        "state": probe.model.state_dict(),
    }
    with atomic_write(path) as tmp:
        torch.save(payload, tmp)


def load_probe(path: str | Path) -> ProbeClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != "concept-probe":
        raise ValueError(f"{path} is not a probe checkpoint")
    model = ProbeNet(num_classes=len(payload["classes"]))
    model.load_state_dict(payload["state"])
    return ProbeClassifier(
        model=model,
        classes=tuple(payload["classes"]),
        held_out_accuracy=float(payload["held_out_accuracy"]),
        codec=PixelCodec(),
    )
