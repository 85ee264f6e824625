"""Self-contained 32x32 shapes diffusion world used for end-to-end checks."""

from .dataset import (
    COLORS,
    SHAPES,
    ToyDataset,
    ToyDatasetSpec,
    ToyRecord,
    classify_pixels,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .models import ProbeNet, ToyDenoiser, ToyTextEncoder
from .pipeline import (
    ToyTrainConfig,
    WordTokenizer,
    build_toy_backend,
    load_backend,
    measure_detection_rates,
    save_backend,
    toy_erasure_config,
    toy_tokenizer,
    train_companion_denoiser,
    train_toy_pipeline,
)
from .probe import (
    ProbeClassifier,
    TrainingFailureError,
    load_probe,
    save_probe,
    train_probe_classifier,
)

__all__ = [
    "COLORS",
    "SHAPES",
    "ProbeClassifier",
    "ProbeNet",
    "ToyDataset",
    "ToyDatasetSpec",
    "ToyDenoiser",
    "ToyRecord",
    "ToyTextEncoder",
    "ToyTrainConfig",
    "TrainingFailureError",
    "WordTokenizer",
    "build_toy_backend",
    "classify_pixels",
    "generate_dataset",
    "load_backend",
    "load_probe",
    "measure_detection_rates",
    "read_dataset",
    "save_backend",
    "save_probe",
    "toy_erasure_config",
    "toy_tokenizer",
    "train_companion_denoiser",
    "train_probe_classifier",
    "train_toy_pipeline",
    "write_dataset",
]
