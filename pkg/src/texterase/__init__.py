"""Concept erasure for text-conditioned diffusion models.

Erases a named concept by gradient-ascent unlearning of a restricted
subset of the text encoder's parameters, and verifies the erasure on a
self-contained toy diffusion pipeline via classifier detection rates.
"""

from .backend import (
    DiffusionBackend,
    InvalidTimestepError,
    NoiseSchedule,
    NumericalFailureError,
    PixelCodec,
    Tokenizer,
    ddim_timesteps,
    encode_text,
    guided_noise_estimate,
    noise_prediction_loss,
    sample_image,
    sample_images,
    sample_latents,
    sd_loss,
)
from .eraser import (
    ConceptSpec,
    EncoderDelta,
    ErasureConfig,
    InvalidConceptError,
    NounClass,
    build_training_batches,
    erase,
    erase_many,
    unlearning_objective,
)
from .evaluation import (
    EvalReport,
    RateEntry,
    ablation_masks,
    alignment_score,
    detection_rate,
    epoch_sweep,
    preservation_report,
)
from .masking import (
    EncoderLayout,
    IncompatibleSnapshotError,
    MaskVariant,
    MissingParameterError,
    UpdateMask,
    diff_parameters,
    encoder_fingerprint,
    freeze_complement,
    select_targets,
    snapshot_parameters,
)
from .persistence import (
    DeltaCorruptionError,
    DeltaFormatError,
    TransferRefusedError,
    apply_delta,
    load_delta,
    save_delta,
)
from .templates import (
    PromptTemplate,
    RenderedPrompt,
    TemplateKind,
    object_templates,
    render,
    sample_template,
    style_templates,
)

__version__ = "0.1.0"

__all__ = [
    "ConceptSpec",
    "DeltaCorruptionError",
    "DeltaFormatError",
    "DiffusionBackend",
    "EncoderDelta",
    "EncoderLayout",
    "ErasureConfig",
    "EvalReport",
    "IncompatibleSnapshotError",
    "InvalidConceptError",
    "InvalidTimestepError",
    "MaskVariant",
    "MissingParameterError",
    "NoiseSchedule",
    "NounClass",
    "NumericalFailureError",
    "PixelCodec",
    "PromptTemplate",
    "RateEntry",
    "RenderedPrompt",
    "TemplateKind",
    "Tokenizer",
    "TransferRefusedError",
    "UpdateMask",
    "ablation_masks",
    "alignment_score",
    "apply_delta",
    "build_training_batches",
    "ddim_timesteps",
    "detection_rate",
    "diff_parameters",
    "encode_text",
    "encoder_fingerprint",
    "epoch_sweep",
    "erase",
    "erase_many",
    "freeze_complement",
    "guided_noise_estimate",
    "load_delta",
    "noise_prediction_loss",
    "object_templates",
    "preservation_report",
    "render",
    "sample_image",
    "sample_images",
    "sample_latents",
    "sample_template",
    "save_delta",
    "sd_loss",
    "select_targets",
    "snapshot_parameters",
    "style_templates",
    "unlearning_objective",
]
