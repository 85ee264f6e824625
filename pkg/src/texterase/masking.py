"""Selection and enforcement of the trainable text-encoder parameter subset.

The update rule: every layer's MLP (fc1 and fc2) plus the final layer's
four self-attention projections. Ablation variants restrict this to the
MLPs only, or to the first self-attention layer (out projection only, or
all four projections). Everything outside the mask stays frozen, and
snapshot/diff helpers let callers prove it stayed frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn


class MaskVariant(str, Enum):
    FULL = "full"
    MLP_ONLY = "mlp_only"
    FIRST_ATTN_WOUT = "first_attn_wout"
    FIRST_ATTN_ALL = "first_attn_all"


MLP_ROLES = ("mlp.fc1", "mlp.fc2")
ATTN_ROLES = ("self_attn.q_proj", "self_attn.k_proj", "self_attn.v_proj", "self_attn.out_proj")


class MissingParameterError(KeyError):
    """A mask path does not resolve to a module in the model."""


class IncompatibleSnapshotError(ValueError):
    """Two snapshots do not come from the same parameter layout."""


@dataclass(frozen=True)
class EncoderLayout:
    """Names the maskable submodules of a transformer text encoder.

    ``prefix`` follows the CLIP text-model convention, so a 12-layer layout
    produces the familiar CLIP-style path names.
    """

    num_layers: int
    prefix: str = "text_model.encoder.layers"

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"layout needs at least one layer, got {self.num_layers}")

    def module_path(self, layer: int, role: str) -> str:
        return f"{self.prefix}.{layer}.{role}"


@dataclass(frozen=True)
class UpdateMask:
    """The set of module paths the erasure trainer may update.

    ``paths`` are module paths; each contributes its weight and bias
    tensors (see :meth:`parameter_paths`).
    """

    variant: MaskVariant
    paths: tuple[str, ...]

    def parameter_paths(self) -> tuple[str, ...]:
        return tuple(f"{p}.{leaf}" for p in self.paths for leaf in ("weight", "bias"))

    def __len__(self) -> int:
        return len(self.paths)


def select_targets(
    layout: EncoderLayout,
    variant: MaskVariant | str,
    *,
    drop_final_q_proj: bool = False,
) -> UpdateMask:
    """Resolve a mask variant to concrete module paths.

    The full mask is all MLPs plus the final layer's q/k/v/out projections,
    2*L + 4 modules for an L-layer encoder. ``drop_final_q_proj`` keeps the
    historical variant that leaves out the final q_proj; the default treats
    that omission as a typo and includes all four projections.
    """
    variant = MaskVariant(variant)
    last = layout.num_layers - 1
    mlp = [layout.module_path(i, r) for i in range(layout.num_layers) for r in MLP_ROLES]
    final_attn = [layout.module_path(last, r) for r in ATTN_ROLES]
    if drop_final_q_proj:
        final_attn = [p for p in final_attn if not p.endswith("q_proj")]

    if variant is MaskVariant.FULL:
        paths = mlp + final_attn
    elif variant is MaskVariant.MLP_ONLY:
        paths = mlp
    elif variant is MaskVariant.FIRST_ATTN_WOUT:
        paths = [layout.module_path(0, "self_attn.out_proj")]
    else:  # FIRST_ATTN_ALL
        paths = [layout.module_path(0, r) for r in ATTN_ROLES]
    return UpdateMask(variant=variant, paths=tuple(paths))


def resolve_module(model: nn.Module, path: str) -> nn.Module:
    mod: nn.Module = model
    for part in path.split("."):
        if not hasattr(mod, part):
            raise MissingParameterError(path)
        mod = getattr(mod, part)
    return mod


def freeze_complement(model: nn.Module, mask: UpdateMask) -> list[nn.Parameter]:
    """Freeze every parameter outside the mask; return the trainable ones.

    Must run before the optimizer is built. Raises MissingParameterError if
    a mask path does not exist in the model.
    """
    masked_modules = [resolve_module(model, p) for p in mask.paths]
    for param in model.parameters():
        param.requires_grad_(False)
    trainable: list[nn.Parameter] = []
    for mod in masked_modules:
        for param in mod.parameters(recurse=False):
            param.requires_grad_(True)
            trainable.append(param)
    return trainable


def snapshot_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    """Detached clone of every named parameter."""
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def diff_parameters(
    before: dict[str, torch.Tensor], after: dict[str, torch.Tensor]
) -> set[str]:
    """Parameter paths whose values differ bitwise between two snapshots."""
    if before.keys() != after.keys():
        raise IncompatibleSnapshotError(
            "snapshots cover different parameter sets: "
            f"{sorted(before.keys() ^ after.keys())[:4]}..."
        )
    changed = set()
    for name, a in before.items():
        b = after[name]
        if a.shape != b.shape:
            raise IncompatibleSnapshotError(f"shape mismatch at {name}")
        if a.contiguous().numpy().tobytes() != b.contiguous().numpy().tobytes():
            changed.add(name)
    return changed


def encoder_fingerprint(model: nn.Module) -> bytes:
    """SHA-256 over all parameter bytes in deterministic (sorted-path) order."""
    params = dict(model.named_parameters())
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(params[name].detach().contiguous().numpy().tobytes())
    return digest.digest()
