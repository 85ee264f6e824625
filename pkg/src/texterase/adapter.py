"""Bind the backend interface to externally supplied pretrained weights.

A descriptor is a key/value text file naming the weight files and the
architecture dimensions. Weights are plain torch state-dict files whose
keys follow the text-model layout used throughout this package (the CLIP
text-encoder naming); a 12-layer descriptor therefore resolves the full
update mask with no missing parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import torch

from .backend import DiffusionBackend, NoiseSchedule, PixelCodec
from .masking import EncoderLayout
from .persistence import atomic_write
from .toyworld.models import ToyDenoiser, ToyTextEncoder
from .toyworld.pipeline import WordTokenizer


class LoadError(RuntimeError):
    """Descriptor or weight files unusable; no partial backend is returned."""


_REQUIRED = ("text_encoder", "denoiser", "vocab", "layers", "width", "heads", "max_seq")


@dataclass(frozen=True)
class ExternalModelDescriptor:
    text_encoder: str
    denoiser: str
    vocab: str
    layers: int
    width: int
    heads: int
    max_seq: int
    codec: str = "pixel"
    image_size: int = 32
    channels: int = 3
    denoiser_base: int = 32
    temb_dim: int = 128
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def resolve(self, root: Path) -> "ExternalModelDescriptor":
        """Make the three weight paths absolute relative to `root`."""
        def absolute(p: str) -> str:
            path = Path(p)
            return str(path if path.is_absolute() else root / path)

        return ExternalModelDescriptor(
            **{
                **{f.name: getattr(self, f.name) for f in fields(self)},
                "text_encoder": absolute(self.text_encoder),
                "denoiser": absolute(self.denoiser),
                "vocab": absolute(self.vocab),
            }
        )


def parse_descriptor(path: str | Path) -> ExternalModelDescriptor:
    """Read `key = value` lines; '#' starts a comment. Paths stay relative
    to the descriptor's directory until resolve() is applied (done here)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read descriptor {path}: {exc}") from exc

    known = {f.name: f for f in fields(ExternalModelDescriptor)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LoadError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in known:
            raise LoadError(f"{path}:{lineno}: unknown descriptor key {key!r}")
        target = known[key].type
        try:
            if target == "int":
                values[key] = int(value)
            elif target == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc

    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise LoadError(f"{path}: missing required descriptor keys: {', '.join(missing)}")
    return ExternalModelDescriptor(**values).resolve(path.parent)


def write_descriptor(descriptor: ExternalModelDescriptor, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(descriptor, f.name)}" for f in fields(descriptor)]
    with atomic_write(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_vocab(path: str) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read tokenizer vocabulary {path}: {exc}") from exc
    words = [w for w in (line.strip() for line in text.splitlines()) if w]
    if not words:
        raise LoadError(f"tokenizer vocabulary {path} is empty")
    return words


def _load_state(module: torch.nn.Module, path: str, role: str) -> None:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as exc:
        raise LoadError(f"cannot read {role} weights {path}: {exc}") from exc
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise LoadError(f"{role} weights {path} do not fit the declared shape: {exc}") from exc


def load_external(descriptor: ExternalModelDescriptor | str | Path) -> DiffusionBackend:
    """Construct a backend from external weights; all-or-nothing."""
    if not isinstance(descriptor, ExternalModelDescriptor):
        descriptor = parse_descriptor(descriptor)
    if descriptor.codec != "pixel":
        raise LoadError(f"unsupported codec {descriptor.codec!r}; only 'pixel' is available")
    if descriptor.width % descriptor.heads != 0:
        raise LoadError("width must be divisible by heads")

    tokenizer = WordTokenizer(_read_vocab(descriptor.vocab), max_length=descriptor.max_seq)
    encoder = ToyTextEncoder(
        tokenizer.vocab_size,
        layers=descriptor.layers,
        width=descriptor.width,
        heads=descriptor.heads,
        max_seq=descriptor.max_seq,
    )
    _load_state(encoder, descriptor.text_encoder, "text encoder")
    denoiser = ToyDenoiser(
        context_dim=descriptor.width,
        base=descriptor.denoiser_base,
        temb_dim=descriptor.temb_dim,
    )
    _load_state(denoiser, descriptor.denoiser, "denoiser")
    encoder.eval()
    denoiser.eval()
    return DiffusionBackend(
        tokenizer=tokenizer,
        text_encoder=encoder,
        denoiser=denoiser,
        schedule=NoiseSchedule.linear(
            timesteps=descriptor.timesteps,
            beta_start=descriptor.beta_start,
            beta_end=descriptor.beta_end,
        ),
        codec=PixelCodec(),
        layout=EncoderLayout(num_layers=descriptor.layers),
        image_size=descriptor.image_size,
        channels=descriptor.channels,
    )


def export_backend(backend: DiffusionBackend, out_dir: str | Path) -> Path:
    """Write a backend as descriptor + weight files; returns descriptor path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / "text_encoder.pt") as tmp:
        torch.save(backend.text_encoder.state_dict(), tmp)
    with atomic_write(out / "denoiser.pt") as tmp:
        torch.save(backend.denoiser.state_dict(), tmp)
    with atomic_write(out / "vocab.txt") as tmp:
        tmp.write_text("\n".join(backend.tokenizer.words) + "\n", encoding="utf-8")

    encoder = backend.text_encoder
    denoiser = backend.denoiser
    descriptor = ExternalModelDescriptor(
        text_encoder="text_encoder.pt",
        denoiser="denoiser.pt",
        vocab="vocab.txt",
        layers=encoder.num_layers,
        width=encoder.width,
        heads=encoder.heads,
        max_seq=encoder.max_seq,
        image_size=backend.image_size,
        channels=backend.channels,
        denoiser_base=denoiser.base,
        temb_dim=denoiser.temb_dim,
        timesteps=backend.schedule.num_timesteps,
        beta_start=float(backend.schedule.betas[0]),
        beta_end=float(backend.schedule.betas[-1]),
    )
    path = out / "descriptor.txt"
    write_descriptor(descriptor, path)
    return path
