"""Procedural captioned-shapes dataset: 4 shapes x 4 colors at 32x32 RGB.

Every record is a single colored shape at a random position and scale on
an achromatic gray background, captioned "a {color} {shape}". Generation
is deterministic per (spec, seed) via per-record sub-seeds, and a
pixel-rule checker can re-derive each label from the pixels alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..persistence import atomic_write

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")

COLOR_RGB = {
    "red": (220, 45, 40),
    "green": (50, 180, 70),
    "blue": (45, 95, 220),
    "yellow": (235, 200, 40),
}

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class ToyDatasetSpec:
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS
    image_size: int = 32
    samples_per_concept: int = 150

    def __post_init__(self) -> None:
        if self.samples_per_concept < 1:
            raise ValueError("samples_per_concept must be >= 1")

    @property
    def concepts(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    def caption(self, color: str, shape: str) -> str:
        return f"a {color} {shape}"


@dataclass(frozen=True)
class ToyRecord:
    index: int
    caption: str
    shape: str
    color: str
    path: str = ""


@dataclass
class ToyDataset:
    spec: ToyDatasetSpec
    seed: int
    images: np.ndarray  # uint8 [N, H, W, 3]
    records: list[ToyRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def concepts(self) -> list[str]:
        return self.spec.concepts

    def class_index(self, concept: str) -> int:
        return self.concepts.index(concept)

    def labels(self) -> np.ndarray:
        lut = {c: i for i, c in enumerate(self.concepts)}
        return np.array([lut[f"{r.color} {r.shape}"] for r in self.records], dtype=np.int64)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, rgb: tuple) -> None:
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=rgb)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=rgb)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=rgb)
    elif shape == "cross":
        w = r * 0.38
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=rgb)
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=rgb)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def render_record(
    shape: str, color: str, image_size: int, rng: np.random.Generator
) -> np.ndarray:
    """One supersampled, antialiased shape image as uint8 [H, W, 3]."""
    gray = int(rng.integers(120, 221))
    jitter = rng.integers(-12, 13, size=3)
    rgb = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(COLOR_RGB[color], jitter))

    r = float(rng.uniform(0.26, 0.38)) * image_size
    margin = r + 2.0
    cx = float(rng.uniform(margin, image_size - margin))
    cy = float(rng.uniform(margin, image_size - margin))

    s = _SUPERSAMPLE
    img = Image.new("RGB", (image_size * s, image_size * s), (gray, gray, gray))
    _draw_shape(ImageDraw.Draw(img), shape, cx * s, cy * s, r * s, rgb)
    img = img.resize((image_size, image_size), Image.LANCZOS)
    return np.asarray(img, dtype=np.uint8)


def generate_dataset(
    spec: ToyDatasetSpec, seed: int, out_dir: str | Path | None = None
) -> ToyDataset:
    """Generate the balanced dataset; optionally write PNGs and a manifest.

    Record i is drawn from a sub-seed derived from (seed, i), so the result
    is byte-identical across regenerations and independent of ordering.
    """
    n_concepts = len(spec.colors) * len(spec.shapes)
    total = n_concepts * spec.samples_per_concept
    images = np.empty((total, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    records: list[ToyRecord] = []

    index = 0
    for color in spec.colors:
        for shape in spec.shapes:
            for _ in range(spec.samples_per_concept):
                rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
                images[index] = render_record(shape, color, spec.image_size, rng)
                rel = f"images/{index:06d}.png"
                records.append(
                    ToyRecord(
                        index=index,
                        caption=spec.caption(color, shape),
                        shape=shape,
                        color=color,
                        path=rel,
                    )
                )
                index += 1

    dataset = ToyDataset(spec=spec, seed=seed, images=images, records=records)
    if out_dir is not None:
        write_dataset(dataset, out_dir)
    return dataset


def write_dataset(dataset: ToyDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        with atomic_write(out / rec.path) as tmp:
            Image.fromarray(dataset.images[rec.index]).save(tmp, format="PNG")
    manifest = out / "manifest.jsonl"
    lines = [
        json.dumps(
            {"path": rec.path, "caption": rec.caption, "shape": rec.shape, "color": rec.color},
            sort_keys=True,
        )
        for rec in dataset.records
    ]
    with atomic_write(manifest) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_dataset(in_dir: str | Path) -> ToyDataset:
    """Load a dataset previously written by :func:`write_dataset`."""
    root = Path(in_dir)
    manifest = root / "manifest.jsonl"
    records: list[ToyRecord] = []
    with open(manifest, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            raw = json.loads(line)
            records.append(
                ToyRecord(
                    index=index,
                    caption=raw["caption"],
                    shape=raw["shape"],
                    color=raw["color"],
                    path=raw["path"],
                )
            )
    if not records:
        raise ValueError(f"empty manifest at {manifest}")
    images = np.stack([np.asarray(Image.open(root / r.path).convert("RGB")) for r in records])

    per_concept = len(records) // (len(COLORS) * len(SHAPES))
    spec = ToyDatasetSpec(image_size=images.shape[1], samples_per_concept=max(1, per_concept))
    return ToyDataset(spec=spec, seed=-1, images=images, records=records)


def manifest_bytes(dataset: ToyDataset) -> bytes:
    lines = [
        json.dumps(
            {"path": r.path, "caption": r.caption, "shape": r.shape, "color": r.color},
            sort_keys=True,
        )
        for r in dataset.records
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


# --- pixel-rule label checker -------------------------------------------------

def _stencil(shape: str, height: int, width: int) -> np.ndarray:
    """Canonical shape mask rendered to the exact (height, width) footprint."""
    s = _SUPERSAMPLE
    img = Image.new("L", (width * s, height * s), 0)
    r = (min(height, width) * s) / 2
    _draw_shape(ImageDraw.Draw(img), shape, width * s / 2, height * s / 2, r, 255)
    resized = img.resize((width, height), Image.BILINEAR)
    return np.asarray(resized) > 127


def classify_pixels(image: np.ndarray) -> tuple[str, str]:
    """(color, shape) from pixels alone: dominant saturated hue + mask match.

    Segments saturated pixels, reads the color as the nearest base RGB, and
    matches the binary mask against shape stencils rendered at the region's
    own bounding-box size, scored by intersection over union.
    """
    img = image.astype(np.int16)
    saturation = img.max(axis=2) - img.min(axis=2)
    mask = saturation > 40
    if mask.sum() < 8:
        raise ValueError("no saturated region found")

    mean_rgb = img[mask].mean(axis=0)
    dists = {c: float(np.sum((mean_rgb - np.array(rgb)) ** 2)) for c, rgb in COLOR_RGB.items()}
    color = min(dists, key=dists.get)

    ys, xs = np.nonzero(mask)
    crop = mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    ious = {}
    for shape in SHAPES:
        canon = _stencil(shape, crop.shape[0], crop.shape[1])
        inter = np.logical_and(crop, canon).sum()
        union = np.logical_or(crop, canon).sum()
        ious[shape] = inter / max(union, 1)
    return color, max(ious, key=ious.get)
