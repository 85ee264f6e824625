"""Caption templates used to build prompts around a target concept.

Two fixed template sets are compiled in: one for object concepts and one
for styles. Each pattern carries a single ``{concept}`` placeholder that
is substituted verbatim (no article fix-up), and training picks one
template uniformly at random per iteration.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum


PLACEHOLDER = "{concept}"


class TemplateKind(str, Enum):
    OBJECT = "object"
    STYLE = "style"


@dataclass(frozen=True)
class PromptTemplate:
    kind: TemplateKind
    pattern: str

    def __post_init__(self) -> None:
        if self.pattern.count(PLACEHOLDER) != 1:
            raise ValueError(
                f"template pattern must contain exactly one {PLACEHOLDER!r}: {self.pattern!r}"
            )


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    concept: str
    template: PromptTemplate


_OBJECT_PATTERNS = (
    "a photo of a {concept}",
    "a rendering of a {concept}",
    "a cropped photo of the {concept}",
    "the photo of a {concept}",
    "a photo of a clean {concept}",
    "a photo of a dirty {concept}",
    "a dark photo of the {concept}",
    "a photo of my {concept}",
    "a photo of the cool {concept}",
    "a close-up photo of a {concept}",
    "a bright photo of the {concept}",
    "a cropped photo of a {concept}",
    "a photo of the {concept}",
    "a good photo of the {concept}",
    "a photo of one {concept}",
    "a close-up photo of the {concept}",
    "a rendition of the {concept}",
    "a photo of the clean {concept}",
    "a rendition of a {concept}",
    "a photo of a nice {concept}",
    "a good photo of a {concept}",
    "a photo of the nice {concept}",
    "a photo of the small {concept}",
    "a photo of the weird {concept}",
    "a photo of the large {concept}",
    "a photo of a cool {concept}",
    "a photo of a small {concept}",
)

# Note: the style set genuinely repeats two patterns ("a cropped painting
# ..." and "a close-up painting ..."); keep them so uniform sampling over
# the list reproduces the canonical weighting.
_STYLE_PATTERNS = (
    "a painting in the style of {concept}",
    "a rendering in the style of {concept}",
    "a cropped painting in the style of {concept}",
    "the painting in the style of {concept}",
    "a clean painting in the style of {concept}",
    "a dirty painting in the style of {concept}",
    "a dark painting in the style of {concept}",
    "a picture in the style of {concept}",
    "a cool painting in the style of {concept}",
    "a close-up painting in the style of {concept}",
    "a bright painting in the style of {concept}",
    "a cropped painting in the style of {concept}",
    "a good painting in the style of {concept}",
    "a close-up painting in the style of {concept}",
    "a rendition in the style of {concept}",
    "a nice painting in the style of {concept}",
    "a small painting in the style of {concept}",
    "a weird painting in the style of {concept}",
    "a large painting in the style of {concept}",
)


def object_templates() -> list[PromptTemplate]:
    """The 27 object-caption templates, in canonical order."""
    return [PromptTemplate(TemplateKind.OBJECT, p) for p in _OBJECT_PATTERNS]


def style_templates() -> list[PromptTemplate]:
    """The 19 style-caption templates, in canonical order."""
    return [PromptTemplate(TemplateKind.STYLE, p) for p in _STYLE_PATTERNS]


def templates_for(kind: TemplateKind | str) -> list[PromptTemplate]:
    kind = TemplateKind(kind)
    return object_templates() if kind is TemplateKind.OBJECT else style_templates()


def render(template: PromptTemplate, concept: str) -> RenderedPrompt:
    """Substitute the concept name into a template, verbatim."""
    if not concept:
        raise ValueError("concept name must be non-empty")
    return RenderedPrompt(
        text=template.pattern.replace(PLACEHOLDER, concept),
        concept=concept,
        template=template,
    )


def sample_template(kind: TemplateKind | str, rng: random.Random) -> PromptTemplate:
    """Pick a template of the given kind uniformly at random.

    Sampling is with replacement; the caller owns the rng, so a fixed seed
    reproduces the draw sequence.
    """
    pool = templates_for(kind)
    return pool[rng.randrange(len(pool))]


def export_patterns(kind: TemplateKind | str) -> str:
    """Line-delimited pattern dump for audit."""
    return "\n".join(t.pattern for t in templates_for(kind)) + "\n"
