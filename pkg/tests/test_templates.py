import random

import pytest

from texterase.templates import (
    PromptTemplate,
    TemplateKind,
    export_patterns,
    object_templates,
    render,
    sample_template,
    style_templates,
    templates_for,
)

# Frozen reference sets; the library must reproduce these strings exactly.
OBJECT_ORACLE = [
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
]

STYLE_ORACLE = [
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
]


def test_object_set_is_exactly_the_reference_27():
    patterns = [t.pattern for t in object_templates()]
    assert len(patterns) == 27
    assert patterns == OBJECT_ORACLE


def test_style_set_is_exactly_the_reference_19():
    patterns = [t.pattern for t in style_templates()]
    assert len(patterns) == 19
    assert patterns == STYLE_ORACLE


def test_style_set_keeps_duplicate_entries():
    patterns = [t.pattern for t in style_templates()]
    assert patterns.count("a cropped painting in the style of {concept}") == 2
    assert patterns.count("a close-up painting in the style of {concept}") == 2


def test_every_template_carries_one_placeholder():
    for t in object_templates() + style_templates():
        assert t.pattern.count("{concept}") == 1


def test_template_rejects_zero_or_many_placeholders():
    with pytest.raises(ValueError):
        PromptTemplate(TemplateKind.OBJECT, "no placeholder here")
    with pytest.raises(ValueError):
        PromptTemplate(TemplateKind.OBJECT, "{concept} and {concept}")


def test_render_substitutes_verbatim():
    out = render(object_templates()[0], "red circle")
    assert out.text == "a photo of a red circle"
    assert out.concept == "red circle"
    assert out.template.kind is TemplateKind.OBJECT
    # no article fix-up even when it reads awkwardly
    assert render(object_templates()[0], "apple").text == "a photo of a apple"


def test_render_rejects_empty_concept():
    with pytest.raises(ValueError):
        render(object_templates()[0], "")


def test_templates_for_accepts_enum_and_string():
    assert [t.pattern for t in templates_for("object")] == OBJECT_ORACLE
    assert [t.pattern for t in templates_for(TemplateKind.STYLE)] == STYLE_ORACLE
    with pytest.raises(ValueError):
        templates_for("poem")


def test_sample_template_is_deterministic_and_covers_the_set():
    draws_a = [sample_template("object", random.Random(7)).pattern for _ in range(40)]
    draws_b = [sample_template("object", random.Random(7)).pattern for _ in range(40)]
    assert draws_a == draws_b

    rng = random.Random(0)
    seen = {sample_template("object", rng).pattern for _ in range(500)}
    assert seen == set(OBJECT_ORACLE)


def test_export_patterns_round_trips_line_per_template():
    dump = export_patterns("style")
    assert dump.splitlines() == STYLE_ORACLE
    assert dump.endswith("\n")
