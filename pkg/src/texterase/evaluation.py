"""Erasure measurement: detection rates, sweeps, preservation, ablations.

Every rate is the percentage of generated images a gated probe classifier
assigns to the concept's own class. Generation settings (guidance, steps,
seeds, sample counts) are recorded in every report so a run can be
replayed exactly.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .backend import DiffusionBackend, sample_images
from .eraser import ConceptSpec, ErasureConfig, erase
from .masking import MaskVariant
from .persistence import atomic_write
from .templates import PromptTemplate, object_templates, render

DEFAULT_GUIDANCE = 7.5
DEFAULT_STEPS = 50

BackendFactory = Callable[[], DiffusionBackend]


@dataclass(frozen=True)
class RateEntry:
    """One measured detection rate (and optional alignment score)."""

    concept: str
    rate: float
    samples: int
    alignment: float | None = None
    phase: str | None = None
    epoch: int | None = None
    variant: str | None = None
    retention: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 100.0:
            raise ValueError(f"rate {self.rate} outside [0, 100]")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass
class EvalReport:
    """Rates plus the full generation settings that produced them."""

    kind: str
    guidance: float
    steps: int
    seed: int
    samples: int
    entries: list[RateEntry] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        """Per-image seeds used for each rate in this report."""
        return list(range(self.seed, self.seed + self.samples))

    def rate_for(self, concept: str, **match) -> float:
        for e in self.entries:
            if e.concept == concept and all(getattr(e, k) == v for k, v in match.items()):
                return e.rate
        raise KeyError(f"no entry for {concept!r} matching {match}")

    def json_lines(self) -> str:
        header = {
            "record": "settings",
            "kind": self.kind,
            "guidance": self.guidance,
            "steps": self.steps,
            "seed": self.seed,
            "samples": self.samples,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for e in self.entries:
            payload = {"record": "rate", "concept": e.concept, "rate": e.rate, "samples": e.samples}
            for key in ("alignment", "phase", "epoch", "variant", "retention"):
                value = getattr(e, key)
                if value is not None:
                    payload[key] = value
            lines.append(json.dumps(payload, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        with atomic_write(path) as tmp:
            tmp.write_text(self.json_lines(), encoding="utf-8")

    def table(self) -> str:
        cols = ["concept", "phase", "epoch", "variant", "rate", "retention", "alignment"]
        used = [c for c in cols if c in ("concept", "rate") or any(getattr(e, c) is not None for e in self.entries)]
        rows = [used]
        for e in self.entries:
            row = []
            for c in used:
                v = getattr(e, c)
                row.append("" if v is None else f"{v:.1f}" if isinstance(v, float) else str(v))
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(used))]
        out = [
            f"{self.kind}  (guidance {self.guidance}, {self.steps} steps, "
            f"{self.samples} samples, base seed {self.seed})"
        ]
        for j, row in enumerate(rows):
            out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if j == 0:
                out.append("-" * len(out[-1]))
        return "\n".join(out) + "\n"


def classify_generations(
    backend: DiffusionBackend,
    probe,
    concept: str,
    n: int,
    template: PromptTemplate | None = None,
    seed: int = 0,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> tuple[float, float]:
    """(detection rate %, mean class probability) over one generation set."""
    template = template or object_templates()[0]
    prompt = render(template, concept).text
    images = sample_images(backend, prompt, n=n, guidance=guidance, steps=steps, seed=seed)
    probs = probe.predict_proba(images)
    cls = probe.class_index(concept)
    rate = 100.0 * float((probs.argmax(axis=1) == cls).mean())
    return rate, float(probs[:, cls].mean())


def detection_rate(
    backend: DiffusionBackend,
    probe,
    concept: str,
    n: int = 100,
    template: PromptTemplate | None = None,
    seed: int = 0,
    *,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> float:
    """Percent of n generations classified as the concept's own class."""
    rate, _ = classify_generations(backend, probe, concept, n, template, seed, guidance, steps)
    return rate


def alignment_score(
    backend: DiffusionBackend,
    probe,
    concept: str,
    n: int = 100,
    seed: int = 0,
    *,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> float:
    """Mean probe probability of the concept's class; in [0, 1]."""
    _, score = classify_generations(backend, probe, concept, n, None, seed, guidance, steps)
    return score


def epoch_sweep(
    backend_factory: BackendFactory,
    concept: ConceptSpec,
    config: ErasureConfig,
    probe,
    n: int = 100,
    seed: int = 0,
    *,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> list[tuple[int, float]]:
    """Detection rate before erasure (epoch 0) and after every epoch."""
    backend = backend_factory()

    def rate(b: DiffusionBackend) -> float:
        return detection_rate(b, probe, concept.name, n, seed=seed, guidance=guidance, steps=steps)

    points = [(0, rate(backend))]

    def measure(log) -> None:
        points.append((log.epoch, rate(log.backend)))

    erase(backend, concept, config, random.Random(seed), epoch_callback=measure)
    return points


def preservation_report(
    backend_before: DiffusionBackend,
    backend_after: DiffusionBackend,
    probe,
    concepts: Sequence[str],
    n: int = 100,
    seed: int = 0,
    *,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> EvalReport:
    """Before/after rates for every concept plus after/before retention."""
    report = EvalReport(kind="preservation", guidance=guidance, steps=steps, seed=seed, samples=n)
    for concept in concepts:
        before, before_score = classify_generations(
            backend_before, probe, concept, n, seed=seed, guidance=guidance, steps=steps
        )
        after, after_score = classify_generations(
            backend_after, probe, concept, n, seed=seed, guidance=guidance, steps=steps
        )
        if before > 0:
            retention = after / before
        else:
            retention = 1.0 if after == 0 else float("inf")
        report.entries.append(
            RateEntry(concept=concept, rate=before, samples=n, alignment=before_score, phase="before")
        )
        report.entries.append(
            RateEntry(
                concept=concept,
                rate=after,
                samples=n,
                alignment=after_score,
                phase="after",
                retention=retention,
            )
        )
    return report


def ablation_masks(
    backend_factory: BackendFactory,
    concept: ConceptSpec,
    config: ErasureConfig,
    probe,
    variants: Sequence[MaskVariant | str],
    n: int = 100,
    seed: int = 0,
    *,
    guidance: float = DEFAULT_GUIDANCE,
    steps: int = DEFAULT_STEPS,
) -> dict[MaskVariant, EvalReport]:
    """Erase under each mask variant from the same base; report final rates."""
    reports: dict[MaskVariant, EvalReport] = {}
    for raw in variants:
        variant = MaskVariant(raw)
        backend = backend_factory()
        before = detection_rate(backend, probe, concept.name, n, seed=seed, guidance=guidance, steps=steps)
        erase(backend, concept, replace(config, mask_variant=variant), random.Random(seed))
        after = detection_rate(backend, probe, concept.name, n, seed=seed, guidance=guidance, steps=steps)
        report = EvalReport(kind="mask-ablation", guidance=guidance, steps=steps, seed=seed, samples=n)
        report.entries.append(
            RateEntry(concept=concept.name, rate=before, samples=n, phase="before", variant=variant.value)
        )
        report.entries.append(
            RateEntry(concept=concept.name, rate=after, samples=n, phase="after", variant=variant.value)
        )
        reports[variant] = report
    return reports
