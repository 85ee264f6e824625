"""Command-line surface for the erasure toolkit.

Every successful run appends a replay record (argv, resolved settings,
seeds, artifact hashes) to runs.jsonl under the output root, which is the
TEXTERASE_OUT environment variable or the working directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import random
import sys
from pathlib import Path

from PIL import Image

from . import evaluation
from .adapter import load_external
from .backend import sample_images
from .eraser import ConceptSpec, ErasureConfig, NounClass, erase, erase_many
from .masking import EncoderLayout, MaskVariant, select_targets
from .persistence import apply_delta, atomic_write, describe_delta, load_delta, save_delta
from .templates import TemplateKind, export_patterns, templates_for
from .toyworld import (
    ToyDatasetSpec,
    ToyTrainConfig,
    generate_dataset,
    load_backend,
    load_probe,
    read_dataset,
    save_backend,
    save_probe,
    train_probe_classifier,
    train_toy_pipeline,
)

OUTPUT_ROOT_ENV = "TEXTERASE_OUT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _record_run(argv: list[str], args: argparse.Namespace, seeds: list[int], artifacts: list[Path]) -> None:
    root = output_root()
    root.mkdir(parents=True, exist_ok=True)
    settings = {
        k: (v.value if hasattr(v, "value") else v)
        for k, v in vars(args).items()
        if k != "handler" and not callable(v)
    }
    record = {
        "command": argv,
        "settings": settings,
        "seeds": seeds,
        "artifacts": {str(p): _hash_file(p) for p in artifacts if p.exists()},
    }
    with open(root / "runs.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_any_backend(path: str):
    """Accept either a single-file checkpoint or an exported descriptor."""
    if Path(path).suffix == ".txt":
        return load_external(path)
    return load_backend(path)


def _erasure_config(args: argparse.Namespace) -> ErasureConfig:
    return ErasureConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        epochs=args.epochs,
        mask_variant=MaskVariant(args.mask),
        drop_final_q_proj=args.drop_final_q_proj,
    )


def _concept_spec(args: argparse.Namespace, name: str, images: tuple[str, ...]) -> ConceptSpec:
    return ConceptSpec(
        name=name,
        noun_class=NounClass(getattr(args, "noun_class", "common")),
        template_kind=TemplateKind(getattr(args, "kind", "object")),
        images=images,
        zero_shot=getattr(args, "zero_shot", False),
    )


def _add_erase_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None, help="override epoch count")
    parser.add_argument("--lr", type=float, default=1e-5, help="erasure learning rate")
    parser.add_argument("--batch-size", type=int, default=2)
    parser.add_argument("--mask", default="full", choices=[v.value for v in MaskVariant])
    parser.add_argument("--drop-final-q-proj", action="store_true",
                        help="omit the final layer's q_proj from the mask (historical variant)")


def _add_sampling_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--guidance", type=float, default=evaluation.DEFAULT_GUIDANCE)
    parser.add_argument("--steps", type=int, default=evaluation.DEFAULT_STEPS, help="DDIM steps")


# ---------------------------------------------------------------- handlers


def _cmd_toy_dataset(args) -> tuple[list[int], list[Path]]:
    spec = ToyDatasetSpec(samples_per_concept=args.samples_per_concept)
    out = Path(args.out)
    generate_dataset(spec, args.seed, out_dir=out)
    print(f"wrote {16 * args.samples_per_concept} records under {out}")
    return [args.seed], [out / "manifest.jsonl"]


def _cmd_toy_train(args) -> tuple[list[int], list[Path]]:
    dataset = read_dataset(args.dataset)
    probe = load_probe(args.probe) if args.probe else None
    config = ToyTrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        encoder_pretrain_steps=args.encoder_pretrain_steps,
    )
    backend = train_toy_pipeline(dataset, config, seed=args.seed, probe=probe)
    save_backend(backend, args.out)
    print(f"trained backend saved to {args.out}")
    return [args.seed], [Path(args.out)]


def _cmd_toy_probe(args) -> tuple[list[int], list[Path]]:
    dataset = read_dataset(args.dataset)
    probe = train_probe_classifier(dataset, seed=args.seed, holdout_fraction=args.holdout)
    save_probe(probe, args.out)
    print(f"probe held-out accuracy {probe.held_out_accuracy:.3f}; saved to {args.out}")
    return [args.seed], [Path(args.out)]


def _cmd_erase(args) -> tuple[list[int], list[Path]]:
    backend = _load_any_backend(args.backend)
    images = tuple(p for p in (args.images or "").split(",") if p)
    concept = _concept_spec(args, args.concept, images)
    _, delta = erase(backend, concept, _erasure_config(args), random.Random(args.seed))
    save_delta(delta, args.out)
    artifacts = [Path(args.out)]
    if args.save_backend:
        save_backend(backend, args.save_backend)
        artifacts.append(Path(args.save_backend))
    print(f"erased {args.concept!r}; delta with {len(delta.entries)} entries -> {args.out}")
    return [args.seed], artifacts


def _cmd_erase_many(args) -> tuple[list[int], list[Path]]:
    backend = _load_any_backend(args.backend)
    names = [n.strip() for n in args.concepts.split(",") if n.strip()]
    concepts = []
    for name in names:
        images: tuple[str, ...] = ()
        if not args.zero_shot:
            concept_dir = Path(args.images_dir) / name
            images = tuple(sorted(str(p) for p in concept_dir.glob("*.png")))
        concepts.append(_concept_spec(args, name, images))
    _, deltas = erase_many(backend, concepts, _erasure_config(args), random.Random(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i, (name, delta) in enumerate(zip(names, deltas)):
        path = out / f"delta_{i:02d}_{name.replace(' ', '_')}.bin"
        save_delta(delta, path)
        artifacts.append(path)
    if args.save_backend:
        save_backend(backend, args.save_backend)
        artifacts.append(Path(args.save_backend))
    print(f"erased {len(names)} concepts; deltas under {out}")
    return [args.seed], artifacts


def _cmd_generate(args) -> tuple[list[int], list[Path]]:
    backend = _load_any_backend(args.backend)
    images = sample_images(
        backend, args.prompt, n=args.n, guidance=args.guidance, steps=args.steps, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i in range(images.shape[0]):
        path = out / f"gen_{args.seed + i:06d}.png"
        with atomic_write(path) as tmp:
            Image.fromarray(images[i]).save(tmp, format="PNG")
        artifacts.append(path)
    print(f"wrote {args.n} images under {out}")
    return list(range(args.seed, args.seed + args.n)), artifacts


def _write_report(report, out: str | None) -> list[Path]:
    print(report.table(), end="")
    if out:
        report.save(out)
        return [Path(out)]
    return []


def _cmd_eval_detect(args) -> tuple[list[int], list[Path]]:
    backend = _load_any_backend(args.backend)
    probe = load_probe(args.probe)
    template = templates_for(TemplateKind(args.kind))[0]
    rate, score = evaluation.classify_generations(
        backend, probe, args.concept, args.n, template, args.seed,
        guidance=args.guidance, steps=args.steps,
    )
    report = evaluation.EvalReport(
        kind="detection", guidance=args.guidance, steps=args.steps,
        seed=args.seed, samples=args.n,
    )
    report.entries.append(evaluation.RateEntry(
        concept=args.concept, rate=rate, samples=args.n, alignment=score
    ))
    return [args.seed], _write_report(report, args.out)


def _cmd_eval_sweep(args) -> tuple[list[int], list[Path]]:
    probe = load_probe(args.probe)
    concept = _concept_spec(args, args.concept, ())
    if not args.zero_shot and args.images:
        concept = _concept_spec(args, args.concept, tuple(args.images.split(",")))
    points = evaluation.epoch_sweep(
        lambda: _load_any_backend(args.backend), concept, _erasure_config(args), probe,
        args.n, args.seed, guidance=args.guidance, steps=args.steps,
    )
    report = evaluation.EvalReport(
        kind="epoch-sweep", guidance=args.guidance, steps=args.steps,
        seed=args.seed, samples=args.n,
    )
    for epoch, rate in points:
        report.entries.append(evaluation.RateEntry(
            concept=args.concept, rate=rate, samples=args.n, epoch=epoch
        ))
    return [args.seed], _write_report(report, args.out)


def _cmd_eval_preserve(args) -> tuple[list[int], list[Path]]:
    before = _load_any_backend(args.backend_before)
    after = _load_any_backend(args.backend_after)
    probe = load_probe(args.probe)
    concepts = [c.strip() for c in args.concepts.split(",")] if args.concepts else list(probe.classes)
    report = evaluation.preservation_report(
        before, after, probe, concepts, args.n, args.seed,
        guidance=args.guidance, steps=args.steps,
    )
    return [args.seed], _write_report(report, args.out)


def _cmd_eval_ablate(args) -> tuple[list[int], list[Path]]:
    probe = load_probe(args.probe)
    concept = _concept_spec(args, args.concept, ())
    if not args.zero_shot and args.images:
        concept = _concept_spec(args, args.concept, tuple(args.images.split(",")))
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    reports = evaluation.ablation_masks(
        lambda: _load_any_backend(args.backend), concept, _erasure_config(args), probe,
        variants, args.n, args.seed, guidance=args.guidance, steps=args.steps,
    )
    artifacts: list[Path] = []
    for variant, report in reports.items():
        print(report.table(), end="")
        if args.out:
            path = Path(args.out).with_suffix(f".{variant.value}.jsonl")
            report.save(path)
            artifacts.append(path)
    return [args.seed], artifacts


def _cmd_mask_show(args) -> tuple[list[int], list[Path]]:
    mask = select_targets(
        EncoderLayout(num_layers=args.layers),
        MaskVariant(args.variant),
        drop_final_q_proj=args.drop_final_q_proj,
    )
    for path in mask.paths:
        print(path)
    return [], []


def _cmd_delta_apply(args) -> tuple[list[int], list[Path]]:
    backend = _load_any_backend(args.backend)
    delta = load_delta(args.delta)
    apply_delta(backend.text_encoder, delta, strict=not args.no_strict)
    save_backend(backend, args.out)
    print(f"applied {len(delta.entries)} entries; backend saved to {args.out}")
    return [], [Path(args.out)]


def _cmd_delta_inspect(args) -> tuple[list[int], list[Path]]:
    print(describe_delta(load_delta(args.delta)), end="")
    return [], []


def _cmd_templates_export(args) -> tuple[list[int], list[Path]]:
    print(export_patterns(TemplateKind(args.kind)), end="")
    return [], []


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texterase",
        description="Erase a named concept from a text-conditioned diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy", help="build the self-contained toy world")
    toy_sub = toy.add_subparsers(dest="toy_command", required=True)

    p = toy_sub.add_parser("dataset", help="generate the captioned shapes dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-concept", type=int, default=150)
    p.set_defaults(handler=_cmd_toy_dataset)

    p = toy_sub.add_parser("train", help="train the toy diffusion pipeline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--encoder-pretrain-steps", type=int, default=600)
    p.add_argument("--probe", default=None, help="probe checkpoint for the convergence gate")
    p.set_defaults(handler=_cmd_toy_train)

    p = toy_sub.add_parser("probe", help="train the detection classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.125)
    p.set_defaults(handler=_cmd_toy_probe)

    p = sub.add_parser("erase", help="unlearn one concept")
    p.add_argument("--backend", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--class", dest="noun_class", default="common", choices=["proper", "common"])
    p.add_argument("--kind", default="object", choices=["object", "style"])
    p.add_argument("--images", default=None, help="comma-separated image paths (k-shot)")
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="delta file path")
    p.add_argument("--save-backend", default=None, help="also save the erased backend")
    _add_erase_config_flags(p)
    p.set_defaults(handler=_cmd_erase)

    p = sub.add_parser("erase-many", help="unlearn several concepts sequentially")
    p.add_argument("--backend", required=True)
    p.add_argument("--concepts", required=True, help="comma-separated concept names")
    p.add_argument("--class", dest="noun_class", default="common", choices=["proper", "common"])
    p.add_argument("--kind", default="object", choices=["object", "style"])
    p.add_argument("--images-dir", default=None, help="directory with one PNG folder per concept")
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for the delta files")
    p.add_argument("--save-backend", default=None)
    _add_erase_config_flags(p)
    p.set_defaults(handler=_cmd_erase_many)

    p = sub.add_parser("generate", help="sample images from a backend")
    p.add_argument("--backend", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_generate)

    ev = sub.add_parser("eval", help="measure detection rates")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)

    p = ev_sub.add_parser("detect", help="detection rate for one concept")
    p.add_argument("--backend", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--kind", default="object", choices=["object", "style"])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_eval_detect)

    p = ev_sub.add_parser("sweep", help="detection rate after each erasure epoch")
    p.add_argument("--backend", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--class", dest="noun_class", default="common", choices=["proper", "common"])
    p.add_argument("--kind", default="object", choices=["object", "style"])
    p.add_argument("--images", default=None)
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_erase_config_flags(p)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_eval_sweep)

    p = ev_sub.add_parser("preserve", help="before/after rates for many concepts")
    p.add_argument("--backend-before", required=True)
    p.add_argument("--backend-after", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--concepts", default=None, help="comma-separated; default: all probe classes")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_eval_preserve)

    p = ev_sub.add_parser("ablate", help="erase under several mask variants")
    p.add_argument("--backend", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--class", dest="noun_class", default="common", choices=["proper", "common"])
    p.add_argument("--kind", default="object", choices=["object", "style"])
    p.add_argument("--images", default=None)
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--variants", default="full,mlp_only,first_attn_wout,first_attn_all")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_erase_config_flags(p)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_eval_ablate)

    mask = sub.add_parser("mask", help="inspect update masks")
    mask_sub = mask.add_subparsers(dest="mask_command", required=True)
    p = mask_sub.add_parser("show", help="print the module paths of a mask")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--variant", default="full", choices=[v.value for v in MaskVariant])
    p.add_argument("--drop-final-q-proj", action="store_true")
    p.set_defaults(handler=_cmd_mask_show)

    delta = sub.add_parser("delta", help="apply or inspect saved deltas")
    delta_sub = delta.add_subparsers(dest="delta_command", required=True)
    p = delta_sub.add_parser("apply", help="apply a delta to a backend checkpoint")
    p.add_argument("--backend", required=True)
    p.add_argument("--delta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-strict", action="store_true", help="skip the fingerprint check")
    p.set_defaults(handler=_cmd_delta_apply)
    p = delta_sub.add_parser("inspect", help="describe a delta file")
    p.add_argument("--delta", required=True)
    p.set_defaults(handler=_cmd_delta_inspect)

    tpl = sub.add_parser("templates", help="prompt template utilities")
    tpl_sub = tpl.add_subparsers(dest="templates_command", required=True)
    p = tpl_sub.add_parser("export", help="print a template set, one per line")
    p.add_argument("--kind", required=True, choices=["object", "style"])
    p.set_defaults(handler=_cmd_templates_export)

    return parser


def cli_main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    if getattr(args, "command", None) == "erase" and not args.zero_shot and not args.images:
        parser.error("erase requires --images or --zero-shot")
    if getattr(args, "command", None) == "erase-many" and not args.zero_shot and not args.images_dir:
        parser.error("erase-many requires --images-dir or --zero-shot")

    try:
        seeds, artifacts = args.handler(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _record_run(argv, args, seeds, artifacts)
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
