import logging

import numpy as np
import pytest
import torch

from texterase.backend import sample_latents
from texterase.eraser import ErasureConfig
from texterase.masking import encoder_fingerprint
from texterase.templates import object_templates, render
from texterase.toyworld import (
    COLORS,
    SHAPES,
    ToyDatasetSpec,
    ToyTrainConfig,
    WordTokenizer,
    build_toy_backend,
    classify_pixels,
    generate_dataset,
    load_backend,
    load_probe,
    read_dataset,
    save_backend,
    save_probe,
    toy_erasure_config,
    toy_tokenizer,
    train_companion_denoiser,
    train_probe_classifier,
    train_toy_pipeline,
    write_dataset,
)
from texterase.toyworld.pipeline import (
    EOS_ID,
    PAD_ID,
    TOY_ERASE_LEARNING_RATE,
    UNK_ID,
    measure_detection_rates,
)
from texterase.toyworld.probe import TrainingFailureError
from conftest import make_tiny_backend


# ------------------------------------------------------------- dataset


def test_dataset_is_balanced_and_captioned():
    ds = generate_dataset(ToyDatasetSpec(samples_per_concept=3), seed=0)
    assert len(ds) == 48
    assert ds.images.shape == (48, 32, 32, 3) and ds.images.dtype == np.uint8
    counts = {c: 0 for c in ds.concepts}
    for rec in ds.records:
        assert rec.caption == f"a {rec.color} {rec.shape}"
        counts[f"{rec.color} {rec.shape}"] += 1
    assert set(counts.values()) == {3}
    assert len(ds.concepts) == 16
    labels = ds.labels()
    assert labels.shape == (48,) and set(labels.tolist()) == set(range(16))


def test_dataset_regeneration_is_byte_identical():
    a = generate_dataset(ToyDatasetSpec(samples_per_concept=2), seed=11)
    b = generate_dataset(ToyDatasetSpec(samples_per_concept=2), seed=11)
    np.testing.assert_array_equal(a.images, b.images)
    c = generate_dataset(ToyDatasetSpec(samples_per_concept=2), seed=12)
    assert not np.array_equal(a.images, c.images)


def test_dataset_write_read_round_trip(tmp_path):
    ds = generate_dataset(ToyDatasetSpec(samples_per_concept=2), seed=0, out_dir=tmp_path)
    assert (tmp_path / "manifest.jsonl").exists()
    loaded = read_dataset(tmp_path)
    np.testing.assert_array_equal(loaded.images, ds.images)
    assert [r.caption for r in loaded.records] == [r.caption for r in ds.records]
    # writing again changes nothing
    write_dataset(ds, tmp_path)
    np.testing.assert_array_equal(read_dataset(tmp_path).images, ds.images)


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        ToyDatasetSpec(samples_per_concept=0)


def test_pixel_rule_checker_agrees_with_every_label():
    ds = generate_dataset(ToyDatasetSpec(samples_per_concept=5), seed=0)
    for rec in ds.records:
        color, shape = classify_pixels(ds.images[rec.index])
        assert (color, shape) == (rec.color, rec.shape), f"record {rec.index}"


def test_pixel_rule_checker_rejects_blank_images():
    with pytest.raises(ValueError):
        classify_pixels(np.full((32, 32, 3), 128, dtype=np.uint8))


# ------------------------------------------------------------- tokenizer


def test_tokenizer_id_layout_and_known_words():
    tok = toy_tokenizer()
    assert (PAD_ID, EOS_ID, UNK_ID) == (0, 1, 2)
    assert tok.vocab_size == 3 + 1 + len(COLORS) + len(SHAPES)
    assert tok.encode("a red circle") == [3, 4, 8, EOS_ID, 0, 0, 0, 0]


def test_tokenizer_maps_filler_words_to_unk_and_lowercases():
    tok = toy_tokenizer()
    ids = tok.encode("A PHOTO of a Red Circle")
    assert ids == [3, UNK_ID, UNK_ID, 3, 4, 8, EOS_ID, 0]


def test_tokenizer_batch_tensor_shape():
    tok = toy_tokenizer()
    out = tok(["a red circle", ""])
    assert out.shape == (2, 8) and out.dtype == torch.long
    assert out[1].tolist() == [EOS_ID] + [PAD_ID] * 7


def test_tokenizer_truncates_overlong_captions_with_warning(caplog):
    tok = toy_tokenizer()
    with caplog.at_level(logging.WARNING):
        ids = tok.encode("one two three four five six seven eight nine")
    assert len(ids) == 8 and ids[-1] == EOS_ID
    assert any("truncating" in r.message for r in caplog.records)


def test_every_object_template_fits_the_context_with_two_word_concepts():
    for template in object_templates():
        text = render(template, "yellow triangle").text
        assert len(text.split()) <= 7, text  # 7 words + EOS fill max_length 8


# ------------------------------------------------------------- pipeline


def test_build_toy_backend_is_deterministic_in_seed():
    a, b, c = build_toy_backend(0), build_toy_backend(0), build_toy_backend(1)
    assert encoder_fingerprint(a.text_encoder) == encoder_fingerprint(b.text_encoder)
    assert encoder_fingerprint(a.text_encoder) != encoder_fingerprint(c.text_encoder)
    assert a.image_size == 32 and a.channels == 3
    assert a.layout.num_layers == a.text_encoder.num_layers


def test_train_config_validation():
    with pytest.raises(ValueError):
        ToyTrainConfig(steps=0)
    with pytest.raises(ValueError):
        ToyTrainConfig(uncond_prob=0.8, template_prob=0.5)
    with pytest.raises(ValueError):
        ToyTrainConfig(final_lr_fraction=0.0)
    with pytest.raises(ValueError):
        ToyTrainConfig(encoder_pretrain_steps=-1)


def test_train_toy_pipeline_runs_and_reports_history(tiny_dataset):
    history: list[float] = []
    backend = train_toy_pipeline(
        tiny_dataset,
        ToyTrainConfig(steps=3, batch_size=8, encoder_pretrain_steps=2),
        seed=0,
        history=history,
    )
    assert history and all(np.isfinite(history))
    assert not backend.text_encoder.training and not backend.denoiser.training
    # the diffusion stage trains the denoiser against a frozen encoder
    assert not any(p.requires_grad for p in backend.text_encoder.parameters())


def test_convergence_gate_raises_with_per_concept_rates(tiny_dataset, tiny_probe):
    config = ToyTrainConfig(
        steps=1, batch_size=4, encoder_pretrain_steps=2,
        convergence_samples=2, sample_steps=2, detection_threshold=90.0,
    )
    with pytest.raises(TrainingFailureError) as err:
        train_toy_pipeline(tiny_dataset, config, seed=0, probe=tiny_probe)
    assert len(err.value.rates) == 16
    assert all(0.0 <= r <= 100.0 for r in err.value.rates.values())


def test_measure_detection_rates_covers_requested_concepts(tiny_probe):
    backend = make_tiny_backend()
    rates = measure_detection_rates(
        backend, tiny_probe, ["red circle", "blue square"], n=2, seed=0, steps=2
    )
    assert set(rates) == {"red circle", "blue square"}
    assert all(0.0 <= r <= 100.0 for r in rates.values())


def test_save_load_backend_round_trip(tmp_path):
    backend = make_tiny_backend(seed=4)
    out = tmp_path / "backend.pt"
    save_backend(backend, out)
    loaded = load_backend(out)

    assert encoder_fingerprint(loaded.text_encoder) == encoder_fingerprint(backend.text_encoder)
    before = sample_latents(backend, "a red circle", n=1, guidance=1.0, steps=3, seed=0)
    after = sample_latents(loaded, "a red circle", n=1, guidance=1.0, steps=3, seed=0)
    assert torch.equal(before, after)
    assert loaded.tokenizer.words == backend.tokenizer.words
    assert torch.equal(loaded.schedule.betas, backend.schedule.betas)


def test_load_backend_rejects_other_checkpoints(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_backend(tmp_path / "bad.pt")


def test_companion_training_shares_the_encoder_exactly(tiny_dataset):
    base = make_tiny_backend(seed=0)
    base_fp = encoder_fingerprint(base.text_encoder)
    companion = train_companion_denoiser(
        tiny_dataset, base, ToyTrainConfig(steps=2, batch_size=8), seed=9
    )
    assert companion.text_encoder is not base.text_encoder
    assert encoder_fingerprint(companion.text_encoder) == base_fp
    assert companion.denoiser is not base.denoiser
    # base modules untouched by companion training
    assert encoder_fingerprint(base.text_encoder) == base_fp


def test_toy_erasure_config_scales_only_the_learning_rate():
    config = toy_erasure_config()
    reference = ErasureConfig()
    assert config.learning_rate == TOY_ERASE_LEARNING_RATE
    assert config.batch_size == reference.batch_size
    assert (config.adam_beta1, config.adam_beta2) == (reference.adam_beta1, reference.adam_beta2)
    assert config.weight_decay == reference.weight_decay
    assert config.epochs is None
    override = toy_erasure_config(epochs=3, batch_size=4)
    assert override.epochs == 3 and override.batch_size == 4


# ------------------------------------------------------------- probe


def test_probe_gate_rejects_an_untrained_model(tiny_dataset):
    with pytest.raises(TrainingFailureError):
        train_probe_classifier(tiny_dataset, seed=0, epochs=0)


def test_probe_holdout_floor_is_enforced(tiny_dataset):
    with pytest.raises(ValueError):
        train_probe_classifier(tiny_dataset, seed=0, holdout_fraction=0.05)


def test_probe_save_load_round_trip(tiny_dataset, tiny_probe, tmp_path):
    path = tmp_path / "probe.pt"
    save_probe(tiny_probe, path)
    loaded = load_probe(path)
    assert loaded.classes == tiny_probe.classes
    assert loaded.held_out_accuracy == tiny_probe.held_out_accuracy

    images = tiny_dataset.images[:8]
    np.testing.assert_array_equal(loaded.predict(images), tiny_probe.predict(images))
    np.testing.assert_allclose(
        loaded.predict_proba(images), tiny_probe.predict_proba(images), rtol=0, atol=0
    )


def test_probe_prediction_contract(tiny_dataset, tiny_probe):
    probs = tiny_probe.predict_proba(tiny_dataset.images[:4])
    assert probs.shape == (4, 16)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-5)
    assert tiny_probe.class_index("red circle") == tiny_dataset.class_index("red circle")
    with pytest.raises(KeyError):
        tiny_probe.class_index("purple hexagon")


def test_load_probe_rejects_other_checkpoints(tmp_path):
    torch.save({"format": "not-a-probe"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_probe(tmp_path / "bad.pt")
