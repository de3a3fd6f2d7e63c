from dataclasses import replace
import warnings

import numpy as np
import pytest

from caila.data import Split, World
from caila.evaluate import evaluate
from caila.exceptions import ConfigError, ContractError, ParameterError, ShiftSkippedWarning
from caila.gradcheck import grad_check
from caila.model import fingerprint, initialize_model, with_config
from caila.train import (
    METRICS_HEADER,
    ShiftedFeature,
    TrainConfig,
    caila_loss,
    concept_shift,
    entry_label,
    freeze_for_adapters,
    seen_top1,
    stage0_pretrain,
    train,
)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(shift_ratio=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(tau_c=0.0)


def test_shift_ratio_zero_leaves_batch_unchanged(micro_labelspace):
    labels = list(micro_labelspace.seen) * 3
    assert concept_shift(labels, 0.0, micro_labelspace, seed=0) == list(range(len(labels)))


def test_shift_ratio_must_be_below_one(micro_labelspace):
    with pytest.raises(ParameterError):
        concept_shift(list(micro_labelspace.seen), 1.0, micro_labelspace)


def test_shifted_labels_are_always_seen(micro_labelspace):
    rng = np.random.default_rng(0)
    seen = list(micro_labelspace.seen)
    shifted = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ShiftSkippedWarning)
        for step in range(3000):
            labels = [seen[i] for i in rng.integers(len(seen), size=8)]
            entries = concept_shift(labels, 0.5, micro_labelspace, seed=step)
            assert len(entries) == len(labels)
            for entry in entries:
                if isinstance(entry, ShiftedFeature):
                    shifted += 1
                    assert micro_labelspace.is_seen(entry.label)
                    assert entry.attribute_donor != entry.object_donor
                    assert entry.label == (labels[entry.attribute_donor][0], labels[entry.object_donor][1])
    assert shifted >= 10_000


def test_shift_count_and_labels(micro_labelspace):
    labels = [("red", "circle"), ("red", "square"), ("blue", "square"), ("red", "circle")] * 2
    entries = concept_shift(labels, 0.25, micro_labelspace, seed=1)
    regular = [e for e in entries if isinstance(e, int)]
    assert len(entries) - len(regular) <= 2
    assert len(set(regular)) == len(regular)
    assert all(entry_label(e, labels) in micro_labelspace.seen for e in entries)


def test_exhausted_retries_warn_and_keep_sample(micro_labelspace):
    labels = list(micro_labelspace.seen)
    with pytest.warns(ShiftSkippedWarning):
        entries = concept_shift(labels, 0.5, micro_labelspace, seed=0, retries=0)
    assert sorted(entries) == list(range(len(labels)))


def test_loss_rejects_unseen_labels(micro_params, micro_images, micro_labelspace):
    images, _ = micro_images
    with pytest.raises(ContractError):
        caila_loss(micro_params, images[:1], [("blue", "circle")], micro_labelspace, TrainConfig())


def test_loss_terms(perturbed_params, micro_images, micro_labelspace):
    images, labels = micro_images
    cfg = TrainConfig(tau_c=1.0, tau_a=1.0, tau_o=1.0, shift_ratio=0.0)
    terms = caila_loss(perturbed_params, images, labels, micro_labelspace, cfg)
    assert terms.attribute is not None and terms.obj is not None
    expected = terms.composition.item() + terms.attribute.item() + terms.obj.item()
    assert terms.total.item() == pytest.approx(expected, rel=1e-5)

    only_composition = caila_loss(
        perturbed_params, images, labels, micro_labelspace, replace(cfg, attribute_weight=0.0, object_weight=0.0)
    )
    assert only_composition.attribute is None
    assert only_composition.total.item() == pytest.approx(terms.composition.item(), rel=1e-6)


@pytest.mark.parametrize(
    "tensor_name",
    [
        "adapter.vision.1.composition.ffn.up.weight",
        "adapter.vision.0.attribute.attn.down.weight",
        "adapter.vision.0.object.ffn.up.bias",
        "adapter.text.0.composition.attn.up.weight",
        "adapter.text.0.object.ffn.down.weight",
        "prompt.attribute",
    ],
)
def test_full_loss_gradient(perturbed_params, micro_images, micro_labelspace, tensor_name):
    images, labels = micro_images
    cfg = TrainConfig(tau_c=1.0, tau_a=1.0, tau_o=1.0, shift_ratio=0.5)
    x = perturbed_params.named_tensors()[tensor_name]

    def loss(_):
        return caila_loss(perturbed_params, images, labels, micro_labelspace, cfg, shift_seed=5).total

    assert grad_check(loss, x, samples=12) < 1e-3


def test_freeze_for_adapters(micro_params):
    frozen_hash = freeze_for_adapters(micro_params, TrainConfig(learnable_prompts=False))
    assert all(name.startswith("adapter.") for name in micro_params.trainable())
    assert frozen_hash == fingerprint(micro_params.frozen())


def test_stage0_trains_backbone_only(micro_params, micro_dataset, micro_train_config):
    adapters_before = fingerprint({n: t for n, t in micro_params.named_tensors().items() if n.startswith("adapter.")})
    backbone_before = fingerprint(micro_params.tensors_with_prefix("backbone."))
    stage0_pretrain(micro_params, micro_dataset, micro_train_config)
    adapters_after = fingerprint({n: t for n, t in micro_params.named_tensors().items() if n.startswith("adapter.")})
    assert adapters_after == adapters_before
    assert fingerprint(micro_params.tensors_with_prefix("backbone.")) != backbone_before
    assert all(name.startswith(("adapter.", "prompt.")) for name in micro_params.trainable())


def test_train_keeps_frozen_partition(micro_params, micro_dataset, micro_train_config, tmp_path):
    result = train(micro_params, micro_dataset, micro_train_config, tmp_path / "metrics.csv")
    assert fingerprint(micro_params.frozen()) == result.frozen_hash
    assert len(result.history) == micro_train_config.epochs
    assert 0 <= result.best_epoch < micro_train_config.epochs
    assert result.best_auc == max(row.val_auc for row in result.history)
    assert np.isfinite(result.baseline_auc)
    lines = (tmp_path / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == micro_train_config.epochs + 1


def test_training_is_deterministic(micro_config, micro_vocab, micro_dataset, micro_train_config, tmp_path):
    logs = []
    for run in range(2):
        params = initialize_model(micro_config, micro_vocab, seed=0)
        train(params, micro_dataset, micro_train_config, tmp_path / f"run{run}.csv")
        logs.append((tmp_path / f"run{run}.csv").read_bytes())
    assert logs[0] == logs[1]


def test_single_stage_training_warns_about_shift(micro_params, micro_dataset, micro_train_config):
    params = with_config(micro_params, vision_moa=False)
    with pytest.warns(ShiftSkippedWarning):
        train(params, micro_dataset, replace(micro_train_config, epochs=1), pretrain=False)


def test_metrics_rows_hold_unbiased_accuracies(micro_params, micro_dataset, micro_train_config):
    result = train(micro_params, micro_dataset, replace(micro_train_config, epochs=1), pretrain=False)
    report = evaluate(micro_params, micro_dataset, World.CLOSED, "val")
    row = result.history[0]
    assert (row.val_seen, row.val_unseen, row.val_auc) == (report.unbiased_seen, report.unbiased_unseen, report.auc)


def test_null_training_is_a_fixed_point(micro_params, micro_dataset, micro_train_config):
    before = {name: t.data.tobytes() for name, t in micro_params.named_tensors().items()}
    cfg = replace(micro_train_config, lr=0.0, shift_ratio=0.0, epochs=3)
    result = train(micro_params, micro_dataset, cfg, pretrain=False)
    after = {name: t.data.tobytes() for name, t in micro_params.named_tensors().items()}
    assert after == before
    rows = {(row.val_seen, row.val_unseen, row.val_auc) for row in result.history}
    assert len(result.history) == 3 and len(rows) == 1
    assert result.history[0].val_auc == result.baseline_auc


def test_train_without_stage0(micro_params, micro_dataset, micro_train_config):
    backbone = fingerprint(micro_params.tensors_with_prefix("backbone."))
    result = train(micro_params, micro_dataset, replace(micro_train_config, stage0_epochs=0, epochs=1))
    assert fingerprint(micro_params.tensors_with_prefix("backbone.")) == backbone
    assert result.frozen_hash == fingerprint(micro_params.frozen())
    assert len(result.history) == 1 and np.isfinite(result.history[0].val_auc)


def test_seen_top1_counts_correct_images(micro_params, micro_dataset):
    images, labels = micro_dataset.images(Split.TRAIN), micro_dataset.labels(Split.TRAIN)
    accuracy = seen_top1(micro_params, images, labels, micro_dataset.labelspace)
    assert 0.0 <= accuracy <= 1.0
    assert accuracy * len(labels) == pytest.approx(round(accuracy * len(labels)))
