import math

import pytest

import caila
from caila.api import ABLATION_VARIANTS, AblationReport, default_metrics_path
from caila.config import Configuration
from caila.exceptions import ConfigError, ContractError

from conftest import micro_encoder


@pytest.fixture
def micro_configuration():
    configuration = Configuration()
    for key, value in vars(micro_encoder()).items():
        configuration.set(key, value.value if hasattr(value, "value") else value)
    configuration.update({
        "batch": 8, "epochs": 1, "stage0_epochs": 1, "lr": 0.01, "stage0_lr": 0.01,
        "tau_c": 1.0, "tau_a": 1.0, "tau_o": 1.0,
    })
    return configuration


@pytest.fixture
def micro_data(tmp_path):
    summary = caila.generate(tmp_path / "data", 2, 2, 0.75, per_pair=2, eval_per_pair=1, image_size=16)
    return summary.root


def test_generate_defaults(tmp_path):
    summary = caila.generate(tmp_path / "data", 3, 2, 0.5, per_pair=8, image_size=16)
    dataset = caila.load_dataset(summary.root)
    assert summary.seen_pairs == 3
    # evaluation images default to a quarter of the training count
    assert len(dataset.labels(caila.data.Split.VAL_UNSEEN)) == 3 * 2


def test_load_dataset_checks_image_size(micro_data):
    with pytest.raises(ConfigError):
        caila.load_dataset(micro_data, micro_encoder(image_hw=32, patch=8))


def test_default_metrics_path(tmp_path):
    assert default_metrics_path(tmp_path / "m.bin") == tmp_path / "m.bin.metrics.csv"


def test_train_and_evaluate(micro_data, micro_configuration, tmp_path):
    ckpt = tmp_path / "model.bin"
    result = caila.train_model(micro_data, ckpt, micro_configuration, seed=2)
    assert result.best_epoch == 0
    meta = caila.load_checkpoint(ckpt).meta
    assert meta["seed"] == "2"
    assert meta["stage0_hash"] == result.frozen_hash
    assert float(meta["best_auc"]) == result.best_auc

    report = caila.evaluate_checkpoint(ckpt, micro_data, "closed", split="test")
    assert report.world is caila.World.CLOSED
    assert 0.0 <= report.auc <= 1.0


def test_evaluate_other_vocabulary(micro_data, micro_configuration, tmp_path):
    ckpt = tmp_path / "model.bin"
    caila.train_model(micro_data, ckpt, micro_configuration)
    other = caila.generate(tmp_path / "other", 2, 3, 0.67, per_pair=1, image_size=16).root
    with pytest.raises(ContractError):
        caila.evaluate_checkpoint(ckpt, other, caila.World.OPEN)


def test_ablation_report_ordering():
    report = AblationReport({"none": [0.1], "vision": [0.2, 0.3], "text": [0.2], "both": [0.3]})
    assert report.mean("vision") == pytest.approx(0.25)
    assert math.isnan(report.mean("full"))
    assert report.ordering_holds
    assert "ordering = holds" in report.to_text()
    report.aucs["none"] = [0.5]
    assert not report.ordering_holds
    assert report.to_text().endswith("ordering = fails\n")


def test_ablate_micro(micro_data, micro_configuration, tmp_path):
    variants = {name: ABLATION_VARIANTS[name] for name in ("none", "vision", "both")}
    report = caila.ablate(micro_data, 1, micro_configuration, tmp_path / "ablation.txt", variants)
    assert set(report.aucs) == set(variants)
    assert all(len(values) == 1 for values in report.aucs.values())
    assert (tmp_path / "ablation.txt").read_text(encoding="utf-8").startswith("seeds = 1\n")
