import numpy as np
import pytest

from caila.api import ablate, evaluate_checkpoint, generate, load_dataset, train_model
from caila.checkpoint import load_checkpoint
from caila.config import Configuration
from caila.data import Split, World
from caila.evaluate import score_all
from caila.model import fingerprint, initialize_model
from caila.train import seen_top1, stage0_pretrain

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def shapes_6x6(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes") / "6x6"
    summary = generate(out, attributes=6, objects=6, seen_fraction=0.667, per_pair=20, seed=0)
    assert summary.seen_pairs == 24 and summary.unseen_pairs == 12
    return out


@pytest.fixture(scope="module")
def trained(shapes_6x6, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("run") / "model.bin"
    result = train_model(shapes_6x6, ckpt, Configuration())
    return ckpt, result


def test_adapters_learn_unseen_compositions(shapes_6x6, trained):
    ckpt, result = trained
    assert result.best_auc > result.baseline_auc

    params = load_checkpoint(ckpt).restore()
    dataset = load_dataset(shapes_6x6, params.config)
    images, labels = dataset.evaluation_set("val")
    matrix = score_all(params, images, labels, dataset.labelspace, World.CLOSED)
    unseen_rows = ~matrix.row_seen
    predicted = np.argmax(matrix.values[unseen_rows], axis=1)
    unseen_top1 = float(np.mean(predicted == matrix.targets[unseen_rows]))
    assert unseen_top1 >= 3 / 36


def test_frozen_tensors_survive_training(trained):
    ckpt, result = trained
    checkpoint = load_checkpoint(ckpt)
    params = checkpoint.restore()
    assert fingerprint(params.frozen()) == checkpoint.stage0_hash == result.frozen_hash


def test_runs_are_reproducible(tmp_path):
    data = generate(tmp_path / "data", attributes=3, objects=3, seen_fraction=0.667, per_pair=6, seed=1).root
    configuration = Configuration()
    configuration.update({"epochs": 3, "stage0_epochs": 2})
    outputs = []
    for run in ("a", "b"):
        ckpt = tmp_path / run / "model.bin"
        train_model(data, ckpt, configuration, seed=5)
        evaluate_checkpoint(ckpt, data, World.OPEN, tmp_path / run / "report.txt")
        outputs.append([
            (tmp_path / run / name).read_bytes()
            for name in ("model.bin", "model.bin.metrics.csv", "report.txt", "report.curve.csv")
        ])
    assert outputs[0] == outputs[1]


def test_ablation_report(shapes_6x6, tmp_path):
    configuration = Configuration()
    configuration.update({"epochs": 5, "stage0_epochs": 5})
    report = ablate(shapes_6x6, seeds=3, configuration=configuration, report_path=tmp_path / "ablation.txt")
    text = (tmp_path / "ablation.txt").read_text(encoding="utf-8")
    assert text.startswith("seeds = 3\n")
    for variant in ("none", "vision", "text", "both", "full"):
        assert len(report.aucs[variant]) == 3
        assert f"\n{variant} = " in text
    assert text.rstrip().endswith(("ordering = holds", "ordering = fails"))


def test_stage0_beats_chance_on_seen_pairs(shapes_6x6):
    configuration = Configuration()
    dataset = load_dataset(shapes_6x6, configuration.encoder_config())
    params = initialize_model(configuration.encoder_config(), dataset.vocab, seed=0)
    images, labels = dataset.images(Split.TRAIN), dataset.labels(Split.TRAIN)
    stage0_pretrain(params, dataset, configuration.train_config())
    assert seen_top1(params, images, labels, dataset.labelspace) > 1 / len(dataset.labelspace.seen)
