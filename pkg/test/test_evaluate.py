import math

import numpy as np
import pytest

from caila.data import World
from caila.evaluate import (
    CurvePoint,
    ScoreMatrix,
    auc,
    best_hm,
    bias_candidates,
    evaluate,
    evaluate_scores,
    harmonic_mean,
    oracle_eval,
    percent,
    score_all,
    sweep,
    write_report,
)
from caila.exceptions import ContractError
from caila.model import initialize_model

from conftest import micro_encoder


def random_matrix(rng, rows, cols):
    n_seen = int(rng.integers(1, cols))
    column_seen = np.zeros(cols, dtype=bool)
    column_seen[rng.choice(cols, size=n_seen, replace=False)] = True
    seen_columns, unseen_columns = np.flatnonzero(column_seen), np.flatnonzero(~column_seen)
    # at least one row of each kind
    targets = [int(rng.choice(seen_columns)), int(rng.choice(unseen_columns))]
    targets += [int(rng.integers(cols)) for _ in range(rows - 2)]
    values = rng.normal(size=(rows, cols))
    if rng.random() < 0.3:
        # coarse scores produce ties
        values = np.round(values, 1)
    return ScoreMatrix(values, np.array(targets), column_seen)


@pytest.mark.parametrize(
    "seen, unseen, expected",
    [(0.4, 0.6, 0.48), (0.5, 0.5, 0.5), (0.0, 0.7, 0.0), (0.0, 0.0, 0.0)],
)
def test_harmonic_mean(seen, unseen, expected):
    assert harmonic_mean(seen, unseen) == pytest.approx(expected)


def test_columns_stored_seen_first():
    m = ScoreMatrix(np.array([[1.0, 2.0, 3.0]]), np.array([1]), np.array([False, True, False]))
    assert list(m.column_seen) == [True, False, False]
    assert list(m.values[0]) == [2.0, 1.0, 3.0]
    assert m.targets[0] == 0
    assert m.row_seen[0]


def test_sweep_by_hand():
    # rows 0-1 seen-labelled, rows 2-3 unseen-labelled; columns: 2 seen then 2 unseen
    values = np.array([
        [0.9, 0.1, 0.5, 0.2],
        [0.3, 0.8, 0.7, 0.1],
        [0.6, 0.2, 0.4, 0.1],
        [0.1, 0.2, 0.3, 0.9],
    ])
    m = ScoreMatrix(values, np.array([0, 1, 2, 3]), np.array([True, True, False, False]))
    assert bias_candidates(m) == [-math.inf, pytest.approx(-0.7), pytest.approx(0.1), pytest.approx(0.2), pytest.approx(0.4), math.inf]
    curve = sweep(m, bias_candidates(m))
    assert [(p.seen_acc, p.unseen_acc) for p in curve] == [
        (1.0, 0.0), (1.0, 0.0), (1.0, 0.5), (0.5, 0.5), (0.5, 1.0), (0.0, 1.0)
    ]
    report = evaluate_scores(m)
    assert report.best_hm == pytest.approx(2 / 3)
    assert report.best_seen == 1.0 and report.best_unseen == 1.0
    assert report.unbiased_seen == 1.0 and report.unbiased_unseen == 0.5
    assert report.auc == pytest.approx(0.75)


def test_tie_keeps_seen_prediction():
    m = ScoreMatrix(np.array([[0.5, 0.5], [0.1, 0.9]]), np.array([0, 1]), np.array([True, False]))
    at_zero = sweep(m, [0.0])[0]
    assert at_zero.seen_acc == 1.0


def test_sweep_validates_input():
    m = ScoreMatrix(np.array([[1.0, 0.0]]), np.array([0]), np.array([True, False]))
    with pytest.raises(ContractError):
        sweep(m, [0.0])
    both = ScoreMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), np.array([True, False]))
    with pytest.raises(ContractError):
        sweep(both, [1.0, 0.0])
    with pytest.raises(ContractError):
        ScoreMatrix(np.ones((2, 2)), np.array([0]), np.array([True, False]))


def test_auc_extension_and_errors():
    curve = [CurvePoint(0.0, 0.5, 0.5)] * 2
    # extended to (0, 0.5) and (0.5, 0)
    assert auc(curve) == pytest.approx(0.25)
    with pytest.raises(ContractError):
        auc(curve[:1])
    with pytest.raises(ContractError):
        best_hm([])


def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        m = random_matrix(rng, int(rng.integers(2, 11)), int(rng.integers(2, 9)))
        fast = evaluate_scores(m)
        slow = oracle_eval(m)
        assert fast.best_seen == slow.best_seen
        assert fast.best_unseen == slow.best_unseen
        assert fast.best_hm == slow.best_hm
        assert abs(fast.auc - slow.auc) <= 1e-9

        seen = [p.seen_acc for p in fast.curve]
        unseen = [p.unseen_acc for p in fast.curve]
        assert all(a >= b for a, b in zip(seen, seen[1:]))
        assert all(a <= b for a, b in zip(unseen, unseen[1:]))


def test_oracle_size_limit():
    m = ScoreMatrix(np.zeros((60, 2)), np.array([0, 1] * 30), np.array([True, False]))
    with pytest.raises(ContractError):
        oracle_eval(m)


def test_percent_one_decimal():
    assert percent(1 / 3) == "33.3"
    assert percent(0.4) == "40.0"


def test_report_files(tmp_path):
    m = ScoreMatrix(np.array([[0.9, 0.1], [0.2, 0.3]]), np.array([0, 1]), np.array([True, False]))
    report = evaluate_scores(m, World.OPEN)
    curve_path = write_report(tmp_path / "report.txt", report)
    text = (tmp_path / "report.txt").read_text(encoding="utf-8")
    assert "world = open" in text
    assert "candidate_count = 2" in text
    lines = curve_path.read_text(encoding="utf-8").splitlines()
    assert curve_path.name == "report.curve.csv"
    assert lines[0] == "bias,seen_acc,unseen_acc"
    assert lines[1].startswith("-inf,")
    assert len(lines) == len(report.curve) + 1


def test_score_all_candidate_counts(perturbed_params, micro_dataset):
    images, labels = micro_dataset.evaluation_set("val")
    closed = score_all(perturbed_params, images, labels, micro_dataset.labelspace, World.CLOSED)
    opened = score_all(perturbed_params, images, labels, micro_dataset.labelspace, World.OPEN)
    assert closed.shape == (len(labels), 4)
    assert opened.shape == (len(labels), 4)
    assert closed.n_seen_columns == 3
    report = evaluate(perturbed_params, micro_dataset, World.OPEN)
    assert report.candidate_count == 4
    assert 0.0 <= report.auc <= 1.0


def same_report(first, second):
    assert first.auc == pytest.approx(second.auc, abs=1e-12)
    assert first.best_hm == second.best_hm
    assert first.best_seen == second.best_seen
    assert first.best_unseen == second.best_unseen


def test_constant_shift_leaves_report_unchanged():
    rng = np.random.default_rng(7)
    for _ in range(50):
        m = random_matrix(rng, int(rng.integers(2, 12)), int(rng.integers(2, 8)))
        # quarter steps keep the shifted gaps exact
        values = np.round(m.values * 4) / 4
        base = ScoreMatrix(values, m.targets, m.column_seen)
        shifted = ScoreMatrix(values + 2.5, m.targets, m.column_seen)
        same_report(evaluate_scores(base), evaluate_scores(shifted))


def test_column_permutation_leaves_report_unchanged():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = random_matrix(rng, int(rng.integers(2, 12)), int(rng.integers(2, 8)))
        # continuous scores, so no ties depend on column order
        values = rng.normal(size=m.values.shape)
        base = ScoreMatrix(values, m.targets, m.column_seen)
        perm = rng.permutation(values.shape[1])
        inverse = np.argsort(perm)
        permuted = ScoreMatrix(values[:, perm], inverse[m.targets], m.column_seen[perm])
        same_report(evaluate_scores(base), evaluate_scores(permuted))


def test_auc_bounded_by_best_accuracies():
    rng = np.random.default_rng(13)
    for _ in range(100):
        report = evaluate_scores(random_matrix(rng, int(rng.integers(2, 15)), int(rng.integers(2, 9))))
        assert 0.0 <= report.auc <= report.best_seen + 1e-12
        assert report.auc <= report.best_unseen + 1e-12
        assert report.best_hm <= max(report.best_seen, report.best_unseen) + 1e-12


def test_open_world_adds_candidates(wide_labelspace, wide_dataset):
    params = initialize_model(micro_encoder(), wide_labelspace.vocab, seed=0)
    images, labels = wide_dataset.evaluation_set("val")
    closed = score_all(params, images, labels, wide_labelspace, World.CLOSED)
    opened = score_all(params, images, labels, wide_labelspace, World.OPEN)
    assert closed.shape == (len(labels), 4)
    assert opened.shape == (len(labels), 6)
    assert closed.n_seen_columns == opened.n_seen_columns == 3
    assert evaluate(params, wide_dataset, World.CLOSED).candidate_count == 4
    assert evaluate(params, wide_dataset, World.OPEN).candidate_count == 6
