"""
caila.evaluate
~~~~~~~~~~~~~~

Generalized compositional zero-shot evaluation: score matrices, the bias
sweep over unseen columns, AUC, harmonic mean and best seen/unseen
accuracies, plus a brute-force reference evaluator for small matrices.
"""

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .data import CompositionalDataset, LabelSpace, Pair, World
from .exceptions import ContractError
from .model import ModelParams, encode_vision_composition, scores, text_mixture

LOGGER = logging.getLogger("caila")

ORACLE_LIMIT = 50
SCORE_BATCH = 64


@dataclass
class ScoreMatrix:
    """Rows are samples, columns candidate compositions.

    Columns are stored seen-first (stable), so lowest-index tie-breaking
    favours seen columns.
    """

    values: np.ndarray
    targets: np.ndarray
    column_seen: np.ndarray
    columns: Optional[List[Pair]] = None
    row_labels: Optional[List[Pair]] = None
    row_seen: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.int64)
        column_seen = np.asarray(self.column_seen, dtype=bool)
        if values.ndim != 2 or values.shape[1] != column_seen.shape[0] or values.shape[0] != targets.shape[0]:
            raise ContractError(
                f"score matrix {values.shape} does not match {targets.shape[0]} targets and {column_seen.shape[0]} columns"
            )
        if targets.size and (targets.min() < 0 or targets.max() >= values.shape[1]):
            raise ContractError("a row's true label is not among the columns")
        order = np.argsort(~column_seen, kind="stable")
        position = np.empty_like(order)
        position[order] = np.arange(order.size)
        self.values = values[:, order]
        self.column_seen = column_seen[order]
        self.targets = position[targets]
        if self.columns is not None:
            self.columns = [self.columns[i] for i in order]
        self.row_seen = self.column_seen[self.targets]

    @classmethod
    def build(
        cls,
        values: np.ndarray,
        row_labels: Sequence[Pair],
        columns: Sequence[Pair],
        labelspace: LabelSpace,
    ) -> "ScoreMatrix":
        index = {pair: i for i, pair in enumerate(columns)}
        missing = [label for label in row_labels if label not in index]
        if missing:
            raise ContractError(f"true labels missing from the candidate columns: {sorted(set(missing))[:5]}")
        targets = [index[label] for label in row_labels]
        column_seen = [labelspace.is_seen(pair) for pair in columns]
        return cls(values, np.array(targets), np.array(column_seen), list(columns), list(row_labels))

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_seen_columns(self) -> int:
        return int(self.column_seen.sum())


@dataclass(frozen=True)
class CurvePoint:
    bias: float
    seen_acc: float
    unseen_acc: float

    @property
    def hm(self) -> float:
        return harmonic_mean(self.seen_acc, self.unseen_acc)


@dataclass
class EvalReport:
    auc: float
    best_hm: float
    best_seen: float
    best_unseen: float
    curve: List[CurvePoint]
    unbiased_seen: float = 0.0
    unbiased_unseen: float = 0.0
    best_hm_bias: float = 0.0
    world: World = World.CLOSED
    candidate_count: int = 0

    def to_text(self) -> str:
        lines = [
            f"auc = {self.auc!r}",
            f"best_hm = {self.best_hm!r}",
            f"best_seen = {self.best_seen!r}",
            f"best_unseen = {self.best_unseen!r}",
            f"unbiased_seen = {self.unbiased_seen!r}",
            f"unbiased_unseen = {self.unbiased_unseen!r}",
            f"best_hm_bias = {self.best_hm_bias!r}",
            f"world = {self.world.value}",
            f"candidate_count = {self.candidate_count}",
        ]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (
            f"AUC {percent(self.auc)}  HM {percent(self.best_hm)}  "
            f"seen {percent(self.best_seen)}  unseen {percent(self.best_unseen)}  "
            f"({self.world.value} world, {self.candidate_count} candidates)"
        )


def percent(fraction: float) -> str:
    return str(Decimal(repr(fraction * 100)).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN))


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen + unseen == 0:
        return 0.0
    return 2 * seen * unseen / (seen + unseen)


def _groups(m: ScoreMatrix):
    n_seen = m.n_seen_columns
    if n_seen == 0 or n_seen == m.values.shape[1]:
        raise ContractError("score matrix needs at least one seen and one unseen column")
    return m.values[:, :n_seen], m.values[:, n_seen:], n_seen


def _row_gaps(m: ScoreMatrix) -> np.ndarray:
    seen, unseen, _ = _groups(m)
    return seen.max(axis=1) - unseen.max(axis=1)


def bias_candidates(m: ScoreMatrix) -> List[float]:
    """Sorted distinct per-row (best seen - best unseen) gaps between -inf and +inf sentinels."""
    gaps = np.unique(_row_gaps(m))
    return [-math.inf, *(float(g) for g in gaps), math.inf]


def sweep(m: ScoreMatrix, biases: Sequence[float]) -> List[CurvePoint]:
    """Seen and unseen accuracy with each bias added to every unseen column.

    A row switches to its best unseen column only when the bias strictly
    exceeds its gap; equal scores keep the lower (seen) column.
    """
    biases = [float(b) for b in biases]
    if any(b > c for b, c in zip(biases, biases[1:])):
        raise ContractError("biases must be sorted")
    if not m.row_seen.any() or m.row_seen.all():
        raise ContractError("evaluation needs rows with seen and rows with unseen true labels")
    seen, unseen, n_seen = _groups(m)
    gaps = seen.max(axis=1) - unseen.max(axis=1)
    correct_if_seen = np.argmax(seen, axis=1) == m.targets
    correct_if_unseen = np.argmax(unseen, axis=1) + n_seen == m.targets
    seen_rows, unseen_rows = m.row_seen, ~m.row_seen
    n_seen_rows, n_unseen_rows = int(seen_rows.sum()), int(unseen_rows.sum())

    curve = []
    for b in biases:
        correct = np.where(b > gaps, correct_if_unseen, correct_if_seen)
        curve.append(CurvePoint(
            b,
            np.count_nonzero(correct & seen_rows) / n_seen_rows,
            np.count_nonzero(correct & unseen_rows) / n_unseen_rows,
        ))
    return curve


def auc(curve: Sequence[CurvePoint]) -> float:
    """Trapezoidal area under unseen accuracy as a function of seen accuracy.

    The curve is extended to seen=0 at the best unseen accuracy and to
    unseen=0 at the best seen accuracy when it does not reach the axes.
    """
    if len(curve) < 2:
        raise ContractError("AUC needs at least two curve points")
    points = sorted(((p.seen_acc, p.unseen_acc) for p in curve), key=lambda p: (p[0], -p[1]))
    best_seen = max(p[0] for p in points)
    best_unseen = max(p[1] for p in points)
    if points[0][0] != 0:
        points.insert(0, (0.0, best_unseen))
    if not any(p[1] == 0 for p in points):
        points.append((best_seen, 0.0))
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return float(np.trapz(ys, xs))


def best_hm(curve: Sequence[CurvePoint]) -> float:
    if not curve:
        raise ContractError("best_hm needs a non-empty curve")
    return max(p.hm for p in curve)


def report_from_curve(
    curve: List[CurvePoint],
    unbiased: Optional[CurvePoint] = None,
    world: World = World.CLOSED,
    candidate_count: int = 0,
) -> EvalReport:
    best = max(curve, key=lambda p: p.hm)
    return EvalReport(
        auc=auc(curve),
        best_hm=best.hm,
        best_seen=max(p.seen_acc for p in curve),
        best_unseen=max(p.unseen_acc for p in curve),
        curve=list(curve),
        unbiased_seen=unbiased.seen_acc if unbiased else 0.0,
        unbiased_unseen=unbiased.unseen_acc if unbiased else 0.0,
        best_hm_bias=best.bias,
        world=world,
        candidate_count=candidate_count,
    )


def evaluate_scores(m: ScoreMatrix, world: World = World.CLOSED) -> EvalReport:
    curve = sweep(m, bias_candidates(m))
    unbiased = sweep(m, [0.0])[0]
    return report_from_curve(curve, unbiased, world, m.values.shape[1])


def oracle_eval(m: ScoreMatrix) -> EvalReport:
    """Brute-force reference for :func:`evaluate_scores` on small matrices.

    Thresholds are every pairwise (seen score - unseen score) difference of
    every row; accuracies are recomputed by adding the bias and taking the
    argmax at a point inside each interval between thresholds.
    """
    rows, cols = m.values.shape
    if rows > ORACLE_LIMIT or cols > ORACLE_LIMIT:
        raise ContractError(f"oracle_eval is limited to {ORACLE_LIMIT}x{ORACLE_LIMIT} matrices, got {rows}x{cols}")
    seen, unseen, n_seen = _groups(m)
    thresholds = np.unique((seen[:, :, None] - unseen[:, None, :]).ravel())
    trial_biases = [thresholds[0] - 1.0]
    trial_biases += [(lo + hi) / 2 for lo, hi in zip(thresholds[:-1], thresholds[1:])]
    trial_biases.append(thresholds[-1] + 1.0)

    unseen_columns = ~m.column_seen
    seen_rows = [i for i in range(rows) if m.row_seen[i]]
    unseen_rows = [i for i in range(rows) if not m.row_seen[i]]
    if not seen_rows or not unseen_rows:
        raise ContractError("evaluation needs rows with seen and rows with unseen true labels")

    curve = []
    for b in trial_biases:
        biased = m.values + np.where(unseen_columns, b, 0.0)
        predicted = [int(np.argmax(biased[i])) for i in range(rows)]
        hits_seen = len([i for i in seen_rows if predicted[i] == m.targets[i]])
        hits_unseen = len([i for i in unseen_rows if predicted[i] == m.targets[i]])
        curve.append(CurvePoint(float(b), hits_seen / len(seen_rows), hits_unseen / len(unseen_rows)))

    # area of the piecewise-linear curve, one midpoint rectangle per segment
    points = sorted({(p.seen_acc, p.unseen_acc) for p in curve}, key=lambda p: (p[0], -p[1]))
    top_seen = max(p[0] for p in points)
    top_unseen = max(p[1] for p in points)
    if points[0][0] > 0:
        points.insert(0, (0.0, top_unseen))
    if all(p[1] > 0 for p in points):
        points.append((top_seen, 0.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + (y1 - y0) / 2)

    best = max(curve, key=lambda p: p.hm)
    return EvalReport(
        auc=area,
        best_hm=best.hm,
        best_seen=max(p.seen_acc for p in curve),
        best_unseen=max(p.unseen_acc for p in curve),
        curve=curve,
        best_hm_bias=best.bias,
        candidate_count=cols,
    )


# Model scoring


def score_all(
    params: ModelParams,
    images: np.ndarray,
    labels: Sequence[Pair],
    labelspace: LabelSpace,
    world: World = World.CLOSED,
) -> ScoreMatrix:
    """Compatibility of every image with every candidate composition of ``world``."""
    if labelspace.vocab != params.vocab:
        raise ContractError("label space and model were built for different vocabularies")
    candidates = labelspace.candidates(world)
    text = text_mixture(params, candidates)
    blocks = []
    for start in range(0, len(images), SCORE_BATCH):
        image_embeddings = encode_vision_composition(params, images[start:start + SCORE_BATCH])
        blocks.append(scores(image_embeddings, text).data.astype(np.float64))
    values = np.concatenate(blocks, axis=0)
    LOGGER.debug(f"Scored {values.shape[0]} images against {values.shape[1]} {world.value}-world candidates")
    return ScoreMatrix.build(values, labels, candidates, labelspace)


def evaluate(
    params: ModelParams,
    dataset: CompositionalDataset,
    world: World = World.CLOSED,
    split: str = "val",
) -> EvalReport:
    images, labels = dataset.evaluation_set(split)
    return evaluate_scores(score_all(params, images, labels, dataset.labelspace, world), world)


def write_curve(path: Union[str, Path], curve: Sequence[CurvePoint]) -> None:
    lines = ["bias,seen_acc,unseen_acc"] + [f"{p.bias!r},{p.seen_acc!r},{p.unseen_acc!r}" for p in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(path: Union[str, Path], report: EvalReport) -> Path:
    """Write the key/value report and ``<stem>.curve.csv`` beside it; returns the curve path."""
    path = Path(path)
    path.write_text(report.to_text(), encoding="utf-8")
    curve_path = path.with_name(f"{path.stem}.curve.csv")
    write_curve(curve_path, report.curve)
    return curve_path
