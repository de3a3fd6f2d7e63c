"""
caila.train
~~~~~~~~~~~

Stage-0 backbone pretraining, the three-term training objective, primitive
concept shift and the adapter training loop with best-AUC selection.
"""

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Union
import warnings

import numpy as np

from . import tensor as T
from .data import CompositionalDataset, LabelSpace, Pair, Split, World
from .evaluate import evaluate
from .exceptions import (
    ConfigError,
    ContractError,
    NonFiniteError,
    ParameterError,
    ShiftSkippedWarning,
    TrainingError,
)
from .layers import ConceptKind
from .model import (
    ModelParams,
    VisionFeatures,
    backbone_vision,
    encode_fused,
    encode_text,
    encode_text_all,
    encode_vision_composition,
    fingerprint,
    fuse,
    primitive_from_stage1,
    scores,
    vision_stage1,
)
from .optim import OptimizerState, adam_step
from .tensor import Tape, Tensor, backward

LOGGER = logging.getLogger("caila")

SeedLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    stage0_lr: float = 1e-3
    weight_decay: float = 5e-5
    decoupled_weight_decay: bool = True
    tau_c: float = 0.01
    tau_a: float = 5e-4
    tau_o: float = 5e-4
    attribute_weight: float = 1.0
    object_weight: float = 1.0
    batch: int = 32
    epochs: int = 30
    stage0_epochs: int = 10
    shift_ratio: float = 0.1
    shift_retries: int = 20
    learnable_prompts: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.tau_c, self.tau_a, self.tau_o) <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.shift_ratio < 1:
            raise ConfigError(f"shift_ratio must be in [0, 1), got {self.shift_ratio}")
        if self.batch < 1 or self.epochs < 0 or self.stage0_epochs < 0 or self.shift_retries < 0:
            raise ConfigError("batch must be positive and epoch/retry counts non-negative")
        if min(self.lr, self.stage0_lr, self.weight_decay, self.attribute_weight, self.object_weight) < 0:
            raise ConfigError("learning rates, weight decay and loss weights must be non-negative")


# Concept shift


@dataclass(frozen=True)
class ShiftedFeature:
    """Batch entry fusing one sample's attribute stream with another's object stream."""

    attribute_donor: int
    object_donor: int
    label: Pair


BatchEntry = Union[int, ShiftedFeature]


def concept_shift(
    labels: Sequence[Pair],
    ratio: float,
    labelspace: LabelSpace,
    seed: SeedLike = None,
    retries: int = 20,
) -> List[BatchEntry]:
    """Replace floor(ratio * B) batch entries with shifted features, then shuffle.

    Regular entries are the sample's index in ``labels``. Donors ``i`` (attribute)
    and ``j != i`` (object) are redrawn up to ``retries`` times until
    ``(a_i, o_j)`` is a seen pair; a slot that never finds one keeps its sample.
    """
    if not 0 <= ratio < 1:
        raise ParameterError(f"concept shift ratio must be in [0, 1), got {ratio}")
    size = len(labels)
    entries: List[BatchEntry] = list(range(size))
    count = int(math.floor(ratio * size))
    if count == 0 or size < 2:
        return entries
    rng = np.random.default_rng(seed)
    for slot in rng.choice(size, size=count, replace=False):
        for _ in range(retries):
            i = int(rng.integers(size))
            j = int(rng.integers(size - 1))
            j += j >= i
            label = (labels[i][0], labels[j][1])
            if labelspace.is_seen(label):
                entries[int(slot)] = ShiftedFeature(i, j, label)
                break
        else:
            LOGGER.warning(f"Concept shift skipped slot {int(slot)} after {retries} donor draws")
            warnings.warn(f"no seen donor pair found for slot {int(slot)} in {retries} draws", ShiftSkippedWarning)
    return [entries[k] for k in rng.permutation(size)]


def entry_label(entry: BatchEntry, labels: Sequence[Pair]) -> Pair:
    return entry.label if isinstance(entry, ShiftedFeature) else labels[entry]


def shifted_features(features: VisionFeatures, entries: Sequence[BatchEntry]) -> VisionFeatures:
    """Gather donor stage-1 states in entry order."""
    attribute_rows = [e.attribute_donor if isinstance(e, ShiftedFeature) else e for e in entries]
    object_rows = [e.object_donor if isinstance(e, ShiftedFeature) else e for e in entries]
    return VisionFeatures(
        T.take(features.attribute_state, attribute_rows, axis=0),
        T.take(features.object_state, object_rows, axis=0),
    )


# Loss


@dataclass
class LossTerms:
    total: Tensor
    composition: Tensor
    attribute: Optional[Tensor] = None
    obj: Optional[Tensor] = None


def loss_from_scores(logits: Tensor, targets: Sequence[int], temperature: float, batch: Optional[int] = None) -> Tensor:
    """Sum of per-row temperature cross-entropies divided by ``batch`` (default: the row count)."""
    rows = T.cross_entropy(logits, targets, temperature)
    return T.scale(T.sum(rows), 1.0 / (batch or logits.shape[0]))


def caila_loss(
    params: ModelParams,
    images: np.ndarray,
    labels: Sequence[Pair],
    labelspace: LabelSpace,
    cfg: TrainConfig,
    shift_seed: SeedLike = None,
) -> LossTerms:
    """Composition cross-entropy over the seen pairs plus weighted attribute and object cross-entropies.

    Shifted entries only enter the composition term.

    Raises:
        ContractError: a label is not a seen pair
    """
    seen = list(labelspace.seen)
    seen_index = {pair: i for i, pair in enumerate(seen)}
    outside = [label for label in labels if label not in seen_index]
    if outside:
        raise ContractError(f"training labels outside the seen pairs: {sorted(set(outside))[:5]}")
    size = len(labels)
    config = params.config

    text = encode_text_all(params, seen)
    features = vision_stage1(params, images)
    if config.vision_moa:
        entries = concept_shift(labels, cfg.shift_ratio, labelspace, shift_seed, cfg.shift_retries)
        shifted = shifted_features(features, entries)
        f_comp = encode_fused(params, shifted, fuse(shifted))
    else:
        entries = list(range(size))
        f_comp = encode_vision_composition(params, images)

    targets = [seen_index[entry_label(e, labels)] for e in entries]
    composition = loss_from_scores(scores(f_comp, text.mixture), targets, cfg.tau_c)
    terms = LossTerms(composition, composition)

    regular = [e for e in entries if isinstance(e, int)]
    if not regular:
        return terms
    total = composition
    if cfg.attribute_weight:
        f_attr = primitive_from_stage1(params, T.take(features.attribute_state, regular, axis=0), ConceptKind.ATTRIBUTE)
        attr_targets = [params.vocab.attribute_index(labels[i][0]) for i in regular]
        terms.attribute = loss_from_scores(scores(f_attr, text.attribute), attr_targets, cfg.tau_a, size)
        total = T.add(total, T.scale(terms.attribute, cfg.attribute_weight))
    if cfg.object_weight:
        f_obj = primitive_from_stage1(params, T.take(features.object_state, regular, axis=0), ConceptKind.OBJECT)
        obj_targets = [params.vocab.object_index(labels[i][1]) for i in regular]
        terms.obj = loss_from_scores(scores(f_obj, text.obj), obj_targets, cfg.tau_o, size)
        total = T.add(total, T.scale(terms.obj, cfg.object_weight))
    terms.total = total
    return terms


def stage0_loss(params: ModelParams, images: np.ndarray, labels: Sequence[Pair], labelspace: LabelSpace, tau: float) -> Tensor:
    """Composition term on the adapter-free backbone."""
    seen = list(labelspace.seen)
    seen_index = {pair: i for i, pair in enumerate(seen)}
    text = encode_text(params, ConceptKind.COMPOSITION, seen, use_adapters=False)
    return loss_from_scores(scores(backbone_vision(params, images), text), [seen_index[label] for label in labels], tau)


# Loops


def _batches(rng: np.random.Generator, count: int, size: int):
    order = rng.permutation(count)
    for start in range(0, count, size):
        yield order[start:start + size]


def _step(loss_fn, tensors: Dict[str, Tensor], state: OptimizerState, lr: float, cfg: TrainConfig) -> float:
    for t in tensors.values():
        t.zero_grad()
    tape = Tape()
    try:
        with tape.recording():
            loss = loss_fn()
        backward(loss, tape)
    except NonFiniteError as e:
        raise TrainingError(f"training diverged ({e}); try a lower learning rate")
    adam_step(tensors, state, lr, cfg.weight_decay, cfg.decoupled_weight_decay)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError("training loss is not finite; try a lower learning rate")
    return value


def freeze_for_adapters(params: ModelParams, cfg: TrainConfig) -> str:
    """Mark adapters (and class prompts when learnable) trainable, freeze the rest; returns the frozen-set hash."""
    params.set_trainable(params.trainable_names(cfg.learnable_prompts))
    frozen_hash = fingerprint(params.frozen())
    LOGGER.debug(f"{len(params.frozen())} frozen tensors, hash {frozen_hash[:12]}")
    return frozen_hash


def stage0_pretrain(params: ModelParams, dataset: CompositionalDataset, cfg: TrainConfig) -> str:
    """Train backbone, token table and class prompts on seen training data, then freeze them.

    Returns:
        str: sha256 fingerprint of the frozen tensors
    """
    images = dataset.images(Split.TRAIN)
    labels = dataset.labels(Split.TRAIN)
    rng = np.random.default_rng([cfg.seed, 0])
    params.set_trainable(params.stage0_names())
    tensors = params.trainable()
    state = OptimizerState()
    for epoch in range(cfg.stage0_epochs):
        losses = []
        for rows in _batches(rng, len(labels), cfg.batch):
            batch_labels = [labels[i] for i in rows]
            losses.append(_step(
                lambda: stage0_loss(params, images[rows], batch_labels, dataset.labelspace, cfg.tau_c),
                tensors, state, cfg.stage0_lr, cfg,
            ))
        LOGGER.info(f"Stage-0 epoch {epoch}: loss {np.mean(losses):.4f}")
    LOGGER.info(f"Stage-0 seen-pair top-1 on train {seen_top1(params, images, labels, dataset.labelspace):.3f}")
    frozen_hash = freeze_for_adapters(params, cfg)
    LOGGER.info(f"Stage-0 finished after {cfg.stage0_epochs} epochs, frozen hash {frozen_hash[:12]}")
    return frozen_hash


@dataclass(frozen=True)
class EpochMetrics:
    """One metrics row; seen and unseen are validation accuracies at calibration bias 0."""

    epoch: int
    loss: float
    val_seen: float
    val_unseen: float
    val_auc: float

    def to_csv(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.val_seen!r},{self.val_unseen!r},{self.val_auc!r}"


METRICS_HEADER = "epoch,loss,val_seen,val_unseen,val_auc"


@dataclass
class TrainResult:
    frozen_hash: str
    history: List[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = -math.inf
    baseline_auc: float = math.nan


def _open_metrics(path: Union[str, Path, None]) -> Optional[TextIO]:
    if path is None:
        return None
    handle = open(path, "w", encoding="utf-8")
    handle.write(METRICS_HEADER + "\n")
    return handle


def train(
    params: ModelParams,
    dataset: CompositionalDataset,
    cfg: TrainConfig,
    metrics_path: Union[str, Path, None] = None,
    pretrain: bool = True,
) -> TrainResult:
    """Stage-0 (unless ``pretrain`` is False), then adapter training.

    After every epoch the model is evaluated on the validation split in the
    closed world; the parameters with the best validation AUC (first
    maximum) are restored at the end.
    """
    labelspace = dataset.labelspace
    frozen_hash = stage0_pretrain(params, dataset, cfg) if pretrain else freeze_for_adapters(params, cfg)
    if cfg.shift_ratio > 0 and not params.config.vision_moa:
        warnings.warn("concept shift needs the vision mixture-of-adapters pipeline; it is disabled", ShiftSkippedWarning)

    images = dataset.images(Split.TRAIN)
    labels = dataset.labels(Split.TRAIN)
    tensors = params.trainable()
    state = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(frozen_hash)
    result.baseline_auc = evaluate(params, dataset, World.CLOSED, "val").auc
    LOGGER.info(f"Validation AUC before adapter training {result.baseline_auc:.4f}")
    best_state: Dict[str, np.ndarray] = {name: t.data.copy() for name, t in tensors.items()}

    metrics = _open_metrics(metrics_path)
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for rows in _batches(rng, len(labels), cfg.batch):
                batch_labels = [labels[i] for i in rows]
                shift_seed = int(rng.integers(2 ** 32))
                losses.append(_step(
                    lambda: caila_loss(params, images[rows], batch_labels, labelspace, cfg, shift_seed).total,
                    tensors, state, cfg.lr, cfg,
                ))
                LOGGER.debug(f"epoch {epoch} step loss {losses[-1]:.4f}")
            report = evaluate(params, dataset, World.CLOSED, "val")
            row = EpochMetrics(epoch, float(np.mean(losses)), report.unbiased_seen, report.unbiased_unseen, report.auc)
            result.history.append(row)
            if metrics is not None:
                metrics.write(row.to_csv() + "\n")
            LOGGER.info(
                f"Epoch {epoch}: loss {row.loss:.4f} val seen {row.val_seen:.3f} "
                f"unseen {row.val_unseen:.3f} AUC {row.val_auc:.4f}"
            )
            if row.val_auc > result.best_auc:
                result.best_auc, result.best_epoch = row.val_auc, epoch
                best_state = {name: t.data.copy() for name, t in tensors.items()}
    finally:
        if metrics is not None:
            metrics.close()

    for name, t in tensors.items():
        t.data = best_state[name]
    if fingerprint(params.frozen()) != frozen_hash:
        raise TrainingError("frozen tensors changed during adapter training")
    if result.best_epoch >= 0:
        LOGGER.info(f"Best validation AUC {result.best_auc:.4f} at epoch {result.best_epoch}")
    return result


def seen_top1(params: ModelParams, images: np.ndarray, labels: Sequence[Pair], labelspace: LabelSpace) -> float:
    """Top-1 accuracy over the seen pairs with the adapter-free backbone."""
    seen = list(labelspace.seen)
    seen_index = {pair: i for i, pair in enumerate(seen)}
    text = encode_text(params, ConceptKind.COMPOSITION, seen, use_adapters=False)
    predicted = np.argmax(scores(backbone_vision(params, images), text).data, axis=1)
    return float(np.mean([p == seen_index[label] for p, label in zip(predicted, labels)]))
