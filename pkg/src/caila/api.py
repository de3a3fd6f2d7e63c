"""
caila.api
~~~~~~~~~

End-to-end entry points used by the command line and by library callers.
"""

from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from .checkpoint import echo, load_checkpoint, save_checkpoint
from .config import Configuration
from .data import (
    CompositionalDataset,
    DatasetSummary,
    RenderSpec,
    Split,
    VocabSpec,
    World,
    generate_dataset,
    split_compositions,
)
from .evaluate import EvalReport, evaluate, write_report
from .exceptions import ConfigError, ContractError
from .model import EncoderConfig, initialize_model
from .train import TrainResult, stage0_pretrain, train

LOGGER = logging.getLogger("caila")

PathLike = Union[str, Path]


def generate(
    out_dir: PathLike,
    attributes: int,
    objects: int,
    seen_fraction: float,
    per_pair: int,
    seed: int = 0,
    eval_per_pair: Optional[int] = None,
    noise: float = 0.0,
    image_size: int = 64,
) -> DatasetSummary:
    """Render a synthetic attribute/object benchmark into ``out_dir``.

    Validation and test splits get ``eval_per_pair`` images per pair
    (a quarter of ``per_pair`` by default, at least one).
    """
    vocab = VocabSpec.preset(attributes, objects)
    labelspace = split_compositions(vocab, seen_fraction, seed)
    held_out = eval_per_pair if eval_per_pair is not None else max(1, per_pair // 4)
    counts = {split: (per_pair if split is Split.TRAIN else held_out) for split in Split}
    return generate_dataset(out_dir, vocab, RenderSpec(image_size, noise), labelspace, counts, seed)


def load_dataset(data_dir: PathLike, config: Optional[EncoderConfig] = None) -> CompositionalDataset:
    dataset = CompositionalDataset.load(data_dir)
    if config is not None:
        height = dataset.images(Split.TRAIN).shape[1]
        if height != config.image_hw:
            raise ConfigError(f"dataset images are {height} pixels wide, config expects image_hw={config.image_hw}")
    return dataset


def default_metrics_path(checkpoint: PathLike) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(f"{checkpoint.name}.metrics.csv")


def train_model(
    data_dir: PathLike,
    out: PathLike,
    configuration: Optional[Configuration] = None,
    seed: Optional[int] = None,
    metrics_path: Optional[PathLike] = None,
) -> TrainResult:
    """Stage-0, adapter training and a checkpoint of the best validation epoch at ``out``."""
    configuration = (configuration or Configuration()).copy()
    if seed is not None:
        configuration.set("seed", seed)
    encoder = configuration.encoder_config()
    training = configuration.train_config()
    dataset = load_dataset(data_dir, encoder)

    params = initialize_model(encoder, dataset.vocab, training.seed)
    result = train(params, dataset, training, metrics_path or default_metrics_path(out))
    meta = echo(training)
    meta.update({
        "stage0_hash": result.frozen_hash,
        "best_epoch": str(result.best_epoch),
        "best_auc": repr(result.best_auc),
        "baseline_auc": repr(result.baseline_auc),
    })
    save_checkpoint(out, params, meta)
    return result


def evaluate_checkpoint(
    checkpoint: PathLike,
    data_dir: PathLike,
    world: Union[World, str] = World.CLOSED,
    report_path: Optional[PathLike] = None,
    split: str = "val",
) -> EvalReport:
    """Score a saved model on ``split`` of a dataset; writes the report and its curve when ``report_path`` is set."""
    params = load_checkpoint(checkpoint).restore()
    dataset = load_dataset(data_dir, params.config)
    if dataset.vocab != params.vocab:
        raise ContractError(f"checkpoint '{checkpoint}' was trained on a different vocabulary than '{data_dir}'")
    report = evaluate(params, dataset, World(world), split)
    if report_path is not None:
        curve_path = write_report(report_path, report)
        LOGGER.info(f"Wrote report to {report_path} and curve to {curve_path}")
    return report


# Ablation


ABLATION_VARIANTS: Dict[str, Dict[str, bool]] = {
    "none": dict(vision_adapters=False, text_adapters=False, vision_moa=False, text_moa=False),
    "vision": dict(vision_adapters=True, text_adapters=False, vision_moa=False, text_moa=False),
    "text": dict(vision_adapters=False, text_adapters=True, vision_moa=False, text_moa=False),
    "both": dict(vision_adapters=True, text_adapters=True, vision_moa=False, text_moa=False),
    "both+moa-v": dict(vision_adapters=True, text_adapters=True, vision_moa=True, text_moa=False),
    "both+moa-l": dict(vision_adapters=True, text_adapters=True, vision_moa=False, text_moa=True),
    "full": dict(vision_adapters=True, text_adapters=True, vision_moa=True, text_moa=True),
}


@dataclass
class AblationReport:
    aucs: Dict[str, List[float]] = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        values = self.aucs.get(variant, [])
        return float(np.mean(values)) if values else math.nan

    @property
    def ordering_holds(self) -> bool:
        """Adapters on both sides at least as good as on one side, one side at least as good as none."""
        both, vision, text, none = (self.mean(v) for v in ("both", "vision", "text", "none"))
        return both >= max(vision, text) and min(vision, text) >= none

    def to_text(self) -> str:
        lines = [f"seeds = {max((len(v) for v in self.aucs.values()), default=0)}"]
        for variant, values in self.aucs.items():
            per_seed = ",".join(repr(v) for v in values)
            lines.append(f"{variant} = {self.mean(variant)!r}  # {per_seed}")
        lines.append(f"ordering = {'holds' if self.ordering_holds else 'fails'}")
        return "\n".join(lines) + "\n"


def ablate(
    data_dir: PathLike,
    seeds: int = 3,
    configuration: Optional[Configuration] = None,
    report_path: Optional[PathLike] = None,
    variants: Optional[Mapping[str, Mapping[str, bool]]] = None,
) -> AblationReport:
    """Train each adapter/mixture variant from a shared stage-0 backbone per seed and average validation AUC.

    The report is written whether or not the expected ordering holds.
    """
    configuration = configuration or Configuration()
    variants = variants or ABLATION_VARIANTS
    base_encoder = configuration.encoder_config()
    dataset = load_dataset(data_dir, base_encoder)
    report = AblationReport({name: [] for name in variants})

    for seed in range(seeds):
        training = replace(configuration.train_config(), seed=seed)
        backbone = initialize_model(base_encoder, dataset.vocab, seed)
        stage0_pretrain(backbone, dataset, training)
        state = backbone.state()
        for name, switches in variants.items():
            params = initialize_model(replace(base_encoder, **switches), dataset.vocab, seed)
            params.load_state(state)
            result = train(params, dataset, training, pretrain=False)
            report.aucs[name].append(result.best_auc)
            LOGGER.info(f"Ablation seed {seed} variant {name}: val AUC {result.best_auc:.4f}")

    if report_path is not None:
        Path(report_path).write_text(report.to_text(), encoding="utf-8")
    if not report.ordering_holds:
        LOGGER.warning("Ablation ordering both >= one side >= none does not hold")
    return report
