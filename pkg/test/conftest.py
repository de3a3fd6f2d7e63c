import os

import numpy as np
import pytest

from caila.data import CompositionalDataset, LabelSpace, RenderSpec, Split, VocabSpec, render_image
from caila.model import EncoderConfig, initialize_model
from caila.train import TrainConfig


CFG_DIR = os.path.join(os.path.dirname(__file__), "cfg")

MICRO_SEEN = (("red", "circle"), ("blue", "square"), ("red", "square"))
MICRO_UNSEEN = (("blue", "circle"),)


def micro_encoder(**changes) -> EncoderConfig:
    values = dict(d=8, heads=2, n_vision=2, n_text=1, moa_layers=1, reduction=2, patch=8, image_hw=16, max_text_len=6)
    values.update(changes)
    return EncoderConfig(**values)


def perturb_adapters(params, scale: float = 0.05, seed: int = 1) -> None:
    """Move every up-projection off zero so adapters change the forward pass."""
    rng = np.random.default_rng(seed)
    for name, t in params.named_tensors().items():
        if name.startswith("adapter.") and ".up." in name:
            t.data = (t.data + rng.normal(0.0, scale, t.shape)).astype(t.data.dtype)


@pytest.fixture
def micro_vocab():
    return VocabSpec(("red", "blue"), ("circle", "square"))


@pytest.fixture
def micro_labelspace(micro_vocab):
    return LabelSpace(micro_vocab, MICRO_SEEN, MICRO_UNSEEN)


@pytest.fixture
def micro_config():
    return micro_encoder()


@pytest.fixture
def micro_params(micro_config, micro_vocab):
    return initialize_model(micro_config, micro_vocab, seed=0)


@pytest.fixture
def perturbed_params(micro_params):
    perturb_adapters(micro_params)
    return micro_params


@pytest.fixture
def micro_images():
    spec = RenderSpec(image_hw=16)
    labels = list(MICRO_SEEN) + [MICRO_SEEN[0]]
    images = np.stack([render_image(a, o, spec, sample_seed=k) for k, (a, o) in enumerate(labels)])
    return images, labels


@pytest.fixture
def micro_dataset(micro_labelspace):
    counts = {Split.TRAIN: 3, Split.VAL_SEEN: 1, Split.VAL_UNSEEN: 2, Split.TEST_SEEN: 1, Split.TEST_UNSEEN: 1}
    return CompositionalDataset.render(micro_labelspace, RenderSpec(image_hw=16), counts, seed=0)


@pytest.fixture
def micro_train_config():
    return TrainConfig(
        lr=1e-2, stage0_lr=1e-2, tau_c=1.0, tau_a=1.0, tau_o=1.0, batch=4, epochs=2, stage0_epochs=1, shift_ratio=0.5
    )


@pytest.fixture
def wide_labelspace():
    """2x3 vocabulary with two pairs in neither split, so the open world is larger."""
    vocab = VocabSpec(("red", "blue"), ("circle", "square", "triangle"))
    return LabelSpace(vocab, (("red", "circle"), ("blue", "square"), ("red", "triangle")), (("blue", "circle"),))


@pytest.fixture
def wide_dataset(wide_labelspace):
    counts = {Split.TRAIN: 2, Split.VAL_SEEN: 1, Split.VAL_UNSEEN: 2, Split.TEST_SEEN: 1, Split.TEST_UNSEEN: 1}
    return CompositionalDataset.render(wide_labelspace, RenderSpec(image_hw=16), counts, seed=0)
