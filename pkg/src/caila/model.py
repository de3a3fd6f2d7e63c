"""
caila.model
~~~~~~~~~~~

The dual encoder: concept-aware vision and text towers over shared frozen
blocks, the two-stage vision pipeline with trailing mixture-of-adapters
layers, the language mixture and compatibility scoring.
"""

from dataclasses import dataclass, field, replace
import hashlib
import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .data import Pair, VocabSpec
from .exceptions import ConfigError, ContractError, DimensionError, FormatError
from .layers import (
    ConceptBlock,
    ConceptKind,
    MixtureMode,
    block_forward,
    linear,
    vision_moa_block_forward,
)
from .prompts import ATTRIBUTE_SLOT, OBJECT_SLOT, TEMPLATES, TokenVocabulary, tokenize_prompt
from .tensor import Tensor

LOGGER = logging.getLogger("caila")

TextLabel = Union[str, Pair]

_PRIMITIVES = (ConceptKind.ATTRIBUTE, ConceptKind.OBJECT)


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    heads: int = 4
    n_vision: int = 6
    n_text: int = 4
    moa_layers: int = 2
    reduction: int = 4
    patch: int = 8
    image_hw: int = 64
    max_text_len: int = 12
    activation: str = "gelu"
    vision_adapters: bool = True
    text_adapters: bool = True
    vision_moa: bool = True
    text_moa: bool = True
    vision_mixture: MixtureMode = MixtureMode.FULL

    def __post_init__(self) -> None:
        if isinstance(self.vision_mixture, str):
            object.__setattr__(self, "vision_mixture", MixtureMode(self.vision_mixture))
        if min(self.d, self.heads, self.n_vision, self.n_text, self.reduction, self.patch, self.image_hw) < 1:
            raise ConfigError("encoder sizes must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % self.reduction:
            raise ConfigError(f"d={self.d} is not divisible by reduction={self.reduction}")
        if self.image_hw % self.patch:
            raise ConfigError(f"image_hw={self.image_hw} is not divisible by patch={self.patch}")
        if not 1 <= self.moa_layers < self.n_vision:
            raise ConfigError(f"moa_layers must be in [1, n_vision), got {self.moa_layers} with n_vision={self.n_vision}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(T.ACTIVATIONS)}, got '{self.activation}'")
        longest = max(len(template.words) for template in TEMPLATES.values()) + 1
        if self.max_text_len < longest:
            raise ConfigError(f"max_text_len must be at least {longest}")

    @property
    def stage1_depth(self) -> int:
        return self.n_vision - self.moa_layers

    @property
    def grid(self) -> int:
        return self.image_hw // self.patch

    @property
    def vision_tokens(self) -> int:
        return self.grid * self.grid + 1


def _named(prefix: str, tensors: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": t for name, t in tensors.items()}


@dataclass
class ModelParams:
    """All tensors of the dual encoder.

    Tensor names carry one of four prefixes: ``backbone.`` (frozen blocks,
    patch embedding, positions and [CLS]), ``embed.`` (token table),
    ``prompt.`` (class-prompt embeddings) and ``adapter.``.
    """

    config: EncoderConfig
    vocab: VocabSpec
    tokens: TokenVocabulary
    vision_blocks: List[ConceptBlock]
    text_blocks: List[ConceptBlock]
    patch_weight: Tensor
    patch_bias: Tensor
    vision_cls: Tensor
    vision_pos: Tensor
    token_table: Tensor
    text_pos: Tensor
    attribute_prompts: Tensor
    object_prompts: Tensor
    _names: Dict[str, Tensor] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._names = self._build_names()

    def _build_names(self) -> Dict[str, Tensor]:
        names: Dict[str, Tensor] = {
            "backbone.vision.patch.weight": self.patch_weight,
            "backbone.vision.patch.bias": self.patch_bias,
            "backbone.vision.cls": self.vision_cls,
            "backbone.vision.pos": self.vision_pos,
        }
        for i, block in enumerate(self.vision_blocks):
            names.update(_named(f"backbone.vision.{i}", block.frozen.tensors()))
        names["embed.token"] = self.token_table
        names["backbone.text.pos"] = self.text_pos
        for i, block in enumerate(self.text_blocks):
            names.update(_named(f"backbone.text.{i}", block.frozen.tensors()))
        names["prompt.attribute"] = self.attribute_prompts
        names["prompt.object"] = self.object_prompts
        for side, blocks in (("vision", self.vision_blocks), ("text", self.text_blocks)):
            for i, block in enumerate(blocks):
                for kind, pair in block.adapters.items():
                    names.update(_named(f"adapter.{side}.{i}.{kind.value}", pair.tensors()))
        for name, t in names.items():
            t.name = name
        return names

    def named_tensors(self) -> Dict[str, Tensor]:
        return dict(self._names)

    def tensors_with_prefix(self, *prefixes: str) -> Dict[str, Tensor]:
        return {name: t for name, t in self._names.items() if name.startswith(prefixes)}

    def adapter_names(self) -> List[str]:
        """Adapters on the sides that have them enabled."""
        sides = []
        if self.config.vision_adapters:
            sides.append("adapter.vision.")
        if self.config.text_adapters:
            sides.append("adapter.text.")
        return [name for name in self._names if name.startswith(tuple(sides))] if sides else []

    def stage0_names(self) -> List[str]:
        return [name for name in self._names if name.startswith(("backbone.", "embed.", "prompt."))]

    def trainable_names(self, learnable_prompts: bool = True) -> List[str]:
        names = self.adapter_names()
        if learnable_prompts:
            names += [name for name in self._names if name.startswith("prompt.")]
        return names

    def set_trainable(self, names: Iterable[str]) -> None:
        """``requires_grad`` on exactly ``names``; every other tensor is frozen."""
        wanted = set(names)
        unknown = wanted - set(self._names)
        if unknown:
            raise ContractError(f"unknown tensor names: {sorted(unknown)}")
        for name, t in self._names.items():
            t.set_requires_grad(name in wanted)

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self._names.items() if t.requires_grad}

    def frozen(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self._names.items() if not t.requires_grad}

    def zero_grad(self) -> None:
        for t in self._names.values():
            t.zero_grad()

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        """Overwrite every tensor from a name -> array table with the same names and shapes."""
        missing = set(self._names) - set(state)
        extra = set(state) - set(self._names)
        if missing or extra:
            raise FormatError(f"checkpoint tensors do not match the model: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t in self._names.items():
            values = np.asarray(state[name])
            if values.shape != t.shape:
                raise FormatError(f"tensor '{name}' has shape {values.shape}, model expects {t.shape}")
            t.data = values.astype(t.data.dtype, copy=True)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._names.items()}


def fingerprint(tensors: Mapping[str, Tensor]) -> str:
    """sha256 over tensor names, shapes and bytes, in name order."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name].data, dtype="<f4")
        digest.update(name.encode("utf-8"))
        digest.update(str(data.shape).encode("ascii"))
        digest.update(data.tobytes())
    return digest.hexdigest()


def initialize_model(config: EncoderConfig, vocab: VocabSpec, seed: int = 0) -> ModelParams:
    """Random backbone, zero-initialized adapter up-projections, class prompts copied from word embeddings."""
    rng = np.random.default_rng(seed)
    d = config.d
    tokens = TokenVocabulary.build(vocab.attributes, vocab.objects)
    patch_width = config.patch * config.patch * 3
    bound = 1.0 / math.sqrt(patch_width)

    vision_blocks = [ConceptBlock.initialize(d, config.heads, config.reduction, rng) for _ in range(config.n_vision)]
    text_blocks = [ConceptBlock.initialize(d, config.heads, config.reduction, rng) for _ in range(config.n_text)]
    token_table = rng.normal(0.0, 1.0, (len(tokens), d))
    attribute_rows = [tokens.id_of(a) for a in vocab.attributes]
    object_rows = [tokens.id_of(o) for o in vocab.objects]

    params = ModelParams(
        config=config,
        vocab=vocab,
        tokens=tokens,
        vision_blocks=vision_blocks,
        text_blocks=text_blocks,
        patch_weight=Tensor(rng.uniform(-bound, bound, (patch_width, d))),
        patch_bias=Tensor(np.zeros(d)),
        vision_cls=Tensor(rng.normal(0.0, 1.0, d)),
        vision_pos=Tensor(rng.normal(0.0, 0.1, (config.vision_tokens, d))),
        token_table=Tensor(token_table),
        text_pos=Tensor(rng.normal(0.0, 0.1, (config.max_text_len, d))),
        attribute_prompts=Tensor(token_table[attribute_rows]),
        object_prompts=Tensor(token_table[object_rows]),
    )
    LOGGER.debug(f"Initialized model with {sum(t.size for t in params.named_tensors().values())} parameters")
    return params


# Vision tower


def patchify(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """(B, H, W, 3) images -> (B, patches, patch*patch*3) rows in raster order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    hw, p = config.image_hw, config.patch
    if images.ndim != 4 or images.shape[1:] != (hw, hw, 3):
        raise DimensionError(f"expected images of shape (B, {hw}, {hw}, 3), got {images.shape}")
    grid = config.grid
    batch = images.shape[0]
    rows = images.reshape(batch, grid, p, grid, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return rows.reshape(batch, grid * grid, p * p * 3)


def embed_images(params: ModelParams, images: np.ndarray) -> Tensor:
    patches = Tensor(patchify(images, params.config))
    batch, d = patches.shape[0], params.config.d
    tokens = linear(patches, params.patch_weight, params.patch_bias)
    cls = T.broadcast_to(T.reshape(params.vision_cls, (1, 1, d)), (batch, 1, d))
    return T.add(T.concat([cls, tokens], axis=1), params.vision_pos)


def _readout(h: Tensor) -> Tensor:
    return T.l2_normalize(T.take(h, 0, axis=1))


def _vision_stack(params: ModelParams, h: Tensor, blocks: Sequence[ConceptBlock], concept: ConceptKind) -> Tensor:
    config = params.config
    for block in blocks:
        h = block_forward(h, block, concept, config.activation, use_adapters=config.vision_adapters)
    return h


@dataclass
class VisionFeatures:
    """Stage-1 hidden states of a batch, one stream per primitive concept."""

    attribute_state: Tensor
    object_state: Tensor

    def __len__(self) -> int:
        return self.attribute_state.shape[0]


@dataclass
class VisionEmbeddings:
    composition: Tensor
    attribute: Tensor
    obj: Tensor


def backbone_vision(params: ModelParams, images: np.ndarray) -> Tensor:
    """Normalized [CLS] output of the frozen vision blocks without any adapter."""
    h = embed_images(params, images)
    for block in params.vision_blocks:
        h = block_forward(h, block, ConceptKind.COMPOSITION, use_adapters=False)
    return _readout(h)


def vision_stage1(params: ModelParams, images: np.ndarray) -> VisionFeatures:
    blocks = params.vision_blocks[:params.config.stage1_depth]
    h = embed_images(params, images)
    return VisionFeatures(
        _vision_stack(params, h, blocks, ConceptKind.ATTRIBUTE),
        _vision_stack(params, h, blocks, ConceptKind.OBJECT),
    )


def fuse(features: VisionFeatures) -> Tensor:
    """Token-wise mean of the attribute and object streams."""
    return T.average([features.attribute_state, features.object_state])


def vision_stage2(params: ModelParams, fused: Tensor) -> Tensor:
    """Trailing mixture-of-adapters blocks over a fused stage-1 state, then [CLS] readout."""
    config = params.config
    mode = MixtureMode.NONE if config.vision_mixture is MixtureMode.LATE else config.vision_mixture
    h = fused
    for block in params.vision_blocks[config.stage1_depth:]:
        h = vision_moa_block_forward(h, block, mode, config.activation, use_adapters=config.vision_adapters)
    return _readout(h)


def primitive_from_stage1(params: ModelParams, state: Tensor, concept: ConceptKind) -> Tensor:
    blocks = params.vision_blocks[params.config.stage1_depth:]
    return _readout(_vision_stack(params, state, blocks, concept))


def _composition_from_stage1(params: ModelParams, features: VisionFeatures, fused: Tensor) -> Tensor:
    f_comp = vision_stage2(params, fused)
    if params.config.vision_mixture is MixtureMode.LATE:
        f_attr = primitive_from_stage1(params, features.attribute_state, ConceptKind.ATTRIBUTE)
        f_obj = primitive_from_stage1(params, features.object_state, ConceptKind.OBJECT)
        f_comp = T.l2_normalize(T.average([f_attr, f_obj, f_comp]))
    return f_comp


def encode_vision_primitive(params: ModelParams, images: np.ndarray, concept: ConceptKind) -> Tensor:
    """F_A(x) or F_O(x): all vision blocks with one primitive concept's adapters, shape (B, d)."""
    if concept not in _PRIMITIVES:
        raise ContractError(f"encode_vision_primitive needs attribute or object, got {concept.value}")
    return _readout(_vision_stack(params, embed_images(params, images), params.vision_blocks, concept))


def encode_vision_composition(params: ModelParams, images: np.ndarray) -> Tensor:
    """F_C(x), shape (B, d)."""
    if not params.config.vision_moa:
        h = _vision_stack(params, embed_images(params, images), params.vision_blocks, ConceptKind.COMPOSITION)
        return _readout(h)
    features = vision_stage1(params, images)
    return _composition_from_stage1(params, features, fuse(features))


def encode_vision(params: ModelParams, images: np.ndarray) -> VisionEmbeddings:
    """F_C, F_A and F_O of a batch, sharing the stage-1 passes."""
    features = vision_stage1(params, images)
    f_attr = primitive_from_stage1(params, features.attribute_state, ConceptKind.ATTRIBUTE)
    f_obj = primitive_from_stage1(params, features.object_state, ConceptKind.OBJECT)
    if params.config.vision_moa:
        f_comp = _composition_from_stage1(params, features, fuse(features))
    else:
        f_comp = encode_vision_composition(params, images)
    return VisionEmbeddings(f_comp, f_attr, f_obj)


def encode_fused(params: ModelParams, features: VisionFeatures, fused: Tensor) -> Tensor:
    """F_C for arbitrary fused stage-1 states, e.g. concept-shifted ones."""
    if not params.config.vision_moa:
        raise ContractError("fused stage-1 states need the vision mixture-of-adapters pipeline")
    return _composition_from_stage1(params, features, fused)


# Text tower


def _label_names(concept: ConceptKind, label: TextLabel) -> Tuple[Optional[str], Optional[str]]:
    if concept is ConceptKind.COMPOSITION:
        if isinstance(label, str) or len(label) != 2:
            raise ContractError(f"composition labels are (attribute, object) pairs, got {label!r}")
        return label[0], label[1]
    if not isinstance(label, str):
        raise ContractError(f"{concept.value} labels are single names, got {label!r}")
    return (label, None) if concept is ConceptKind.ATTRIBUTE else (None, label)


def backbone_text(params: ModelParams, concept: ConceptKind, labels: Sequence[TextLabel]) -> Tensor:
    """Normalized [CLS] output of the frozen text blocks without any adapter."""
    return encode_text(params, concept, labels, use_adapters=False)


def encode_text(
    params: ModelParams,
    concept: ConceptKind,
    labels: Sequence[TextLabel],
    use_adapters: Optional[bool] = None,
) -> Tensor:
    """Text embedding of each label under one concept's adapters, shape (K, d).

    Class slots take their embeddings from the class-prompt tables rather
    than the token table.
    """
    config = params.config
    if use_adapters is None:
        use_adapters = config.text_adapters
    if not labels:
        raise ContractError("encode_text needs at least one label")
    names = [_label_names(concept, label) for label in labels]
    attribute_rows = [params.vocab.attribute_index(a) for a, _ in names] if names[0][0] is not None else []
    object_rows = [params.vocab.object_index(o) for _, o in names] if names[0][1] is not None else []
    prompts = [tokenize_prompt(concept, params.tokens, config.max_text_len, a, o) for a, o in names]
    ids = np.stack([p.ids for p in prompts])
    slots = prompts[0].class_positions

    h = T.take(params.token_table, ids, axis=0)
    if attribute_rows:
        h = T.place(h, slots[ATTRIBUTE_SLOT], T.take(params.attribute_prompts, attribute_rows, axis=0), axis=1)
    if object_rows:
        h = T.place(h, slots[OBJECT_SLOT], T.take(params.object_prompts, object_rows, axis=0), axis=1)
    h = T.add(h, params.text_pos)
    mask = np.stack([p.attention_mask for p in prompts])[:, None, None, :]
    for block in params.text_blocks:
        h = block_forward(h, block, concept, config.activation, mask=mask, use_adapters=use_adapters)
    return _readout(h)


@dataclass
class TextEmbeddings:
    """Mixed pair embeddings plus the attribute and object text embeddings of the whole vocabulary."""

    mixture: Tensor
    attribute: Tensor
    obj: Tensor


def mix_text(params: ModelParams, pairs: Sequence[Pair], g_comp: Tensor, g_attr: Tensor, g_obj: Tensor) -> Tensor:
    """Normalized average of the attribute, object and pair embeddings of each pair."""
    if not params.config.text_moa:
        return g_comp
    attr_rows = T.take(g_attr, [params.vocab.attribute_index(a) for a, _ in pairs], axis=0)
    obj_rows = T.take(g_obj, [params.vocab.object_index(o) for _, o in pairs], axis=0)
    return T.l2_normalize(T.average([attr_rows, obj_rows, g_comp]))


def encode_text_all(params: ModelParams, pairs: Sequence[Pair]) -> TextEmbeddings:
    g_attr = encode_text(params, ConceptKind.ATTRIBUTE, list(params.vocab.attributes))
    g_obj = encode_text(params, ConceptKind.OBJECT, list(params.vocab.objects))
    g_comp = encode_text(params, ConceptKind.COMPOSITION, pairs)
    return TextEmbeddings(mix_text(params, pairs, g_comp, g_attr, g_obj), g_attr, g_obj)


def text_mixture(params: ModelParams, pairs: Sequence[Pair]) -> Tensor:
    """Pair text embeddings, shape (K, d); the composition embedding alone when the language mixture is off."""
    if not params.config.text_moa:
        return encode_text(params, ConceptKind.COMPOSITION, pairs)
    return encode_text_all(params, pairs).mixture


# Scoring


def scores(image_embeddings: Tensor, text_embeddings: Tensor) -> Tensor:
    """Dot products of every image embedding with every text embedding, (B, K)."""
    if image_embeddings.ndim == 1:
        image_embeddings = T.reshape(image_embeddings, (1, -1))
    if text_embeddings.ndim == 1:
        text_embeddings = T.reshape(text_embeddings, (1, -1))
    return T.matmul(image_embeddings, T.transpose(text_embeddings))


def compatibility(params: ModelParams, images: np.ndarray, pairs: Sequence[Pair]) -> Tensor:
    """C(x, a, o) = F_C(x) . G(a, o), shape (B, len(pairs))."""
    return scores(encode_vision_composition(params, images), text_mixture(params, pairs))


def primitive_compatibility(params: ModelParams, images: np.ndarray, concept: ConceptKind) -> Tensor:
    """C(x, p) = F_p(x) . G_p(p) against every primitive of the concept, shape (B, |A|) or (B, |O|)."""
    if concept not in _PRIMITIVES:
        raise ContractError(f"primitive_compatibility needs attribute or object, got {concept.value}")
    names = params.vocab.attributes if concept is ConceptKind.ATTRIBUTE else params.vocab.objects
    return scores(encode_vision_primitive(params, images, concept), encode_text(params, concept, list(names)))


def with_config(params: ModelParams, **changes: object) -> ModelParams:
    """Same tensors, different switches (adapters, mixture mode)."""
    config = replace(params.config, **changes)  # type: ignore[arg-type]
    return replace(params, config=config)
