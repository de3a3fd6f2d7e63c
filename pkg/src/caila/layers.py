"""
caila.layers
~~~~~~~~~~~~

Transformer encoding blocks with frozen weights shared across concepts and
per-concept bottleneck adapters, plus the vision mixture-of-adapters block.
"""

from dataclasses import dataclass
from enum import Enum
import logging
import math
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError
from .tensor import Tensor

LOGGER = logging.getLogger("caila")

Site = Callable[[Tensor], Tensor]


class ConceptKind(Enum):
    ATTRIBUTE = "attribute"
    OBJECT = "object"
    COMPOSITION = "composition"


class MixtureMode(Enum):
    FULL = "full"
    LATENT = "latent"
    OUTPUT = "output"
    NONE = "none"
    LATE = "late"


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.matmul(x, weight), bias)


@dataclass
class AdapterParams:
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor

    @classmethod
    def initialize(cls, width: int, reduction: int, rng: np.random.Generator) -> "AdapterParams":
        """Down-projection ~ U(-1/sqrt(d), 1/sqrt(d)); up-projection zero, so the adapter starts as identity."""
        if width % reduction:
            raise DimensionError(f"adapter width {width} is not divisible by reduction factor {reduction}")
        bottleneck = width // reduction
        bound = 1.0 / math.sqrt(width)
        return cls(
            down_weight=Tensor(rng.uniform(-bound, bound, (width, bottleneck))),
            down_bias=Tensor(np.zeros(bottleneck)),
            up_weight=Tensor(np.zeros((bottleneck, width))),
            up_bias=Tensor(np.zeros(width)),
        )

    @property
    def width(self) -> int:
        return self.down_weight.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {
            "down.weight": self.down_weight,
            "down.bias": self.down_bias,
            "up.weight": self.up_weight,
            "up.bias": self.up_bias,
        }


@dataclass
class AdapterPair:
    attention: AdapterParams
    ffn: AdapterParams

    def tensors(self) -> Dict[str, Tensor]:
        out = {f"attn.{k}": v for k, v in self.attention.tensors().items()}
        out.update({f"ffn.{k}": v for k, v in self.ffn.tensors().items()})
        return out


@dataclass
class FrozenBlock:
    """Weights of one pre-norm transformer block."""

    heads: int
    ln1_gain: Tensor
    ln1_bias: Tensor
    qkv_weight: Tensor
    qkv_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def initialize(cls, width: int, heads: int, rng: np.random.Generator) -> "FrozenBlock":
        if width % heads:
            raise DimensionError(f"width {width} is not divisible by {heads} heads")
        hidden = 4 * width

        def uniform(fan_in: int, shape: tuple) -> Tensor:
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape))

        return cls(
            heads=heads,
            ln1_gain=Tensor(np.ones(width)),
            ln1_bias=Tensor(np.zeros(width)),
            qkv_weight=uniform(width, (width, 3 * width)),
            qkv_bias=Tensor(np.zeros(3 * width)),
            out_weight=uniform(width, (width, width)),
            out_bias=Tensor(np.zeros(width)),
            ln2_gain=Tensor(np.ones(width)),
            ln2_bias=Tensor(np.zeros(width)),
            fc1_weight=uniform(width, (width, hidden)),
            fc1_bias=Tensor(np.zeros(hidden)),
            fc2_weight=uniform(hidden, (hidden, width)),
            fc2_bias=Tensor(np.zeros(width)),
        )

    @property
    def width(self) -> int:
        return self.ln1_gain.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {
            "ln1.gain": self.ln1_gain,
            "ln1.bias": self.ln1_bias,
            "attn.qkv.weight": self.qkv_weight,
            "attn.qkv.bias": self.qkv_bias,
            "attn.out.weight": self.out_weight,
            "attn.out.bias": self.out_bias,
            "ln2.gain": self.ln2_gain,
            "ln2.bias": self.ln2_bias,
            "ffn.fc1.weight": self.fc1_weight,
            "ffn.fc1.bias": self.fc1_bias,
            "ffn.fc2.weight": self.fc2_weight,
            "ffn.fc2.bias": self.fc2_bias,
        }


@dataclass
class ConceptBlock:
    """Frozen weights at one depth, shared by reference, and one adapter pair per concept."""

    frozen: FrozenBlock
    adapters: Dict[ConceptKind, AdapterPair]

    @classmethod
    def initialize(
        cls,
        width: int,
        heads: int,
        reduction: int,
        rng: np.random.Generator,
        concepts: Iterable[ConceptKind] = tuple(ConceptKind),
    ) -> "ConceptBlock":
        frozen = FrozenBlock.initialize(width, heads, rng)
        adapters = {
            kind: AdapterPair(
                AdapterParams.initialize(width, reduction, rng),
                AdapterParams.initialize(width, reduction, rng),
            )
            for kind in concepts
        }
        return cls(frozen, adapters)

    def _pair(self, concept: ConceptKind) -> AdapterPair:
        try:
            return self.adapters[concept]
        except KeyError:
            raise ContractError(f"block has no adapters for concept '{concept.value}'")


# Forward passes


def attention(h: Tensor, frozen: FrozenBlock, mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head self-attention over the token axis (second to last)."""
    lead, tokens, width = h.shape[:-2], h.shape[-2], h.shape[-1]
    heads = frozen.heads
    head_width = width // heads
    n = len(lead)

    qkv = T.reshape(linear(h, frozen.qkv_weight, frozen.qkv_bias), lead + (tokens, 3, heads, head_width))
    qkv = T.transpose(qkv, list(range(n)) + [n + 1, n + 2, n, n + 3])
    query, key, value = (T.take(qkv, i, axis=n) for i in range(3))

    scores = T.scale(T.matmul(query, T.transpose(key)), 1.0 / math.sqrt(head_width))
    if mask is not None:
        scores = T.add(scores, mask)
    context = T.matmul(T.softmax(scores, axis=-1), value)
    context = T.reshape(T.transpose(context, list(range(n)) + [n + 1, n, n + 2]), lead + (tokens, width))
    return linear(context, frozen.out_weight, frozen.out_bias)


def feed_forward(h: Tensor, frozen: FrozenBlock) -> Tensor:
    return linear(T.gelu(linear(h, frozen.fc1_weight, frozen.fc1_bias)), frozen.fc2_weight, frozen.fc2_bias)


def run_block(
    h: Tensor,
    frozen: FrozenBlock,
    attention_site: Optional[Site] = None,
    ffn_site: Optional[Site] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Pre-norm block; each site transforms its sublayer output before the residual add."""
    if h.shape[-1] != frozen.width:
        raise DimensionError(f"block width {frozen.width} does not match hidden state {h.shape}")
    attended = attention(T.layer_norm(h, frozen.ln1_gain, frozen.ln1_bias), frozen, mask)
    if attention_site is not None:
        attended = attention_site(attended)
    h = T.add(h, attended)
    transformed = feed_forward(T.layer_norm(h, frozen.ln2_gain, frozen.ln2_bias), frozen)
    if ffn_site is not None:
        transformed = ffn_site(transformed)
    return T.add(h, transformed)


def adapter_latent(h: Tensor, params: AdapterParams, activation: str = "gelu") -> Tensor:
    if h.shape[-1] != params.width:
        raise DimensionError(f"adapter width {params.width} does not match hidden state {h.shape}")
    return T.ACTIVATIONS[activation](linear(h, params.down_weight, params.down_bias))


def adapter_forward(h: Tensor, params: AdapterParams, activation: str = "gelu") -> Tensor:
    """Bottleneck (down, activation, up) plus skip connection, token-wise."""
    return T.add(linear(adapter_latent(h, params, activation), params.up_weight, params.up_bias), h)


def block_forward(
    h: Tensor,
    block: ConceptBlock,
    concept: ConceptKind,
    activation: str = "gelu",
    mask: Optional[np.ndarray] = None,
    use_adapters: bool = True,
) -> Tensor:
    pair = block._pair(concept)
    if not use_adapters:
        return run_block(h, block.frozen, mask=mask)
    return run_block(
        h,
        block.frozen,
        lambda a: adapter_forward(a, pair.attention, activation),
        lambda f: adapter_forward(f, pair.ffn, activation),
        mask,
    )


def moa_site(
    h: Tensor,
    adapters: Dict[ConceptKind, AdapterParams],
    mode: MixtureMode = MixtureMode.FULL,
    activation: str = "gelu",
) -> Tensor:
    """Mix the attribute, object and composition adapters at one site.

    ``full`` averages the three bottleneck latents before the composition
    up-projection, then averages that output with the attribute and object
    adapter outputs (without their skip terms) and adds the skip once.
    ``latent`` only averages the latents, ``output`` only the outputs;
    ``none`` and ``late`` use the composition adapter alone.
    """
    comp = adapters[ConceptKind.COMPOSITION]
    z_comp = adapter_latent(h, comp, activation)
    mixes_latent = mode in (MixtureMode.FULL, MixtureMode.LATENT)
    mixes_output = mode in (MixtureMode.FULL, MixtureMode.OUTPUT)
    if not (mixes_latent or mixes_output):
        return T.add(linear(z_comp, comp.up_weight, comp.up_bias), h)

    attr, obj = adapters[ConceptKind.ATTRIBUTE], adapters[ConceptKind.OBJECT]
    z_attr = adapter_latent(h, attr, activation)
    z_obj = adapter_latent(h, obj, activation)
    mixed = T.average([z_attr, z_obj, z_comp]) if mixes_latent else z_comp
    h_comp = linear(mixed, comp.up_weight, comp.up_bias)
    if mixes_output:
        h_comp = T.average([
            linear(z_attr, attr.up_weight, attr.up_bias),
            linear(z_obj, obj.up_weight, obj.up_bias),
            h_comp,
        ])
    return T.add(h_comp, h)


def vision_moa_block_forward(
    h: Tensor,
    block: ConceptBlock,
    mode: MixtureMode = MixtureMode.FULL,
    activation: str = "gelu",
    use_adapters: bool = True,
) -> Tensor:
    """Block whose adapter sites both mix the three concept adapters."""
    missing = [kind.value for kind in ConceptKind if kind not in block.adapters]
    if missing:
        raise ContractError(f"MoA block is missing adapters for {', '.join(missing)}")
    if not use_adapters:
        return run_block(h, block.frozen)
    attention_adapters = {kind: pair.attention for kind, pair in block.adapters.items()}
    ffn_adapters = {kind: pair.ffn for kind, pair in block.adapters.items()}
    return run_block(
        h,
        block.frozen,
        lambda a: moa_site(a, attention_adapters, mode, activation),
        lambda f: moa_site(f, ffn_adapters, mode, activation),
    )
