"""
caila.checkpoint
~~~~~~~~~~~~~~~~

Named-tensor checkpoints.

Layout (little-endian): magic ``CAILA1\\n``, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, rank u32 dims and the
float32 payload. Run metadata lives next to the file in ``<name>.meta`` as
``key = value`` lines.
"""

from dataclasses import dataclass, field, fields
from enum import Enum
import logging
from pathlib import Path
import struct
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from .config import ENCODER_KEYS, Configuration, format_value
from .data import VocabSpec
from .exceptions import ConfigError, CorruptionError, FormatError
from .model import EncoderConfig, ModelParams, initialize_model

LOGGER = logging.getLogger("caila")

MAGIC = b"CAILA1\n"
_MAGIC_PREFIX = b"CAILA"
_PAYLOAD = np.dtype("<f4")
META_SUFFIX = ".meta"


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + META_SUFFIX)


def echo(config: Any) -> Dict[str, str]:
    """Flat ``key -> text`` view of a config dataclass."""
    values = {}
    for f in fields(config):
        value = getattr(config, f.name)
        values[f.name] = value.value if isinstance(value, Enum) else format_value(value)
    return values


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def frozen(self) -> List[str]:
        listed = self.meta.get("frozen", "")
        return [name for name in listed.split(",") if name]

    @property
    def stage0_hash(self) -> Optional[str]:
        return self.meta.get("stage0_hash")

    def vocab(self) -> VocabSpec:
        try:
            return VocabSpec(tuple(self.meta["attributes"].split(",")), tuple(self.meta["objects"].split(",")))
        except KeyError as e:
            raise FormatError(f"checkpoint metadata has no '{e.args[0]}' entry")

    def encoder_config(self) -> EncoderConfig:
        configuration = Configuration()
        try:
            configuration.update({key: self.meta[key] for key in ENCODER_KEYS if key in self.meta})
        except ConfigError as e:
            raise FormatError(f"checkpoint metadata: {e}")
        return configuration.encoder_config()

    def restore(self) -> ModelParams:
        """Model with the encoder configuration, vocabulary and trainable split recorded in the checkpoint."""
        params = initialize_model(self.encoder_config(), self.vocab())
        params.load_state(self.tensors)
        frozen = set(self.frozen)
        if frozen:
            params.set_trainable(name for name in params.named_tensors() if name not in frozen)
        return params


# Binary tensor table


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, values in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: '{name[:40]}...'")
        array = np.require(np.asarray(values, dtype=_PAYLOAD), requirements="C")
        if array.ndim > 0xFF:
            raise FormatError(f"tensor '{name}' has rank {array.ndim}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, source: str) -> None:
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.blob):
            raise CorruptionError(f"{self.source}: truncated while reading {what} at byte {self.offset}")
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    """Inverse of :func:`encode_tensors`.

    Raises:
        FormatError: wrong magic or unsupported version
        CorruptionError: truncated data, trailing bytes, bad names or duplicated tensors
    """
    head = blob[:len(MAGIC)]
    if head != MAGIC:
        if head.startswith(_MAGIC_PREFIX) and head.endswith(b"\n"):
            raise FormatError(f"{source}: unsupported checkpoint version {head[len(_MAGIC_PREFIX):-1]!r}")
        raise FormatError(f"{source}: not a caila checkpoint")
    reader = _Reader(blob, source)
    reader.offset = len(MAGIC)
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_length,) = reader.unpack("<H", f"name length of tensor {index}")
        try:
            name = reader.take(name_length, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"{source}: name of tensor {index} is not valid UTF-8")
        if name in tensors:
            raise CorruptionError(f"{source}: tensor '{name}' appears twice")
        (rank,) = reader.unpack("<B", f"rank of '{name}'")
        shape = reader.unpack(f"<{rank}I", f"shape of '{name}'")
        elements = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(elements * _PAYLOAD.itemsize, f"values of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype=_PAYLOAD, count=elements).reshape(shape).astype(np.float32)
    if reader.offset != len(blob):
        raise CorruptionError(f"{source}: {len(blob) - reader.offset} unexpected trailing bytes")
    return tensors


# Metadata sidecar


def write_meta(path: Union[str, Path], meta: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in meta.items():
            handle.write(f"{key} = {value}\n")


def read_meta(path: Union[str, Path]) -> Dict[str, str]:
    meta: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            content = line.strip()
            if not content or content.startswith("#"):
                continue
            key, sep, value = content.partition("=")
            if not sep:
                raise FormatError(f"{path}:{number}: expected 'key = value'")
            meta[key.strip()] = value.strip()
    return meta


def checkpoint_meta(params: ModelParams, extra: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    meta = echo(params.config)
    meta["attributes"] = ",".join(params.vocab.attributes)
    meta["objects"] = ",".join(params.vocab.objects)
    meta["frozen"] = ",".join(params.frozen())
    meta.update(extra or {})
    return meta


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    meta: Optional[Mapping[str, str]] = None,
) -> Path:
    """Write every model tensor to ``path`` and its metadata to ``path.meta``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(params.state()))
    write_meta(meta_path(path), checkpoint_meta(params, meta))
    LOGGER.info(f"Saved checkpoint with {len(params.named_tensors())} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    tensors = decode_tensors(path.read_bytes(), str(path))
    sidecar = meta_path(path)
    meta = read_meta(sidecar) if sidecar.exists() else {}
    LOGGER.debug(f"Loaded {len(tensors)} tensors from {path}")
    return Checkpoint(tensors, meta)
