"""
caila.data
~~~~~~~~~~

Synthetic compositional dataset: vocabularies, seen/unseen splits,
procedural rendering, dataset files and the programmatic analyzers used to
check that rendered primitives are recoverable.
"""

from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from pathlib import Path
import re
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageColor, ImageDraw

from .exceptions import ConfigError, ContractError, FormatError, VocabularyError

LOGGER = logging.getLogger("caila")

Pair = Tuple[str, str]
PathLike = Union[str, Path]

MANIFEST_HEADER = "#caila-manifest v1"
MANIFEST_FILE = "manifest.tsv"
LABELSPACE_FILE = "labelspace.tsv"
VOCAB_FILE = "vocab.tsv"
IMAGE_DIR = "images"


class World(Enum):
    CLOSED = "closed"
    OPEN = "open"


class Split(Enum):
    TRAIN = "train"
    VAL_SEEN = "val_seen"
    VAL_UNSEEN = "val_unseen"
    TEST_SEEN = "test_seen"
    TEST_UNSEEN = "test_unseen"

    @property
    def unseen(self) -> bool:
        return self in (Split.VAL_UNSEEN, Split.TEST_UNSEEN)


EVAL_SPLITS = {
    "val": (Split.VAL_SEEN, Split.VAL_UNSEEN),
    "test": (Split.TEST_SEEN, Split.TEST_UNSEEN),
}


# Vocabulary


@dataclass(frozen=True)
class AttributeStyle:
    hue: int
    pattern: str = "solid"


# Named presets come first in vocabulary order, procedural names extend them.
ATTRIBUTE_PRESETS: Dict[str, AttributeStyle] = {
    "red": AttributeStyle(0),
    "green": AttributeStyle(120),
    "blue": AttributeStyle(240),
    "striped": AttributeStyle(60, "stripes"),
    "checkered": AttributeStyle(180, "checker"),
    "magenta": AttributeStyle(300),
    "orange": AttributeStyle(30),
    "lime": AttributeStyle(90),
    "teal": AttributeStyle(150),
    "azure": AttributeStyle(210),
}

OBJECT_PRESETS: Tuple[str, ...] = ("circle", "square", "triangle", "ring", "cross", "star", "diamond", "hexagon")

_HUE_NAME = re.compile(r"^hue-(\d{3})$")
_POLY_NAME = re.compile(r"^poly-(\d+)$")


def attribute_style(name: str) -> AttributeStyle:
    if name in ATTRIBUTE_PRESETS:
        return ATTRIBUTE_PRESETS[name]
    match = _HUE_NAME.match(name)
    if match and int(match.group(1)) < 360:
        return AttributeStyle(int(match.group(1)))
    raise VocabularyError(f"unknown attribute '{name}'")


def _check_object(name: str) -> None:
    if name in OBJECT_PRESETS:
        return
    match = _POLY_NAME.match(name)
    if match and int(match.group(1)) >= 3:
        return
    raise VocabularyError(f"unknown object '{name}'")


def attribute_names(count: int) -> List[str]:
    """First ``count`` renderable attribute names: presets, then procedural hues."""
    names = list(ATTRIBUTE_PRESETS)[:count]
    used = {style.hue for style in ATTRIBUTE_PRESETS.values()}
    k = 0
    while len(names) < count:
        k += 1
        hue = int(round(k * 137.508)) % 360
        if hue in used:
            if len(used) >= 360:
                raise ConfigError(f"cannot render more than 360 distinct attributes, asked for {count}")
            continue
        used.add(hue)
        names.append(f"hue-{hue:03d}")
    return names


def object_names(count: int) -> List[str]:
    """First ``count`` renderable object names: presets, then regular polygons."""
    names = list(OBJECT_PRESETS)[:count]
    sides = 7
    while len(names) < count:
        names.append(f"poly-{sides}")
        sides += 1
    return names


@dataclass(frozen=True)
class VocabSpec:
    attributes: Tuple[str, ...]
    objects: Tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "objects", tuple(self.objects))
        for kind, names in (("attribute", self.attributes), ("object", self.objects)):
            if not names:
                raise ConfigError(f"vocabulary needs at least one {kind}")
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {kind} names in vocabulary")

    @classmethod
    def preset(cls, n_attributes: int, n_objects: int) -> "VocabSpec":
        return cls(tuple(attribute_names(n_attributes)), tuple(object_names(n_objects)))

    def attribute_index(self, name: str) -> int:
        try:
            return self.attributes.index(name)
        except ValueError:
            raise VocabularyError(f"unknown attribute '{name}'")

    def object_index(self, name: str) -> int:
        try:
            return self.objects.index(name)
        except ValueError:
            raise VocabularyError(f"unknown object '{name}'")

    def all_pairs(self) -> List[Pair]:
        return [(a, o) for a in self.attributes for o in self.objects]


# Label space


@dataclass(frozen=True)
class LabelSpace:
    vocab: VocabSpec
    seen: Tuple[Pair, ...]
    unseen: Tuple[Pair, ...]
    world: World = World.CLOSED

    def __post_init__(self) -> None:
        object.__setattr__(self, "seen", tuple(self.seen))
        object.__setattr__(self, "unseen", tuple(self.unseen))
        for a, o in self.seen + self.unseen:
            self.vocab.attribute_index(a)
            self.vocab.object_index(o)
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ContractError(f"pairs are both seen and unseen: {sorted(overlap)}")
        covered_attributes = {a for a, _ in self.seen}
        covered_objects = {o for _, o in self.seen}
        missing = [a for a in self.vocab.attributes if a not in covered_attributes]
        missing += [o for o in self.vocab.objects if o not in covered_objects]
        if missing:
            raise ContractError(f"primitives never seen in training: {', '.join(missing)}")

    def candidates(self, world: Optional[World] = None) -> List[Pair]:
        world = world or self.world
        if world is World.OPEN:
            return self.vocab.all_pairs()
        return list(self.seen) + list(self.unseen)

    def is_seen(self, pair: Pair) -> bool:
        return pair in self._seen_set

    @property
    def _seen_set(self) -> frozenset:
        return frozenset(self.seen)


def split_compositions(vocab: VocabSpec, seen_fraction: float, seed: int) -> LabelSpace:
    """Split A x O into seen and unseen pairs, every primitive covered by a seen pair.

    A diagonal over randomly permuted attributes and objects is placed in the
    seen set first, the rest of the seen set is sampled from the remaining pairs.

    Raises:
        ConfigError: the fraction leaves no unseen pair or cannot cover every primitive
    """
    if not 0 < seen_fraction < 1:
        raise ConfigError(f"seen fraction must be in (0, 1), got {seen_fraction}")
    n_attributes, n_objects = len(vocab.attributes), len(vocab.objects)
    total = n_attributes * n_objects
    if total < n_attributes + n_objects:
        raise ConfigError(f"a {n_attributes}x{n_objects} vocabulary has too few pairs to cover every primitive")
    cover = max(n_attributes, n_objects)
    n_seen = int(round(seen_fraction * total))
    if n_seen < cover:
        raise ConfigError(f"seen fraction {seen_fraction} gives {n_seen} seen pairs, {cover} are needed for coverage")
    if n_seen >= total:
        raise ConfigError(f"seen fraction {seen_fraction} leaves no unseen pairs")

    rng = np.random.default_rng(seed)
    attribute_order = rng.permutation(n_attributes)
    object_order = rng.permutation(n_objects)
    seen = {(int(attribute_order[i % n_attributes]), int(object_order[i % n_objects])) for i in range(cover)}
    rest = [(a, o) for a in range(n_attributes) for o in range(n_objects) if (a, o) not in seen]
    for index in rng.choice(len(rest), size=n_seen - len(seen), replace=False):
        seen.add(rest[int(index)])

    def named(pairs: Iterable[Tuple[int, int]]) -> Tuple[Pair, ...]:
        return tuple((vocab.attributes[a], vocab.objects[o]) for a, o in sorted(pairs))

    unseen = [(a, o) for a in range(n_attributes) for o in range(n_objects) if (a, o) not in seen]
    space = LabelSpace(vocab, named(seen), named(unseen))
    LOGGER.debug(f"split {n_attributes}x{n_objects} vocabulary into {len(space.seen)} seen / {len(space.unseen)} unseen")
    return space


# Rendering


BACKGROUND = np.array([0.35, 0.35, 0.35], dtype=np.float32)
SHADE = 0.55


@dataclass(frozen=True)
class RenderSpec:
    image_hw: int = 64
    noise: float = 0.0

    def __post_init__(self) -> None:
        if self.image_hw < 8:
            raise ConfigError(f"image size must be at least 8 pixels, got {self.image_hw}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")


def _regular_polygon(cx: float, cy: float, radius: float, sides: int, rotation: float = -math.pi / 2) -> List[Tuple[float, float]]:
    return [
        (cx + radius * math.cos(rotation + 2 * math.pi * k / sides), cy + radius * math.sin(rotation + 2 * math.pi * k / sides))
        for k in range(sides)
    ]


def _star(cx: float, cy: float, radius: float, points: int = 5, inner: float = 0.4) -> List[Tuple[float, float]]:
    vertices = []
    for k in range(2 * points):
        r = radius if k % 2 == 0 else radius * inner
        angle = -math.pi / 2 + math.pi * k / points
        vertices.append((cx + r * math.cos(angle), cy + r * math.sin(angle)))
    return vertices


def shape_mask(obj: str, canvas: int, box: Tuple[float, float, float]) -> np.ndarray:
    """Boolean ``canvas x canvas`` mask of ``obj`` drawn inside the square ``(x0, y0, size)``."""
    _check_object(obj)
    x0, y0, size = box
    x1, y1 = x0 + size, y0 + size
    cx, cy, radius = x0 + size / 2, y0 + size / 2, size / 2
    layer = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(layer)
    if obj == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=1)
    elif obj == "square":
        draw.rectangle([x0, y0, x1, y1], fill=1)
    elif obj == "triangle":
        draw.polygon([(x0, y1), (x1, y1), (cx, y0)], fill=1)
    elif obj == "ring":
        draw.ellipse([x0, y0, x1, y1], fill=1)
        inset = size / 4
        draw.ellipse([x0 + inset, y0 + inset, x1 - inset, y1 - inset], fill=0)
    elif obj == "cross":
        arm = size / 3
        draw.rectangle([x0 + arm, y0, x1 - arm, y1], fill=1)
        draw.rectangle([x0, y0 + arm, x1, y1 - arm], fill=1)
    elif obj == "star":
        draw.polygon(_star(cx, cy, radius), fill=1)
    elif obj == "diamond":
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=1)
    elif obj == "hexagon":
        draw.polygon(_regular_polygon(cx, cy, radius, 6, rotation=0.0), fill=1)
    else:
        sides = int(obj.split("-")[1])
        draw.polygon(_regular_polygon(cx, cy, radius, sides), fill=1)
    return np.asarray(layer, dtype=bool)


def _pattern_mask(pattern: str, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    period = max(2, canvas // 10)
    if pattern == "stripes":
        return ((xx + yy) // period) % 2 == 1
    if pattern == "checker":
        return ((xx // period) + (yy // period)) % 2 == 1
    return np.zeros((canvas, canvas), dtype=bool)


def hue_color(hue: float, value: float = 1.0) -> np.ndarray:
    red, green, blue = ImageColor.getrgb(f"hsv({int(hue) % 360},100%,{int(round(value * 100))}%)")[:3]
    return np.array([red, green, blue], dtype=np.float32) / 255.0


def render_image(attribute: str, obj: str, spec: RenderSpec, sample_seed: int) -> np.ndarray:
    """Render one ``image_hw x image_hw x 3`` image with values in [0, 1].

    The object sets the foreground geometry, the attribute its hue and
    texture; ``sample_seed`` jitters position, scale and noise.
    """
    style = attribute_style(attribute)
    _check_object(obj)
    rng = np.random.default_rng(sample_seed)
    canvas = spec.image_hw
    size = canvas * rng.uniform(0.5, 0.75)
    x0 = rng.uniform(0, canvas - size)
    y0 = rng.uniform(0, canvas - size)
    mask = shape_mask(obj, canvas, (x0, y0, size))

    image = np.empty((canvas, canvas, 3), dtype=np.float32)
    image[:] = BACKGROUND
    shaded = _pattern_mask(style.pattern, canvas)
    image[mask & ~shaded] = hue_color(style.hue)
    image[mask & shaded] = hue_color(style.hue, SHADE)
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, image.shape).astype(np.float32)
        np.clip(image, 0.0, 1.0, out=image)
    return image


# Analyzers


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def foreground_mask(image: np.ndarray) -> np.ndarray:
    """Saturated pixels; the background is neutral gray."""
    hsv = np.asarray(Image.fromarray(_to_uint8(image), mode="RGB").convert("HSV"))
    return hsv[..., 1] > 96


def dominant_hue(image: np.ndarray) -> Optional[float]:
    """Circular mean hue in degrees over the foreground, None for an empty foreground."""
    hsv = np.asarray(Image.fromarray(_to_uint8(image), mode="RGB").convert("HSV")).astype(np.float64)
    mask = hsv[..., 1] > 96
    if not mask.any():
        return None
    angles = hsv[..., 0][mask] / 256.0 * 2 * math.pi
    return math.degrees(math.atan2(np.sin(angles).mean(), np.cos(angles).mean())) % 360


def _hue_distance(a: float, b: float) -> float:
    diff = abs(a - b) % 360
    return min(diff, 360 - diff)


def dominant_attribute(image: np.ndarray, vocab: VocabSpec) -> Optional[str]:
    """Attribute of ``vocab`` whose hue is closest to the image's foreground hue."""
    hue = dominant_hue(image)
    if hue is None:
        return None
    return min(vocab.attributes, key=lambda name: _hue_distance(hue, attribute_style(name).hue))


_SIGNATURE = 24


def _signature(mask: np.ndarray) -> Optional[np.ndarray]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    crop = mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
    resized = Image.fromarray(crop.astype(np.uint8) * 255).resize((_SIGNATURE, _SIGNATURE), Image.Resampling.NEAREST)
    return np.asarray(resized) > 127


def classify_shape(image: np.ndarray, vocab: VocabSpec) -> Optional[str]:
    """Object of ``vocab`` whose normalized silhouette best overlaps the image foreground."""
    signature = _signature(foreground_mask(image))
    if signature is None:
        return None
    best, best_iou = None, -1.0
    for obj in vocab.objects:
        template = _signature(shape_mask(obj, 96, (8.0, 8.0, 80.0)))
        assert template is not None
        iou = np.logical_and(signature, template).sum() / max(1, np.logical_or(signature, template).sum())
        if iou > best_iou:
            best, best_iou = obj, iou
    return best


# Dataset generation and I/O


@dataclass
class Sample:
    image: np.ndarray
    label: Pair
    split: Split
    path: Optional[str] = None


def sample_seed(seed: int, split: Split, pair_index: int, k: int) -> int:
    split_index = list(Split).index(split)
    return int(np.random.SeedSequence([seed, split_index, pair_index, k]).generate_state(1)[0])


def _split_pairs(labelspace: LabelSpace, split: Split) -> Tuple[Pair, ...]:
    return labelspace.unseen if split.unseen else labelspace.seen


def render_samples(
    labelspace: LabelSpace,
    spec: RenderSpec,
    per_pair_counts: Mapping[Split, int],
    seed: int,
) -> Dict[Split, List[Sample]]:
    """Render every split in memory."""
    if per_pair_counts.get(Split.TRAIN, 0) < 1:
        raise ConfigError("at least one training image per seen pair is required")
    samples: Dict[Split, List[Sample]] = {}
    for split in Split:
        count = per_pair_counts.get(split, 0)
        if count < 0:
            raise ConfigError(f"negative image count for split {split.value}")
        rendered = []
        for pair_index, (attribute, obj) in enumerate(_split_pairs(labelspace, split)):
            for k in range(count):
                image = render_image(attribute, obj, spec, sample_seed(seed, split, pair_index, k))
                path = f"{IMAGE_DIR}/{split.value}/{attribute}_{obj}_{k:04d}.ppm"
                rendered.append(Sample(image, (attribute, obj), split, path))
        samples[split] = rendered
    return samples


def write_ppm(path: Path, image: np.ndarray) -> None:
    Image.fromarray(_to_uint8(image), mode="RGB").save(path, format="PPM")


def read_ppm(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def write_vocab(path: Path, vocab: VocabSpec) -> None:
    lines = [f"attribute\t{a}" for a in vocab.attributes] + [f"object\t{o}" for o in vocab.objects]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vocab(path: Path) -> VocabSpec:
    attributes, objects = [], []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        kind, _, name = line.partition("\t")
        if kind == "attribute":
            attributes.append(name)
        elif kind == "object":
            objects.append(name)
        else:
            raise FormatError(f"{path}:{number}: expected 'attribute' or 'object', got '{kind}'")
    return VocabSpec(tuple(attributes), tuple(objects))


def write_labelspace(path: Path, labelspace: LabelSpace) -> None:
    lines = [f"seen\t{a}\t{o}" for a, o in labelspace.seen] + [f"unseen\t{a}\t{o}" for a, o in labelspace.unseen]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labelspace(path: Path, vocab: VocabSpec) -> LabelSpace:
    seen: List[Pair] = []
    unseen: List[Pair] = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[0] not in ("seen", "unseen"):
            raise FormatError(f"{path}:{number}: expected 'seen|unseen<TAB>attr<TAB>obj'")
        (seen if fields[0] == "seen" else unseen).append((fields[1], fields[2]))
    try:
        return LabelSpace(vocab, tuple(seen), tuple(unseen))
    except (ContractError, VocabularyError) as e:
        raise FormatError(f"{path}: {e}")


def validate_rows(rows: Sequence[Tuple[str, Pair, Split]], labelspace: LabelSpace) -> None:
    """Check manifest rows against the label space: train and seen splits hold seen pairs, unseen splits unseen pairs."""
    unseen = set(labelspace.unseen)
    for path, label, split in rows:
        if split.unseen and label not in unseen:
            raise FormatError(f"{path}: {split.value} label {label} is not an unseen pair")
        if not split.unseen and not labelspace.is_seen(label):
            raise FormatError(f"{path}: {split.value} label {label} is not a seen pair")


@dataclass(frozen=True)
class DatasetSummary:
    root: Path
    counts: Dict[Split, int]
    seen_pairs: int
    unseen_pairs: int


def generate_dataset(
    out_dir: PathLike,
    vocab: VocabSpec,
    spec: RenderSpec,
    labelspace: LabelSpace,
    per_pair_counts: Mapping[Split, int],
    seed: int,
) -> DatasetSummary:
    """Render all splits and write images, ``manifest.tsv``, ``labelspace.tsv`` and ``vocab.tsv`` under ``out_dir``."""
    if labelspace.vocab != vocab:
        raise ContractError("label space was built for a different vocabulary")
    root = Path(out_dir)
    samples = render_samples(labelspace, spec, per_pair_counts, seed)
    for split in Split:
        (root / IMAGE_DIR / split.value).mkdir(parents=True, exist_ok=True)

    rows = []
    for split in Split:
        for sample in samples[split]:
            assert sample.path is not None
            write_ppm(root / sample.path, sample.image)
            rows.append(f"{sample.path}\t{sample.label[0]}\t{sample.label[1]}\t{split.value}")
    (root / MANIFEST_FILE).write_text("\n".join([MANIFEST_HEADER, *rows]) + "\n", encoding="utf-8")
    write_labelspace(root / LABELSPACE_FILE, labelspace)
    write_vocab(root / VOCAB_FILE, vocab)

    counts = {split: len(samples[split]) for split in Split}
    LOGGER.info(
        f"Wrote {sum(counts.values())} images to {root} "
        f"({len(labelspace.seen)} seen / {len(labelspace.unseen)} unseen pairs, {counts[Split.TRAIN]} train)"
    )
    return DatasetSummary(root, counts, len(labelspace.seen), len(labelspace.unseen))


@dataclass
class CompositionalDataset:
    """Images and labels per split, either read from disk or rendered in memory."""

    labelspace: LabelSpace
    samples: Dict[Split, List[Sample]] = field(default_factory=dict)
    root: Optional[Path] = None

    @property
    def vocab(self) -> VocabSpec:
        return self.labelspace.vocab

    @classmethod
    def load(cls, data_dir: PathLike) -> "CompositionalDataset":
        root = Path(data_dir)
        manifest = root / MANIFEST_FILE
        if not manifest.is_file():
            raise FileNotFoundError(f"no dataset manifest at '{manifest}'")
        labelspace = read_labelspace(root / LABELSPACE_FILE, read_vocab(root / VOCAB_FILE))

        lines = manifest.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise FormatError(f"{manifest}: missing '{MANIFEST_HEADER}' header")
        rows = []
        for number, line in enumerate(lines[1:], start=2):
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(f"{manifest}:{number}: expected 4 tab-separated fields")
            try:
                split = Split(fields[3])
            except ValueError:
                raise FormatError(f"{manifest}:{number}: unknown split '{fields[3]}'")
            rows.append((fields[0], (fields[1], fields[2]), split))
        validate_rows(rows, labelspace)

        samples: Dict[Split, List[Sample]] = {split: [] for split in Split}
        for path, label, split in rows:
            samples[split].append(Sample(read_ppm(root / path), label, split, path))
        LOGGER.debug(f"Loaded {len(rows)} samples from {root}")
        return cls(labelspace, samples, root)

    @classmethod
    def render(
        cls,
        labelspace: LabelSpace,
        spec: RenderSpec,
        per_pair_counts: Mapping[Split, int],
        seed: int,
    ) -> "CompositionalDataset":
        return cls(labelspace, render_samples(labelspace, spec, per_pair_counts, seed))

    def split(self, split: Split) -> List[Sample]:
        return self.samples.get(split, [])

    def images(self, split: Split) -> np.ndarray:
        samples = self.split(split)
        if not samples:
            raise ContractError(f"split '{split.value}' is empty")
        return np.stack([s.image for s in samples])

    def labels(self, split: Split) -> List[Pair]:
        return [s.label for s in self.split(split)]

    def evaluation_set(self, name: str = "val") -> Tuple[np.ndarray, List[Pair]]:
        """Images and labels of the seen and unseen halves of ``val`` or ``test``."""
        try:
            parts = EVAL_SPLITS[name]
        except KeyError:
            raise ContractError(f"unknown evaluation split '{name}', expected one of {sorted(EVAL_SPLITS)}")
        samples = [s for part in parts for s in self.split(part)]
        if not samples:
            raise ContractError(f"evaluation split '{name}' is empty")
        return np.stack([s.image for s in samples]), [s.label for s in samples]
