"""
caila.prompts
~~~~~~~~~~~~~

Prompt templates and the word-level tokenizer for the text encoder.
"""

from dataclasses import dataclass, field
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError, VocabularyError
from .layers import ConceptKind

LOGGER = logging.getLogger("caila")

PAD = "[PAD]"
CLS = "[CLS]"
ATTRIBUTE_SLOT = "[ATTRIBUTE]"
OBJECT_SLOT = "[OBJECT]"

MASKED = -1e9


@dataclass(frozen=True)
class PromptTemplate:
    kind: ConceptKind
    words: Tuple[str, ...]

    @property
    def class_slots(self) -> Dict[str, int]:
        """Slot marker -> word index."""
        return {word: i for i, word in enumerate(self.words) if word in (ATTRIBUTE_SLOT, OBJECT_SLOT)}

    @property
    def fixed_words(self) -> List[str]:
        return [word for word in self.words if word not in (ATTRIBUTE_SLOT, OBJECT_SLOT)]

    def render(self, attribute: Optional[str] = None, obj: Optional[str] = None) -> List[str]:
        """Fill the class slots with primitive names."""
        fill = {ATTRIBUTE_SLOT: attribute, OBJECT_SLOT: obj}
        words = []
        for word in self.words:
            if word in fill:
                name = fill[word]
                if name is None:
                    raise ContractError(f"{self.kind.value} template needs a value for {word}")
                words.append(name)
            else:
                words.append(word)
        return words


TEMPLATES: Dict[ConceptKind, PromptTemplate] = {
    ConceptKind.COMPOSITION: PromptTemplate(ConceptKind.COMPOSITION, ("a", "photo", "of", ATTRIBUTE_SLOT, OBJECT_SLOT)),
    ConceptKind.ATTRIBUTE: PromptTemplate(ConceptKind.ATTRIBUTE, ("a", "photo", "of", ATTRIBUTE_SLOT, "object")),
    ConceptKind.OBJECT: PromptTemplate(ConceptKind.OBJECT, ("a", "photo", "of", OBJECT_SLOT)),
}


class TokenVocabulary:
    """Word <-> id table. Ids 0 and 1 are the pad and [CLS] tokens."""

    def __init__(self, words: Iterable[str]) -> None:
        self._words: List[str] = []
        self._ids: Dict[str, int] = {}
        for word in (PAD, CLS, *words):
            if word not in self._ids:
                self._ids[word] = len(self._words)
                self._words.append(word)

    @classmethod
    def build(cls, attributes: Sequence[str], objects: Sequence[str]) -> "TokenVocabulary":
        template_words: List[str] = []
        for template in TEMPLATES.values():
            template_words.extend(template.fixed_words)
        return cls([*template_words, *attributes, *objects])

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: object) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"word '{word}' is not in the token vocabulary")

    def word_of(self, token_id: int) -> str:
        return self._words[token_id]


@dataclass(frozen=True)
class TokenizedPrompt:
    ids: np.ndarray
    length: int
    class_positions: Dict[str, int] = field(default_factory=dict)

    @property
    def attention_mask(self) -> np.ndarray:
        """Additive key mask: 0 for real tokens, a large negative value for padding."""
        mask = np.zeros(self.ids.shape[0], dtype=np.float32)
        mask[self.length:] = MASKED
        return mask


def tokenize(
    words: Sequence[str],
    vocab: TokenVocabulary,
    max_len: int,
    class_slots: Optional[Dict[str, int]] = None,
) -> TokenizedPrompt:
    """Map words to ids, prepend [CLS] and pad to ``max_len``.

    ``class_slots`` maps slot markers to word indices; they are reported as
    token positions, i.e. shifted by one for the [CLS] token.

    Raises:
        VocabularyError: a word is not in ``vocab``
        ContractError: the prompt does not fit in ``max_len`` tokens
    """
    length = len(words) + 1
    if length > max_len:
        raise ContractError(f"prompt of {length} tokens does not fit max_text_len={max_len}")
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[0] = vocab.cls_id
    for i, word in enumerate(words):
        ids[i + 1] = vocab.id_of(word)
    positions = {slot: index + 1 for slot, index in (class_slots or {}).items()}
    return TokenizedPrompt(ids, length, positions)


def tokenize_prompt(
    kind: ConceptKind,
    vocab: TokenVocabulary,
    max_len: int,
    attribute: Optional[str] = None,
    obj: Optional[str] = None,
) -> TokenizedPrompt:
    template = TEMPLATES[kind]
    return tokenize(template.render(attribute, obj), vocab, max_len, template.class_slots)
