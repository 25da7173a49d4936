"""
Word-level tokenizer for target phrases.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from targeted_detector.errors import DimensionError

logger = logging.getLogger(__name__)

PAD = "[PAD]"
CLS = "[CLS]"
SEP = "[SEP]"
ALL = "[all]"
UNK = "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, ALL, UNK)


@dataclass(frozen=True)
class TokenSequence:
    """
    Token ids, segment ids and padding mask for one target text.

    Position 0 is ``[CLS]``. Phrase ``i`` and the ``[SEP]`` closing it carry
    segment ``i + 1``; ``[CLS]``, padding and the lone ``[SEP]`` of an empty
    text carry segment 0.
    """

    token_ids: Tuple[int, ...]
    segment_ids: Tuple[int, ...]
    pad_mask: Tuple[bool, ...]
    n_phrases: int

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_effective(self) -> int:
        return sum(1 for padded in self.pad_mask if not padded)


class Tokenizer:
    """Lowercase whitespace tokenizer over a fixed vocabulary plus special tokens."""

    def __init__(self, words: Iterable[str]) -> None:
        vocab: List[str] = list(SPECIAL_TOKENS)
        seen = set(vocab)
        for word in sorted({w.lower() for w in words}):
            if word not in seen:
                vocab.append(word)
                seen.add(word)
        self._vocab = vocab
        self._ids: Dict[str, int] = {word: i for i, word in enumerate(vocab)}

    @classmethod
    def from_category_names(cls, names: Iterable[str]) -> "Tokenizer":
        words: List[str] = []
        for name in names:
            words.extend(name.lower().split())
        return cls(words)

    @property
    def vocab(self) -> List[str]:
        return list(self._vocab)

    @property
    def vocab_size(self) -> int:
        return len(self._vocab)

    def token_id(self, word: str) -> int:
        return self._ids.get(word.lower() if word not in self._ids else word, self._ids[UNK])

    def split(self, phrase: str) -> List[str]:
        if phrase == ALL:
            return [ALL]
        return phrase.lower().split()

    def encode(self, phrases: Sequence[str], k_max: int, max_phrases: int) -> TokenSequence:
        """
        Build ``[CLS] p1 [SEP] p2 [SEP] ...`` padded to ``k_max``.

        Whole phrases are dropped from the end until the sequence fits; a
        phrase is never cut in half.
        """
        if k_max < 2:
            raise DimensionError(f"k_max must leave room for [CLS] and [SEP], got {k_max}")

        kept: List[List[str]] = []
        length = 1
        for phrase in list(phrases)[:max_phrases]:
            words = self.split(phrase)
            if not words:
                continue
            if length + len(words) + 1 > k_max:
                break
            kept.append(words)
            length += len(words) + 1
        if len(kept) < len(phrases):
            logger.warning(
                "Truncated target text from %d to %d phrases (k_max=%d, max_phrases=%d)",
                len(phrases),
                len(kept),
                k_max,
                max_phrases,
            )

        ids = [self._ids[CLS]]
        segments = [0]
        if not kept:
            ids.append(self._ids[SEP])
            segments.append(0)
        for ordinal, words in enumerate(kept, start=1):
            ids.extend(self.token_id(w) for w in words)
            ids.append(self._ids[SEP])
            segments.extend([ordinal] * (len(words) + 1))

        n_real = len(ids)
        ids.extend([self._ids[PAD]] * (k_max - n_real))
        segments.extend([0] * (k_max - n_real))
        pad_mask = tuple(i >= n_real for i in range(k_max))
        return TokenSequence(tuple(ids), tuple(segments), pad_mask, len(kept))

    def decode(self, token_ids: Sequence[int]) -> List[str]:
        return [self._vocab[i] for i in token_ids if self._vocab[i] != PAD]


def load_word_vectors(
    path: Union[str, Path], tokenizer: Tokenizer, dim: int
) -> Dict[int, np.ndarray]:
    """
    Read a ``word v1 v2 ... vd`` text table and return vectors for known words,
    keyed by token id. Lines with the wrong width are skipped.
    """
    vectors: Dict[int, np.ndarray] = {}
    skipped = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            parts = line.split()
            if len(parts) != dim + 1:
                skipped += 1
                continue
            word = parts[0].lower() if parts[0] not in SPECIAL_TOKENS else parts[0]
            token = tokenizer.token_id(word)
            if tokenizer.vocab[token] == UNK and word != UNK:
                continue
            vectors[token] = np.array([float(v) for v in parts[1:]])
    if skipped:
        logger.warning("Skipped %d word-vector lines without %d values", skipped, dim)
    logger.info("Loaded %d word vectors from %s", len(vectors), path)
    return vectors
