"""Word-level tokenizer with a reserved block of special tokens."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD = "[PAD]"
START = "[START]"
EOS = "[EOS]"
SEP = "[SEP]"
ANS_SEP = "[ANS_SEP]"
UNK = "[UNK]"

BASE_SPECIALS = (PAD, START, EOS, SEP, ANS_SEP, UNK)
DEFAULT_NUM_MASKS = 8


def mask_token(i: int) -> str:
    """Sentinel string for the i-th (1-based) masked span."""
    return f"[MASK_{i}]"


def special_tokens(num_masks: int = DEFAULT_NUM_MASKS) -> tuple[str, ...]:
    return BASE_SPECIALS + tuple(mask_token(i) for i in range(1, num_masks + 1))


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    num_specials: int
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def start_id(self) -> int:
        return self.token_to_id[START]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def ans_sep_id(self) -> int:
        return self.token_to_id[ANS_SEP]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def num_masks(self) -> int:
        return self.num_specials - len(BASE_SPECIALS)

    def mask_id(self, i: int) -> int:
        return self.token_to_id[mask_token(i)]

    @property
    def special_ids(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.id_to_token[: self.num_specials])}

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < self.num_specials

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        if len(tokens) < len(BASE_SPECIALS) or tuple(tokens[: len(BASE_SPECIALS)]) != BASE_SPECIALS:
            raise ValueError("vocabulary does not start with the reserved special tokens")
        n = len(BASE_SPECIALS)
        while n < len(tokens) and tokens[n] == mask_token(n - len(BASE_SPECIALS) + 1):
            n += 1
        return cls(tuple(tokens), n)


def _corpus_texts(corpus) -> Iterable[str]:
    for doc in corpus:
        if isinstance(doc, str):
            yield doc
            continue
        for tok in doc.tokens:
            yield tok.text
        for qa in doc.qa_items:
            yield qa.question
            yield from qa.answers


def build_vocab(
    corpus,
    max_size: int,
    num_masks: int = DEFAULT_NUM_MASKS,
    required: Iterable[str] = (),
) -> Vocab:
    """Build a vocabulary from documents (or raw strings).

    Specials come first, then ``required`` words in the order given, then the
    remaining word types by descending frequency with lexicographic tie-breaks.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    specials = special_tokens(num_masks)
    if max_size < len(specials) + 1:
        raise ValueError(f"max_size={max_size} leaves no room after {len(specials)} special tokens")

    counts: Counter[str] = Counter()
    for text in _corpus_texts(corpus):
        for word in text.lower().split():
            if word.upper() not in specials:
                counts[word] += 1

    tokens = list(specials)
    seen = set(tokens)
    for word in required:
        word = word.lower()
        if word not in seen and len(tokens) < max_size:
            tokens.append(word)
            seen.add(word)
    for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if word not in seen:
            tokens.append(word)
            seen.add(word)
    return Vocab(tuple(tokens), len(specials))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    ids = []
    for word in text.split():
        upper = word.upper()
        if upper in vocab.token_to_id and vocab.is_special(vocab.token_to_id[upper]):
            ids.append(vocab.token_to_id[upper])
        else:
            ids.append(vocab.token_to_id.get(word.lower(), vocab.unk_id))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocab, skip: Iterable[int] = ()) -> str:
    skip = set(skip)
    return " ".join(vocab.id_to_token[i] for i in ids if i not in skip)
