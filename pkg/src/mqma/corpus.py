"""Synthetic OCR-style documents: generation, validation and JSONL I/O."""

from __future__ import annotations

import base64
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Small fixed word list; the generator draws from it unless the caller supplies another.
DEFAULT_WORDS = (
    "account address amount annual april area balance bank board budget business "
    "capital cash center chart city claim client code company contract cost council "
    "county credit customer data date deposit design director district division "
    "east energy estate federal fee figure file final fiscal fund general grant "
    "group health house income index invoice item labor land law letter level "
    "license loan market medical member memo method month motor name net north "
    "notice number office order owner page paper party payment period permit "
    "plan policy post power price product profit program project public quality "
    "rate record region report revenue review river safety salary sales school "
    "section service share site south staff state station stock store street "
    "study summary supply system tax team term total trade trust union unit value "
    "vendor water week west work year zone alpha beta gamma delta omega"
).split()

CHAR_W = 3
LINE_H = 6
ROW_PITCH = 9
MARGIN = 4
WORD_GAP = 4


@dataclass(frozen=True)
class Token:
    text: str
    box: tuple[int, int, int, int]


@dataclass
class QAItem:
    question: str
    answers: tuple[str, ...]
    leak_group: str = "default"

    def __post_init__(self):
        self.answers = tuple(self.answers)
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not self.answers or any(not a.strip() for a in self.answers):
            raise ValueError(f"question {self.question!r} needs non-empty answers")


@dataclass
class Document:
    id: str
    page_width: int
    page_height: int
    tokens: list[Token]
    image: np.ndarray
    qa_items: list[QAItem] = field(default_factory=list)

    def validate(self) -> None:
        if self.page_width <= 0 or self.page_height <= 0:
            raise ValueError(f"invalid page size in doc {self.id}")
        for tok in self.tokens:
            x1, y1, x2, y2 = tok.box
            if not (0 <= x1 <= x2 <= self.page_width and 0 <= y1 <= y2 <= self.page_height):
                raise ValueError(f"invalid box in doc {self.id}: {tok.text!r} {tok.box}")
        keys = [(t.box[1], t.box[0]) for t in self.tokens]
        if keys != sorted(keys):
            raise ValueError(f"tokens not in reading order in doc {self.id}")
        if self.image.ndim != 2 or self.image.size == 0:
            raise ValueError(f"image must be a non-empty 2-D raster in doc {self.id}")
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"image values outside [0, 1] in doc {self.id}")

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    def __eq__(self, other):
        if not isinstance(other, Document):
            return NotImplemented
        return (
            self.id == other.id
            and self.page_width == other.page_width
            and self.page_height == other.page_height
            and self.tokens == other.tokens
            and self.qa_items == other.qa_items
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


def _successor_table(words: Sequence[str]) -> list[int]:
    # A fixed permutation-like successor per word gives the text short predictable phrases.
    v = len(words)
    step = 7 if v % 7 else 5
    return [(i * step + 3) % v for i in range(v)]


def _zipf_weights(v: int, s: float = 1.1) -> list[float]:
    return [1.0 / (r + 1) ** s for r in range(v)]


def render_image(tokens: Sequence[Token], page_width: int, page_height: int) -> np.ndarray:
    """Light page with one dark rectangle per token box."""
    img = np.full((page_height, page_width), 0.9, dtype=np.float32)
    for tok in tokens:
        x1, y1, x2, y2 = tok.box
        img[y1:y2, x1:x2] = 0.1
    return img


def generate_corpus(
    seed: int,
    num_docs: int,
    words_per_doc: tuple[int, int] = (20, 40),
    vocab_words: Sequence[str] = DEFAULT_WORDS,
    page_width: int = 128,
    follow_prob: float = 0.5,
) -> list[Document]:
    """Generate ``num_docs`` documents deterministically from ``seed``.

    Text mixes a fixed successor chain (probability ``follow_prob``) with
    Zipf-distributed fresh draws, so masked spans are partly predictable.
    Words are laid out left to right, top to bottom, with small jitter.
    """
    if num_docs < 1:
        raise ValueError("num_docs must be >= 1")
    vocab_words = list(vocab_words)
    if not vocab_words:
        raise ValueError("vocab_words must be non-empty")
    lo, hi = words_per_doc
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid words_per_doc range {words_per_doc}")
    max_word = max(len(w) for w in vocab_words) * CHAR_W
    if max_word + 2 * MARGIN + 1 > page_width:
        raise ValueError("page_width too small for the longest word")

    rng = random.Random(seed)
    succ = _successor_table(vocab_words)
    weights = _zipf_weights(len(vocab_words))
    docs = []
    for d in range(num_docs):
        count = rng.randint(lo, hi)
        idx: list[int] = []
        for k in range(count):
            if k > 0 and rng.random() < follow_prob:
                idx.append(succ[idx[-1]])
            else:
                idx.append(rng.choices(range(len(vocab_words)), weights)[0])

        tokens = []
        x, row, jitter = MARGIN, 0, rng.randint(0, 2)
        for i in idx:
            word = vocab_words[i]
            w = len(word) * CHAR_W
            if x + w > page_width - MARGIN:
                x, row, jitter = MARGIN, row + 1, rng.randint(0, 2)
            y1 = MARGIN + row * ROW_PITCH + jitter
            tokens.append(Token(word, (x, y1, x + w, y1 + LINE_H)))
            x += w + WORD_GAP + rng.randint(0, 2)
        page_height = MARGIN * 2 + (row + 1) * ROW_PITCH + 1
        docs.append(
            Document(
                id=f"doc-{seed}-{d:05d}",
                page_width=page_width,
                page_height=page_height,
                tokens=tokens,
                image=render_image(tokens, page_width, page_height),
            )
        )
    return docs


def _rows(doc: Document) -> list[list[Token]]:
    rows: list[list[Token]] = []
    for tok in doc.tokens:
        if rows and tok.box[0] > rows[-1][-1].box[0]:
            rows[-1].append(tok)
        else:
            rows.append([tok])
    return rows


QA_TEMPLATES = (
    "what is the first word ?",
    "what is the last word ?",
    "what word starts row {r} ?",
    "what word ends row {r} ?",
)
MAX_QA_ROWS = 5


def qa_template_words() -> list[str]:
    """Every word the synthetic QA questions can use, for seeding a vocabulary."""
    words: list[str] = []
    for t in QA_TEMPLATES:
        for r in range(1, MAX_QA_ROWS + 1):
            words.extend(w for w in t.format(r=r).split() if w not in words)
    return words


def attach_synthetic_qa(
    docs: Iterable[Document], seed: int, per_doc: int = 2, leak_groups: bool = False
) -> list[Document]:
    """Attach layout questions whose answers are words on the page.

    Questions ask for the first/last word of the page or the first word of a
    row. With ``leak_groups`` the row questions go into their own group.
    """
    rng = random.Random(seed)
    out = []
    for doc in docs:
        if not doc.tokens:
            out.append(Document(doc.id, doc.page_width, doc.page_height, [], doc.image, []))
            continue
        rows = _rows(doc)
        pool = [
            QAItem(QA_TEMPLATES[0], (doc.tokens[0].text,), "page"),
            QAItem(QA_TEMPLATES[1], (doc.tokens[-1].text,), "page"),
        ]
        for r, row in enumerate(rows[:MAX_QA_ROWS], 1):
            pool.append(QAItem(QA_TEMPLATES[2].format(r=r), (row[0].text,), "rows"))
            pool.append(QAItem(QA_TEMPLATES[3].format(r=r), (row[-1].text,), "rows"))
        chosen = rng.sample(pool, min(per_doc, len(pool)))
        if not leak_groups:
            chosen = [QAItem(q.question, q.answers, "default") for q in chosen]
        out.append(
            Document(doc.id, doc.page_width, doc.page_height, list(doc.tokens), doc.image, chosen)
        )
    return out


def _encode_image(img: np.ndarray) -> dict:
    arr = np.ascontiguousarray(img)
    return {
        "shape": list(arr.shape),
        "dtype": arr.dtype.str,
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_image(value, base_dir: Path) -> np.ndarray:
    if isinstance(value, dict):
        raw = base64.b64decode(value["data"])
        return np.frombuffer(raw, dtype=np.dtype(value["dtype"])).reshape(value["shape"]).copy()
    if isinstance(value, str):
        return np.load(base_dir / value)
    return np.asarray(value, dtype=np.float64)


def document_to_json(doc: Document) -> dict:
    return {
        "id": doc.id,
        "page_width": doc.page_width,
        "page_height": doc.page_height,
        "tokens": [{"text": t.text, "box": list(t.box)} for t in doc.tokens],
        "image": _encode_image(doc.image),
        "qa": [
            {"question": q.question, "answers": list(q.answers), "leak_group": q.leak_group}
            for q in doc.qa_items
        ],
    }


def document_from_json(obj: dict, base_dir: Path = Path(".")) -> Document:
    tokens = [Token(t["text"], tuple(int(c) for c in t["box"])) for t in obj["tokens"]]
    qa = [QAItem(q["question"], tuple(q["answers"]), q.get("leak_group", "default")) for q in obj.get("qa", [])]
    image = _decode_image(obj["image"], base_dir)
    if image.ndim == 1:
        image = image.reshape(int(obj["page_height"]), int(obj["page_width"]))
    return Document(obj["id"], int(obj["page_width"]), int(obj["page_height"]), tokens, image, qa)


def save_documents(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_json(doc), sort_keys=True))
            fh.write("\n")


def load_documents(path: str | Path) -> list[Document]:
    path = Path(path)
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = document_from_json(obj, path.parent)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed document line: {exc}") from exc
            doc.validate()
            docs.append(doc)
    return docs
