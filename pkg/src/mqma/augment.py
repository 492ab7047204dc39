"""Question sampling for training and leak-group-aware batching for inference."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

from .corpus import Document, QAItem

DYNAMIC = "dynamic"
STATIC = "static"


@dataclass(frozen=True)
class AugmentConfig:
    n: int
    mode: str = DYNAMIC
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mode not in (DYNAMIC, STATIC):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


@dataclass(frozen=True)
class QuestionBatch:
    doc: Document
    indices: tuple[int, ...]
    leak_group: str

    @property
    def items(self) -> list[QAItem]:
        return [self.doc.qa_items[i] for i in self.indices]

    @property
    def questions(self) -> list[str]:
        return [q.question for q in self.items]

    def __len__(self) -> int:
        return len(self.indices)


def leak_groups(doc: Document) -> dict[str, list[int]]:
    """Question indices per leak group, groups in order of first appearance."""
    groups: dict[str, list[int]] = {}
    for i, qa in enumerate(doc.qa_items):
        groups.setdefault(qa.leak_group, []).append(i)
    return groups


def sample_training_batch(doc: Document, cfg: AugmentConfig, rng: random.Random) -> QuestionBatch:
    """Pick a leak group uniformly, then a uniform size n' and an ordered sample without replacement."""
    if cfg.mode != DYNAMIC:
        raise ValueError("sample_training_batch is for dynamic mode; use static_batches")
    groups = leak_groups(doc)
    if not groups:
        raise ValueError(f"doc {doc.id} has no question-answer items")
    name = rng.choice(list(groups))
    members = groups[name]
    size = rng.randint(1, min(cfg.n, len(members)))
    return QuestionBatch(doc, tuple(rng.sample(members, size)), name)


def _chunked(doc: Document, n: int) -> list[QuestionBatch]:
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for name, members in leak_groups(doc).items():
        for s in range(0, len(members), n):
            out.append(QuestionBatch(doc, tuple(members[s : s + n]), name))
    return out


def static_batches(doc: Document, cfg: AugmentConfig) -> list[QuestionBatch]:
    """Fixed chunks of n in stored order within each leak group; identical every epoch."""
    if cfg.mode != STATIC:
        raise ValueError("static_batches requires static mode")
    return _chunked(doc, cfg.n)


def inference_batches(doc: Document, n: int, groups: dict[str, Sequence[int]] | None = None) -> list[QuestionBatch]:
    """Every n questions in stored order; the last chunk of a group may be smaller.

    ``groups`` overrides the per-item ``leak_group`` labels when given.
    """
    if groups is None:
        return _chunked(doc, n)
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = sorted(i for members in groups.values() for i in members)
    if seen != list(range(len(doc.qa_items))):
        raise ValueError("leak groups must partition the document's questions")
    out = []
    for name, members in groups.items():
        members = list(members)
        for s in range(0, len(members), n):
            out.append(QuestionBatch(doc, tuple(members[s : s + n]), name))
    return out
