"""Span-masking data generation for standard and question-style denoising."""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Document, QAItem, Token
from .tokenizer import mask_token

WHICH = 'Which text tokens are masked by {mask} {where} "{ctx}"?'
WHAT = 'What are the masked text tokens of {mask} {where} "{ctx}"?'
TEMPLATES = {"which": WHICH, "what": WHAT}


def template_words() -> list[str]:
    """Plain words of both question templates, for seeding a vocabulary."""
    words: list[str] = []
    for t in (WHICH, WHAT):
        for w in t.split():
            if "{" not in w and w.lower() not in words:
                words.append(w.lower())
    return words + ["after", "before"]


_SENTINEL = re.compile(r"^\[MASK_(\d+)\]$")


@dataclass(frozen=True)
class MaskedSpan:
    sentinel: int
    start: int
    tokens: tuple[str, ...]
    left_context: tuple[str, ...]

    @property
    def end(self) -> int:
        return self.start + len(self.tokens)


@dataclass
class DenoiseExample:
    input_text: str
    targets: list[str]
    questions: list[str] = field(default_factory=list)
    masked: list[str] = field(default_factory=list)
    spans: list[MaskedSpan] = field(default_factory=list)


def apply_spans(tokens: Sequence[str], spans: Sequence[tuple[int, int]]) -> tuple[list[str], list[MaskedSpan]]:
    """Replace ``(start, length)`` spans with sentinels numbered left to right."""
    ordered = sorted(spans)
    for (s0, l0), (s1, _) in zip(ordered, ordered[1:]):
        if s0 + l0 >= s1:
            raise ValueError("spans must be disjoint and non-adjacent")
    masked: list[str] = []
    out: list[MaskedSpan] = []
    pos = 0
    for i, (start, length) in enumerate(ordered, 1):
        if length < 1 or start < 0 or start + length > len(tokens):
            raise ValueError(f"span ({start}, {length}) out of range")
        masked.extend(tokens[pos:start])
        out.append(MaskedSpan(i, start, tuple(tokens[start : start + length]), tuple(masked)))
        masked.append(mask_token(i))
        pos = start + length
    masked.extend(tokens[pos:])
    return masked, out


def mask_spans(
    tokens: Sequence[str],
    seed: int,
    num_masks: int = 5,
    mask_ratio: float = 0.15,
    max_span_len: int = 3,
) -> tuple[list[str], list[MaskedSpan]]:
    """Mask up to ``num_masks`` random disjoint, non-adjacent spans.

    At most ``max(num_masks, ceil(mask_ratio * len))`` tokens are masked, so
    short documents get single-token spans; if even those do not fit, fewer
    spans are placed.
    """
    if not tokens:
        raise ValueError("cannot mask an empty token sequence")
    n = len(tokens)
    rng = random.Random(seed)
    k = min(num_masks, (n + 1) // 2)
    if k <= 0:
        return list(tokens), []
    budget = max(k, math.ceil(mask_ratio * n))
    lengths = [rng.randint(1, max_span_len) for _ in range(k)]
    while sum(lengths) > budget or sum(lengths) + k - 1 > n:
        j = max(range(k), key=lambda i: (lengths[i], -i))
        if lengths[j] == 1:
            break
        lengths[j] -= 1
    while sum(lengths) + k - 1 > n:
        lengths.pop()
        k -= 1
    # Spread the slack uniformly over k + 1 gaps (inner gaps keep one spacer token).
    slack = n - sum(lengths) - (k - 1)
    cuts = sorted(rng.randint(0, slack) for _ in range(k))
    spans, pos, prev = [], 0, 0
    for i, (cut, length) in enumerate(zip(cuts, lengths)):
        pos += cut - prev + (1 if i else 0)
        spans.append((pos, length))
        pos += length
        prev = cut
    return apply_spans(tokens, spans)


def reconstruct(masked: Sequence[str], answers: dict[int, Sequence[str]]) -> list[str]:
    """Substitute each sentinel with its span tokens."""
    out: list[str] = []
    for tok in masked:
        m = _SENTINEL.match(tok)
        if m and int(m.group(1)) in answers:
            out.extend(answers[int(m.group(1))])
        else:
            out.append(tok)
    return out


def make_standard_example(masked: Sequence[str], spans: Sequence[MaskedSpan]) -> DenoiseExample:
    parts = []
    for span in sorted(spans, key=lambda s: s.sentinel):
        parts.append(mask_token(span.sentinel))
        parts.extend(span.tokens)
    return DenoiseExample(" ".join(masked), [" ".join(parts)], [], list(masked), list(spans))


def parse_standard_target(target: str) -> dict[int, list[str]]:
    spans: dict[int, list[str]] = {}
    current = None
    for tok in target.split():
        m = _SENTINEL.match(tok.upper())
        if m:
            current = int(m.group(1))
            spans[current] = []
        elif current is None:
            raise ValueError(f"target text before the first sentinel: {tok!r}")
        else:
            spans[current].append(tok)
    return spans


def make_question(
    masked: Sequence[str],
    span: MaskedSpan,
    style: str = "which",
    ctx_len: int = 2,
    direction: str = "after",
) -> str:
    sentinel = mask_token(span.sentinel)
    where = masked.index(sentinel)
    if direction == "after":
        ctx = masked[max(0, where - ctx_len) : where]
        # Context stops at a neighbouring sentinel so each sentinel is named by one question only.
        while any(_SENTINEL.match(t) for t in ctx):
            ctx = ctx[1:]
    elif direction == "before":
        ctx = masked[where + 1 : where + 1 + ctx_len]
        while any(_SENTINEL.match(t) for t in ctx):
            ctx = ctx[:-1]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return TEMPLATES[style].format(mask=sentinel, where=direction, ctx=" ".join(ctx))


def make_mqma_example(
    masked: Sequence[str],
    spans: Sequence[MaskedSpan],
    seed: int,
    style: str = "mixed",
    ctx_len: int = 2,
    direction: str = "after",
) -> DenoiseExample:
    """One question per span in a random order; ``style='mixed'`` picks which/what per question."""
    if not spans:
        raise ValueError("question-style denoising needs at least one masked span")
    if style not in ("which", "what", "mixed"):
        raise ValueError(f"unknown question style {style!r}")
    rng = random.Random(seed)
    order = list(spans)
    rng.shuffle(order)
    questions, answers = [], []
    for span in order:
        s = rng.choice(("which", "what")) if style == "mixed" else style
        questions.append(make_question(masked, span, s, ctx_len, direction))
        answers.append(" ".join(span.tokens))
    text = " ".join(questions + ["[SEP]"] + list(masked))
    return DenoiseExample(text, answers, questions, list(masked), order)


def mask_page(doc: Document, masked: Sequence[str], spans: Sequence[MaskedSpan]) -> Document:
    """Copy of ``doc`` with each span replaced by its sentinel token.

    A sentinel keeps the top-left corner of its first token and extends to
    cover the whole span, which preserves reading order.
    """
    by_start = {s.start: s for s in spans}
    tokens: list[Token] = []
    i = 0
    while i < len(doc.tokens):
        span = by_start.get(i)
        if span is None:
            tokens.append(doc.tokens[i])
            i += 1
            continue
        boxes = [t.box for t in doc.tokens[span.start : span.end]]
        union = (boxes[0][0], boxes[0][1], max(b[2] for b in boxes), max(b[3] for b in boxes))
        tokens.append(Token(mask_token(span.sentinel), union))
        i = span.end
    if [t.text for t in tokens] != list(masked):
        raise ValueError("masked tokens do not match the document")
    return Document(doc.id, doc.page_width, doc.page_height, tokens, doc.image, [])


def masked_document(doc: Document, masked: Sequence[str], spans: Sequence[MaskedSpan], example: DenoiseExample) -> Document:
    """The masked page with a question-style example attached as QA items."""
    if not example.questions:
        raise ValueError("only question-style examples map onto the QA schema")
    page = mask_page(doc, masked, spans)
    page.qa_items = [QAItem(q, (a,), "denoise") for q, a in zip(example.questions, example.targets)]
    return page
