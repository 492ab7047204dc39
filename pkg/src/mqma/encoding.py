"""Multi-modal encoder input: text block layout, patches and summed embeddings."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Document
from .tokenizer import Vocab, tokenize

COORD_MAX = 1000
IMAGE_H = 512
IMAGE_W = 384
PATCH = 32
NUM_PATCHES = (IMAGE_H // PATCH) * (IMAGE_W // PATCH)
PATCH_DIM = PATCH * PATCH
VISUAL_LEN = 128


class NormalizedBox(NamedTuple):
    x1: int
    y1: int
    x2: int
    y2: int
    w: int
    h: int


PSEUDO_BOX = NormalizedBox(0, 0, COORD_MAX, COORD_MAX, COORD_MAX, COORD_MAX)


def _round_half_up(q: Fraction) -> int:
    # Exact rational arithmetic so that x.5 always rounds up.
    return int((q + Fraction(1, 2)).__floor__())


def normalize_box(box: Sequence[float], page_width: float, page_height: float) -> NormalizedBox:
    return _normalize_box(tuple(box), page_width, page_height)


@functools.lru_cache(maxsize=65536)
def _normalize_box(box: tuple, page_width: float, page_height: float) -> NormalizedBox:
    if page_width <= 0 or page_height <= 0:
        raise ValueError(f"page dimensions must be positive, got {page_width}x{page_height}")
    x1, y1, x2, y2 = box
    if not (0 <= x1 <= x2 <= page_width and 0 <= y1 <= y2 <= page_height):
        raise ValueError(f"box {tuple(box)} lies outside the {page_width}x{page_height} page")
    fx, fy = Fraction(COORD_MAX) / Fraction(page_width), Fraction(COORD_MAX) / Fraction(page_height)
    x1, y1, x2, y2 = (Fraction(v) for v in (x1, y1, x2, y2))
    return NormalizedBox(
        _round_half_up(x1 * fx),
        _round_half_up(y1 * fy),
        _round_half_up(x2 * fx),
        _round_half_up(y2 * fy),
        _round_half_up((x2 - x1) * fx),
        _round_half_up((y2 - y1) * fy),
    )


@dataclass
class EncoderInput:
    """One assembled example. ``modality`` and ``question_index`` span text + visual positions."""

    token_ids: list[int]
    boxes: list[NormalizedBox]
    modality: list[int]
    question_index: list[int]
    patches: np.ndarray
    num_questions: int

    @property
    def text_len(self) -> int:
        return len(self.token_ids)


class TextBlock(NamedTuple):
    token_ids: list[int]
    boxes: list[NormalizedBox]
    modality: list[int]
    question_index: list[int]


def assemble_text_block(
    questions: Sequence[str],
    doc: Document,
    vocab: Vocab,
    max_text_len: int,
    n_max: int | None = None,
    sep_between_questions: bool = False,
    allow_no_questions: bool = False,
) -> TextBlock:
    """Lay out ``Q1 .. Qn [SEP] OCR [SEP]``; only OCR tokens are ever truncated."""
    if not questions and not allow_no_questions:
        raise ValueError("at least one question is required")
    if n_max is not None and len(questions) > n_max:
        raise ValueError(f"{len(questions)} questions exceed n_max={n_max}")

    ids: list[int] = []
    qidx: list[int] = []
    for i, q in enumerate(questions, 1):
        if i > 1 and sep_between_questions:
            ids.append(vocab.sep_id)
            qidx.append(0)
        q_ids = tokenize(q, vocab)
        if not q_ids:
            raise ValueError(f"question {i} is empty")
        ids.extend(q_ids)
        qidx.extend([i] * len(q_ids))
    lead_sep = 1 if questions else 0
    if len(ids) + lead_sep + 1 > max_text_len:
        raise ValueError(
            f"questions use {len(ids)} tokens; max_text_len={max_text_len} cannot hold them plus separators"
        )
    boxes = [PSEUDO_BOX] * len(ids)
    if questions:
        ids.append(vocab.sep_id)
        qidx.append(0)
        boxes.append(PSEUDO_BOX)

    budget = max_text_len - len(ids) - 1
    for tok in doc.tokens[:budget]:
        ids.append(tokenize(tok.text, vocab)[0] if tok.text.split() else vocab.unk_id)
        qidx.append(0)
        boxes.append(normalize_box(tok.box, doc.page_width, doc.page_height))
    ids.append(vocab.sep_id)
    qidx.append(0)
    boxes.append(PSEUDO_BOX)
    return TextBlock(ids, boxes, [0] * len(ids), qidx)


def patchify(image: np.ndarray, target_h: int = IMAGE_H, target_w: int = IMAGE_W) -> np.ndarray:
    """Nearest-neighbour resize, then split row-major into flattened 32x32 patches."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    h, w = image.shape
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    resized = image[rows[:, None], cols[None, :]]
    gh, gw = target_h // PATCH, target_w // PATCH
    patches = resized.reshape(gh, PATCH, gw, PATCH).transpose(0, 2, 1, 3)
    return patches.reshape(gh * gw, PATCH * PATCH)


def patch_boxes(target_h: int = IMAGE_H, target_w: int = IMAGE_W) -> list[NormalizedBox]:
    boxes = []
    for r in range(target_h // PATCH):
        for c in range(target_w // PATCH):
            px = (c * PATCH, r * PATCH, (c + 1) * PATCH, (r + 1) * PATCH)
            boxes.append(normalize_box(px, target_w, target_h))
    return boxes


def build_encoder_input(
    questions: Sequence[str],
    doc: Document,
    vocab: Vocab,
    max_text_len: int,
    n_max: int | None = None,
    patches: np.ndarray | None = None,
    sep_between_questions: bool = False,
    allow_no_questions: bool = False,
) -> EncoderInput:
    block = assemble_text_block(
        questions, doc, vocab, max_text_len, n_max, sep_between_questions, allow_no_questions
    )
    if patches is None:
        patches = patchify(doc.image)
    return EncoderInput(
        token_ids=block.token_ids,
        boxes=block.boxes,
        modality=block.modality + [1] * VISUAL_LEN,
        question_index=block.question_index + [0] * VISUAL_LEN,
        patches=patches,
        num_questions=len(questions),
    )


def collate(inputs: Sequence[EncoderInput], pad_id: int, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Pad a list of inputs to a common text length; visual positions follow the text."""
    if not inputs:
        raise ValueError("empty batch")
    t = max(x.text_len for x in inputs)
    b = len(inputs)
    ids = torch.full((b, t), pad_id, dtype=torch.long)
    boxes = torch.zeros((b, t, 6), dtype=torch.long)
    qidx = torch.zeros((b, t + VISUAL_LEN), dtype=torch.long)
    modality = torch.zeros((b, t + VISUAL_LEN), dtype=torch.long)
    mask = torch.zeros((b, t + VISUAL_LEN), dtype=torch.bool)
    for i, x in enumerate(inputs):
        n = x.text_len
        ids[i, :n] = torch.tensor(x.token_ids)
        boxes[i, :n] = torch.tensor(x.boxes)
        qidx[i, :n] = torch.tensor(x.question_index[:n])
        qidx[i, t:] = torch.tensor(x.question_index[n:])
        modality[i, :n] = torch.tensor(x.modality[:n])
        modality[i, t:] = torch.tensor(x.modality[n:])
        mask[i, :n] = True
        mask[i, t:] = True
    patches = torch.as_tensor(np.stack([x.patches for x in inputs]), dtype=dtype)
    return {
        "token_ids": ids,
        "boxes": boxes,
        "question_index": qidx,
        "modality": modality,
        "mask": mask,
        "patches": patches,
    }


class EmbeddingTables(nn.Module):
    """Token, layout, modality and question-index tables plus the patch pathway."""

    def __init__(self, vocab_size: int, d_emb: int, n_max: int, use_question_index: bool = True):
        super().__init__()
        self.d_emb = d_emb
        self.n_max = n_max
        self.use_question_index = use_question_index
        self.token = nn.Embedding(vocab_size, d_emb)
        self.layout = nn.ModuleList(nn.Embedding(COORD_MAX + 1, d_emb) for _ in range(6))
        self.modality = nn.Embedding(2, d_emb)
        self.question_index = nn.Embedding(n_max + 1, d_emb)
        self.patch_proj = nn.Linear(PATCH_DIM, d_emb)
        self.patch_norm = nn.LayerNorm(d_emb)
        self.visual_squeeze = nn.Linear(NUM_PATCHES, VISUAL_LEN)
        self.layout_squeeze = nn.Linear(NUM_PATCHES, VISUAL_LEN)
        self.register_buffer("patch_boxes", torch.tensor(patch_boxes()), persistent=False)
        # Unit-scale text embeddings match the layer-normalized visual tokens; with
        # small tables the visual positions swamp each text token's identity.
        for table in [self.token, self.modality, self.question_index]:
            nn.init.normal_(table.weight, std=1.0)
        for table in self.layout:
            nn.init.normal_(table.weight, std=6 ** -0.5)

    def layout_sum(self, boxes: torch.Tensor) -> torch.Tensor:
        out = self.layout[0](boxes[..., 0])
        for c in range(1, 6):
            out = out + self.layout[c](boxes[..., c])
        return out

    def forward(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        ids, boxes = batch["token_ids"], batch["boxes"]
        if boxes.numel() and (boxes.min() < 0 or boxes.max() > COORD_MAX):
            raise ValueError("layout coordinate outside [0, 1000]")
        qidx = batch["question_index"]
        if qidx.numel() and qidx.max() > self.n_max:
            raise ValueError(f"question index {int(qidx.max())} exceeds table capacity {self.n_max}")
        t = ids.shape[1]

        text = self.token(ids) + self.layout_sum(boxes)
        patches = batch["patches"].to(self.patch_proj.weight.dtype)
        vis = self.patch_norm(self.patch_proj(patches))
        vis = self.visual_squeeze(vis.transpose(1, 2)).transpose(1, 2)
        vis_layout = self.layout_squeeze(self.layout_sum(self.patch_boxes).T).T
        vis = vis + vis_layout.unsqueeze(0)

        x = torch.cat([text, vis], dim=1) + self.modality(batch["modality"])
        if self.use_question_index:
            x = x + self.question_index(qidx)
        assert x.shape[1] == t + VISUAL_LEN
        return x


def embed(inp: EncoderInput, tables: EmbeddingTables, pad_id: int = 0) -> torch.Tensor:
    """Embed a single input; returns ``(text_len + 128, d_emb)``."""
    dtype = tables.token.weight.dtype
    return tables(collate([inp], pad_id, dtype))[0]
