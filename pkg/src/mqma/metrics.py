"""Levenshtein distance, ANLS and consensus VQA accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over code points (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalize_answer(s: str) -> str:
    return " ".join(s.lower().split())


def normalized_levenshtein(a: str, b: str) -> float:
    a, b = normalize_answer(a), normalize_answer(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def anls_score(pred: str, gts: Iterable[str], tau: float = 0.5) -> float:
    gts = list(gts)
    if not gts:
        raise ValueError("ANLS needs at least one ground-truth answer")
    best = 0.0
    for gt in gts:
        nl = normalized_levenshtein(pred, gt)
        best = max(best, 1.0 - nl if nl < tau else 0.0)
    return best


def vqa_accuracy(pred: str, gts: Sequence[str]) -> float:
    """min(#matching annotator answers / 3, 1)."""
    if not gts:
        raise ValueError("VQA accuracy needs at least one ground-truth answer")
    p = normalize_answer(pred)
    matches = sum(normalize_answer(g) == p for g in gts)
    return min(matches / 3.0, 1.0) if len(gts) > 1 else float(matches > 0)


@dataclass
class EvalRecord:
    question_id: str
    prediction: str
    answers: tuple[str, ...]
    anls: float
    vqa_acc: float

    @property
    def best_gt(self) -> str:
        return max(self.answers, key=lambda g: (1.0 - normalized_levenshtein(self.prediction, g), -len(g)))


def score(question_id: str, prediction: str, answers: Sequence[str]) -> EvalRecord:
    return EvalRecord(question_id, prediction, tuple(answers), anls_score(prediction, answers), vqa_accuracy(prediction, answers))


def write_report(records: Iterable[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["question_id", "prediction", "best_gt", "anls", "vqa_acc"])
        for r in records:
            w.writerow([r.question_id, r.prediction, r.best_gt, f"{r.anls:.6f}", f"{r.vqa_acc:.6f}"])


def mean(values: Iterable[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0
