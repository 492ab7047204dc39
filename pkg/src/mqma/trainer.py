"""Pre-training, fine-tuning and evaluation loops over synthetic corpora."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment
from .augment import AugmentConfig, QuestionBatch
from .corpus import Document, qa_template_words
from .denoise import make_mqma_example, make_standard_example, mask_page, mask_spans, template_words
from .encoding import EncoderInput, build_encoder_input, patchify
from .metrics import EvalRecord, mean, score, write_report
from .model import MQMAModel, ModelConfig, Strategy, load_checkpoint, prompt_words, save_checkpoint, training_loss
from .tokenizer import Vocab, build_vocab, detokenize, tokenize

log = logging.getLogger(__name__)

STANDARD = "standard"
MQMA = "mqma"

# Full-scale optimizer settings, kept for reference; the desk defaults below are what runs.
FULL_SCALE_PROFILE = {"d_emb": 768, "n_layers_enc": 12, "n_layers_dec": 12, "n_heads": 12, "lr": 1e-4, "batch_size": 128}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    num_masks: int = 5
    mask_ratio: float = 0.15
    max_span_len: int = 3


FINETUNE_DESK = {"steps": 1000, "lr": 1e-3}


@dataclass
class TrainResult:
    model: MQMAModel
    vocab: Vocab
    losses: list[float]
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


class PatchCache:
    """Patchified images per document id; masking never touches the image."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, doc: Document) -> np.ndarray:
        p = self._cache.get(doc.id)
        if p is None:
            p = self._cache[doc.id] = patchify(doc.image).astype(np.float32)
        return p


def corpus_vocab(docs: Sequence[Document], max_size: int = 512, n_max: int = 5) -> Vocab:
    """Vocabulary over the corpus plus every word the prompts and templates need."""
    required = []
    for w in prompt_words(n_max) + template_words() + qa_template_words():
        if w not in required:
            required.append(w)
    return build_vocab(docs, max_size, required=required)


def write_loss_curve(losses: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, f"{loss:.6f}"])


def _schedule(cfg: TrainConfig) -> Callable[[int], float]:
    warm = max(1, math.ceil(cfg.warmup_frac * cfg.steps))
    return lambda step: min(1.0, (step + 1) / warm)


Batch = tuple[list[EncoderInput], list[list[list[int]]], Strategy]


def _train(model: MQMAModel, cfg: TrainConfig, next_batch: Callable[[int], Batch]) -> list[float]:
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _schedule(cfg))
    model.train()
    losses = []
    for step in range(1, cfg.steps + 1):
        inputs, targets, strategy = next_batch(step)
        loss = training_loss(model, inputs, targets, strategy)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        sched.step()
        losses.append(value)
        if step % 50 == 0 or step == 1:
            log.info("step %d loss %.4f", step, value)
    model.eval()
    return losses


def denoise_sample(
    doc: Document, task: str, vocab: Vocab, mcfg: ModelConfig, tcfg: TrainConfig, seed: int, patches: PatchCache
) -> tuple[EncoderInput, list[list[int]]]:
    """One pre-training example built from ``doc`` with masking seeded by ``seed``."""
    masked, spans = mask_spans(doc.words, seed, tcfg.num_masks, tcfg.mask_ratio, tcfg.max_span_len)
    page = mask_page(doc, masked, spans)
    if task == STANDARD:
        ex = make_standard_example(masked, spans)
        inp = build_encoder_input([], page, vocab, mcfg.max_text_len, patches=patches(doc), allow_no_questions=True)
        return inp, [tokenize(ex.targets[0], vocab)]
    ex = make_mqma_example(masked, spans, seed)
    inp = build_encoder_input(ex.questions, page, vocab, mcfg.max_text_len, mcfg.n_max, patches=patches(doc))
    return inp, [tokenize(t, vocab) for t in ex.targets]


def pretrain(
    corpus: Sequence[Document],
    task: str = MQMA,
    model_cfg: dict | None = None,
    train_cfg: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Denoising pre-training; ``standard`` decodes one sentinel-interleaved target, ``mqma`` one answer per span."""
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    if task not in (STANDARD, MQMA):
        raise ValueError(f"unknown pre-training task {task!r}")
    tcfg = train_cfg or TrainConfig()
    overrides = dict(model_cfg or {})
    vocab = vocab or corpus_vocab(corpus, overrides.pop("vocab_max_size", 512), overrides.get("n_max", 5))
    mcfg = ModelConfig(vocab_size=len(vocab), **overrides)
    if task == MQMA and tcfg.num_masks > mcfg.n_max:
        raise ValueError(f"num_masks={tcfg.num_masks} exceeds n_max={mcfg.n_max}")

    torch.manual_seed(tcfg.seed)
    model = MQMAModel(mcfg, vocab)
    rng = random.Random(tcfg.seed)
    docs = [d for d in corpus if d.tokens]
    if not docs:
        raise ValueError("pre-training corpus has no tokens")
    strategy = Strategy.SQSA if task == STANDARD else Strategy.PROMPT_PARALLEL
    patches = PatchCache()

    def next_batch(step: int) -> Batch:
        inputs, targets = [], []
        for _ in range(tcfg.batch_size):
            doc = rng.choice(docs)
            inp, tgt = denoise_sample(doc, task, vocab, mcfg, tcfg, rng.randrange(2**31), patches)
            inputs.append(inp)
            targets.append(tgt)
        return inputs, targets, strategy

    losses = _train(model, tcfg, next_batch)
    result = TrainResult(model, vocab, losses, extra={"task": task, "train": asdict(tcfg)})
    if out_dir is not None:
        _save(result, Path(out_dir), "pretrain")
    return result


def _save(result: TrainResult, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint = out / f"{name}.pt"
    save_checkpoint(result.checkpoint, result.model, result.vocab, result.extra)
    write_loss_curve(result.losses, out / f"{name}_loss.csv")


def _qa_input(batch: QuestionBatch, vocab: Vocab, cfg: ModelConfig, patches: PatchCache) -> EncoderInput:
    return build_encoder_input(batch.questions, batch.doc, vocab, cfg.max_text_len, cfg.n_max, patches=patches(batch.doc))


def _answer_ids(batch: QuestionBatch, vocab: Vocab) -> list[list[int]]:
    # The first listed answer is the training target.
    return [tokenize(item.answers[0], vocab) for item in batch.items]


def question_sampler(docs: Sequence[Document], n: int, mode: str, seed: int) -> Callable[[], QuestionBatch]:
    """Endless source of question batches; the only thing static and dynamic runs disagree on."""
    acfg = AugmentConfig(n, mode, seed)
    if mode == augment.STATIC:
        pool = [b for d in docs for b in augment.static_batches(d, acfg)]
        if not pool:
            raise ValueError("no question batches to draw from")
        it = itertools.cycle(pool)
        return lambda: next(it)
    rng = random.Random(seed)
    return lambda: augment.sample_training_batch(rng.choice(docs), acfg, rng)


def finetune(
    checkpoint: str | Path | TrainResult,
    corpus: Sequence[Document],
    n: int,
    mode: str = augment.DYNAMIC,
    train_cfg: TrainConfig | None = None,
    use_question_index: bool = True,
    freeze_prompts: bool = False,
    strategy: Strategy = Strategy.PROMPT_PARALLEL,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Fine-tune on QA documents with dynamic or static question batches."""
    tcfg = train_cfg or TrainConfig(**FINETUNE_DESK)
    overrides = {"use_question_index_embeddings": use_question_index, "freeze_prompts": freeze_prompts}
    if isinstance(checkpoint, TrainResult):
        model = MQMAModel(ModelConfig.from_dict({**asdict(checkpoint.model.cfg), **overrides}))
        model.load_state_dict(checkpoint.model.state_dict())
        vocab = checkpoint.vocab
    else:
        model, vocab, _ = load_checkpoint(checkpoint, **overrides)
    cfg = model.cfg
    if n > cfg.n_max:
        raise ValueError(f"n={n} exceeds the checkpoint's n_max={cfg.n_max}")
    strategy = Strategy(strategy)
    if strategy is Strategy.SQSA and n != 1:
        raise ValueError("SQSA fine-tuning uses one question per example (n=1)")
    docs = [d for d in corpus if d.qa_items]
    if not docs:
        raise ValueError("fine-tuning corpus has no question-answer items")

    draw = question_sampler(docs, n, mode, tcfg.seed)
    patches = PatchCache()

    def next_batch(step: int) -> Batch:
        batches = [draw() for _ in range(tcfg.batch_size)]
        inputs = [_qa_input(b, vocab, cfg, patches) for b in batches]
        return inputs, [_answer_ids(b, vocab) for b in batches], strategy

    torch.manual_seed(tcfg.seed)
    losses = _train(model, tcfg, next_batch)
    extra = {"n": n, "mode": mode, "train": asdict(tcfg), "strategy": strategy.value}
    result = TrainResult(model, vocab, losses, extra=extra)
    if out_dir is not None:
        _save(result, Path(out_dir), "finetune")
    return result


@dataclass
class EvalReport:
    records: list[EvalRecord]
    anls: float
    vqa_acc: float
    path: Path | None = None

    def metric(self, name: str) -> float:
        if name not in ("anls", "vqa_acc"):
            raise ValueError(f"unknown metric {name!r}")
        return getattr(self, name)


def question_id(doc: Document, index: int) -> str:
    return f"{doc.id}#q{index}"


@torch.no_grad()
def predict(
    model: MQMAModel,
    vocab: Vocab,
    corpus: Sequence[Document],
    n: int,
    sqsa: bool = False,
    chunk: int = 32,
) -> dict[str, str]:
    """Decoded answer text per question id, batching every ``n`` questions per pass."""
    cfg = model.cfg
    if sqsa and n != 1:
        raise ValueError("SQSA decoding takes one question per pass (n=1)")
    if n > cfg.n_max:
        raise ValueError(f"n={n} exceeds the model's n_max={cfg.n_max}")
    model.eval()
    patches = PatchCache()
    batches = [b for d in corpus for b in augment.inference_batches(d, n)]
    skip = set(vocab.special_ids.values())
    out: dict[str, str] = {}
    for s in range(0, len(batches), chunk):
        group = batches[s : s + chunk]
        enc, keep = model.encode_inputs([_qa_input(b, vocab, cfg, patches) for b in group])
        # One decoder stream per question, each attending to its own batch's encoding.
        rows = torch.tensor([i for i, b in enumerate(group) for _ in range(len(b))])
        if sqsa:
            start = model.start_embeddings(len(rows))
        else:
            start = torch.cat([model.prompt_embeddings(range(len(b))) for b in group])
        decoded = model.greedy(enc[rows], keep[rows], start, cfg.max_answer_len)
        k = 0
        for b in group:
            for idx in b.indices:
                out[question_id(b.doc, idx)] = detokenize(decoded[k], vocab, skip=skip)
                k += 1
    return out


def evaluate(
    checkpoint: str | Path | TrainResult,
    corpus: Sequence[Document],
    n: int,
    sqsa: bool = False,
    out_path: str | Path | None = None,
) -> EvalReport:
    """Score every question exactly once with ANLS and VQA accuracy; optionally write the CSV."""
    if isinstance(checkpoint, TrainResult):
        model, vocab = checkpoint.model, checkpoint.vocab
    else:
        model, vocab, _ = load_checkpoint(checkpoint)
    preds = predict(model, vocab, corpus, n, sqsa)
    records = []
    for doc in corpus:
        for i, qa in enumerate(doc.qa_items):
            qid = question_id(doc, i)
            records.append(score(qid, preds[qid], qa.answers))
    if len(preds) != len(records):
        raise RuntimeError("evaluation did not score every question exactly once")
    report = EvalReport(records, mean(r.anls for r in records), mean(r.vqa_acc for r in records))
    if out_path is not None:
        report.path = Path(out_path)
        report.path.parent.mkdir(parents=True, exist_ok=True)
        write_report(records, report.path)
    return report
