"""Toy multi-modal encoder-decoder with SQSA, naive-concat and prompt-parallel decoding."""

from __future__ import annotations

import enum
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoding import EmbeddingTables, EncoderInput, collate
from .tokenizer import Vocab, tokenize

CHECKPOINT_FORMAT = "mqma-checkpoint/1"


class Strategy(str, enum.Enum):
    SQSA = "sqsa"
    NAIVE_CONCAT = "naive_concat"
    PROMPT_PARALLEL = "prompt_parallel"


def prompt_phrase(i: int) -> str:
    return f"answer of question {i}:"


def prompt_words(n_max: int) -> list[str]:
    words: list[str] = []
    for i in range(1, n_max + 1):
        for w in prompt_phrase(i).split():
            if w not in words:
                words.append(w)
    return words


@dataclass
class ModelConfig:
    vocab_size: int
    d_emb: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    n_max: int = 5
    max_answer_len: int = 8
    max_text_len: int = 128
    prompt_len: int = 4
    dropout: float = 0.0
    precision: str = "float32"
    use_question_index_embeddings: bool = True
    freeze_prompts: bool = False

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ValueError(f"d_emb={self.d_emb} is not divisible by n_heads={self.n_heads}")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unsupported precision {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def max_decoder_len(self) -> int:
        # Long enough for a prompt or for n_max concatenated answers with separators.
        return max(self.prompt_len, 1) + self.n_max * (self.max_answer_len + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AttentionCounter(Counter):
    """Accumulates attention score-matrix entries (query x key pairs) per layer tag."""

    def per_layer(self, stack: str = "enc") -> dict[str, int]:
        return {k: v for k, v in self.items() if k.startswith(stack)}


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, tag: str, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.d_head = d // heads
        self.tag = tag
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d, bias=False)  # softmax is invariant to a key bias
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)
        self.counter: AttentionCounter | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_head).transpose(1, 2)

    def project_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k(x)), self._split(self.v(x))

    def attend(
        self, x: torch.Tensor, k: torch.Tensor, v: torch.Tensor, keep: torch.Tensor | None
    ) -> torch.Tensor:
        """``keep`` is a boolean mask broadcastable to (B, Lq, Lk); None attends everywhere."""
        b, lq, _ = x.shape
        q = self._split(self.q(x))
        if self.counter is not None:
            self.counter[self.tag] += b * lq * k.shape[-2]
        mask = None if keep is None else keep.unsqueeze(1)
        y = F.scaled_dot_product_attention(
            q, k, v, attn_mask=mask, dropout_p=self.drop.p if self.training else 0.0
        )
        return self.out(y.transpose(1, 2).reshape(b, lq, -1))

    def forward(self, x: torch.Tensor, memory: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        k, v = self.project_kv(memory)
        return self.attend(x, k, v, keep)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float):
        super().__init__()
        self.inp = nn.Linear(d, hidden)
        self.outp = nn.Linear(hidden, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        # GELU rather than ReLU keeps the loss smooth for finite-difference checks.
        return self.outp(self.drop(F.gelu(self.inp(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, idx: int):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_emb, cfg.n_heads, f"enc{idx}.self", cfg.dropout)
        self.ffn = FeedForward(cfg.d_emb, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_emb)
        self.norm2 = nn.LayerNorm(cfg.d_emb)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, keep):
        x = self.norm1(x + self.drop(self.attn(x, x, keep)))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, idx: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_emb, cfg.n_heads, f"dec{idx}.self", cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.d_emb, cfg.n_heads, f"dec{idx}.cross", cfg.dropout)
        self.ffn = FeedForward(cfg.d_emb, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_emb)
        self.norm2 = nn.LayerNorm(cfg.d_emb)
        self.norm3 = nn.LayerNorm(cfg.d_emb)
        self.drop = nn.Dropout(cfg.dropout)
        self.cross_enabled = True

    def _cross(self, x, ck, cv, enc_keep):
        if not self.cross_enabled:
            return torch.zeros_like(x)
        b, n, d = x.shape
        if ck.shape[0] == 1 and b > 1:
            # Shared encoder states: fold the batch into the query axis instead of copying keys.
            keep = None if enc_keep is None else enc_keep[:1]
            y = self.cross_attn.attend(x.reshape(1, b * n, d), ck, cv, keep)
            return y.reshape(b, n, d)
        return self.cross_attn.attend(x, ck, cv, enc_keep)

    def forward(self, x, self_keep, enc, enc_keep):
        x = self.norm1(x + self.drop(self.self_attn(x, x, self_keep)))
        ck, cv = self.cross_attn.project_kv(enc)
        x = self.norm2(x + self.drop(self._cross(x, ck, cv, enc_keep)))
        return self.norm3(x + self.drop(self.ffn(x)))

    def step(self, x, pos: int, cache: dict, self_keep, cross_kv, enc_keep):
        """Process new positions ``pos .. pos+len(x)`` against a fixed-size key/value buffer."""
        k, v = self.self_attn.project_kv(x)
        n = x.shape[1]
        cache["k"][:, :, pos : pos + n] = k
        cache["v"][:, :, pos : pos + n] = v
        x = self.norm1(x + self.self_attn.attend(x, cache["k"], cache["v"], self_keep))
        x = self.norm2(x + self._cross(x, *cross_kv, enc_keep))
        return self.norm3(x + self.ffn(x))


@dataclass
class NaiveDecode:
    answers: list[list[int]]
    malformed: bool
    stream: list[int] = field(default_factory=list)


class MQMAModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab | None = None):
        super().__init__()
        self.cfg = cfg
        self.tables = EmbeddingTables(cfg.vocab_size, cfg.d_emb, cfg.n_max, cfg.use_question_index_embeddings)
        self.encoder = nn.ModuleList(EncoderLayer(cfg, i) for i in range(cfg.n_layers_enc))
        self.decoder = nn.ModuleList(DecoderLayer(cfg, i) for i in range(cfg.n_layers_dec))
        self.dec_pos = nn.Embedding(cfg.max_decoder_len, cfg.d_emb)
        nn.init.normal_(self.dec_pos.weight, std=0.02)
        self.lm_head = nn.Linear(cfg.d_emb, cfg.vocab_size, bias=False)
        self.prompts = nn.Parameter(torch.randn(cfg.n_max, cfg.prompt_len, cfg.d_emb) * 0.02)
        # Special ids follow the fixed reserved layout of the tokenizer.
        self.pad_id, self.start_id, self.eos_id, self.sep_id, self.ans_sep_id = 0, 1, 2, 3, 4
        if vocab is not None:
            self.init_prompts(vocab)
        self.to(cfg.dtype)
        if not cfg.use_question_index_embeddings:
            self.tables.question_index.weight.requires_grad_(False)
        if cfg.freeze_prompts:
            self.prompts.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return self.lm_head.weight.dtype

    @torch.no_grad()
    def init_prompts(self, vocab: Vocab) -> None:
        """Set prompt i to the token embeddings of ``answer of question i:``."""
        for i in range(1, self.cfg.n_max + 1):
            ids = tokenize(prompt_phrase(i), vocab)
            if len(ids) != self.cfg.prompt_len:
                raise ValueError(f"prompt phrase has {len(ids)} tokens, config expects {self.cfg.prompt_len}")
            self.prompts[i - 1] = self.tables.token.weight[ids]

    def set_counter(self, counter: AttentionCounter | None) -> None:
        for m in self.modules():
            if isinstance(m, MultiHeadAttention):
                m.counter = counter

    def set_cross_attention(self, enabled: bool) -> None:
        for layer in self.decoder:
            layer.cross_enabled = enabled

    # encoder

    def embed(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        return self.tables(batch)

    def encode(self, x: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] < 1:
            raise ValueError("encoder input must be (batch, length >= 1, d_emb)")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite encoder input")
        if keep is None:
            keep = torch.ones(x.shape[:2], dtype=torch.bool)
        mask = keep.unsqueeze(1)
        for layer in self.encoder:
            x = layer(x, mask)
        return x

    def encode_inputs(self, inputs: Sequence[EncoderInput]) -> tuple[torch.Tensor, torch.Tensor]:
        batch = collate(inputs, self.pad_id, self.dtype)
        return self.encode(self.embed(batch), batch["mask"]), batch["mask"]

    # decoder

    def start_embeddings(self, batch: int) -> torch.Tensor:
        return self.tables.token.weight[self.start_id].view(1, 1, -1).expand(batch, 1, -1)

    def prompt_embeddings(self, indices: Sequence[int]) -> torch.Tensor:
        """Prompts for 0-based question positions."""
        if any(i < 0 or i >= self.cfg.n_max for i in indices):
            raise ValueError(f"prompt index out of range for n_max={self.cfg.n_max}")
        return self.prompts[list(indices)]

    def _dec_inputs(self, prefix: torch.Tensor, offset: int = 0) -> torch.Tensor:
        t = prefix.shape[1]
        if offset + t > self.cfg.max_decoder_len:
            raise ValueError(f"decoder length {offset + t} exceeds {self.cfg.max_decoder_len}")
        return prefix + self.dec_pos.weight[offset : offset + t]

    def decoder_forward(self, enc: torch.Tensor, enc_keep: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits for every prefix position, ``(B, T, V)``."""
        if not torch.isfinite(prefix).all() or not torch.isfinite(enc).all():
            raise ValueError("non-finite decoder input")
        t = prefix.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool).tril().unsqueeze(0)
        x = self._dec_inputs(prefix)
        ek = enc_keep.unsqueeze(1)
        for layer in self.decoder:
            x = layer(x, causal, enc, ek)
        return self.lm_head(x)

    def decode_step(self, enc: torch.Tensor, enc_keep: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Next-token logits ``(B, V)`` given decoder prefix embeddings ``(B, T, d)``."""
        if prefix.shape[1] < 1:
            raise ValueError("decoder prefix must be non-empty")
        return self.decoder_forward(enc, enc_keep, prefix)[:, -1]

    @torch.no_grad()
    def greedy(
        self,
        enc: torch.Tensor,
        enc_keep: torch.Tensor,
        start: torch.Tensor,
        max_new: int,
        stop_at_eos: bool = True,
    ) -> list[list[int]]:
        """Greedy decode for each row of ``start`` (B, p, d).

        Keys/values live in a fixed buffer of ``p + max_new - 1`` slots; every
        query scores against the whole buffer with future slots masked.
        """
        b, p, d = start.shape
        buf = p + max_new - 1
        slots = torch.arange(buf)
        caches, cross = [], []
        ek = None if bool(enc_keep.all()) else enc_keep.unsqueeze(1)
        for layer in self.decoder:
            shape = (b, layer.self_attn.heads, buf, layer.self_attn.d_head)
            caches.append({"k": enc.new_zeros(shape), "v": enc.new_zeros(shape)})
            # With shared=True the keys stay at batch 1; see DecoderLayer._cross.
            cross.append(layer.cross_attn.project_kv(enc))

        steps: list[torch.Tensor] = []
        done = torch.zeros(b, dtype=torch.bool)
        x_new, pos = start, 0
        for _ in range(max_new):
            n = x_new.shape[1]
            qpos = torch.arange(pos, pos + n)
            keep = (slots.unsqueeze(0) <= qpos.unsqueeze(1)).unsqueeze(0)
            x = self._dec_inputs(x_new, pos)
            for layer, cache, ckv in zip(self.decoder, caches, cross):
                x = layer.step(x, pos, cache, keep, ckv, ek)
            nxt = self.lm_head(x[:, -1]).argmax(-1)
            steps.append(nxt)
            pos += n
            if stop_at_eos:
                done = done | (nxt == self.eos_id)
                if bool(done.all()):
                    break
            if pos >= buf:
                break
            x_new = self.tables.token(nxt).unsqueeze(1)

        out: list[list[int]] = []
        for row in torch.stack(steps, dim=1).tolist():
            if stop_at_eos and self.eos_id in row:
                row = row[: row.index(self.eos_id)]
            out.append(row)
        return out

    def decode_sqsa(self, enc, enc_keep, max_len: int | None = None, stop_at_eos: bool = True) -> list[int]:
        max_len = max_len or self.cfg.max_answer_len
        return self.greedy(enc[:1], enc_keep[:1], self.start_embeddings(1), max_len, stop_at_eos)[0]

    def decode_prompt_parallel(
        self,
        enc,
        enc_keep,
        n: int | None = None,
        prompts: torch.Tensor | None = None,
        max_len: int | None = None,
        stop_at_eos: bool = True,
    ) -> list[list[int]]:
        if prompts is None:
            if n is None:
                raise ValueError("give either n or prompts")
            if n > self.cfg.n_max:
                raise ValueError(f"n={n} exceeds n_max={self.cfg.n_max}")
            prompts = self.prompt_embeddings(range(n))
        elif prompts.shape[0] > self.cfg.n_max:
            raise ValueError(f"{prompts.shape[0]} prompts exceed n_max={self.cfg.n_max}")
        if prompts.shape[0] < 1:
            raise ValueError("need at least one prompt")
        max_len = max_len or self.cfg.max_answer_len
        return self.greedy(enc[:1], enc_keep[:1], prompts, max_len, stop_at_eos)

    def decode_naive_concat(
        self, enc, enc_keep, n: int, max_len: int | None = None, stop_at_eos: bool = True
    ) -> NaiveDecode:
        if n < 1:
            raise ValueError("n must be >= 1")
        max_len = max_len or self.cfg.max_answer_len
        stream = self.greedy(enc[:1], enc_keep[:1], self.start_embeddings(1), n * (max_len + 1), stop_at_eos)[0]
        return split_concatenated(stream, n, self.ans_sep_id)


def split_concatenated(stream: Sequence[int], n: int, ans_sep_id: int) -> NaiveDecode:
    answers: list[list[int]] = [[]]
    for tok in stream:
        if tok == ans_sep_id:
            answers.append([])
        else:
            answers[-1].append(tok)
    malformed = len(answers) != n
    answers = answers[:n] + [[] for _ in range(n - len(answers))]
    return NaiveDecode(answers, malformed, list(stream))


# training


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    m = mask.reshape(-1).to(nll.dtype)
    return (nll * m).sum() / m.sum()


def _streams(targets, strategy: Strategy, ans_sep_id: int, eos_id: int):
    """Yield (example index, prompt index or None for [START], target ids ending in [EOS])."""
    for b, answers in enumerate(targets):
        if not answers:
            raise ValueError(f"example {b} has no target answers")
        if strategy is Strategy.PROMPT_PARALLEL:
            for i, ans in enumerate(answers):
                yield b, i, list(ans) + [eos_id]
        elif strategy is Strategy.NAIVE_CONCAT:
            joined: list[int] = []
            for i, ans in enumerate(answers):
                if i:
                    joined.append(ans_sep_id)
                joined.extend(ans)
            yield b, None, joined + [eos_id]
        else:
            if len(answers) != 1:
                raise ValueError("SQSA examples carry exactly one target")
            yield b, None, list(answers[0]) + [eos_id]


def training_loss(
    model: MQMAModel,
    inputs: Sequence[EncoderInput],
    targets: Sequence[Sequence[Sequence[int]]],
    strategy: Strategy = Strategy.PROMPT_PARALLEL,
) -> torch.Tensor:
    """Teacher-forced mean token cross-entropy over every answer of every example."""
    if not inputs:
        raise ValueError("empty batch")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    strategy = Strategy(strategy)
    enc, enc_keep = model.encode_inputs(inputs)
    streams = list(_streams(targets, strategy, model.ans_sep_id, model.eos_id))

    p = model.cfg.prompt_len if strategy is Strategy.PROMPT_PARALLEL else 1
    t = p + max(len(tgt) for _, _, tgt in streams) - 1
    s = len(streams)
    gold = torch.full((s, t), model.pad_id, dtype=torch.long)
    inp_ids = torch.full((s, t), model.pad_id, dtype=torch.long)
    loss_mask = torch.zeros((s, t), dtype=torch.bool)
    starts = []
    for j, (_, prompt, tgt) in enumerate(streams):
        starts.append(model.start_embeddings(1)[0] if prompt is None else model.prompts[prompt])
        gold[j, p - 1 : p - 1 + len(tgt)] = torch.tensor(tgt)
        loss_mask[j, p - 1 : p - 1 + len(tgt)] = True
        inp_ids[j, p : p + len(tgt) - 1] = torch.tensor(tgt[:-1], dtype=torch.long)
    tok = model.tables.token(inp_ids[:, p:])
    prefix = torch.cat([torch.stack(starts), tok], dim=1)

    index = torch.tensor([b for b, _, _ in streams])
    logits = model.decoder_forward(enc[index], enc_keep[index], prefix)
    return masked_cross_entropy(logits, gold, loss_mask)


def grad_check(
    model: MQMAModel,
    inputs: Sequence[EncoderInput],
    targets,
    strategy: Strategy = Strategy.PROMPT_PARALLEL,
    epsilon: float = 1e-3,
    num_samples: int = 240,
    seed: int = 0,
    floor: float = 1e-6,
    stencil: int = 5,
) -> dict:
    """Compare autograd gradients with central differences on sampled scalars.

    ``stencil`` is 3 (the classic ``(f(x+h) - f(x-h)) / 2h``) or 5 (the
    fourth-order rule, whose truncation error stays far below 1e-5 even where
    a LayerNorm makes the loss sharply curved).

    Samples are spread over every trainable tensor; where a tensor has non-zero
    gradient entries (e.g. embedding rows actually looked up) half of its
    samples come from those. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if model.dtype != torch.float64:
        raise ValueError("grad_check needs a float64 model")
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss = training_loss(model, inputs, targets, strategy)
    loss.backward()
    rng = random.Random(seed)
    per_tensor = max(2, math.ceil(num_samples / len(named)))

    picks: list[tuple[str, torch.Tensor, int]] = []
    for name, p in named:
        g = p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        nonzero = torch.nonzero(g).reshape(-1).tolist()
        chosen = set()
        if nonzero:
            chosen.update(rng.sample(nonzero, min(len(nonzero), per_tensor // 2 + per_tensor % 2)))
        while len(chosen) < min(per_tensor, p.numel()):
            chosen.add(rng.randrange(p.numel()))
        picks.extend((name, p, i) for i in sorted(chosen))

    worst, rows = 0.0, []
    with torch.no_grad():
        for name, p, i in picks:
            flat = p.data.view(-1)
            analytic = float(p.grad.view(-1)[i]) if p.grad is not None else 0.0
            orig = float(flat[i])

            def at(step):
                flat[i] = orig + step
                return float(training_loss(model, inputs, targets, strategy))

            if stencil == 3:
                numeric = (at(epsilon) - at(-epsilon)) / (2 * epsilon)
            else:
                numeric = (8 * (at(epsilon) - at(-epsilon)) - (at(2 * epsilon) - at(-2 * epsilon))) / (12 * epsilon)
            flat[i] = orig
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
            rows.append((name, i, analytic, numeric, err))
    model.zero_grad()
    return {
        "max_rel_error": worst,
        "num_checked": len(rows),
        "tensors": sorted({r[0] for r in rows}),
        "rows": rows,
    }


# checkpoints


def save_checkpoint(path: str | Path, model: MQMAModel, vocab: Vocab, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(model.cfg),
            "vocab": list(vocab.id_to_token),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path, **overrides) -> tuple[MQMAModel, Vocab, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    cfg = ModelConfig.from_dict({**blob["config"], **overrides})
    vocab = Vocab.from_tokens(blob["vocab"])
    model = MQMAModel(cfg)
    model.load_state_dict(blob["state_dict"])
    return model, vocab, blob.get("extra", {})
