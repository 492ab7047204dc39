"""Attention cost model for the three decoding strategies, plus an instrumented timing harness.

Units are attention score-matrix entries (query x key pairs) of one layer.
Decoder units add self- and cross-attention entries over every decode step.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import torch

from .model import AttentionCounter, MQMAModel, Strategy

CSV_FIELDS = ["strategy", "n", "L_Q", "L_C", "L_A", "encoder_units", "decoder_units", "seq_steps", "median_ms"]


@dataclass(frozen=True)
class CostParams:
    n: int
    L_Q: int
    L_C: int
    L_A: int
    prompt_len: int = 1

    def __post_init__(self):
        if min(self.n, self.L_Q, self.L_C, self.L_A, self.prompt_len) < 1:
            raise ValueError(f"cost parameters must all be >= 1: {self}")


@dataclass
class CostReport:
    strategy: Strategy
    params: CostParams
    encoder_units: int
    decoder_units: int
    seq_steps: int
    encoder_ms: float | None = None
    decoder_ms: float | None = None

    @property
    def median_ms(self) -> float | None:
        if self.encoder_ms is None or self.decoder_ms is None:
            return None
        return self.encoder_ms + self.decoder_ms

    def row(self) -> dict:
        p = self.params
        return {
            "strategy": self.strategy.value,
            "n": p.n,
            "L_Q": p.L_Q,
            "L_C": p.L_C,
            "L_A": p.L_A,
            "encoder_units": self.encoder_units,
            "decoder_units": self.decoder_units,
            "seq_steps": self.seq_steps,
            "median_ms": "" if self.median_ms is None else f"{self.median_ms:.4f}",
        }


def analytic_cost(params: CostParams, strategy: Strategy) -> CostReport:
    """Closed-form per-layer attention entries.

    ``prompt_len`` > 1 lengthens each prompt-parallel decoder sequence to
    ``prompt_len + L_A - 1`` positions; the default of 1 gives the plain formulas.
    """
    strategy = Strategy(strategy)
    n, lq, lc, la = params.n, params.L_Q, params.L_C, params.L_A
    if strategy is Strategy.SQSA:
        enc = n * (lq + lc) ** 2
        dec = n * (la**2 + la * (lq + lc))
        steps = la
    elif strategy is Strategy.NAIVE_CONCAT:
        enc = (n * lq + lc) ** 2
        dec = (n * la) ** 2 + (n * la) * (n * lq + lc)
        steps = n * la
    else:
        enc = (n * lq + lc) ** 2
        t = params.prompt_len + la - 1
        dec = n * (t**2 + t * (n * lq + lc))
        steps = la
    return CostReport(strategy, params, enc, dec, steps)


def _layer_units(counter: AttentionCounter) -> tuple[int, int]:
    return counter["enc0.self"], counter["dec0.self"] + counter["dec0.cross"]


class _Run:
    """One image's worth of encoder and decoder work for a strategy, on fixed inputs."""

    def __init__(self, model: MQMAModel, params: CostParams, strategy: Strategy, seed: int = 0):
        self.model, self.params, self.strategy = model, params, strategy
        g = torch.Generator().manual_seed(seed)
        d = model.cfg.d_emb
        dt = model.dtype
        self.questions = torch.randn(params.n, params.L_Q, d, generator=g).to(dt)
        self.content = torch.randn(1, params.L_C, d, generator=g).to(dt)
        if strategy is Strategy.PROMPT_PARALLEL and params.prompt_len != model.cfg.prompt_len:
            raise ValueError("params.prompt_len must match the model's prompt length")

    def encoder_inputs(self) -> list[torch.Tensor]:
        if self.strategy is Strategy.SQSA:
            return [torch.cat([self.questions[i : i + 1], self.content], dim=1) for i in range(self.params.n)]
        q = self.questions.reshape(1, -1, self.questions.shape[-1])
        return [torch.cat([q, self.content], dim=1)]

    @torch.no_grad()
    def encode(self) -> list[torch.Tensor]:
        return [self.model.encode(x) for x in self.encoder_inputs()]

    @torch.no_grad()
    def decode(self, states: list[torch.Tensor]) -> None:
        m, p = self.model, self.params
        if self.strategy is Strategy.SQSA:
            for enc in states:
                keep = torch.ones(enc.shape[:2], dtype=torch.bool)
                m.greedy(enc, keep, m.start_embeddings(1), p.L_A, stop_at_eos=False)
        elif self.strategy is Strategy.NAIVE_CONCAT:
            enc = states[0]
            keep = torch.ones(enc.shape[:2], dtype=torch.bool)
            m.greedy(enc, keep, m.start_embeddings(1), p.n * p.L_A, stop_at_eos=False)
        else:
            enc = states[0]
            keep = torch.ones(enc.shape[:2], dtype=torch.bool)
            m.greedy(enc, keep, m.prompt_embeddings(range(p.n)), p.L_A, stop_at_eos=False)


def count_units(model: MQMAModel, params: CostParams, strategy: Strategy) -> tuple[int, int]:
    """Instrumented per-layer (encoder, decoder) attention entries for one run."""
    strategy = Strategy(strategy)
    run = _Run(model, params, strategy)
    counter = AttentionCounter()
    model.set_counter(counter)
    try:
        run.decode(run.encode())
    finally:
        model.set_counter(None)
    return _layer_units(counter)


def empirical_bench(
    model: MQMAModel,
    params: CostParams,
    strategy: Strategy,
    repeats: int = 5,
    warmup: int = 2,
) -> CostReport:
    """Median encoder/decoder wall time over ``repeats`` runs, with instrumented unit counts."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    strategy = Strategy(strategy)
    if strategy is Strategy.PROMPT_PARALLEL and params.n > model.cfg.n_max:
        raise ValueError(f"n={params.n} exceeds the model's n_max={model.cfg.n_max}")
    model.eval()
    enc_units, dec_units = count_units(model, params, strategy)
    run = _Run(model, params, strategy)
    enc_times, dec_times = [], []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        states = run.encode()
        t1 = time.perf_counter()
        run.decode(states)
        t2 = time.perf_counter()
        if i >= warmup:
            enc_times.append((t1 - t0) * 1e3)
            dec_times.append((t2 - t1) * 1e3)
    steps = params.n * params.L_A if strategy is Strategy.NAIVE_CONCAT else params.L_A
    return CostReport(
        strategy,
        params,
        enc_units,
        dec_units,
        steps,
        statistics.median(enc_times),
        statistics.median(dec_times),
    )


def write_csv(reports: Iterable[CostReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def interleaved_decoder_ms(
    model: MQMAModel, params: CostParams, strategies: Iterable[Strategy], repeats: int = 30, warmup: int = 3
) -> dict[Strategy, float]:
    """Median decoder time per strategy, alternating strategies within each round.

    Alternating keeps slow drift of a shared machine from favouring whichever
    strategy happened to be timed first.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    model.eval()
    runs = {Strategy(s): _Run(model, params, Strategy(s)) for s in strategies}
    states = {s: r.encode() for s, r in runs.items()}
    times: dict[Strategy, list[float]] = {s: [] for s in runs}
    for i in range(warmup + repeats):
        for s, r in runs.items():
            t0 = time.perf_counter()
            r.decode(states[s])
            if i >= warmup:
                times[s].append((time.perf_counter() - t0) * 1e3)
    return {s: statistics.median(v) for s, v in times.items()}
