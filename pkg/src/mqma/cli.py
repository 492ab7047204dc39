"""Command-line entry point: ``mqma <subcommand> [--config FILE] [flags] --out DIR``.

Config files hold one ``key = value`` per line (``#`` starts a comment). Keys are
flag names with dashes or underscores; flags given on the command line win.
The ``MQMA_SEED`` environment variable sets the default seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import augment, bench, trainer
from .corpus import attach_synthetic_qa, generate_corpus, load_documents, save_documents
from .encoding import build_encoder_input
from .model import MQMAModel, ModelConfig, Strategy, load_checkpoint
from .tokenizer import Vocab, tokenize

log = logging.getLogger("mqma")

MODEL_KEYS = ("d_emb", "n_layers_enc", "n_layers_dec", "n_heads", "ffn_dim", "n_max", "max_answer_len", "max_text_len")


class UsageError(Exception):
    pass


def _bool(text: str | bool) -> bool:
    if isinstance(text, bool):
        return text
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _default_seed() -> int:
    env = os.environ.get("MQMA_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MQMA_SEED must be an integer, got {env!r}") from None


def _common(p: argparse.ArgumentParser, seed: int) -> None:
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, default=seed, help="random seed (default: $MQMA_SEED or 0)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-emb", dest="d_emb", type=int, default=64)
    g.add_argument("--n-layers-enc", dest="n_layers_enc", type=int, default=2)
    g.add_argument("--n-layers-dec", dest="n_layers_dec", type=int, default=2)
    g.add_argument("--n-heads", dest="n_heads", type=int, default=4)
    g.add_argument("--ffn-dim", dest="ffn_dim", type=int, default=128)
    g.add_argument("--n-max", dest="n_max", type=int, default=5)
    g.add_argument("--max-answer-len", dest="max_answer_len", type=int, default=8)
    g.add_argument("--max-text-len", dest="max_text_len", type=int, default=128)


def _train_flags(p: argparse.ArgumentParser, steps: int, lr: float) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, default=steps)
    g.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    g.add_argument("--lr", type=float, default=lr)
    g.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.01)
    g.add_argument("--warmup-frac", dest="warmup_frac", type=float, default=0.05)


def build_parser(seed: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mqma", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-corpus", help="write a synthetic JSONL corpus to OUT/corpus.jsonl")
    _common(p, seed)
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--min-words", dest="min_words", type=int, default=20)
    p.add_argument("--max-words", dest="max_words", type=int, default=40)
    p.add_argument("--qa-per-doc", dest="qa_per_doc", type=int, default=0, help="attach this many layout questions per doc")
    p.add_argument("--leak-groups", dest="leak_groups", type=_bool, nargs="?", const=True, default=False)

    p = sub.add_parser("pretrain", help="denoising pre-training; writes OUT/pretrain.pt and OUT/pretrain_loss.csv")
    _common(p, seed)
    p.add_argument("--corpus", required=True, help="JSONL corpus")
    p.add_argument("--task", choices=(trainer.MQMA, trainer.STANDARD), default=trainer.MQMA)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=512)
    p.add_argument("--num-masks", dest="num_masks", type=int, default=5)
    _model_flags(p)
    _train_flags(p, 500, 1e-4)

    p = sub.add_parser("finetune", help="question-answer fine-tuning; writes OUT/finetune.pt and OUT/finetune_loss.csv")
    _common(p, seed)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="JSONL corpus with qa items")
    p.add_argument("--n", type=int, default=2, help="max questions per training sample")
    p.add_argument("--augment", choices=(augment.DYNAMIC, augment.STATIC), default=augment.DYNAMIC)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.PROMPT_PARALLEL.value)
    p.add_argument("--no-qie", dest="no_qie", type=_bool, nargs="?", const=True, default=False,
                   help="drop question-index embeddings")
    p.add_argument("--freeze-prompts", dest="freeze_prompts", type=_bool, nargs="?", const=True, default=False)
    # Fine-tuning uses a larger desk learning rate; see the README.
    _train_flags(p, 1000, 1e-3)

    p = sub.add_parser("eval", help="score a checkpoint; writes OUT/eval.csv")
    _common(p, seed)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n", type=int, default=2, help="questions per inference pass")
    p.add_argument("--metric", choices=("anls", "vqa_acc"), default="anls")
    p.add_argument("--sqsa", type=_bool, nargs="?", const=True, default=False, help="decode from [START] (needs --n 1)")

    p = sub.add_parser("bench-decoder", help="attention-cost and latency comparison; writes OUT/bench.csv")
    _common(p, seed)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--lq", type=int, default=20)
    p.add_argument("--lc", type=int, default=500)
    p.add_argument("--la", type=int, default=10)
    p.add_argument("--strategies", default="all", help="'all' or a comma list of " + ",".join(s.value for s in Strategy))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--prompt-len", dest="prompt_len", type=int, default=1)
    p.add_argument("--checkpoint", help="time this model instead of a random one")
    _model_flags(p)

    p = sub.add_parser("inspect-sample", help="print one fully assembled training example")
    _common(p, seed)
    p.add_argument("--corpus", help="JSONL corpus (default: a generated one)")
    p.add_argument("--checkpoint", help="take the vocabulary from this checkpoint")
    p.add_argument("--task", choices=(trainer.MQMA, trainer.STANDARD, "qa"), default=trainer.MQMA)
    p.add_argument("--index", type=int, default=0, help="document index")
    p.add_argument("--n", type=int, default=2, help="questions for --task qa")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv`` with values from ``--config`` installed as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command is not None:
        subparser = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
        actions = {a.dest: a for a in subparser._actions}  # noqa: SLF001
        defaults = {}
        for key, value in read_config(known.config).items():
            action = actions.get(key)
            if action is None or key in ("help", "config"):
                raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
            try:
                defaults[key] = (action.type or str)(value)
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"{known.config}: bad value for {key!r}: {e}") from None
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{known.config}: {key!r} must be one of {sorted(action.choices)}")
            # A config value satisfies a required flag.
            action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_cfg(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        warmup_frac=args.warmup_frac,
        seed=args.seed,
        **({"num_masks": args.num_masks} if hasattr(args, "num_masks") else {}),
    )


def cmd_gen_corpus(args) -> None:
    docs = generate_corpus(args.seed, args.docs, (args.min_words, args.max_words))
    if args.qa_per_doc:
        docs = attach_synthetic_qa(docs, args.seed, args.qa_per_doc, args.leak_groups)
    path = _out(args) / "corpus.jsonl"
    save_documents(docs, path)
    print(f"wrote {len(docs)} documents to {path}")


def cmd_pretrain(args) -> None:
    docs = load_documents(args.corpus)
    model_cfg = {k: getattr(args, k) for k in MODEL_KEYS}
    model_cfg["vocab_max_size"] = args.vocab_size
    out = _out(args)
    res = trainer.pretrain(docs, args.task, model_cfg, _train_cfg(args), out_dir=out)
    res.vocab.save(out / "vocab.txt")
    print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; checkpoint {res.checkpoint}")


def cmd_finetune(args) -> None:
    docs = load_documents(args.corpus)
    res = trainer.finetune(
        args.checkpoint,
        docs,
        args.n,
        args.augment,
        _train_cfg(args),
        use_question_index=not args.no_qie,
        freeze_prompts=args.freeze_prompts,
        strategy=Strategy(args.strategy),
        out_dir=_out(args),
    )
    print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; checkpoint {res.checkpoint}")


def cmd_eval(args) -> None:
    docs = load_documents(args.corpus)
    path = _out(args) / "eval.csv"
    report = trainer.evaluate(args.checkpoint, docs, args.n, args.sqsa, path)
    print(f"{args.metric} {report.metric(args.metric):.4f} over {len(report.records)} questions; report {path}")


def _strategies(spec: str) -> list[Strategy]:
    if spec == "all":
        return list(Strategy)
    try:
        return [Strategy(s.strip()) for s in spec.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_bench(args) -> None:
    import torch

    strategies = _strategies(args.strategies)
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        torch.manual_seed(args.seed)
        kw = {k: getattr(args, k) for k in MODEL_KEYS}
        model = MQMAModel(ModelConfig(vocab_size=64, prompt_len=args.prompt_len, **kw))
    params = bench.CostParams(args.n, args.lq, args.lc, args.la, model.cfg.prompt_len)
    torch.set_num_threads(1)
    reports = [bench.empirical_bench(model, params, s, repeats=args.repeats) for s in strategies]
    for r in reports:
        expected = bench.analytic_cost(params, r.strategy)
        if (r.encoder_units, r.decoder_units) != (expected.encoder_units, expected.decoder_units):
            raise RuntimeError(f"instrumented counts for {r.strategy.value} disagree with the closed form")
    path = _out(args) / "bench.csv"
    bench.write_csv(reports, path)
    for r in reports:
        row = r.row()
        print(" ".join(f"{k}={row[k]}" for k in bench.CSV_FIELDS))


def cmd_inspect(args) -> None:
    if args.corpus:
        docs = load_documents(args.corpus)
    else:
        docs = generate_corpus(args.seed, max(args.index + 1, 1))
        if args.task == "qa":
            docs = attach_synthetic_qa(docs, args.seed, per_doc=max(args.n, 2))
    if not 0 <= args.index < len(docs):
        raise ValueError(f"--index {args.index} out of range for {len(docs)} documents")
    doc = docs[args.index]
    if args.checkpoint:
        model, vocab, _ = load_checkpoint(args.checkpoint)
        cfg = model.cfg
    else:
        vocab = trainer.corpus_vocab(docs)
        cfg = ModelConfig(vocab_size=len(vocab))
    tcfg = trainer.TrainConfig(seed=args.seed)
    if args.task == "qa":
        if not doc.qa_items:
            raise ValueError(f"doc {doc.id} has no qa items")
        batch = augment.inference_batches(doc, args.n)[0]
        inp = build_encoder_input(batch.questions, doc, vocab, cfg.max_text_len, cfg.n_max)
        targets = [tokenize(item.answers[0], vocab) for item in batch.items]
    else:
        inp, targets = trainer.denoise_sample(doc, args.task, vocab, cfg, tcfg, args.seed, trainer.PatchCache())
    print(format_sample(doc.id, inp, targets, vocab))


def format_sample(doc_id: str, inp, targets, vocab: Vocab) -> str:
    lines = [f"doc {doc_id}: {inp.num_questions} question(s), {inp.text_len} text positions, "
             f"{len(inp.modality) - inp.text_len} visual positions"]
    lines.append(f"{'pos':>4} {'token':<16} {'id':>5} {'qidx':>4} {'mod':>3}  box(x1,y1,x2,y2,w,h)")
    for i, (tid, box) in enumerate(zip(inp.token_ids, inp.boxes)):
        tok = vocab.id_to_token[tid]
        lines.append(f"{i:>4} {tok:<16} {tid:>5} {inp.question_index[i]:>4} {inp.modality[i]:>3}  {tuple(box)}")
    lines.append(f"visual: {inp.patches.shape[0]} patches of {inp.patches.shape[1]} values")
    for i, t in enumerate(targets, 1):
        lines.append(f"target {i}: {' '.join(vocab.id_to_token[x] for x in t)}  ids={t}")
    return "\n".join(lines)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench-decoder": cmd_bench,
    "inspect-sample": cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser(_default_seed())
        args = _apply_config(parser, argv)
    except UsageError as e:
        print(f"mqma: usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, KeyError, UsageError) as e:
        print(f"mqma {args.command}: error: {e}", file=sys.stderr)
        return 2 if isinstance(e, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
