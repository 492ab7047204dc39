"""Builders shared by the unit and acceptance tests."""

import random

import torch

from conftest import randomize, tiny_config
from mqma.corpus import attach_synthetic_qa, generate_corpus
from mqma.encoding import build_encoder_input
from mqma.model import MQMAModel
from mqma.trainer import corpus_vocab

_DOCS = generate_corpus(21, 8)
_QA = attach_synthetic_qa(_DOCS, 4, per_doc=5)
VOCAB = corpus_vocab(_DOCS)


def random_case(seed, n_questions=3, **cfg):
    """A randomly weighted float64 model and one encoded multi-question input."""
    rng = random.Random(seed)
    torch.manual_seed(seed)
    cfg.setdefault("precision", "float64")
    model = randomize(MQMAModel(tiny_config(len(VOCAB), **cfg), VOCAB), seed)
    model.eval()
    doc = rng.choice(_QA)
    questions = [q.question for q in rng.sample(doc.qa_items, n_questions)]
    inp = build_encoder_input(questions, doc, VOCAB, model.cfg.max_text_len, model.cfg.n_max)
    with torch.no_grad():
        enc, keep = model.encode_inputs([inp])
    return model, inp, enc, keep


def sqsa_matches_prompt_parallel(seed):
    model, _, enc, keep = random_case(seed, 1)
    start = model.start_embeddings(1)
    return model.decode_sqsa(enc, keep) == model.decode_prompt_parallel(enc, keep, prompts=start)[0]


def batched_matches_sequential(seed, n=3):
    model, _, enc, keep = random_case(seed, n)
    batched = model.decode_prompt_parallel(enc, keep, n=n)
    single = [model.decode_prompt_parallel(enc, keep, prompts=model.prompts[i : i + 1])[0] for i in range(n)]
    return batched == single, batched
