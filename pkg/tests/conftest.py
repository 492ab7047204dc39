import sys

import pytest
import torch

from mqma.corpus import attach_synthetic_qa, generate_corpus
from mqma.encoding import build_encoder_input
from mqma.model import MQMAModel, ModelConfig
from mqma.trainer import corpus_vocab


def tiny_config(vocab_size, **kw):
    base = dict(d_emb=16, n_layers_enc=1, n_layers_dec=1, n_heads=2, ffn_dim=32, n_max=5, max_answer_len=6)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


@torch.no_grad()
def randomize(model, seed):
    """Push every non-LayerNorm weight to N(0, 1) so greedy decodes are varied rather than constant."""
    g = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        if "norm" in name:
            continue
        p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return model


@pytest.fixture(scope="session")
def docs():
    return generate_corpus(3, 12)


@pytest.fixture(scope="session")
def qa_docs(docs):
    return attach_synthetic_qa(docs, 5, per_doc=4)


@pytest.fixture(scope="session")
def vocab(docs):
    return corpus_vocab(docs)


@pytest.fixture
def tiny_model(vocab):
    torch.manual_seed(0)
    return MQMAModel(tiny_config(len(vocab)), vocab)


@pytest.fixture
def make_input(vocab):
    def make(questions, doc, cfg, **kw):
        return build_encoder_input(questions, doc, vocab, cfg.max_text_len, cfg.n_max, **kw)

    return make


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
