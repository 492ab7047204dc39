"""Multi-question multi-answer text-VQA: layout-aware encoder-decoder, denoising data, cost model."""

from .model import MQMAModel, ModelConfig, Strategy
from .tokenizer import Vocab, build_vocab, detokenize, tokenize

__all__ = ["MQMAModel", "ModelConfig", "Strategy", "Vocab", "build_vocab", "detokenize", "tokenize"]
__version__ = "0.1.0"
