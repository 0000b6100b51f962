"""Textless speech-to-speech translation on a procedural toy corpus.

Pipeline: a VQ-VAE style quantizer turns target speech into discrete code
sequences; a spectrogram-to-spectrogram model translates source speech
directly, supervised jointly on predicted codes and synthesized frames.
Everything runs on a numpy reverse-mode autodiff core for bit-reproducible
desk-scale experiments.
"""

__version__ = "0.1.0"

from .features import FrontendConfig, Spectrogram, log_mel_spectrogram
from .grammar import ToyGrammar, default_grammar, generate_toy_corpus
from .harness import TrainConfig, run_training
from .quantizer import QuantizerModel, VqConfig, init_quantizer
from .tensor import NonFiniteError, ShapeError, Tensor, gradient_of
from .translator import ModelConfig, TextlessModel

__all__ = [
    "FrontendConfig",
    "ModelConfig",
    "NonFiniteError",
    "QuantizerModel",
    "ShapeError",
    "Spectrogram",
    "Tensor",
    "TextlessModel",
    "ToyGrammar",
    "TrainConfig",
    "VqConfig",
    "default_grammar",
    "generate_toy_corpus",
    "gradient_of",
    "init_quantizer",
    "log_mel_spectrogram",
    "run_training",
    "__version__",
]
