"""Image-report alignment with global, prompt-pair and sentence-level objectives.

The package is organised bottom-up: a tape autodiff core (``tensor``,
``functional``), toy dual encoders, the training objectives, the sentence
dictionary and prompt machinery (``knowledge``), heatmaps (``segmap``),
corpora, metrics, the trainer and the command line.
"""

from .corpus import PairedExample, SyntheticConfig, load_corpus, save_corpus, synth_generate
from .encoders import DualEncoder, EncoderConfig, encode_images, encode_reports
from .evaluation import eval_classification, eval_segmentation
from .knowledge import build_dictionary, generate_report, make_prompt_pairs
from .objectives import LossWeights, TemperatureParams
from .segmap import sentence_heatmap
from .tensor import Tape, Tensor, grad_check
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DualEncoder",
    "EncoderConfig",
    "LossWeights",
    "PairedExample",
    "SyntheticConfig",
    "Tape",
    "TemperatureParams",
    "Tensor",
    "TrainConfig",
    "build_dictionary",
    "encode_images",
    "encode_reports",
    "eval_classification",
    "eval_segmentation",
    "generate_report",
    "grad_check",
    "load_checkpoint",
    "load_corpus",
    "make_prompt_pairs",
    "save_checkpoint",
    "save_corpus",
    "sentence_heatmap",
    "synth_generate",
    "train",
]
