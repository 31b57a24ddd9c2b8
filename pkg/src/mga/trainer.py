"""Single-stage training of all three objectives with Adam, plus checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from . import objectives as O
from .corpus import PairedExample, corpus_classes, label_matrix
from .encoders import DualEncoder, EncoderConfig, encode_images, encode_reports
from .io import atomic_write_json
from .knowledge import (NEG_TEMPLATE, POS_TEMPLATE, PromptPairSet, encode_prompt_pairs,
                        mine_prompt_texts, split_report)
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "Batch",
    "Checkpoint",
    "CheckpointError",
    "prepare_batch",
    "forward_losses",
    "adam_update",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-5
    weights: O.LossWeights = field(default_factory=O.LossWeights)
    temps: O.TemperatureParams = field(default_factory=O.TemperatureParams)
    sentences: int = 5
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    classes: tuple = ()
    pos_template: str = POS_TEMPLATE
    neg_template: str = NEG_TEMPLATE
    symmetric: bool = True
    # (class, positive, negative) prompt texts; mined from the corpus when empty
    prompts: tuple = ()

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for the contrastive losses")
        if self.sentences < 1:
            raise ValueError("sentence count must be >= 1")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and learning rate must be non-negative")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["classes"] = list(self.classes)
        doc["prompts"] = [list(t) for t in self.prompts]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["weights"] = O.LossWeights(**doc["weights"])
        doc["temps"] = O.TemperatureParams(**doc["temps"])
        doc["encoder"] = EncoderConfig(**doc["encoder"])
        doc["classes"] = tuple(doc.get("classes", ()))
        doc["prompts"] = tuple(tuple(t) for t in doc.get("prompts", ()))
        return cls(**doc)

    def prompt_texts(self) -> tuple[list[str], list[str]]:
        return [t[1] for t in self.prompts], [t[2] for t in self.prompts]


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(model: DualEncoder, state: OptimizerState, lr: float,
                temp_bounds: tuple[float, float] = (O.TemperatureParams.TEMP_MIN,
                                                    O.TemperatureParams.TEMP_MAX)) -> None:
    """One bias-corrected Adam step over every parameter holding a gradient.

    The temperature is clamped back into ``temp_bounds`` afterwards.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for name, p in model.trainable():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    t = model.temp
    t.data = np.clip(t.data, *temp_bounds)


@dataclass
class Batch:
    images: np.ndarray  # (N, H, W)
    reports: list  # per example, its kept sentence list
    mask: np.ndarray  # (N, S) bool
    labels: np.ndarray  # (N, C), -1 unknown


def prepare_batch(examples: Sequence[PairedExample], slots: int, classes: Sequence[str]) -> Batch:
    """Stack images, split reports into at most ``slots`` sentences, stack labels."""
    if len(examples) < 2:
        raise ValueError("a batch needs at least 2 examples")
    reports = []
    for ex in examples:
        sents = split_report(ex.report)
        if not sents:
            raise ValueError(f"example {ex.id} has an empty report")
        reports.append(sents[:slots])
    mask = np.zeros((len(examples), slots), dtype=bool)
    for i, r in enumerate(reports):
        mask[i, :len(r)] = True
    images = np.stack([np.asarray(ex.image, dtype=np.float64) for ex in examples])
    return Batch(images, reports, mask, label_matrix(examples, classes))


def forward_losses(batch: Batch, model: DualEncoder, config: TrainConfig, prompts: tuple,
                   step: int | None = None):
    """Encode the batch once and evaluate every objective on the shared features.

    ``prompts`` is ``(positive sentences, negative sentences)``. Returns the
    (basic, cls, seg, total) loss tensors.
    """
    local, v = encode_images(batch.images, model)
    sents, t = encode_reports(batch.reports, model, config.sentences)
    temp = model.temp
    basic = O.contrastive_loss(v, t, temp, symmetric=config.symmetric)
    pos, neg = prompts
    if pos and (batch.labels >= 0).any():
        _, prompt_emb = encode_reports([[s] for s in list(pos) + list(neg)], model, 1)
        c = len(pos)
        logits = O.pair_logits(v, F.take(prompt_emb, np.arange(c)),
                               F.take(prompt_emb, np.arange(c, 2 * c)), temp)
        cls = O.classification_loss_from_logits(logits, batch.labels)
    else:
        cls = Tensor(0.0)
    seg = O.alignment_loss(sents, local.grid, config.temps.lambda1, config.temps.lambda2)
    total = O.total_loss(basic, cls, seg, config.weights, step=step)
    return basic, cls, seg, total


def train_step(batch: Batch, model: DualEncoder, opt: OptimizerState, config: TrainConfig,
               prompts: tuple) -> dict[str, float]:
    model.zero_grad()
    with Tape() as tape:
        basic, cls, seg, total = forward_losses(batch, model, config, prompts, step=opt.step + 1)
        tape.backward(total)
    adam_update(model, opt, config.lr)
    return {"basic": basic.item(), "cls": cls.item(), "seg": seg.item(), "total": total.item()}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    temp: float
    config: TrainConfig
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: DualEncoder, config: TrainConfig, history=()) -> "Checkpoint":
        params = {k: p.data.copy() for k, p in model.params.items() if k != "temp"}
        return cls(params, float(model.temp.data), config, list(history))

    def to_model(self) -> DualEncoder:
        params = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
        params["temp"] = Tensor(self.temp, requires_grad=True)
        return DualEncoder(self.config.encoder, params)

    def prompt_pairs(self, model: DualEncoder | None = None) -> PromptPairSet:
        return encode_prompt_pairs(self.config.prompts, model or self.to_model())

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                       for k, v in self.params.items()},
            "temp": self.temp,
            "config": self.config.to_json(),
            "history": self.history,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Checkpoint":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"incompatible checkpoint version {doc.get('version')!r}"
                                  f" (expected {CHECKPOINT_VERSION})")
        try:
            params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
                      for k, v in doc["params"].items()}
            return cls(params, float(doc["temp"]), TrainConfig.from_json(doc["config"]),
                       list(doc.get("history", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_json(path, ckpt.to_json())


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint file: {exc}") from exc
    return Checkpoint.from_json(doc)


def train(config: TrainConfig, train_set: Sequence[PairedExample],
          on_epoch: Callable[[int, dict], None] | None = None) -> Checkpoint:
    """Run ``config.epochs`` passes of shuffled mini-batches.

    History holds one entry per epoch with the mean of each loss component.
    Trailing batches smaller than 2 are dropped.
    """
    if not train_set:
        raise ValueError("empty training set")
    classes = tuple(config.classes) or tuple(corpus_classes(train_set))
    prompts = tuple(config.prompts) or tuple(
        mine_prompt_texts([ex.report for ex in train_set], classes,
                          config.pos_template, config.neg_template)) if classes else ()
    config = replace(config, classes=classes, prompts=prompts)
    model = DualEncoder.init(config.encoder, temp=config.temps.contrastive_temp)
    pos, neg = config.prompt_texts()
    opt = OptimizerState()
    history = []
    n = len(train_set)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = {"basic": 0.0, "cls": 0.0, "seg": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            batch = prepare_batch([train_set[i] for i in idx], config.sentences, classes)
            out = train_step(batch, model, opt, config, (pos, neg))
            for k in sums:
                sums[k] += out[k]
            steps += 1
        entry = {"epoch": epoch + 1, **{k: v / max(steps, 1) for k, v in sums.items()}}
        history.append(entry)
        log.info("epoch %d: total %.4f (basic %.4f, cls %.4f, seg %.4f)", epoch + 1,
                 entry["total"], entry["basic"], entry["cls"], entry["seg"])
        if on_epoch is not None:
            on_epoch(epoch + 1, entry)
    return Checkpoint.from_model(model, config, history)
