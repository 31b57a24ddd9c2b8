"""Toy dual encoder: patch-based image encoder and hashed bag-of-tokens text encoder.

Both towers emit unit-norm local features (one per image patch, one per
sentence) and a unit-norm global embedding, which is all the objectives and
the retrieval/heatmap tools consume.
"""

from __future__ import annotations

import re
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "ConfigError",
    "DualEncoder",
    "SentenceFeatures",
    "BatchSentenceFeatures",
    "LocalImageFeatures",
    "tokenize",
    "token_bucket",
    "encode_image",
    "encode_images",
    "encode_sentences",
    "encode_reports",
]

_SPLIT = re.compile(r"[^0-9a-z]+")


class ConfigError(ValueError):
    pass


def tokenize(sentence: str) -> list[str]:
    return [tok for tok in _SPLIT.split(sentence.lower()) if tok]


@lru_cache(maxsize=65536)
def token_bucket(token: str, buckets: int) -> int:
    """32-bit FNV-1a hash of the UTF-8 bytes, reduced modulo ``buckets``."""
    h = 0x811C9DC5
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h % buckets


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    hidden: int = 128
    patch_side: int = 8
    grid: int = 8
    buckets: int = 4096
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "hidden", "patch_side", "grid", "buckets"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class LocalImageFeatures:
    grid: Tensor  # (G, G, D) or (N, G, G, D)

    @property
    def side(self) -> int:
        return self.grid.shape[-2]


@dataclass
class SentenceFeatures:
    matrix: Tensor  # (S, D)
    mask: np.ndarray  # (S,) bool


@dataclass
class BatchSentenceFeatures:
    """Padded sentence features for a batch of reports.

    ``real`` holds the features of the masked-in sentences only, in row-major
    (report, slot) order; ``matrix`` is the same data scattered into S slots
    per report with zero rows for padding. Losses read ``real`` so padded slots
    never enter any arithmetic.
    """

    matrix: Tensor  # (N, S, D)
    mask: np.ndarray  # (N, S) bool
    real: Tensor  # (R, D)

    @property
    def owner(self) -> np.ndarray:
        """Report index of every row of ``real``."""
        return np.nonzero(self.mask)[0]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class DualEncoder:
    """Trainable parameters of both towers plus the contrastive temperature."""

    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    PARAM_ORDER = (
        "vis.patch_w", "vis.patch_b", "vis.pos", "vis.mix_w1", "vis.mix_b1", "vis.mix_w2", "vis.mix_b2",
        "txt.embed", "txt.mix_w1", "txt.mix_b1", "txt.mix_w2", "txt.mix_b2",
    )

    @classmethod
    def init(cls, config: EncoderConfig | None = None, temp: float = 0.07) -> "DualEncoder":
        config = config or EncoderConfig()
        rng = np.random.default_rng(config.seed)
        d, h, pp, b = config.dim, config.hidden, config.patch_side ** 2, config.buckets
        shapes = {
            "vis.patch_w": (pp, (pp, d)),
            "vis.patch_b": (pp, (d,)),
            "vis.pos": (1, (config.grid ** 2, d)),
            "vis.mix_w1": (d, (d, h)),
            "vis.mix_b1": (d, (h,)),
            "vis.mix_w2": (h, (h, d)),
            "vis.mix_b2": (h, (d,)),
            # a lookup is a linear map from a B-wide one-hot input
            "txt.embed": (b, (b, d)),
            "txt.mix_w1": (d, (d, h)),
            "txt.mix_b1": (d, (h,)),
            "txt.mix_w2": (h, (h, d)),
            "txt.mix_b2": (h, (d,)),
        }
        params = {name: Tensor(_uniform(rng, fan, shape), requires_grad=True)
                  for name, (fan, shape) in ((n, shapes[n]) for n in cls.PARAM_ORDER)}
        params["temp"] = Tensor(temp, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def temp(self) -> Tensor:
        return self.params["temp"]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.params.items()})

    # frozen-parameter helpers (no tape involvement)

    def embed_sentences(self, sentences: list[str]) -> np.ndarray:
        """Unit-norm feature for each sentence, as a plain array."""
        if not sentences:
            return np.zeros((0, self.config.dim))
        feats = _sentence_rows(self, [[s] for s in sentences])
        return feats.data.copy()

    def embed_images(self, images) -> tuple[np.ndarray, np.ndarray]:
        local, glob = encode_images(images, self)
        return local.grid.data.copy(), glob.data.copy()


def _mixer(x: Tensor, model: DualEncoder, prefix: str) -> Tensor:
    hidden = F.tanh(F.add(F.matmul(x, model[f"{prefix}.mix_w1"]), model[f"{prefix}.mix_b1"]))
    out = F.add(F.matmul(hidden, model[f"{prefix}.mix_w2"]), model[f"{prefix}.mix_b2"])
    return F.add(x, out)


def _patchify(images: np.ndarray, side: int) -> np.ndarray:
    n, h, w = images.shape
    if h % side or w % side:
        raise ConfigError(f"image {h}x{w} is not divisible by patch side {side}")
    if h != w:
        raise ConfigError(f"image must be square for a GxG patch grid, got {h}x{w}")
    g = h // side
    patches = images.reshape(n, g, side, g, side).transpose(0, 1, 3, 2, 4)
    return patches.reshape(n, g, g, side * side)


def encode_images(images, model: DualEncoder) -> tuple[LocalImageFeatures, Tensor]:
    """Encode a stack of N grayscale images.

    Returns the (N, G, G, D) patch grid and (N, D) global embeddings, each the
    l2-normalized mean of that image's patch features.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigError(f"expected an (N, H, W) image stack, got shape {arr.shape}")
    patches = _patchify(arr, model.config.patch_side)
    n, g = patches.shape[0], patches.shape[1]
    d = model.config.dim
    if g != model.config.grid:
        raise ConfigError(f"image gives a {g}x{g} patch grid, encoder expects {model.config.grid}")
    patches = patches.reshape(n, g * g, -1)
    # positional term gated by patch contrast: zero for a uniform image
    gate = patches.mean(axis=2, keepdims=True) - arr.mean(axis=(1, 2))[:, None, None]
    x = F.add(F.matmul(Tensor(patches), model["vis.patch_w"]), model["vis.patch_b"])
    x = F.add(x, F.multiply(Tensor(gate), model["vis.pos"]))
    local = F.l2_normalize(_mixer(x, model, "vis"), axis=-1)
    pooled = F.mean(local, axis=1)
    return LocalImageFeatures(F.reshape(local, (n, g, g, d))), F.l2_normalize(pooled, axis=-1)


def encode_image(pixels, model: DualEncoder) -> tuple[LocalImageFeatures, Tensor]:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"expected an HxW image, got shape {arr.shape}")
    local, glob = encode_images(arr[None], model)
    g = local.side
    return (LocalImageFeatures(F.reshape(local.grid, (g, g, model.config.dim))),
            F.reshape(glob, (model.config.dim,)))


def _token_matrix(sentences: list[str], buckets: int) -> np.ndarray:
    counts = np.zeros((len(sentences), buckets))
    for row, sentence in enumerate(sentences):
        toks = tokenize(sentence)
        for tok in toks:
            counts[row, token_bucket(tok, buckets)] += 1.0
        if toks:
            counts[row] /= len(toks)
    return counts


def _sentence_rows(model: DualEncoder, reports: list[list[str]]) -> Tensor:
    flat = [s for rep in reports for s in rep]
    x = F.matmul(Tensor(_token_matrix(flat, model.config.buckets)), model["txt.embed"])
    return F.l2_normalize(_mixer(x, model, "txt"), axis=-1)


def encode_reports(reports: list[list[str]], model: DualEncoder, slots: int
                   ) -> tuple[BatchSentenceFeatures, Tensor]:
    """Encode N reports (each a sentence list) into S padded sentence slots.

    Reports longer than ``slots`` keep their first ``slots`` sentences. The
    global report embedding is the l2-normalized mean of the kept sentences.
    """
    if slots < 1:
        raise ConfigError("sentence count S must be >= 1")
    kept = [list(rep[:slots]) for rep in reports]
    for i, rep in enumerate(kept):
        if not rep:
            raise ValueError(f"report {i} has no sentences")
    n, d = len(kept), model.config.dim
    mask = np.zeros((n, slots), dtype=bool)
    for i, rep in enumerate(kept):
        mask[i, :len(rep)] = True
    real = _sentence_rows(model, kept)
    rows = np.flatnonzero(mask.reshape(-1))
    # one-hot placement: every output entry has at most one nonzero term
    place = np.zeros((n * slots, len(rows)))
    place[rows, np.arange(len(rows))] = 1.0
    matrix = F.reshape(F.matmul(Tensor(place), real), (n, slots, d))
    owner = np.nonzero(mask)[0]
    pool = np.zeros((n, len(rows)))
    pool[owner, np.arange(len(rows))] = 1.0 / mask.sum(axis=1)[owner]
    report = F.l2_normalize(F.matmul(Tensor(pool), real), axis=-1)
    return BatchSentenceFeatures(matrix, mask, real), report


def encode_sentences(sentences: list[str], model: DualEncoder, slots: int
                     ) -> tuple[SentenceFeatures, Tensor]:
    feats, report = encode_reports([list(sentences)], model, slots)
    d = model.config.dim
    return (SentenceFeatures(F.reshape(feats.matrix, (slots, d)), feats.mask[0]),
            F.reshape(report, (d,)))
