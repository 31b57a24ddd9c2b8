"""Training objectives: global contrastive loss, prompt-pair classification loss,
sentence-patch alignment loss, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .encoders import BatchSentenceFeatures, SentenceFeatures
from .tensor import Tensor, as_tensor

__all__ = [
    "LossWeights",
    "TemperatureParams",
    "TrainingAbort",
    "contrastive_loss",
    "pair_logits",
    "classify_probs",
    "classification_loss",
    "classification_loss_from_logits",
    "local_match",
    "local_match_matrix",
    "alignment_loss",
    "total_loss",
    "prompt_orthogonality",
    "sentence_batch",
]


class TrainingAbort(RuntimeError):
    """A loss component became non-finite."""

    def __init__(self, component: str, step: int | None = None):
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {component} loss{where}")


@dataclass(frozen=True)
class LossWeights:
    tau1: float = 1.0
    tau2: float = 1.0
    tau3: float = 1.0

    def __post_init__(self):
        vals = (self.tau1, self.tau2, self.tau3)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError(f"loss weights must be finite and non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TemperatureParams:
    contrastive_temp: float = 0.07  # initial value; the live value is trained
    lambda1: float = 0.1  # attention sharpness over patches
    lambda2: float = 0.1  # scale of the local match score

    TEMP_MIN = 0.01
    TEMP_MAX = 1.0

    def __post_init__(self):
        if min(self.contrastive_temp, self.lambda1, self.lambda2) <= 0:
            raise ValueError("temperatures must be strictly positive")


def _diag(square: Tensor) -> Tensor:
    n = square.shape[0]
    return F.sum(F.multiply(square, np.eye(n)), axis=1)


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must be unit-norm")


def contrastive_loss(V: Tensor, T: Tensor, temp, symmetric: bool = True) -> Tensor:
    """InfoNCE over an N x N cosine-similarity matrix.

    ``symmetric=False`` gives the image-to-text direction only; the default
    averages both directions.
    """
    V, T = as_tensor(V), as_tensor(T)
    if V.ndim != 2 or V.shape != T.shape:
        raise ValueError(f"contrastive_loss: shapes {V.shape} and {T.shape} must be equal N x D")
    if V.shape[0] < 2:
        raise ValueError("contrastive_loss needs at least 2 pairs")
    logits = F.divide(F.matmul(V, F.transpose(T)), as_tensor(temp))
    i2t = F.scale(F.mean(_diag(F.log_softmax(logits, axis=1))), -1.0)
    if not symmetric:
        return i2t
    t2i = F.scale(F.mean(_diag(F.log_softmax(logits, axis=0))), -1.0)
    return F.scale(F.add(i2t, t2i), 0.5)


def pair_logits(v: Tensor, t_pos: Tensor, t_neg: Tensor, temp) -> Tensor:
    """(N, C, 2) logits: similarity to each class's positive and negative prompt."""
    v, t_pos, t_neg = as_tensor(v), as_tensor(t_pos), as_tensor(t_neg)
    if t_pos.shape != t_neg.shape or t_pos.ndim != 2:
        raise ValueError("every class needs one positive and one negative prompt embedding")
    if v.ndim == 1:
        v = F.reshape(v, (1, v.shape[0]))
    n, c = v.shape[0], t_pos.shape[0]
    temp = as_tensor(temp)
    pos = F.reshape(F.divide(F.matmul(v, F.transpose(t_pos)), temp), (n, c, 1))
    neg = F.reshape(F.divide(F.matmul(v, F.transpose(t_neg)), temp), (n, c, 1))
    return F.concat([pos, neg], axis=2)


def classify_probs(v: Tensor, t_pos: Tensor, t_neg: Tensor, temp) -> Tensor:
    """Probability of each class from the two-way softmax over its prompt pair.

    A 1-D ``v`` yields a length-C vector, an (N, D) batch an (N, C) matrix.
    """
    single = as_tensor(v).ndim == 1
    logits = pair_logits(v, t_pos, t_neg, temp)
    n, c, _ = logits.shape
    probs = F.reshape(F.take(F.softmax(logits, axis=2), [0], axis=2), (n, c))
    return F.reshape(probs, (c,)) if single else probs


def _label_weights(labels) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=np.float64)
    known = y >= 0
    if not known.any():
        raise ValueError("classification loss needs at least one known label")
    return np.where(known, y, 0.0), known / known.sum()


def classification_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over known labels; -1 marks unknown."""
    probs = as_tensor(probs)
    y, w = _label_weights(labels)
    if y.shape != probs.shape:
        raise ValueError(f"labels {y.shape} do not match probabilities {probs.shape}")
    ll = F.add(F.multiply(F.log(probs), y),
               F.multiply(F.log(F.subtract(1.0, probs)), 1.0 - y))
    return F.scale(F.sum(F.multiply(ll, w)), -1.0)


def classification_loss_from_logits(logits: Tensor, labels) -> Tensor:
    """Same loss as :func:`classification_loss`, read off (N, C, 2) pair logits.

    Uses log-softmax, so saturated probabilities stay finite.
    """
    y, w = _label_weights(labels)
    logp = F.log_softmax(logits, axis=2)
    target = np.stack([y, 1.0 - y], axis=-1) * w[..., None]
    return F.scale(F.sum(F.multiply(logp, target)), -1.0)


def sentence_batch(matrix: Tensor, mask) -> BatchSentenceFeatures:
    """Wrap an (N, S, D) slot matrix; only masked-in rows are read downstream."""
    matrix = as_tensor(matrix)
    mask = np.asarray(mask, dtype=bool)
    n, s, d = matrix.shape
    if mask.shape != (n, s):
        raise ValueError(f"mask shape {mask.shape} does not match ({n}, {s})")
    real = F.take(F.reshape(matrix, (n * s, d)), np.flatnonzero(mask.reshape(-1)), axis=0)
    return BatchSentenceFeatures(matrix, mask, real)


def local_match_matrix(sents: BatchSentenceFeatures, patches: Tensor,
                       lambda1: float, lambda2: float) -> Tensor:
    """Local match score for every (report k, image i) pair, shape (N_text, N_image).

    For each masked-in sentence, attention over an image's patches is a
    softmax of sentence-patch cosines divided by ``lambda1``; the attended
    context is normalized and its cosine with the sentence is averaged over the
    report's sentences, then divided by ``lambda2``.
    """
    patches = as_tensor(patches)
    if patches.ndim == 2:
        patches = F.reshape(patches, (1,) + patches.shape)
    n_img, p, d = patches.shape
    counts = sents.mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"report {int(np.argmax(counts == 0))} has no masked-in sentences")
    real, owner = sents.real, sents.owner
    r = real.shape[0]
    flat = F.reshape(patches, (n_img * p, d))
    sims = F.reshape(F.matmul(real, F.transpose(flat)), (r, n_img, p))
    attn = F.softmax(F.scale(sims, 1.0 / lambda1), axis=2)
    context = F.matmul(F.transpose(attn, (1, 0, 2)), patches)  # (N_img, R, D)
    context = F.l2_normalize(context, axis=-1)
    scores = F.sum(F.multiply(context, real), axis=-1)  # (N_img, R)
    pool = np.zeros((r, sents.mask.shape[0]))
    pool[np.arange(r), owner] = 1.0 / counts[owner]
    z = F.matmul(scores, pool)  # (N_img, N_text)
    return F.scale(F.transpose(z), 1.0 / lambda2)


def local_match(sent_feats: SentenceFeatures, patch_feats: Tensor,
                lambda1: float, lambda2: float) -> Tensor:
    """Scalar local match score of one report against one image's patches."""
    m = as_tensor(sent_feats.matrix)
    s, d = m.shape
    batch = sentence_batch(F.reshape(m, (1, s, d)), np.asarray(sent_feats.mask)[None])
    z = local_match_matrix(batch, patch_feats, lambda1, lambda2)
    return F.reshape(z, ())


def alignment_loss(sents: BatchSentenceFeatures, patches: Tensor,
                   lambda1: float, lambda2: float) -> Tensor:
    """Mean over images of -log softmax over reports of the local match score."""
    patches = as_tensor(patches)
    if patches.ndim == 4:
        n, g1, g2, d = patches.shape
        patches = F.reshape(patches, (n, g1 * g2, d))
    if patches.shape[0] != sents.mask.shape[0]:
        raise ValueError("alignment_loss: reports and images must pair one-to-one")
    z = local_match_matrix(sents, patches, lambda1, lambda2)
    return F.scale(F.mean(_diag(F.log_softmax(z, axis=0))), -1.0)


def total_loss(basic: Tensor, cls: Tensor, seg: Tensor, weights: LossWeights,
               step: int | None = None) -> Tensor:
    parts = {"basic": basic, "cls": cls, "seg": seg}
    for name, value in parts.items():
        if not np.isfinite(as_tensor(value).data).all():
            raise TrainingAbort(name, step)
    return F.add(F.add(F.scale(basic, weights.tau1), F.scale(cls, weights.tau2)),
                 F.scale(seg, weights.tau3))


def prompt_orthogonality(prompt_embeddings) -> float:
    """Mean |cosine| over prompt pairs belonging to different classes.

    Rows are ordered positive, negative per class: row 2c is class c's
    positive prompt and row 2c+1 its negative.
    """
    e = np.asarray(prompt_embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] % 2:
        raise ValueError("expected a 2C x D prompt matrix")
    if e.shape[0] < 4:
        raise ValueError("prompt orthogonality needs at least 2 classes")
    unit = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    cos = np.abs(unit @ unit.T)
    cls = np.arange(e.shape[0]) // 2
    cross = cls[:, None] != cls[None, :]
    return float(np.clip(cos[cross].mean(), 0.0, 1.0))
