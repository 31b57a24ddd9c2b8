"""Zero-shot classification metrics, segmentation scoring and report checks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import objectives as O
from .corpus import PairedExample, label_matrix
from .encoders import DualEncoder, encode_images
from .knowledge import PromptPairSet, SentenceDictionary, retrieve, sentence_polarity
from .segmap import evaluate_heatmap, heatmap_from_features

__all__ = [
    "UndefinedMetricError",
    "MetricsReport",
    "SegmentationReport",
    "auc",
    "accuracy_f1",
    "metrics_from_scores",
    "image_embeddings",
    "predict_probs",
    "eval_classification",
    "eval_segmentation",
    "sentence_polarity",
    "report_polarity_ok",
    "report_polarity_rate",
]


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores earn half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy_f1(probs, labels, threshold: float = 0.5) -> tuple[float, float]:
    p = np.asarray(probs, dtype=np.float64) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    acc = float((p == y).mean()) if y.size else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, f1


@dataclass
class MetricsReport:
    classes: list
    accuracy: dict
    f1: dict
    auc: dict  # None where undefined
    counts: dict  # known-label examples per class
    excluded: list
    macro: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def table(self) -> str:
        """Plain-text table, columns Acc / F1 / AUC in percent."""
        lines = [f"{'class':<16}{'Acc':>8}{'F1':>8}{'AUC':>8}{'n':>7}"]
        for c in self.classes:
            a = "-" if self.auc[c] is None else f"{100 * self.auc[c]:.2f}"
            lines.append(f"{c:<16}{100 * self.accuracy[c]:>8.2f}{100 * self.f1[c]:>8.2f}{a:>8}"
                         f"{self.counts[c]:>7}")
        m = self.macro
        lines.append(f"{'macro':<16}{100 * m['accuracy']:>8.2f}{100 * m['f1']:>8.2f}"
                     f"{100 * m['auc']:>8.2f}{'':>7}")
        if self.excluded:
            lines.append(f"excluded (single-class labels): {', '.join(self.excluded)}")
        return "\n".join(lines)


def metrics_from_scores(probs, labels, classes: Sequence[str], threshold: float = 0.5
                        ) -> MetricsReport:
    """Per-class and macro metrics; label -1 is skipped per class.

    Classes lacking either a positive or a negative known label are excluded
    from every macro average.
    """
    P = np.asarray(probs, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    rep = MetricsReport(list(classes), {}, {}, {}, {}, [])
    usable = []
    for j, c in enumerate(classes):
        known = Y[:, j] >= 0
        y, p = Y[known, j], P[known, j]
        rep.counts[c] = int(known.sum())
        rep.accuracy[c], rep.f1[c] = accuracy_f1(p, y, threshold) if known.any() else (0.0, 0.0)
        try:
            rep.auc[c] = auc(p, y)
            usable.append(c)
        except UndefinedMetricError:
            rep.auc[c] = None
            rep.excluded.append(c)
    if not usable:
        raise UndefinedMetricError("no class has both positive and negative labels")
    rep.macro = {k: float(np.mean([getattr(rep, k)[c] for c in usable]))
                 for k in ("accuracy", "f1", "auc")}
    return rep


def image_embeddings(model: DualEncoder, images, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Patch grids (N, G, G, D) and global embeddings (N, D) with frozen weights."""
    imgs = np.asarray(images, dtype=np.float64)
    grids, globs = [], []
    for start in range(0, len(imgs), chunk):
        local, v = encode_images(imgs[start:start + chunk], model)
        grids.append(local.grid.data)
        globs.append(v.data)
    return np.concatenate(grids), np.concatenate(globs)


def predict_probs(model: DualEncoder, embeddings, prompts: PromptPairSet) -> np.ndarray:
    return O.classify_probs(embeddings, prompts.pos_emb, prompts.neg_emb, model.temp.data).data


def eval_classification(model: DualEncoder, dataset: Sequence[PairedExample],
                        prompts: PromptPairSet, threshold: float = 0.5) -> MetricsReport:
    if not any(ex.labels for ex in dataset):
        raise ValueError("dataset carries no labels")
    _, v = image_embeddings(model, [ex.image for ex in dataset])
    probs = predict_probs(model, v, prompts)
    return metrics_from_scores(probs, label_matrix(dataset, prompts.classes), prompts.classes,
                               threshold)


@dataclass
class SegmentationReport:
    pointing: dict
    iou: dict
    counts: dict
    macro: dict

    def to_json(self) -> dict:
        return asdict(self)


def eval_segmentation(model: DualEncoder, dataset: Sequence[PairedExample],
                      prompts: PromptPairSet, q: float = 0.95) -> SegmentationReport:
    """Query every box-bearing image with the box class's positive prompt."""
    index = {c: j for j, c in enumerate(prompts.classes)}
    work = [ex for ex in dataset if ex.boxes and any(b.label in index for b in ex.boxes)]
    if not work:
        raise ValueError("no boxes of known classes in the dataset")
    grids, _ = image_embeddings(model, [ex.image for ex in work])
    hits = {c: [] for c in prompts.classes}
    ious = {c: [] for c in prompts.classes}
    for ex, grid in zip(work, grids):
        h, w = np.asarray(ex.image).shape
        for c in sorted({b.label for b in ex.boxes if b.label in index}, key=index.get):
            hm = heatmap_from_features(prompts.pos_emb[index[c]], grid, h, w, prompts.positives[index[c]])
            hit, iou = evaluate_heatmap(hm, [b for b in ex.boxes if b.label == c], q)
            hits[c].append(hit)
            ious[c].append(iou)
    present = [c for c in prompts.classes if hits[c]]
    rep = SegmentationReport(
        {c: float(np.mean(hits[c])) for c in present},
        {c: float(np.mean(ious[c])) for c in present},
        {c: len(hits[c]) for c in present},
        {},
    )
    rep.macro = {"pointing": float(np.mean(list(rep.pointing.values()))),
                 "iou": float(np.mean(list(rep.iou.values())))}
    return rep


def report_polarity_ok(sentences: Sequence[str], labels: dict, classes: Sequence[str]) -> bool:
    """True when every sentence's stated polarity agrees with the labels."""
    for s in sentences:
        pol = sentence_polarity(s, classes)
        if pol is None:
            return False
        c, value = pol
        if labels.get(c, -1) != value:
            return False
    return True


def report_polarity_rate(model: DualEncoder, dataset: Sequence[PairedExample],
                         dictionary: SentenceDictionary, classes: Sequence[str],
                         top_k: int = 5) -> float:
    _, v = image_embeddings(model, [ex.image for ex in dataset])
    ok = 0
    for ex, emb in zip(dataset, v):
        sents = [dictionary.sentences[i] for i, _, _ in retrieve(emb, dictionary, top_k)]
        ok += report_polarity_ok(sents, ex.labels or {}, classes)
    return ok / len(dataset)
