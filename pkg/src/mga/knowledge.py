"""Prompt pairs and the retrieval sentence dictionary.

The dictionary keeps every unique report sentence, clusters the sentences on
their TF-IDF vectors with K-means, and composes a report for an image by taking
the best-matching sentence of each cluster and keeping the top few.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .encoders import DualEncoder, tokenize
from .io import atomic_write_json

__all__ = [
    "Vocabulary",
    "SentenceDictionary",
    "PromptPairSet",
    "DictionaryFormatError",
    "split_report",
    "tfidf_fit",
    "tfidf_vector",
    "tfidf_matrix",
    "kmeans",
    "KMeansResult",
    "default_k",
    "build_dictionary",
    "retrieve",
    "generate_report",
    "make_prompt_pairs",
    "encode_prompt_pairs",
    "mine_prompt_texts",
    "sentence_polarity",
    "save_dictionary",
    "load_dictionary",
    "POS_TEMPLATE",
    "NEG_TEMPLATE",
]

POS_TEMPLATE = "There is {class}."
NEG_TEMPLATE = "There is no {class}."
DICTIONARY_VERSION = 1

TextEncoder = Union[DualEncoder, Callable[[list], np.ndarray]]

_TERMINATORS = re.compile(r"[.!?]")


class DictionaryFormatError(ValueError):
    pass


def split_report(text: str) -> list[str]:
    return [part.strip() for part in _TERMINATORS.split(text) if part.strip()]


@dataclass
class Vocabulary:
    df: dict[str, int]
    idf: dict[str, float]
    corpus_size: int

    def terms(self) -> list[str]:
        return sorted(self.df)


def tfidf_fit(sentences: Sequence[str]) -> Vocabulary:
    """Document frequencies and natural-log idf over a sentence corpus."""
    if not sentences:
        raise ValueError("cannot fit TF-IDF on an empty corpus")
    df = Counter()
    for sentence in sentences:
        df.update(set(tokenize(sentence)))
    n = len(sentences)
    return Vocabulary(dict(df), {t: math.log(n / c) for t, c in df.items()}, n)


def tfidf_vector(sentence: str, vocab: Vocabulary) -> dict[str, float]:
    """Sparse TF-IDF weights; out-of-vocabulary terms are dropped."""
    toks = tokenize(sentence)
    if not toks:
        return {}
    counts = Counter(toks)
    return {t: (c / len(toks)) * vocab.idf[t] for t, c in counts.items() if t in vocab.idf}


def tfidf_matrix(sentences: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    index = {t: j for j, t in enumerate(vocab.terms())}
    out = np.zeros((len(sentences), len(index)))
    for i, s in enumerate(sentences):
        for t, w in tfidf_vector(s, vocab).items():
            out[i, index[t]] = w
    return out


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: list  # within-cluster squared distance after every assignment step
    iterations: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact differences so coincident points score exactly 0
    out = np.empty((x.shape[0], c.shape[0]))
    for j in range(c.shape[0]):
        diff = x - c[j]
        out[:, j] = (diff * diff).sum(1)
    return out


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).min(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError("k-means++ ran out of distinct points")
        idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[[idx]])[:, 0])
    return x[chosen].copy()


def kmeans(vectors, k: int, max_iter: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    Assignment ties go to the lower cluster index. A cluster left empty after
    an assignment is reseeded at the point farthest from its centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("kmeans expects a 2-D array of vectors")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    distinct = np.unique(x, axis=0).shape[0]
    if k < 1 or k > distinct:
        raise ValueError(f"K={k} must lie in [1, {distinct}] (distinct vectors)")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new = d.argmin(1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        cost = d[np.arange(len(x)), assign]
        taken = np.zeros(len(x), dtype=bool)
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(0)
            else:
                far = int(np.argmax(np.where(taken, -1.0, cost)))
                taken[far] = True
                centroids[j] = x[far]
    d = _sq_dists(x, centroids)
    assign = d.argmin(1)
    return KMeansResult(assign, centroids, history, it)


@dataclass
class SentenceDictionary:
    sentences: list[str]
    clusters: np.ndarray  # cluster id per sentence
    embeddings: np.ndarray  # unit-norm rows
    vocab: Vocabulary
    k: int

    def __post_init__(self):
        self.clusters = np.asarray(self.clusters, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)

    def tfidf(self) -> np.ndarray:
        return tfidf_matrix(self.sentences, self.vocab)

    def nonempty_clusters(self) -> list[int]:
        return sorted(set(int(c) for c in self.clusters))

    def to_json(self) -> dict:
        return {
            "version": DICTIONARY_VERSION,
            "sentences": list(self.sentences),
            "clusters": [int(c) for c in self.clusters],
            "embeddings": self.embeddings.tolist(),
            "vocab": {t: [self.vocab.df[t], self.vocab.idf[t]] for t in self.vocab.terms()},
            "k": self.k,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SentenceDictionary":
        if doc.get("version") != DICTIONARY_VERSION:
            raise DictionaryFormatError(f"unsupported dictionary version {doc.get('version')!r}")
        try:
            vocab = Vocabulary({t: int(v[0]) for t, v in doc["vocab"].items()},
                               {t: float(v[1]) for t, v in doc["vocab"].items()},
                               len(doc["sentences"]))
            out = cls(list(doc["sentences"]), doc["clusters"], doc["embeddings"], vocab, int(doc["k"]))
        except (KeyError, TypeError, IndexError) as exc:
            raise DictionaryFormatError(f"malformed dictionary: {exc}") from exc
        if len(out.clusters) != len(out.sentences) or out.embeddings.shape[0] != len(out.sentences):
            raise DictionaryFormatError("sentences, clusters and embeddings differ in length")
        if len(out.clusters) and (out.clusters.min() < 0 or out.clusters.max() >= out.k):
            raise DictionaryFormatError("cluster id out of range")
        return out


def _embed(text_encoder: TextEncoder, sentences: list[str]) -> np.ndarray:
    if hasattr(text_encoder, "embed_sentences"):
        return np.asarray(text_encoder.embed_sentences(sentences), dtype=np.float64)
    return np.asarray(text_encoder(sentences), dtype=np.float64)


def default_k(unique_count: int) -> int:
    return max(1, min(100, unique_count // 2))


def build_dictionary(reports: Sequence[str], text_encoder: TextEncoder, k: int | None = None,
                     max_iter: int = 100, seed: int = 0, restarts: int = 10) -> SentenceDictionary:
    """Split reports, keep unique sentences in first-seen order, cluster, embed.

    K-means runs ``restarts`` times from seeds ``seed, seed + 1, ...`` and the
    lowest final objective wins (earliest seed on ties).
    """
    if not reports:
        raise ValueError("no reports to build a dictionary from")
    sentences = list(dict.fromkeys(s for r in reports for s in split_report(r)))
    if not sentences:
        raise ValueError("reports contain no sentences")
    vocab = tfidf_fit(sentences)
    vectors = tfidf_matrix(sentences, vocab)
    k = default_k(len(sentences)) if k is None else k
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    runs = [kmeans(vectors, k, max_iter=max_iter, seed=seed + r) for r in range(restarts)]
    result = min(runs, key=lambda r: r.objective[-1])
    emb = _embed(text_encoder, sentences)
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return SentenceDictionary(sentences, result.assignments, emb, vocab, k)


def retrieve(image_embedding, dictionary: SentenceDictionary, top_k: int = 5
             ) -> list[tuple[int, int, float]]:
    """(sentence index, cluster, cosine) for the top cluster winners.

    Each cluster contributes its highest-cosine sentence; winners are ranked by
    cosine, descending, with ties to the lower sentence index.
    """
    if not dictionary.sentences:
        raise ValueError("dictionary is empty")
    v = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    v = v / max(np.linalg.norm(v), 1e-12)
    sims = dictionary.embeddings @ v
    winners = []
    for c in dictionary.nonempty_clusters():
        members = np.flatnonzero(dictionary.clusters == c)
        best = int(members[np.argmax(sims[members])])
        winners.append((best, c, float(sims[best])))
    winners.sort(key=lambda w: (-w[2], w[0]))
    return winners[:max(1, min(top_k, len(winners)))]


def generate_report(image_embedding, dictionary: SentenceDictionary, top_k: int = 5) -> list[str]:
    return [dictionary.sentences[i] for i, _, _ in retrieve(image_embedding, dictionary, top_k)]


def save_dictionary(dictionary: SentenceDictionary, path) -> None:
    atomic_write_json(path, dictionary.to_json())


def load_dictionary(path) -> SentenceDictionary:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DictionaryFormatError(f"{path}: {exc}") from exc
    return SentenceDictionary.from_json(doc)


@dataclass
class PromptPairSet:
    classes: list[str]
    positives: list[str]
    negatives: list[str]
    pos_emb: np.ndarray  # (C, D)
    neg_emb: np.ndarray  # (C, D)

    def __len__(self) -> int:
        return len(self.classes)

    def interleaved(self) -> np.ndarray:
        """(2C, D) matrix with rows positive, negative per class."""
        c, d = self.pos_emb.shape
        return np.stack([self.pos_emb, self.neg_emb], axis=1).reshape(2 * c, d)

    def subset(self, classes: Sequence[str]) -> "PromptPairSet":
        """The prompt pairs of ``classes``, in the given order."""
        idx = [self.classes.index(c) for c in classes]
        return PromptPairSet([self.classes[i] for i in idx], [self.positives[i] for i in idx],
                             [self.negatives[i] for i in idx], self.pos_emb[idx], self.neg_emb[idx])


def encode_prompt_pairs(triples: Sequence[tuple[str, str, str]], text_encoder: TextEncoder
                        ) -> PromptPairSet:
    """Embed ``(class, positive, negative)`` prompt triples."""
    names = [t[0] for t in triples]
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    pos = [t[1] for t in triples]
    neg = [t[2] for t in triples]
    for c, p, n in triples:
        if not p or not n:
            raise ValueError(f"class {c!r} is missing a positive or negative prompt")
        if p == n:
            raise ValueError(f"class {c!r}: positive and negative prompts must differ")
    emb = _embed(text_encoder, pos + neg)
    return PromptPairSet(names, pos, neg, emb[:len(names)], emb[len(names):])


def _template_triples(class_names, pos_template, neg_template):
    for tpl in (pos_template, neg_template):
        if "{class}" not in tpl:
            raise ValueError(f"template {tpl!r} lacks a {{class}} placeholder")
    return [(c, pos_template.replace("{class}", c), neg_template.replace("{class}", c))
            for c in class_names]


def make_prompt_pairs(class_names: Sequence[str], text_encoder: TextEncoder,
                      pos_template: str = POS_TEMPLATE, neg_template: str = NEG_TEMPLATE
                      ) -> PromptPairSet:
    return encode_prompt_pairs(_template_triples(list(class_names), pos_template, neg_template),
                               text_encoder)


def sentence_polarity(sentence: str, classes: Sequence[str]) -> tuple[str, int] | None:
    """(class, 1 or 0) for a sentence naming exactly one class, else None.

    A sentence containing the token "no" is negative.
    """
    toks = tokenize(sentence)
    named = [c for c in classes if all(t in toks for t in tokenize(c))]
    if len(named) != 1:
        return None
    return named[0], 0 if "no" in toks else 1


def mine_prompt_texts(reports: Sequence[str], class_names: Sequence[str],
                      pos_template: str = POS_TEMPLATE, neg_template: str = NEG_TEMPLATE
                      ) -> list[tuple[str, str, str]]:
    """Per class, the corpus's most frequent positive and negative sentence.

    Prompts phrased the way the reports phrase findings keep the prompts,
    the retrieval dictionary and the heatmap queries in one vocabulary. A
    class with no sentence of some polarity falls back to the template.
    Frequency ties go to the sentence seen first.
    """
    names = list(class_names)
    counts: dict[tuple[str, int], Counter] = {}
    for report in reports:
        for s in split_report(report):
            pol = sentence_polarity(s, names)
            if pol is not None:
                counts.setdefault(pol, Counter())[s] += 1
    out = []
    for c, p, n in _template_triples(names, pos_template, neg_template):
        mined = [counts.get((c, v)) for v in (1, 0)]
        p = mined[0].most_common(1)[0][0] if mined[0] else p
        n = mined[1].most_common(1)[0][0] if mined[1] else n
        out.append((c, p, n))
    return out
