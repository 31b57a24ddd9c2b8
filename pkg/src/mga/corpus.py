"""Paired image-report corpora: synthetic generation, JSON-lines I/O, splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import atomic_write_text
from .segmap import BoundingBox

__all__ = [
    "PairedExample",
    "SyntheticConfig",
    "CorpusFormatError",
    "DEFAULT_CLASSES",
    "synth_generate",
    "labels_to_report",
    "label_matrix",
    "corpus_classes",
    "load_corpus",
    "save_corpus",
    "split",
    "read_pgm",
]

DEFAULT_CLASSES = ("edema", "pneumonia", "effusion", "cardiomegaly",
                   "atelectasis", "consolidation", "pneumothorax", "nodule")
QUADRANTS = ("upper left", "upper right", "lower left", "lower right")


class CorpusFormatError(ValueError):
    pass


@dataclass
class PairedExample:
    id: str
    image: np.ndarray
    report: str
    labels: dict[str, int] | None = None
    boxes: list[BoundingBox] | None = None

    def validate(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 2:
            raise CorpusFormatError(f"{self.id}: image must be 2-D")
        if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
            raise CorpusFormatError(f"{self.id}: pixel values must lie in [0, 1]")
        if not self.report.strip():
            raise CorpusFormatError(f"{self.id}: empty report")
        for cls, v in (self.labels or {}).items():
            if v not in (-1, 0, 1):
                raise CorpusFormatError(f"{self.id}: label {cls}={v!r} not in {{-1, 0, 1}}")
        for b in self.boxes or []:
            if not b.within(*img.shape):
                raise CorpusFormatError(f"{self.id}: box {b} outside the image")


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic corpus.

    Class ``c`` draws a Gaussian bump whose (sigma_x, sigma_y) shape cycles
    through small-round, wide, tall and large-round, spanning ``radius_range``.
    With ``fixed_quadrant`` the bump sits near the centre of quadrant ``c % 4``;
    otherwise its centre is uniform over the image.
    """

    classes: tuple = DEFAULT_CLASSES[:4]
    image_side: int = 64
    radius_range: tuple = (2.5, 5.5)
    noise: float = 0.2
    fixed_quadrant: bool = True
    jitter: float = 4.0
    presence_rate: float = 0.4
    pos_template: str = "There is {class} in the {location}."
    neg_template: str = "There is no {class}."

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius range must satisfy 0 < lo <= hi")
        reach = 2 * hi + (self.jitter if self.fixed_quadrant else 0)
        if reach > self.image_side / 4 and self.fixed_quadrant:
            raise ValueError("blob does not fit inside its quadrant")
        if 4 * hi >= self.image_side:
            raise ValueError("blob does not fit inside the image")

    @classmethod
    def with_classes(cls, n: int, **kw) -> "SyntheticConfig":
        names = tuple(DEFAULT_CLASSES[i] if i < len(DEFAULT_CLASSES) else f"finding{i}"
                      for i in range(n))
        return cls(classes=names, **kw)

    def sigma(self, c: int) -> tuple[float, float]:
        lo, hi = self.radius_range
        return [(lo, lo), (hi, lo), (lo, hi), (hi, hi)][c % 4]


def _location(cx: float, cy: float, side: int) -> str:
    return QUADRANTS[(2 if cy >= side / 2 else 0) + (1 if cx >= side / 2 else 0)]


def _sentence(template: str, cls: str, location: str = "") -> str:
    return template.replace("{class}", cls).replace("{location}", location)


def synth_generate(config: SyntheticConfig, n: int, seed: int) -> list[PairedExample]:
    """Noise images with one Gaussian bump per present class, plus matching reports."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    side = config.image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = []
    for i in range(n):
        img = rng.uniform(0.0, config.noise, size=(side, side))
        present = rng.random(len(config.classes)) < config.presence_rate
        sentences, labels, boxes = [], {}, []
        for c, name in enumerate(config.classes):
            sx, sy = config.sigma(c)
            if config.fixed_quadrant:
                q = c % 4
                base_x = side * (0.25 + 0.5 * (q % 2))
                base_y = side * (0.25 + 0.5 * (q // 2))
                cx = base_x + rng.uniform(-config.jitter, config.jitter)
                cy = base_y + rng.uniform(-config.jitter, config.jitter)
            else:
                cx = rng.uniform(2 * sx, side - 2 * sx)
                cy = rng.uniform(2 * sy, side - 2 * sy)
            if not present[c]:
                labels[name] = 0
                sentences.append(_sentence(config.neg_template, name))
                continue
            labels[name] = 1
            img = img + np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
            x0, x1 = max(0, math.floor(cx - 2 * sx)), min(side, math.ceil(cx + 2 * sx))
            y0, y1 = max(0, math.floor(cy - 2 * sy)), min(side, math.ceil(cy + 2 * sy))
            boxes.append(BoundingBox(x0, y0, x1 - x0, y1 - y0, name))
            sentences.append(_sentence(config.pos_template, name, _location(cx, cy, side)))
        out.append(PairedExample(f"syn-{seed}-{i:05d}", np.clip(img, 0.0, 1.0),
                                 " ".join(sentences), labels, boxes))
    return out


def labels_to_report(labels: dict[str, int], pos_template: str = "There is {class}.",
                     neg_template: str = "There is no {class}.") -> str:
    """One sentence per known label, in the mapping's order; unknown (-1) omitted."""
    known = [(c, v) for c, v in labels.items() if v != -1]
    if not known:
        raise ValueError("all labels are unknown")
    return " ".join(_sentence(pos_template if v == 1 else neg_template, c) for c, v in known)


def corpus_classes(examples: Sequence[PairedExample]) -> list[str]:
    """Class names in first-seen order across the corpus's label maps."""
    seen = {}
    for ex in examples:
        for c in ex.labels or {}:
            seen.setdefault(c, None)
    return list(seen)


def label_matrix(examples: Sequence[PairedExample], classes: Sequence[str]) -> np.ndarray:
    """(N, C) matrix of labels with -1 wherever a label is missing or unknown."""
    y = -np.ones((len(examples), len(classes)))
    for i, ex in enumerate(examples):
        for j, c in enumerate(classes):
            if ex.labels and c in ex.labels:
                y[i, j] = ex.labels[c]
    return y


def read_pgm(path) -> np.ndarray:
    """8-bit binary (P5) or ASCII (P2) graymap scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P5":
        if maxval > 255:
            raise CorpusFormatError(f"{path}: only 8-bit graymaps are supported")
        data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    elif magic == "P2":
        data = np.array(raw[pos:].split(), dtype=np.int64)[:w * h]
    else:
        raise CorpusFormatError(f"{path}: not a graymap ({magic})")
    if data.size != w * h:
        raise CorpusFormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / maxval


def _parse_record(rec, lineno: int, base: Path) -> PairedExample:
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"record {lineno}: expected a JSON object")
    for key in ("id", "image", "report"):
        if key not in rec:
            raise CorpusFormatError(f"record {lineno}: missing field {key!r}")
    image = rec["image"]
    if isinstance(image, dict) and "pgm" in image:
        img = read_pgm(base / image["pgm"])
    else:
        try:
            img = np.array(image, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise CorpusFormatError(f"record {lineno}: bad image: {exc}") from None
    labels = rec.get("labels")
    if labels is not None:
        if not isinstance(labels, dict) or any(v not in (-1, 0, 1) or isinstance(v, bool)
                                               for v in labels.values()):
            raise CorpusFormatError(f"record {lineno}: labels must map class -> -1|0|1")
        labels = {str(k): int(v) for k, v in labels.items()}
    boxes = rec.get("boxes")
    try:
        boxes = None if boxes is None else [BoundingBox.from_json(b) for b in boxes]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"record {lineno}: bad box: {exc}") from None
    ex = PairedExample(str(rec["id"]), img, str(rec["report"]), labels, boxes)
    try:
        ex.validate()
    except CorpusFormatError as exc:
        raise CorpusFormatError(f"record {lineno}: {exc}") from None
    return ex


def load_corpus(path) -> list[PairedExample]:
    """Read a JSON-lines corpus; errors name the 1-based record line."""
    path = Path(path)
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"record {lineno}: invalid JSON: {exc}") from None
            out.append(_parse_record(rec, lineno, path.parent))
    return out


def save_corpus(examples: Sequence[PairedExample], path) -> None:
    lines = []
    for ex in examples:
        rec = {"id": ex.id, "image": np.asarray(ex.image).tolist(), "report": ex.report}
        if ex.labels is not None:
            rec["labels"] = dict(ex.labels)
        if ex.boxes is not None:
            rec["boxes"] = [b.to_json() for b in ex.boxes]
        lines.append(json.dumps(rec))
    atomic_write_text(path, "\n".join(lines) + "\n")


def split(examples: Sequence[PairedExample], test_fraction: float, seed: int
          ) -> tuple[list[PairedExample], list[PairedExample]]:
    """Seeded disjoint train/test partition by example id."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    ids = [ex.id for ex in examples]
    if len(set(ids)) != len(ids):
        raise ValueError("example ids are not unique")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_test = int(round(len(examples) * test_fraction))
    test_idx = set(order[:n_test].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in test_idx]
    test = [ex for i, ex in enumerate(examples) if i in test_idx]
    return train, test
