"""Sentence-conditioned patch similarity heatmaps used as segmentation maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import DualEncoder, encode_images, tokenize
from .io import atomic_write_bytes, atomic_write_text

__all__ = [
    "BoundingBox",
    "Heatmap",
    "sentence_heatmap",
    "heatmap_from_features",
    "bilinear_upsample",
    "evaluate_heatmap",
    "box_mask",
    "heatmap_csv",
    "heatmap_pgm",
    "write_heatmap",
]


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    label: str = ""

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive: {self}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative: {self}")

    def within(self, height: int, width: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "class": self.label}

    @classmethod
    def from_json(cls, doc: dict) -> "BoundingBox":
        return cls(int(doc["x"]), int(doc["y"]), int(doc["w"]), int(doc["h"]), str(doc.get("class", "")))


@dataclass
class Heatmap:
    grid: np.ndarray  # (G, G) cosine similarities
    upsampled: np.ndarray  # (H, W)
    sentence: str = ""


def bilinear_upsample(grid, height: int, width: int) -> np.ndarray:
    """Align-corners bilinear interpolation of a 2-D grid to ``height x width``."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grid must be 2-D")
    gh, gw = g.shape
    if height < gh or width < gw:
        raise ValueError(f"target {height}x{width} is smaller than grid {gh}x{gw}")

    def coords(n_out, n_in):
        if n_in == 1:
            return np.zeros(n_out, dtype=np.intp), np.zeros(n_out)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
        lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
        return lo, pos - lo

    r0, fr = coords(height, gh)
    c0, fc = coords(width, gw)
    r1 = np.minimum(r0 + 1, gh - 1)
    c1 = np.minimum(c0 + 1, gw - 1)
    fr, fc = fr[:, None], fc[None, :]
    top = g[r0][:, c0] * (1 - fc) + g[r0][:, c1] * fc
    bottom = g[r1][:, c0] * (1 - fc) + g[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def heatmap_from_features(sentence_embedding, patch_grid, height: int, width: int,
                          sentence: str = "") -> Heatmap:
    s = np.asarray(sentence_embedding, dtype=np.float64).reshape(-1)
    grid = np.asarray(patch_grid, dtype=np.float64) @ s
    return Heatmap(grid, bilinear_upsample(grid, height, width), sentence)


def sentence_heatmap(sentence: str, image, model: DualEncoder) -> Heatmap:
    """Cosine between one sentence's embedding and every patch feature, upsampled."""
    if not tokenize(sentence):
        raise ValueError("empty sentence")
    img = np.asarray(image, dtype=np.float64)
    local, _ = encode_images(img[None], model)
    emb = model.embed_sentences([sentence])[0]
    return heatmap_from_features(emb, local.grid.data[0], img.shape[0], img.shape[1], sentence)


def box_mask(boxes, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        mask[b.y:b.y + b.h, b.x:b.x + b.w] = True
    return mask


def evaluate_heatmap(heatmap, boxes, q: float = 0.95) -> tuple[bool, float]:
    """Pointing hit and IoU of the top-quantile region against the union of boxes.

    The argmax takes the lowest row-major index on ties. Both results depend
    only on the ranks of the heatmap values.
    """
    values = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty heatmap")
    if not boxes:
        raise ValueError("need at least one box")
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    h, w = values.shape
    target = box_mask(boxes, h, w)
    r, c = np.unravel_index(int(np.argmax(values)), values.shape)
    hit = bool(target[r, c])
    # "higher" picks an actual order statistic, which selects the same pixels as
    # linear interpolation while staying exactly rank-based
    region = values >= np.quantile(values, q, method="higher")
    union = np.logical_or(region, target).sum()
    iou = float(np.logical_and(region, target).sum() / union) if union else 0.0
    return hit, iou


def heatmap_csv(heatmap: Heatmap) -> str:
    return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in heatmap.upsampled)


def heatmap_pgm(heatmap: Heatmap) -> bytes:
    """Binary 8-bit graymap of the min-max scaled upsampled map."""
    v = heatmap.upsampled
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_heatmap(heatmap: Heatmap, out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path, pgm_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.pgm"
    atomic_write_text(csv_path, heatmap_csv(heatmap))
    atomic_write_bytes(pgm_path, heatmap_pgm(heatmap))
    return csv_path, pgm_path
