"""Cropped-region evaluation with pluggable scorers.

Both images are cropped to the tight bounding box of the edit mask before
scoring. Real CLIP / DINO-ViT scorers live outside this package and plug in
through ``module:attr`` names; the built-ins are hermetic stand-ins.
"""

from __future__ import annotations

import importlib
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol, runtime_checkable

import numpy as np

from magedit.errors import ConfigError, EmptyEditRegion

TEXT_ALIGNMENT = "text_alignment"  # higher is better
STRUCTURE_DISTANCE = "structure_distance"  # lower is better


@runtime_checkable
class ScorerPlugin(Protocol):
    name: str
    kind: str
    concurrent_safe: bool

    def score(self, crop: np.ndarray, text: str | None = None, reference: np.ndarray | None = None) -> float: ...


class PixelL2Scorer:
    """Root-mean-square per-pixel L2 distance between the two crops."""

    name = "pixel_l2"
    kind = STRUCTURE_DISTANCE
    concurrent_safe = True

    def score(self, crop, text=None, reference=None):
        if reference is None:
            raise ConfigError("pixel_l2 needs the source crop")
        a = np.asarray(crop, dtype=np.float64)
        b = np.asarray(reference, dtype=np.float64)
        if a.shape != b.shape:
            raise ConfigError("crops differ in shape")
        diff = (a - b) ** 2
        if diff.ndim == 3:
            diff = diff.sum(axis=2)
        return math.sqrt(diff.sum() / diff.size)


COLORS = {
    "red": (220, 30, 30),
    "green": (30, 160, 60),
    "blue": (30, 60, 220),
    "yellow": (230, 210, 40),
    "orange": (240, 140, 20),
    "purple": (130, 40, 170),
    "pink": (240, 130, 180),
    "white": (245, 245, 245),
    "black": (10, 10, 10),
    "gray": (128, 128, 128),
    "grey": (128, 128, 128),
    "brown": (120, 70, 30),
}


class ColorKeywordScorer:
    """Closeness of the crop's mean colour to the colour words in the phrase.

    Returns ``1 - d / d_max`` for the RGB distance ``d`` to the nearest named
    colour in the phrase, or 0 when the phrase names no colour.
    """

    name = "color_keyword"
    kind = TEXT_ALIGNMENT
    concurrent_safe = True

    def score(self, crop, text=None, reference=None):
        words = [w.strip(".,").lower() for w in (text or "").split()]
        targets = [COLORS[w] for w in words if w in COLORS]
        if not targets:
            return 0.0
        rgb = np.asarray(crop, dtype=np.float64)
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[..., None], 3, axis=2)
        mean = rgb[..., :3].reshape(-1, 3).mean(axis=0)
        d = min(float(np.linalg.norm(mean - np.asarray(c))) for c in targets)
        return 1.0 - d / math.sqrt(3 * 255.0**2)


BUILTIN_SCORERS = {"pixel_l2": PixelL2Scorer, "color_keyword": ColorKeywordScorer}


def load_scorer(name: str):
    if name in BUILTIN_SCORERS:
        return BUILTIN_SCORERS[name]()
    if ":" not in name:
        raise ConfigError(f"unknown scorer {name!r}; use a built-in or 'module:attr'")
    module, attr = name.split(":", 1)
    try:
        obj = getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load scorer {name!r}: {exc}") from exc
    scorer = obj() if isinstance(obj, type) else obj
    if not isinstance(scorer, ScorerPlugin):
        raise ConfigError(f"{name!r} does not satisfy the scorer contract")
    return scorer


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight ``(row0, row1, col0, col1)`` box, end-exclusive."""
    m = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if not len(rows):
        raise EmptyEditRegion("evaluation mask is empty")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def crop(image: np.ndarray, box) -> np.ndarray:
    r0, r1, c0, c1 = box
    return np.asarray(image)[r0:r1, c0:c1]


def evaluate_crops(edited, source, mask, phrase: str | None, scorers, max_workers: int = 4) -> dict:
    edited, source = np.asarray(edited), np.asarray(source)
    if edited.shape != source.shape:
        raise ConfigError(f"edited {edited.shape} and source {source.shape} differ in size")
    if np.asarray(mask).shape != edited.shape[:2]:
        raise ConfigError("mask does not match the image size")
    if not scorers:
        raise ConfigError("no scorers registered")
    box = mask_bbox(mask)
    edited_crop, source_crop = crop(edited, box), crop(source, box)

    def run(scorer):
        entry = {"name": scorer.name, "kind": scorer.kind}
        try:
            if scorer.kind == TEXT_ALIGNMENT:
                value = scorer.score(edited_crop, text=phrase)
            else:
                value = scorer.score(edited_crop, reference=source_crop)
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"non-finite score {value}")
            entry["value"] = value
        except Exception as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        return entry

    safe = [s for s in scorers if getattr(s, "concurrent_safe", False)]
    results = {}
    if len(safe) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for s, entry in zip(safe, pool.map(run, safe)):
                results[id(s)] = entry
    for s in scorers:
        if id(s) not in results:
            results[id(s)] = run(s)
    return {
        "bbox": list(box),
        "crop_shape": list(edited_crop.shape),
        "phrase": phrase,
        "scores": [results[id(s)] for s in scorers],
    }
