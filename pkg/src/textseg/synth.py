"""Synthetic smallholder-style scenes with instance ground truth.

A scene is a grid of parcels of random size separated by 1-2 px background
paths. Each parcel holds at most one object: a field filling the parcel, a
tree crown, pond or cloud as an ellipse, or a 2x2 well. Objects of the same
class therefore never touch, so the semantic map alone determines the
instances.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .masks import ClassMap, InstanceMap, save_instances

PALETTE = {
    "background": (120, 100, 80),
    "fields": (90, 160, 60),
    "trees": (20, 90, 30),
    "clouds": (235, 235, 240),
    "ponds": (40, 70, 160),
    "wells": (200, 60, 40),
}

# class label -> relative frequency of parcels holding it
PARCEL_MIX = {"fields": 0.62, "trees": 0.12, "ponds": 0.07, "clouds": 0.05, "wells": 0.04, None: 0.10}


def _cuts(rng: np.random.Generator, length: int, lo: int, hi: int) -> list[tuple[int, int]]:
    """Split [0, length) into parcels separated by 1-2 px gaps."""
    spans = []
    pos = int(rng.integers(0, 3))
    while pos < length:
        size = int(rng.integers(lo, hi + 1))
        end = min(pos + size, length)
        spans.append((pos, end))
        pos = end + int(rng.integers(1, 3))
    return spans


def synth_scene(
    rng: np.random.Generator,
    height: int,
    width: int,
    cm: ClassMap | None = None,
    parcel_range: tuple[int, int] = (6, 40),
) -> InstanceMap:
    cm = ClassMap.default() if cm is None else cm
    kinds = [k for k in PARCEL_MIX if k is None or k in cm.labels]
    weights = np.array([PARCEL_MIX[k] for k in kinds])
    weights /= weights.sum()

    data = np.zeros((height, width), dtype=np.int32)
    table: dict[int, int] = {}
    next_id = 1
    for r0, r1 in _cuts(rng, height, *parcel_range):
        for c0, c1 in _cuts(rng, width, *parcel_range):
            kind = kinds[int(rng.choice(len(kinds), p=weights))]
            if kind is None:
                continue
            h, w = r1 - r0, c1 - c0
            if kind == "fields":
                region = np.ones((h, w), dtype=bool)
            elif kind == "wells":
                region = np.zeros((h, w), dtype=bool)
                cr, cc = h // 2, w // 2
                region[cr : cr + 2, cc : cc + 2] = True
            else:
                yy, xx = np.mgrid[0:h, 0:w]
                cy, cx = (h - 1) / 2, (w - 1) / 2
                ry, rx = max(h / 2 * rng.uniform(0.6, 1.0), 0.5), max(w / 2 * rng.uniform(0.6, 1.0), 0.5)
                region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            if not region.any():
                continue
            data[r0:r1, c0:c1][region] = next_id
            table[next_id] = cm.id_of(kind)
            next_id += 1
    return InstanceMap(data, table)


def render_image(m: InstanceMap, cm: ClassMap, rng: np.random.Generator | None = None) -> np.ndarray:
    """RGB stand-in for the satellite image, colored by class."""
    lut = np.zeros((max(cm.ids) + 1, 3), dtype=np.int16)
    for label, cid in cm.entries:
        lut[cid] = PALETTE.get(label, (128, 128, 128))
    sem = np.zeros(m.shape, dtype=np.int32)
    for iid, cid in m.classes.items():
        sem[m.data == iid] = cid
    img = lut[sem]
    if rng is not None:
        img = img + rng.integers(-12, 13, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def scene_sizes(rng: np.random.Generator, count: int, lo: int = 48, hi: int = 200) -> list[tuple[int, int]]:
    return [(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))) for _ in range(count)]


def write_corpus(
    out_dir,
    seed: int,
    count: int,
    sizes: list[tuple[int, int]] | None = None,
    cm: ClassMap | None = None,
) -> list[str]:
    """Write ``classes.json``, ``images/<scene>.png`` and ``gt/<scene>.png`` (+ ``.json``).

    Returns the scene names.
    """
    cm = ClassMap.default() if cm is None else cm
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    cm.save(out / "classes.json")
    rng = np.random.default_rng(seed)
    sizes = scene_sizes(rng, count) if sizes is None else sizes
    names = []
    for i, (h, w) in enumerate(sizes):
        scene_rng = np.random.default_rng([seed, i])
        name = f"scene_{i:03d}"
        m = synth_scene(scene_rng, h, w, cm)
        save_instances(out / "gt" / f"{name}.png", m)
        Image.fromarray(render_image(m, cm, scene_rng)).save(out / "images" / f"{name}.png")
        names.append(name)
    return names
