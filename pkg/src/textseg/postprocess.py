"""Semantic map -> instance map via boundary strength and marker-based watershed.

Everything uses 4-connectivity. Markers are the connected same-class regions
of pixels whose boundary strength is below the threshold; they are grown over
same-class pixels in order of ascending strength. A pixel reachable from two
markers at once goes to the one popped first, which for equal strength is the
lower instance id. Same-class regions that contain no marker at all (e.g.
strips too thin to have an interior) become instances of their own.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ShapeError, StructuralError
from .masks import InstanceMap, SemanticMask

_NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class BoundaryMap:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ShapeError(f"boundary map must be 2D, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min(initial=0) < 0 or arr.max(initial=0) > 1:
            raise StructuralError("boundary strengths must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def extract_boundaries(s: SemanticMask) -> BoundaryMap:
    """Strength 1 where any 4-neighbour has a different class, else 0."""
    d = s.data
    b = np.zeros(d.shape, dtype=bool)
    vert = d[1:, :] != d[:-1, :]
    horiz = d[:, 1:] != d[:, :-1]
    b[1:, :] |= vert
    b[:-1, :] |= vert
    b[:, 1:] |= horiz
    b[:, :-1] |= horiz
    return BoundaryMap(b.astype(np.float64))


def load_boundary_map(path) -> BoundaryMap:
    """Read an 8-bit (scaled by 1/255), 16-bit (1/65535) or float raster."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: boundary raster must be single-channel")
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    elif arr.dtype == np.uint16:
        arr = arr / 65535.0
    return BoundaryMap(arr.astype(np.float64))


def save_boundary_map(path, b: BoundaryMap) -> None:
    Image.fromarray(np.round(b.data * 255).astype(np.uint8)).save(path)


def _components(mask: np.ndarray, cls: np.ndarray, labels: np.ndarray, next_id: int) -> int:
    """Write ids for the 4-connected same-class components of ``mask`` into ``labels``.

    Ids start at ``next_id`` and follow the raster order of each component's
    first pixel. Returns the next unused id.
    """
    comp = np.zeros(mask.shape, dtype=np.int64)
    offset = 0
    for k in np.unique(cls[mask]):
        lab, n = ndimage.label(mask & (cls == k), structure=_FOUR)
        comp[lab > 0] = lab[lab > 0] + offset
        offset += n
    if offset == 0:
        return next_id
    flat = comp.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(offset + 1, dtype=np.int64)
    remap[ids[order]] = np.arange(next_id, next_id + len(ids))
    sel = comp > 0
    labels[sel] = remap[comp[sel]]
    return next_id + len(ids)


def watershed_instances(
    s: SemanticMask, b: BoundaryMap, threshold: float = 0.5, background_id: int = 0
) -> InstanceMap:
    if s.shape != b.shape:
        raise ShapeError(f"semantic {s.shape} and boundary {b.shape} shapes differ")
    if not 0.0 < threshold <= 1.0:
        raise StructuralError("threshold must be in (0, 1]")
    cls = s.data
    strength = b.data
    h, w = cls.shape
    fg = cls != background_id
    labels = np.zeros((h, w), dtype=np.int32)

    n = _components(fg & (strength < threshold), cls, labels, 1)

    heap: list[tuple[float, int, int, int]] = []

    def push_neighbors(r: int, c: int, lab: int) -> None:
        k = cls[r, c]
        for dr, dc in _NEIGHBORS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not labels[rr, cc] and cls[rr, cc] == k:
                heapq.heappush(heap, (strength[rr, cc], lab, rr, cc))

    # only marker pixels touching unlabeled foreground can seed the flood
    open_ = fg & (labels == 0)
    touch = np.zeros_like(open_)
    touch[1:, :] |= open_[:-1, :]
    touch[:-1, :] |= open_[1:, :]
    touch[:, 1:] |= open_[:, :-1]
    touch[:, :-1] |= open_[:, 1:]
    for r, c in zip(*np.nonzero(touch & (labels > 0))):
        push_neighbors(r, c, labels[r, c])
    while heap:
        _, lab, r, c = heapq.heappop(heap)
        if labels[r, c]:
            continue
        labels[r, c] = lab
        push_neighbors(r, c, lab)

    _components(fg & (labels == 0), cls, labels, n)
    return _instance_map(labels, cls)


def connected_instances(s: SemanticMask, background_id: int = 0) -> InstanceMap:
    """One instance per 4-connected same-class region, with no boundary splitting."""
    labels = np.zeros(s.shape, dtype=np.int32)
    _components(s.data != background_id, s.data, labels, 1)
    return _instance_map(labels, s.data)


def _instance_map(labels: np.ndarray, cls: np.ndarray) -> InstanceMap:
    ids, first = np.unique(labels.ravel(), return_index=True)
    flat_cls = cls.ravel()
    table = {int(i): int(flat_cls[f]) for i, f in zip(ids, first) if i != 0}
    return InstanceMap(labels, table)
