"""Grid types shared by the codec, pipeline and evaluation code.

All grids are row-major numpy arrays indexed ``(row, column)``. Values are
immutable after construction: arrays are copied and marked read-only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .errors import BoundsError, MappingError, ShapeError, StructuralError

RESERVED_CHARS = ("*", "|", "\n")

DEFAULT_LABELS = ("background", "fields", "trees", "clouds", "ponds", "wells")


def _frozen(data, dtype=np.int32) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2D grid, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"grid must be at least 1x1, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClassMap:
    """Ordered label <-> id table. The background class is always present."""

    entries: tuple[tuple[str, int], ...]
    background_id: int = 0

    def __post_init__(self):
        entries = tuple((str(label), int(cid)) for label, cid in self.entries)
        object.__setattr__(self, "entries", entries)
        labels = [label for label, _ in entries]
        ids = [cid for _, cid in entries]
        for label in labels:
            if not label or label != label.strip():
                raise StructuralError(f"invalid class label {label!r}")
            if any(ch in label for ch in RESERVED_CHARS):
                raise StructuralError(f"class label {label!r} contains a reserved character")
        if len(set(labels)) != len(labels):
            raise StructuralError("class labels must be unique")
        if len(set(ids)) != len(ids):
            raise StructuralError("class ids must be unique")
        if any(cid < 0 for cid in ids):
            raise StructuralError("class ids must be non-negative")
        if self.background_id not in ids:
            raise StructuralError(f"background id {self.background_id} is not in the class map")

    @classmethod
    def from_labels(cls, labels: Iterable[str], background_id: int = 0) -> "ClassMap":
        return cls(tuple((label, i) for i, label in enumerate(labels)), background_id)

    @classmethod
    def default(cls) -> "ClassMap":
        return cls.from_labels(DEFAULT_LABELS)

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.entries]

    @property
    def ids(self) -> list[int]:
        return [cid for _, cid in self.entries]

    @property
    def background_label(self) -> str:
        return self.label_of(self.background_id)

    def __len__(self) -> int:
        return len(self.entries)

    def label_of(self, class_id: int) -> str:
        for label, cid in self.entries:
            if cid == class_id:
                return label
        raise MappingError(f"class id {class_id} has no label")

    def id_of(self, label: str) -> int:
        for lab, cid in self.entries:
            if lab == label:
                return cid
        raise MappingError(f"unknown class label {label!r}")

    def get(self, label: str, default: int | None = None) -> int:
        """Label lookup falling back to ``default`` (background if None)."""
        for lab, cid in self.entries:
            if lab == label:
                return cid
        return self.background_id if default is None else default

    def check_mask(self, mask: "SemanticMask") -> None:
        unknown = set(np.unique(mask.data).tolist()) - set(self.ids)
        if unknown:
            raise MappingError(f"mask contains class ids without a label: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "classes": [{"label": label, "id": cid} for label, cid in self.entries],
            "background_id": self.background_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassMap":
        try:
            entries = tuple((c["label"], c["id"]) for c in d["classes"])
            return cls(entries, int(d.get("background_id", 0)))
        except (KeyError, TypeError) as e:
            raise StructuralError(f"malformed class map: {e}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ClassMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class SemanticMask:
    """Per-pixel class ids."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))

    @classmethod
    def full(cls, height: int, width: int, class_id: int = 0) -> "SemanticMask":
        return cls(np.full((height, width), class_id, dtype=np.int32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, SemanticMask):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class InstanceMap:
    """Per-pixel instance ids (0 = no instance) plus an instance -> class table."""

    data: np.ndarray
    classes: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        table = {int(k): int(v) for k, v in dict(self.classes).items()}
        if 0 in table:
            raise StructuralError("instance id 0 is reserved for 'no instance'")
        present = set(np.unique(self.data).tolist()) - {0}
        if any(i < 0 for i in present):
            raise StructuralError("instance ids must be non-negative")
        missing = present - set(table)
        if missing:
            raise StructuralError(f"instance ids without a class entry: {sorted(missing)}")
        empty = set(table) - present
        if empty:
            raise StructuralError(f"class entries for instances without pixels: {sorted(empty)}")
        object.__setattr__(self, "classes", dict(sorted(table.items())))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def instance_ids(self) -> list[int]:
        return list(self.classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InstanceMap):
            return NotImplemented
        return np.array_equal(self.data, other.data) and self.classes == other.classes


@dataclass(frozen=True)
class PatchSpec:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise BoundsError(f"patch dims must be >= 1, got {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def fits(self, height: int, width: int) -> bool:
        return 0 <= self.top and self.bottom <= height and 0 <= self.left and self.right <= width

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)


def instance_to_semantic(m: InstanceMap, background_id: int = 0) -> SemanticMask:
    """Replace each instance id by its class; unlabeled pixels become background."""
    ids = np.asarray(m.instance_ids, dtype=np.int64)
    lut = np.full(int(ids.max()) + 1 if ids.size else 1, background_id, dtype=np.int32)
    for iid, cid in m.classes.items():
        lut[iid] = cid
    lut[0] = background_id
    return SemanticMask(lut[m.data])


def crop(m: SemanticMask, p: PatchSpec) -> SemanticMask:
    if not p.fits(m.height, m.width):
        raise BoundsError(f"{p} does not fit a {m.height}x{m.width} mask")
    return SemanticMask(m.data[p.slices()])


def pad_to(m: SemanticMask, height: int, width: int, fill: int) -> SemanticMask:
    """Pad on the bottom and right up to ``height`` x ``width``."""
    if height < m.height or width < m.width:
        raise BoundsError("pad target smaller than mask")
    out = np.full((height, width), fill, dtype=np.int32)
    out[: m.height, : m.width] = m.data
    return SemanticMask(out)


# --- raster IO -------------------------------------------------------------


def _write_png(path, arr: np.ndarray, sixteen_bit: bool) -> None:
    if arr.min() < 0 or arr.max() > 65535:
        raise StructuralError("ids must fit in 16 bits for PNG storage")
    dtype = np.uint16 if sixteen_bit or arr.max() > 255 else np.uint8
    Image.fromarray(np.ascontiguousarray(arr.astype(dtype))).save(path, format="PNG")


def read_id_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I", "P"):
            raise StructuralError(f"{path}: expected a single-channel id raster, got mode {im.mode}")
        return np.array(im).astype(np.int32)


def save_semantic(path, m: SemanticMask) -> None:
    _write_png(path, m.data, sixteen_bit=False)


def load_semantic(path, class_map: ClassMap | None = None) -> SemanticMask:
    m = SemanticMask(read_id_raster(path))
    if class_map is not None:
        class_map.check_mask(m)
    return m


def instance_table_path(png_path) -> Path:
    return Path(png_path).with_suffix(".json")


def save_instances(path, m: InstanceMap) -> None:
    """16-bit PNG plus a ``{"instance_id": class_id}`` sidecar next to it."""
    _write_png(path, m.data, sixteen_bit=True)
    table = {str(k): v for k, v in m.classes.items()}
    instance_table_path(path).write_text(json.dumps(table, indent=2, sort_keys=False) + "\n")


def load_instances(path) -> InstanceMap:
    data = read_id_raster(path)
    table = json.loads(instance_table_path(path).read_text())
    return InstanceMap(data, {int(k): int(v) for k, v in table.items()})
