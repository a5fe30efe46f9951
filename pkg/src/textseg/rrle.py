"""Row run-length encoding (RRLE) of semantic mask patches.

Grammar of the text form::

    rrle := row ('\\n' row)*
    row  := run ('|' run)*
    run  := label WS* '*' WS* count

The encoder always emits the canonical run ``"label *count"``. The decoder is
deliberately liberal: it accepts arbitrary whitespace, multi-word labels
(split on the last ``*``), and recovers from malformed model output instead of
raising. Recovery actions are counted in the returned :class:`DecodeReport`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import MappingError, ShapeError
from .masks import ClassMap, SemanticMask

_COUNT = re.compile(r"[0-9]+")


def format_run(label: str, count: int) -> str:
    return f"{label} *{count}"


def encode_rrle(r: SemanticMask, cm: ClassMap) -> str:
    """Encode ``r`` row by row as maximal runs of equal class id."""
    names = {cid: label for label, cid in cm.entries}
    rows = []
    for row in r.data.tolist():
        parts = []
        v, c = row[0], 1
        for x in row[1:]:
            if x == v:
                c += 1
            else:
                parts.append(_run(names, v, c))
                v, c = x, 1
        parts.append(_run(names, v, c))
        rows.append("|".join(parts))
    return "\n".join(rows)


def _run(names: dict[int, str], v: int, c: int) -> str:
    try:
        return format_run(names[v], c)
    except KeyError:
        raise MappingError(f"class id {v} has no label in the class map") from None


@dataclass(frozen=True)
class DecodeReport:
    mask: SemanticMask
    truncated_runs: int = 0
    unknown_labels: int = 0
    underfilled_pixels: int = 0
    invalid_runs: int = 0

    @property
    def clean(self) -> bool:
        return not (self.truncated_runs or self.unknown_labels or self.underfilled_pixels or self.invalid_runs)

    def counters(self) -> dict[str, int]:
        return {
            "truncated_runs": self.truncated_runs,
            "unknown_labels": self.unknown_labels,
            "underfilled_pixels": self.underfilled_pixels,
            "invalid_runs": self.invalid_runs,
        }


def parse_run(token: str) -> tuple[str, int] | None:
    """Split a run token on its last ``*``. Returns None when unparseable."""
    label, star, count = token.rpartition("*")
    if not star:
        return None
    count = count.strip()
    if not _COUNT.fullmatch(count):
        return None
    n = int(count)
    if n <= 0:
        return None
    return label.strip(), n


def decode_rrle(t: str, cm: ClassMap, h_p: int, w_p: int) -> DecodeReport:
    """Decode RRLE text into an ``h_p`` x ``w_p`` mask with a flat pixel pointer.

    Rows are not re-aligned: a short row leaves the pointer where it is and the
    next row continues from there. An empty row advances the pointer by one
    full row width. Runs that would overflow the grid are clipped.
    """
    if h_p < 1 or w_p < 1:
        raise ShapeError(f"patch dims must be >= 1, got {h_p}x{w_p}")
    total = h_p * w_p
    flat = np.full(total, cm.background_id, dtype=np.int32)
    lookup = dict(cm.entries)
    p = 0
    truncated = unknown = invalid = 0

    for s_row in t.split("\n"):
        if not s_row.strip():
            p = min(p + w_p, total)
            continue
        for token in s_row.split("|"):
            parsed = parse_run(token)
            if parsed is None:
                invalid += 1
                continue
            label, c = parsed
            v = lookup.get(label)
            if v is None:
                unknown += 1
                v = cm.background_id
            if p + c > total:
                truncated += 1
                c = total - p
            flat[p : p + c] = v
            p += c

    return DecodeReport(
        mask=SemanticMask(flat.reshape(h_p, w_p)),
        truncated_runs=truncated,
        unknown_labels=unknown,
        underfilled_pixels=total - p,
        invalid_runs=invalid,
    )


def run_count(t: str) -> int:
    """Number of runs in a well-formed RRLE string."""
    return sum(len(row.split("|")) for row in t.split("\n"))
