import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from textseg.masks import ClassMap

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture
def cm():
    return ClassMap.default()


@st.composite
def label_grids(draw, max_side=64, max_classes=5):
    """A (data, n_classes) pair: an int grid with values in [0, n_classes)."""
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    k = draw(st.integers(1, max_classes))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    # mix of noisy and blocky rows so long and short runs both appear
    if draw(st.booleans()):
        data = rng.integers(0, k, size=(h, w))
    else:
        cuts = np.sort(rng.integers(0, w + 1, size=(h, 3)), axis=1)
        cols = np.arange(w)[None, :]
        data = (cols >= cuts[:, :1]).astype(int) + (cols >= cuts[:, 1:2]) + (cols >= cuts[:, 2:])
        data = (data + rng.integers(0, k, size=(h, 1))) % k
    return data.astype(np.int32), k


MUTATION_KINDS = ("drop_row", "duplicate_row", "garble_label", "split_run", "merge_rows", "zero_count",
                  "drop_star", "whitespace", "truncate", "extra_row")


def mutate(text: str, kind: str, rng: np.random.Generator) -> str:
    """Apply one systematic corruption of the kind a language model might produce."""
    rows = text.split("\n")
    i = int(rng.integers(len(rows)))
    runs = rows[i].split("|")
    j = int(rng.integers(len(runs)))
    if kind == "drop_row":
        del rows[i]
    elif kind == "duplicate_row":
        rows.insert(i, rows[i])
    elif kind == "garble_label":
        label, _, count = runs[j].rpartition("*")
        runs[j] = label[::-1] + "x*" + count
        rows[i] = "|".join(runs)
    elif kind == "split_run":
        label, _, count = runs[j].rpartition("*")
        n = int(count)
        if n > 1:
            k = int(rng.integers(1, n))
            runs[j : j + 1] = [f"{label}*{k}", f"{label}*{n - k}"]
        rows[i] = "|".join(runs)
    elif kind == "merge_rows" and i + 1 < len(rows):
        rows[i : i + 2] = [rows[i] + "|" + rows[i + 1]]
    elif kind == "zero_count":
        label, _, _ = runs[j].rpartition("*")
        runs[j] = label + "*0"
        rows[i] = "|".join(runs)
    elif kind == "drop_star":
        runs[j] = runs[j].replace("*", "")
        rows[i] = "|".join(runs)
    elif kind == "whitespace":
        rows[i] = "  " + rows[i].replace("|", " \t| ").replace("*", " *  ") + " "
    elif kind == "truncate":
        return text[: int(rng.integers(len(text) + 1))]
    elif kind == "extra_row":
        rows.insert(i, "")
    return "\n".join(rows)


def mutations(text: str, rng: np.random.Generator, per_kind: int = 1) -> list[str]:
    return [mutate(text, kind, rng) for kind in MUTATION_KINDS for _ in range(per_kind)]


# acceptance criteria register their outcome here; printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
