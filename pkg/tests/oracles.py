"""Independent reference implementations used to check the package.

Each one is written with plain loops over Python lists and shares no code with
the implementation it checks.
"""
from __future__ import annotations

from collections import deque


def lookup_semantic(data, classes, background=0):
    return [[classes[v] if v else background for v in row] for row in data]


def copy_crop(data, top, left, h, w):
    out = []
    for r in range(h):
        row = []
        for c in range(w):
            row.append(data[top + r][left + c])
        out.append(row)
    return out


def pixel_walk_runs(data):
    """Per-row list of (value, count) runs, built one pixel at a time."""
    rows = []
    for row in data:
        runs = []
        for c, v in enumerate(row):
            if c == 0 or v != row[c - 1]:
                runs.append([v, 1])
            else:
                runs[-1][1] += 1
        rows.append([tuple(r) for r in runs])
    return rows


def pixel_walk_encode(data, names):
    return "\n".join("|".join(f"{names[v]} *{n}" for v, n in runs) for runs in pixel_walk_runs(data))


def _strip(chars):
    i, j = 0, len(chars)
    while i < j and chars[i].isspace():
        i += 1
    while j > i and chars[j - 1].isspace():
        j -= 1
    return chars[i:j]


def char_decode(text, lookup, background, h, w):
    """Scan ``text`` one character at a time and fill a flat pixel list.

    Returns (rows, counters) with counters keyed like DecodeReport's.
    """
    total = h * w
    flat = [background] * total
    p = 0
    cnt = {"truncated_runs": 0, "unknown_labels": 0, "underfilled_pixels": 0, "invalid_runs": 0}

    def run(token):
        nonlocal p
        star = -1
        for i, ch in enumerate(token):
            if ch == "*":
                star = i
        if star < 0:
            cnt["invalid_runs"] += 1
            return
        label = "".join(_strip(token[:star]))
        digits = _strip(token[star + 1 :])
        if not digits or any(ch not in "0123456789" for ch in digits):
            cnt["invalid_runs"] += 1
            return
        n = 0
        for ch in digits:
            n = n * 10 + (ord(ch) - 48)
        if n == 0:
            cnt["invalid_runs"] += 1
            return
        if label in lookup:
            v = lookup[label]
        else:
            v = background
            cnt["unknown_labels"] += 1
        if p + n > total:
            cnt["truncated_runs"] += 1
            n = total - p
        for k in range(p, p + n):
            flat[k] = v
        p += n

    token: list[str] = []
    row_tokens: list[list[str]] = []
    row_has_content = False

    def end_row():
        nonlocal p, row_tokens, row_has_content
        if not row_has_content:
            p = min(p + w, total)
        else:
            for t in row_tokens:
                run(t)
        row_tokens = []
        row_has_content = False

    for ch in text:
        if ch == "\n":
            row_tokens.append(token)
            token = []
            end_row()
        elif ch == "|":
            row_tokens.append(token)
            token = []
            row_has_content = True
        else:
            token.append(ch)
            if not ch.isspace():
                row_has_content = True
    row_tokens.append(token)
    end_row()
    cnt["underfilled_pixels"] = total - p
    return [flat[r * w : (r + 1) * w] for r in range(h)], cnt


def dice_by_counting(pred, gt, class_ids, eps):
    acc = 0.0
    for c in class_ids:
        inter = np_ = ng = 0
        for prow, grow in zip(pred, gt):
            for a, b in zip(prow, grow):
                inter += a == c and b == c
                np_ += a == c
                ng += b == c
        acc += 2.0 * inter / (np_ + ng + eps)
    return acc / len(class_ids)


def boundary_by_neighbors(data):
    h, w = len(data), len(data[0])
    out = [[0.0] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and data[rr][cc] != data[r][c]:
                    out[r][c] = 1.0
    return out


def bfs_components(cells):
    """Number of 4-connected components of a set of (r, c) cells."""
    cells = set(cells)
    seen = set()
    n = 0
    for start in cells:
        if start in seen:
            continue
        n += 1
        q = deque([start])
        seen.add(start)
        while q:
            r, c = q.popleft()
            for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if nb in cells and nb not in seen:
                    seen.add(nb)
                    q.append(nb)
    return n


def brute_force_match(pred_data, pred_classes, gt_data, gt_classes):
    """Enumerate every (prediction, ground truth) pair and apply the assignment rule.

    Returns {gt_id: (sorted matched pred ids, iou)} and the set of unmatched preds.
    """
    h, w = len(gt_data), len(gt_data[0])
    first = {}
    for r in range(h):
        for c in range(w):
            if gt_data[r][c]:
                first.setdefault(gt_data[r][c], r * w + c)
    owner = {}
    for p in pred_classes:
        best = None
        for g in gt_classes:
            if gt_classes[g] != pred_classes[p]:
                continue
            ov = 0
            for r in range(h):
                for c in range(w):
                    if pred_data[r][c] == p and gt_data[r][c] == g:
                        ov += 1
            if ov == 0:
                continue
            key = (-ov, first[g])
            if best is None or key < best[0]:
                best = (key, g)
        owner[p] = None if best is None else best[1]
    out = {}
    for g in gt_classes:
        members = sorted(p for p, o in owner.items() if o == g)
        if not members:
            out[g] = ((), 0.0)
            continue
        inter = union = 0
        for r in range(h):
            for c in range(w):
                a = gt_data[r][c] == g
                b = pred_data[r][c] in members
                inter += a and b
                union += a or b
        out[g] = (tuple(members), inter / union)
    unmatched = {p for p, o in owner.items() if o is None}
    return out, unmatched
