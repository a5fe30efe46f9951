"""Tiled inference: disjoint patch grid -> per-tile model call -> robust decode -> stitch."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx
import numpy as np

from .dataset import DEFAULT_TEMPLATE, format_instruction
from .errors import CompletenessError, InferenceError, ShapeError
from .masks import ClassMap, PatchSpec, SemanticMask, crop, pad_to
from .rrle import decode_rrle, encode_rrle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TileGrid:
    image_h: int
    image_w: int
    patch_h: int
    patch_w: int
    padded_h: int
    padded_w: int
    specs: tuple[PatchSpec, ...]

    @property
    def rows(self) -> int:
        return self.padded_h // self.patch_h

    @property
    def cols(self) -> int:
        return self.padded_w // self.patch_w

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h,
            "image_w": self.image_w,
            "patch_h": self.patch_h,
            "patch_w": self.patch_w,
            "padded_h": self.padded_h,
            "padded_w": self.padded_w,
            "tiles": len(self.specs),
        }


def patchify(image_h: int, image_w: int, patch_h: int, patch_w: int) -> TileGrid:
    """Row-major grid of disjoint patches covering the image padded up to whole tiles."""
    if min(image_h, image_w, patch_h, patch_w) < 1:
        raise ShapeError("image and patch dims must be >= 1")
    padded_h = -(-image_h // patch_h) * patch_h
    padded_w = -(-image_w // patch_w) * patch_w
    specs = tuple(
        PatchSpec(top, left, patch_h, patch_w)
        for top in range(0, padded_h, patch_h)
        for left in range(0, padded_w, patch_w)
    )
    return TileGrid(image_h, image_w, patch_h, patch_w, padded_h, padded_w, specs)


def stitch(tiles: Iterable[tuple[PatchSpec, SemanticMask]], grid: TileGrid) -> SemanticMask:
    """Place every tile on the padded canvas and crop back to the image size."""
    expected = set(grid.specs)
    seen: set[PatchSpec] = set()
    canvas = np.zeros((grid.padded_h, grid.padded_w), dtype=np.int32)
    for spec, tile in tiles:
        if spec not in expected:
            raise CompletenessError(f"tile {spec} is not part of the grid")
        if spec in seen:
            raise CompletenessError(f"duplicate tile {spec}")
        if tile.shape != (spec.height, spec.width):
            raise ShapeError(f"tile {spec} has shape {tile.shape}")
        seen.add(spec)
        canvas[spec.slices()] = tile.data
    missing = [s for s in grid.specs if s not in seen]
    if missing:
        raise CompletenessError(f"{len(missing)} tile(s) missing, first: {missing[0]}")
    return SemanticMask(canvas[: grid.image_h, : grid.image_w])


# --- model clients ---------------------------------------------------------


@dataclass(frozen=True)
class ModelRequest:
    image_ref: str
    patch: PatchSpec
    instruction: str


@dataclass(frozen=True)
class ModelResponse:
    text: str
    latency_ms: float = 0.0
    status: str = "ok"


class ClientError(Exception):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class ModelClient(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


class OracleClient:
    """Answers every request with the exact encoding of a ground-truth mask."""

    def __init__(self, truth: SemanticMask | dict[str, SemanticMask], cm: ClassMap):
        self.truth = truth
        self.cm = cm

    def complete(self, request: ModelRequest) -> ModelResponse:
        gt = self.truth if isinstance(self.truth, SemanticMask) else self.truth[request.image_ref]
        p = request.patch
        h = max(gt.height, p.bottom)
        w = max(gt.width, p.right)
        if (h, w) != gt.shape:
            gt = pad_to(gt, h, w, self.cm.background_id)
        return ModelResponse(encode_rrle(crop(gt, p), self.cm))


def cache_key(image: str, top: int, left: int) -> tuple[str, int, int]:
    return (image, int(top), int(left))


class ReplayClient:
    """Serves responses from a JSONL cache of ``{"image", "top", "left", "text"}`` records."""

    def __init__(self, path):
        self.path = Path(path)
        self.entries: dict[tuple[str, int, int], str] = {}
        with self.path.open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    self.entries[cache_key(d["image"], d["top"], d["left"])] = d["text"]

    def complete(self, request: ModelRequest) -> ModelResponse:
        key = cache_key(request.image_ref, request.patch.top, request.patch.left)
        if key not in self.entries:
            raise ClientError(f"no cached response for {key}", retryable=False)
        return ModelResponse(self.entries[key])


class RecordingClient:
    """Wraps another client and appends each successful response to a cache file."""

    def __init__(self, inner: ModelClient, path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> ModelResponse:
        resp = self.inner.complete(request)
        rec = {
            "image": request.image_ref,
            "top": request.patch.top,
            "left": request.patch.left,
            "text": resp.text,
        }
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(rec) + "\n")
        return resp


class HttpChatClient:
    """Client for chat-completion style HTTP servers.

    The request carries the instruction, the image reference and the patch
    coordinates as a single user message; the reply is the content of the first
    choice. 429 and 5xx responses are retryable, other 4xx are not.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        token_env: str = "TEXTSEG_API_TOKEN",
        timeout_ms: int = 60_000,
        transport: httpx.BaseTransport | None = None,
        extra: dict | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.extra = dict(extra or {})
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout_ms / 1000, headers=headers, transport=transport)

    def payload(self, request: ModelRequest) -> dict:
        p = request.patch
        content = (
            f"{request.instruction}\n"
            f"image: {request.image_ref}\n"
            f"patch: top={p.top} left={p.left} height={p.height} width={p.width}"
        )
        return {"model": self.model, "messages": [{"role": "user", "content": content}], **self.extra}

    def complete(self, request: ModelRequest) -> ModelResponse:
        t0 = time.perf_counter()
        try:
            r = self._client.post(self.endpoint, json=self.payload(request))
        except httpx.HTTPError as e:
            raise ClientError(f"request failed: {e}") from e
        if r.status_code == 429 or r.status_code >= 500:
            raise ClientError(f"HTTP {r.status_code}: {r.text[:200]}")
        if r.status_code >= 400:
            raise ClientError(f"HTTP {r.status_code}: {r.text[:200]}", retryable=False)
        try:
            text = r.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise ClientError(f"malformed completion response: {e}", retryable=False) from e
        return ModelResponse(text or "", (time.perf_counter() - t0) * 1000.0)

    def close(self) -> None:
        self._client.close()


# --- dispatch --------------------------------------------------------------


def _call_with_retries(
    client: ModelClient, req: ModelRequest, retries: int, backoff_s: float, sleep: Callable[[float], None]
) -> tuple[ModelResponse | None, int, str | None]:
    attempts = 0
    last = None
    while True:
        attempts += 1
        try:
            return client.complete(req), attempts, None
        except ClientError as e:
            last = str(e)
            if not e.retryable or attempts > retries:
                return None, attempts, last
        except Exception as e:  # noqa: BLE001 - a tile must never abort the job
            last = f"{type(e).__name__}: {e}"
            if attempts > retries:
                return None, attempts, last
        sleep(backoff_s * 2 ** (attempts - 1))


def run_inference(
    image_ref: str,
    image_h: int,
    image_w: int,
    client: ModelClient,
    cm: ClassMap,
    patch_h: int = 32,
    patch_w: int = 32,
    template: str = DEFAULT_TEMPLATE,
    max_in_flight: int = 8,
    retries: int = 2,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[SemanticMask, dict]:
    """Segment one image tile by tile.

    Failed tiles (after retries) are filled with background and listed in the
    manifest; :class:`InferenceError` is raised only if every tile fails.
    """
    grid = patchify(image_h, image_w, patch_h, patch_w)

    def one(spec: PatchSpec):
        req = ModelRequest(image_ref, spec, format_instruction(template, spec))
        t0 = time.perf_counter()
        resp, attempts, err = _call_with_retries(client, req, retries, backoff_s, sleep)
        latency = (time.perf_counter() - t0) * 1000.0
        record = {"top": spec.top, "left": spec.left, "attempts": attempts, "latency_ms": round(latency, 3)}
        if resp is None:
            tile = SemanticMask.full(spec.height, spec.width, cm.background_id)
            record.update(status="failed", error=err)
        else:
            rep = decode_rrle(resp.text, cm, spec.height, spec.width)
            tile = rep.mask
            record.update(status="ok", counters=rep.counters())
        return spec, tile, record

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        results = list(pool.map(one, grid.specs))

    failed = [r for _, _, r in results if r["status"] == "failed"]
    if len(failed) == len(results):
        raise InferenceError(f"all {len(results)} tiles failed for {image_ref}; last error: {failed[-1]['error']}")
    mask = stitch(((s, t) for s, t, _ in results), grid)
    totals = {k: 0 for k in ("truncated_runs", "unknown_labels", "underfilled_pixels", "invalid_runs")}
    for _, _, r in results:
        for k, v in r.get("counters", {}).items():
            totals[k] += v
    manifest = {
        "image": image_ref,
        "grid": grid.to_dict(),
        "failed_tiles": len(failed),
        "retries": sum(r["attempts"] - 1 for _, _, r in results),
        "decode_totals": totals,
        "tiles": [r for _, _, r in results],
    }
    if failed:
        log.warning("%s: %d of %d tiles failed", image_ref, len(failed), len(results))
    return mask, manifest
