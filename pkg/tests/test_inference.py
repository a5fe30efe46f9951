import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textseg.errors import CompletenessError, InferenceError, ShapeError
from textseg.inference import (
    ClientError,
    HttpChatClient,
    ModelRequest,
    ModelResponse,
    OracleClient,
    RecordingClient,
    ReplayClient,
    patchify,
    run_inference,
    stitch,
)
from textseg.masks import ClassMap, PatchSpec, SemanticMask, crop, instance_to_semantic, pad_to
from textseg.synth import synth_scene

CM = ClassMap.default()


def no_sleep(_):
    pass


def tiles_of(m, grid):
    padded = pad_to(m, grid.padded_h, grid.padded_w, 0)
    return [(s, crop(padded, s)) for s in grid.specs]


def test_patchify_examples():
    g = patchify(64, 64, 32, 32)
    assert [(s.top, s.left) for s in g.specs] == [(0, 0), (0, 32), (32, 0), (32, 32)]
    g = patchify(615, 615, 32, 32)
    assert (g.padded_h, g.padded_w, len(g.specs)) == (640, 640, 400)
    g = patchify(1, 1, 32, 32)
    assert (g.padded_h, g.padded_w, len(g.specs)) == (32, 32, 1)
    with pytest.raises(ShapeError):
        patchify(0, 5, 32, 32)


@given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 40), st.integers(1, 40))
@settings(max_examples=200)
def test_grid_covers_padded_canvas_once(h, w, ph, pw):
    g = patchify(h, w, ph, pw)
    assert len(g.specs) == -(-h // ph) * -(-w // pw)
    assert g.padded_h - ph < h <= g.padded_h and g.padded_w - pw < w <= g.padded_w
    cover = np.zeros((g.padded_h, g.padded_w), dtype=int)
    for s in g.specs:
        cover[s.slices()] += 1
    assert np.all(cover == 1)


def test_stitch_round_trip():
    m = SemanticMask(np.random.default_rng(0).integers(0, 6, size=(70, 45)))
    g = patchify(70, 45, 32, 32)
    assert stitch(tiles_of(m, g), g) == m


def test_stitch_tile_index_oracle():
    g = patchify(50, 70, 16, 16)
    tiles = [(s, SemanticMask.full(16, 16, i % len(CM))) for i, s in enumerate(g.specs)]
    expected = []
    for r in range(50):
        row = []
        for c in range(70):
            row.append(((r // 16) * g.cols + c // 16) % len(CM))
        expected.append(row)
    assert stitch(tiles, g).data.tolist() == expected


def test_stitch_completeness_errors():
    g = patchify(64, 64, 32, 32)
    tiles = [(s, SemanticMask.full(32, 32)) for s in g.specs]
    with pytest.raises(CompletenessError, match="top=32, left=0"):
        stitch(tiles[:2] + tiles[3:], g)
    with pytest.raises(CompletenessError):
        stitch(tiles + tiles[:1], g)
    with pytest.raises(CompletenessError):
        stitch(tiles + [(PatchSpec(5, 5, 32, 32), SemanticMask.full(32, 32))], g)
    with pytest.raises(ShapeError):
        stitch(tiles[:3] + [(g.specs[3], SemanticMask.full(2, 2))], g)


@given(st.permutations(range(6)))
def test_stitch_order_invariant(perm):
    m = SemanticMask(np.random.default_rng(1).integers(0, 6, size=(40, 70)))
    g = patchify(40, 70, 32, 32)
    tiles = tiles_of(m, g)
    assert stitch([tiles[i] for i in perm], g) == m


@pytest.mark.parametrize("shape", [(615, 615), (70, 33), (1, 1), (64, 64)])
def test_oracle_closure(shape):
    m = instance_to_semantic(synth_scene(np.random.default_rng(shape), *shape, CM))
    out, manifest = run_inference("x.png", *shape, OracleClient(m, CM), CM, sleep=no_sleep)
    assert out == m
    assert manifest["failed_tiles"] == 0
    assert not any(manifest["decode_totals"].values())


class Flaky:
    """Fails the first ``fails`` calls for each tile, then answers with the oracle."""

    def __init__(self, inner, fails, retryable=True):
        self.inner = inner
        self.fails = fails
        self.retryable = retryable
        self.calls = {}

    def complete(self, req):
        key = (req.patch.top, req.patch.left)
        self.calls[key] = self.calls.get(key, 0) + 1
        if self.calls[key] <= self.fails.get(key, 0):
            raise ClientError("boom", retryable=self.retryable)
        return self.inner.complete(req)


def test_retries_then_success():
    m = SemanticMask(np.ones((64, 64), dtype=int))
    delays = []
    client = Flaky(OracleClient(m, CM), {(0, 0): 2})
    out, manifest = run_inference("x", 64, 64, client, CM, backoff_s=0.5, sleep=delays.append)
    assert out == m
    assert manifest["retries"] == 2
    assert delays == [0.5, 1.0]


def test_exhausted_tile_is_background():
    m = SemanticMask(np.ones((64, 64), dtype=int))
    client = Flaky(OracleClient(m, CM), {(32, 0): 3})
    out, manifest = run_inference("x", 64, 64, client, CM, sleep=no_sleep)
    assert manifest["failed_tiles"] == 1
    assert client.calls[(32, 0)] == 3
    assert np.all(out.data[32:, :32] == 0) and np.all(out.data[:32] == 1)


def test_non_retryable_error_is_not_retried():
    m = SemanticMask(np.ones((64, 64), dtype=int))
    client = Flaky(OracleClient(m, CM), {(0, 0): 1}, retryable=False)
    _, manifest = run_inference("x", 64, 64, client, CM, sleep=no_sleep)
    assert client.calls[(0, 0)] == 1
    assert manifest["failed_tiles"] == 1


def test_all_tiles_failing_is_fatal():
    class Down:
        def complete(self, req):
            raise RuntimeError("no route")

    with pytest.raises(InferenceError):
        run_inference("x", 40, 40, Down(), CM, sleep=no_sleep)


def test_garbage_responses_are_decoded_robustly():
    class Junk:
        def complete(self, req):
            return ModelResponse("fields *5000|lava *3\n\n??")

    out, manifest = run_inference("x", 40, 40, Junk(), CM, sleep=no_sleep)
    assert out.shape == (40, 40)
    # once "fields *5000" fills a tile, "lava *3" overflows as well
    assert manifest["decode_totals"] == {
        "truncated_runs": 8, "unknown_labels": 4, "underfilled_pixels": 0, "invalid_runs": 4,
    }


def test_record_then_replay(tmp_path):
    m = instance_to_semantic(synth_scene(np.random.default_rng(2), 50, 60, CM))
    cache = tmp_path / "cache.jsonl"
    out1, _ = run_inference("a.png", 50, 60, RecordingClient(OracleClient(m, CM), cache), CM, sleep=no_sleep)
    assert len(cache.read_text().splitlines()) == 4
    out2, _ = run_inference("a.png", 50, 60, ReplayClient(cache), CM, sleep=no_sleep)
    assert out1 == out2 == m
    with pytest.raises(ClientError) as e:
        ReplayClient(cache).complete(ModelRequest("b.png", PatchSpec(0, 0, 32, 32), ""))
    assert not e.value.retryable


def test_oracle_client_by_image_ref():
    a = SemanticMask.full(10, 10, 1)
    b = SemanticMask.full(10, 10, 2)
    client = OracleClient({"a": a, "b": b}, CM)
    assert run_inference("b", 10, 10, client, CM, patch_h=4, patch_w=4)[0] == b


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def test_http_client_payload_and_auth(monkeypatch):
    monkeypatch.setenv("TEXTSEG_API_TOKEN", "sekret")
    seen = []

    def handler(request):
        seen.append(request)
        return chat_reply("fields *2")

    client = HttpChatClient("http://model.test/v1/chat/completions", model="m1",
                            transport=httpx.MockTransport(handler))
    req = ModelRequest("img.png", PatchSpec(32, 64, 1, 2), "Segment it.")
    assert client.complete(req).text == "fields *2"
    body = json.loads(seen[0].content)
    assert body["model"] == "m1"
    assert body["messages"][0]["role"] == "user"
    content = body["messages"][0]["content"]
    assert "Segment it." in content and "img.png" in content and "top=32 left=64" in content
    assert seen[0].headers["authorization"] == "Bearer sekret"


def test_http_client_without_token(monkeypatch):
    monkeypatch.delenv("TEXTSEG_API_TOKEN", raising=False)
    seen = []
    client = HttpChatClient("http://m.test", transport=httpx.MockTransport(lambda r: seen.append(r) or chat_reply("")))
    client.complete(ModelRequest("i", PatchSpec(0, 0, 1, 1), ""))
    assert "authorization" not in seen[0].headers


def test_http_server_errors_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503, text="busy") if len(calls) < 3 else chat_reply("fields *1")

    client = HttpChatClient("http://m.test", transport=httpx.MockTransport(handler))
    out, manifest = run_inference("i", 1, 1, client, CM, sleep=no_sleep)
    assert out.data.tolist() == [[1]]
    assert len(calls) == 3 and manifest["retries"] == 2


@pytest.mark.parametrize("response", [httpx.Response(400, text="bad"), httpx.Response(200, json={"nope": 1})])
def test_http_client_errors_are_not_retried(response):
    calls = []
    client = HttpChatClient("http://m.test", transport=httpx.MockTransport(lambda r: calls.append(1) or response))
    with pytest.raises(InferenceError):
        run_inference("i", 1, 1, client, CM, sleep=no_sleep)
    assert len(calls) == 1


def test_http_transport_error_is_retryable():
    def handler(request):
        raise httpx.ConnectError("refused")

    client = HttpChatClient("http://m.test", transport=httpx.MockTransport(handler))
    with pytest.raises(ClientError) as e:
        client.complete(ModelRequest("i", PatchSpec(0, 0, 1, 1), ""))
    assert e.value.retryable
