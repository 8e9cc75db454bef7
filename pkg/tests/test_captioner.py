import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from promptrevert.backend import PAD_ID
from promptrevert.captioner import (
    CaptionNotFoundError,
    FixtureCaptioner,
    ProtocolError,
    RemoteCaptioner,
    TransportError,
)
from promptrevert.core import ImageTensor
from promptrevert.images import image_content_hash


def _image(seed=0, shape=(3, 8, 8)):
    rng = np.random.default_rng(seed)
    return ImageTensor(rng.uniform(0, 1, shape))


# -- fixture provider ---------------------------------------------------------


def test_fixture_lookup_hit(toy_backend):
    img = _image(1)
    cap = FixtureCaptioner(
        {image_content_hash(img): "a red house"}, toy_backend.tokenizer
    )
    prompt = cap.caption(img)
    assert prompt.text == "a red house"
    assert len(prompt.token_ids) == 16


def test_fixture_miss_raises(toy_backend):
    cap = FixtureCaptioner({}, toy_backend.tokenizer)
    with pytest.raises(CaptionNotFoundError, match="no caption"):
        cap.caption(_image(2))


def test_fixture_miss_uses_fallback_when_configured(toy_backend):
    cap = FixtureCaptioner({}, toy_backend.tokenizer, fallback="a house")
    assert cap.caption(_image(2)).text == "a house"


def test_fixture_repeat_calls_identical(toy_backend):
    img = _image(3)
    cap = FixtureCaptioner(
        {image_content_hash(img): "a blue boat on a river"}, toy_backend.tokenizer
    )
    assert cap.caption(img) == cap.caption(img)


def test_caption_truncates_to_prompt_len(toy_backend):
    img = _image(4)
    twenty = " ".join(["a red cat near a beach with a dog and"] * 2)  # 20 words
    assert len(twenty.split()) == 20
    cap = FixtureCaptioner(
        {image_content_hash(img): twenty}, toy_backend.tokenizer, prompt_len=16
    )
    prompt = cap.caption(img)
    assert len(prompt.token_ids) == 16
    assert all(t != PAD_ID for t in prompt.token_ids)  # nothing padded, tail dropped


def test_caption_pads_short_captions(toy_backend):
    img = _image(5)
    cap = FixtureCaptioner(
        {image_content_hash(img): "a cat"}, toy_backend.tokenizer, prompt_len=16
    )
    prompt = cap.caption(img)
    assert len(prompt.token_ids) == 16
    assert prompt.token_ids[2:] == (PAD_ID,) * 14


# -- remote provider -----------------------------------------------------------


class _MockHandler(BaseHTTPRequestHandler):
    responses: list[tuple[int, bytes]] = []
    hits = 0

    def do_POST(self):
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        status, body = self.responses[min(type(self).hits, len(self.responses) - 1)]
        type(self).hits += 1
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def mock_server():
    server = HTTPServer(("127.0.0.1", 0), _MockHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _MockHandler.hits = 0
    yield f"http://127.0.0.1:{server.server_address[1]}/caption"
    server.shutdown()


def test_remote_happy_path(toy_backend, mock_server):
    _MockHandler.responses = [(200, json.dumps({"caption": "a cat"}).encode())]
    cap = RemoteCaptioner(mock_server, toy_backend.tokenizer)
    prompt = cap.caption(_image(6))
    assert prompt.text == "a cat"


def test_remote_500_exhausts_retries(toy_backend, mock_server):
    _MockHandler.responses = [(500, b"boom")]
    cap = RemoteCaptioner(mock_server, toy_backend.tokenizer, retries=2)
    with pytest.raises(TransportError, match="after 2 retries"):
        cap.caption(_image(7))
    assert _MockHandler.hits == 3  # initial attempt plus two retries


def test_remote_recovers_within_retry_budget(toy_backend, mock_server):
    _MockHandler.responses = [
        (500, b"boom"),
        (200, json.dumps({"caption": "a dog"}).encode()),
    ]
    cap = RemoteCaptioner(mock_server, toy_backend.tokenizer, retries=2)
    assert cap.caption(_image(8)).text == "a dog"


def test_remote_missing_field_is_protocol_error(toy_backend, mock_server):
    _MockHandler.responses = [(200, json.dumps({"label": "x"}).encode())]
    cap = RemoteCaptioner(mock_server, toy_backend.tokenizer)
    with pytest.raises(ProtocolError, match="caption"):
        cap.caption(_image(9))


def test_remote_invalid_json_is_protocol_error(toy_backend, mock_server):
    _MockHandler.responses = [(200, b"not json")]
    cap = RemoteCaptioner(mock_server, toy_backend.tokenizer)
    with pytest.raises(ProtocolError):
        cap.caption(_image(10))
