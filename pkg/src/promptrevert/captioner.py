"""Caption providers: a content-addressed fixture table and an HTTP client.

Captions initialize the inversion pipeline. The fixture provider serves
deterministic captions for test images; the remote client talks to an
external captioning service (POST /caption, multipart PNG in, JSON out).
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import requests

from .backend import WordTokenizer
from .core import ImageTensor, Prompt
from .images import image_content_hash, png_bytes

DEFAULT_PROMPT_LEN = 16


class CaptionNotFoundError(LookupError):
    """The fixture table has no caption for this image."""


class TransportError(RuntimeError):
    """The caption service could not be reached or kept failing."""


class ProtocolError(ValueError):
    """The caption service answered with an unusable payload."""


class CaptionProvider(ABC):
    """Produces the initial prompt for a target image.

    Providers are deterministic for a fixed configuration and must tolerate
    concurrent calls. Captions are truncated or padded to ``prompt_len``
    tokens so the optimizer always starts from a fixed-length embedding.
    """

    name: str = "caption"

    def __init__(self, tokenizer: WordTokenizer, prompt_len: int = DEFAULT_PROMPT_LEN):
        if prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        self.tokenizer = tokenizer
        self.prompt_len = prompt_len

    def caption(self, image: ImageTensor) -> Prompt:
        text = self._caption_text(image)
        return self.tokenizer.prompt(text, length=self.prompt_len)

    @abstractmethod
    def _caption_text(self, image: ImageTensor) -> str: ...


class FixtureCaptioner(CaptionProvider):
    """Lookup table keyed by image content hash; pure, a hit is verbatim.

    A miss raises unless a ``fallback`` caption is configured; the fallback
    lets loops that caption freshly generated images keep going.
    """

    name = "fixture"

    def __init__(
        self,
        table: dict[str, str],
        tokenizer: WordTokenizer,
        prompt_len: int = DEFAULT_PROMPT_LEN,
        fallback: str | None = None,
    ):
        super().__init__(tokenizer, prompt_len)
        self.table = dict(table)
        self.fallback = fallback

    def _caption_text(self, image: ImageTensor) -> str:
        key = image_content_hash(image)
        if key in self.table:
            return self.table[key]
        if self.fallback is not None:
            return self.fallback
        raise CaptionNotFoundError(f"no caption for image {key[:12]}")


class RemoteCaptioner(CaptionProvider):
    """Client for an HTTP captioning service.

    Sends the image as PNG bytes in a multipart field named "image" and
    expects a JSON object with a "caption" string. Failed requests are
    retried ``retries`` times before giving up.
    """

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        tokenizer: WordTokenizer,
        prompt_len: int = DEFAULT_PROMPT_LEN,
        timeout: float = 10.0,
        retries: int = 2,
    ):
        super().__init__(tokenizer, prompt_len)
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries

    def _caption_text(self, image: ImageTensor) -> str:
        data = png_bytes(image)
        last_error: str = "no attempt made"
        for _ in range(self.retries + 1):
            try:
                response = requests.post(
                    self.endpoint,
                    files={"image": ("image.png", data, "image/png")},
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = str(exc)
                continue
            if response.status_code != 200:
                last_error = f"HTTP {response.status_code}"
                continue
            try:
                payload = response.json()
            except ValueError as exc:
                raise ProtocolError(f"caption service returned invalid JSON: {exc}") from exc
            if not isinstance(payload, dict) or "caption" not in payload:
                raise ProtocolError('caption service response missing "caption" field')
            if not isinstance(payload["caption"], str):
                raise ProtocolError('"caption" field is not a string')
            return payload["caption"]
        raise TransportError(
            f"caption request failed after {self.retries} retries: {last_error}"
        )
