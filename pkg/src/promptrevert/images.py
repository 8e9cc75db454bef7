"""Image file I/O: PNG for real runs, raw PPM (P6) for fixtures.

Images round-trip through 8-bit quantization, and content hashes are taken
over the quantized buffer so the hash of a freshly generated image matches
the hash of the same image after a save/load cycle in either format.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ImageTensor


def quantize_u8(image: ImageTensor) -> np.ndarray:
    """Image as an (H, W, 3) uint8 array."""
    pix = np.clip(image.pixels, 0.0, 1.0)
    return np.round(pix * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_u8(raw: np.ndarray) -> ImageTensor:
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 buffer, got {raw.shape}")
    return ImageTensor(raw.astype(np.float64).transpose(2, 0, 1) / 255.0)


def image_content_hash(image: ImageTensor) -> str:
    """SHA-256 over the quantized pixel buffer, format independent."""
    data = quantize_u8(image)
    header = f"rgb8:{data.shape[0]}x{data.shape[1]}:".encode()
    return hashlib.sha256(header + data.tobytes()).hexdigest()


def write_ppm(image: ImageTensor, path: str | Path) -> None:
    data = quantize_u8(image)
    header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def read_ppm(path: str | Path) -> ImageTensor:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a raw PPM (P6) file")
    # Header is three whitespace-separated fields after the magic; comment
    # lines starting with '#' may appear between them.
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos : pos + width * height * 3]
    if len(body) != width * height * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return from_u8(data)


def write_png(image: ImageTensor, path: str | Path) -> None:
    Image.fromarray(quantize_u8(image), mode="RGB").save(Path(path), format="PNG")


def read_png(path: str | Path) -> ImageTensor:
    with Image.open(Path(path)) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return from_u8(data)


def png_bytes(image: ImageTensor) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(quantize_u8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_image(path: str | Path) -> ImageTensor:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format: {path}")


def write_image(image: ImageTensor, path: str | Path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(image, path)
    elif suffix == ".png":
        write_png(image, path)
    else:
        raise ValueError(f"unsupported image format: {path}")
