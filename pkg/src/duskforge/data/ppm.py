"""Binary PPM (P6, maxval 255) reading and writing."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_WS = b" \t\n\r\v\f"


class ImageFormatError(ValueError):
    """Malformed, truncated or unsupported image file."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


def _header_tokens(buf: bytes, path, count: int) -> tuple[list[bytes], int]:
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise ImageFormatError(path, "truncated header")
        start = pos
        while pos < n and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        tokens.append(buf[start:pos])
    if pos >= n or buf[pos] not in _WS:
        raise ImageFormatError(path, "missing whitespace after header")
    return tokens, pos + 1


def decode_ppm(buf: bytes, path="<bytes>") -> np.ndarray:
    """Decode P6 bytes into a float32 ``[3, H, W]`` array in ``[0, 1]``."""
    if not buf.startswith(b"P6"):
        raise ImageFormatError(path, "not a binary PPM (missing P6 magic)")
    tokens, start = _header_tokens(buf, path, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(path, f"non-integer header field in {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(path, f"invalid size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(path, f"unsupported maxval {maxval} (only 255)")
    need = width * height * 3
    payload = buf[start:start + need]
    if len(payload) < need:
        raise ImageFormatError(path, f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got shape {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    return b"P6\n%d %d\n255\n" % (w, h) + q.transpose(1, 2, 0).tobytes()


def load_image(path: str | os.PathLike, allow_png: bool = False) -> np.ndarray:
    """Read an image as ``[3, H, W]`` float32 in ``[0, 1]``.

    PNG input is accepted only with ``allow_png`` (requires Pillow).
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise ImageFormatError(path, "file not found") from None
    if allow_png and buf.startswith(b"\x89PNG"):
        return _load_png(path)
    return decode_ppm(buf, path)


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise ImageFormatError(path, f"unreadable PNG: {exc}") from None
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def save_image(image, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = image.data if hasattr(image, "data") and not isinstance(image, np.ndarray) else image
    path.write_bytes(encode_ppm(np.asarray(data)))
