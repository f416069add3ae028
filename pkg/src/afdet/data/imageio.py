"""8-bit RGB image files <-> ``3 x H x W`` float arrays in [0, 1]."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

SUPPORTED = {"PNG", "PPM"}
_SUFFIX_FORMAT = {".png": "PNG", ".ppm": "PPM", ".pnm": "PPM"}


class ImageFormatError(Exception):
    pass


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED:
                raise ImageFormatError(f"{path}: unsupported image format {im.format}")
            im.load()
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageFormatError(f"{path}: cannot decode image ({e})") from e
    return rgb.transpose(2, 0, 1).astype(np.float32) / 255.0


def encode_image(image: np.ndarray, fmt: str = "PNG") -> bytes:
    """Quantize to 8 bits (round to nearest) and encode."""
    img = np.asarray(image)
    if img.ndim == 2:
        arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        pil = Image.fromarray(arr, mode="L")
    elif img.ndim == 3 and img.shape[0] == 3:
        arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        pil = Image.fromarray(np.ascontiguousarray(arr), mode="RGB")
    else:
        raise ValueError(f"expected a 3 x H x W or H x W image, got shape {img.shape}")
    buf = io.BytesIO()
    pil.save(buf, format=fmt)
    return buf.getvalue()


def write_image(image: np.ndarray, path) -> None:
    from ..io import atomic_write_bytes

    fmt = _SUFFIX_FORMAT.get(Path(path).suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: only .png and .ppm outputs are supported")
    atomic_write_bytes(path, encode_image(image, fmt))
