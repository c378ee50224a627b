"""
8-bit image files: binary PGM (P5) and PPM (P6) natively, PNG through Pillow when enabled.

Arrays are (H, W) for grey and (H, W, 3) for colour, dtype uint8.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from loguru import logger

from stfusion.core.entities import DataError
from stfusion.utils.config.server import PNG_ENABLED

NETPBM_SUFFIXES = (".pgm", ".ppm", ".pnm")
PNG_SUFFIXES = (".png",)

_HEADER_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def png_available() -> bool:
    if not PNG_ENABLED:
        return False
    try:
        import PIL.Image  # noqa: F401
    except ImportError:
        return False
    return True


def image_suffixes() -> tuple[str, ...]:
    return NETPBM_SUFFIXES + PNG_SUFFIXES if png_available() else NETPBM_SUFFIXES


def _read_header(raw: bytes, path: Path) -> tuple[bytes, int, int, int, int]:
    tokens = []
    position = 0
    while len(tokens) < 4:
        match = _HEADER_TOKEN.match(raw, position)
        if match is None:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(match.group(1))
        position = match.end()
    # exactly one whitespace byte separates the header from the raster
    position += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PNM header {tokens!r}")
    return magic, width, height, maxval, position


def read_pnm(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    magic, width, height, maxval, offset = _read_header(raw, path)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: only binary PGM (P5) and PPM (P6) are supported, got {magic!r}")
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images are supported, maxval is {maxval}")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset) if len(raw) - offset >= expected else None
    if data is None:
        raise DataError(f"{path}: raster holds {len(raw) - offset} bytes, expected {expected}")
    return data.reshape((height, width) if channels == 1 else (height, width, 3)).copy()


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataError(f"{path}: expected uint8 pixels, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"{path}: cannot write an image of shape {image.shape}")
    height, width = image.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes())


def read_png(path: str | Path) -> np.ndarray:
    if not png_available():
        raise DataError(f"{path}: PNG support is disabled or Pillow is not installed")
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
        return np.asarray(img, dtype=np.uint8).copy()


def write_png(path: str | Path, image: np.ndarray) -> None:
    if not png_available():
        raise DataError(f"{path}: PNG support is disabled or Pillow is not installed")
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in NETPBM_SUFFIXES:
        return read_pnm(path)
    if suffix in PNG_SUFFIXES:
        return read_png(path)
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in PNG_SUFFIXES:
        write_png(path, image)
    else:
        write_pnm(path, image)
    logger.debug(f"Wrote {path}")


def to_chw(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) or (H, W) to float (3, H, W) in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"Expected an RGB image, got shape {image.shape}")
    return np.transpose(image, (2, 0, 1)).astype(np.float64) / 255.0


def to_hwc(image: np.ndarray) -> np.ndarray:
    """Float (3, H, W) in [0, 1] to uint8 (H, W, 3)."""
    return np.round(np.clip(np.transpose(image, (1, 2, 0)), 0.0, 1.0) * 255.0).astype(np.uint8)


def binarize(label: np.ndarray, threshold: int = 128) -> np.ndarray:
    label = np.asarray(label)
    if label.ndim == 3:
        label = label.max(axis=2)
    return (label >= threshold).astype(np.uint8)
