"""Grayscale image I/O.

Images are float64 arrays in [0, 1] everywhere inside the package; files
are 8- or 16-bit grayscale PNG or PGM. Loading divides by the format's max
value, saving multiplies and rounds.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image, ImageDraw

from .errors import InvalidInputError

_MAX_SIDE = 4096


def _normalize(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if arr.dtype == np.int32:  # Pillow mode "I" (16-bit PNG decodes here)
        return arr.astype(np.float64) / 65535.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def decode_image(data: bytes, max_side: int = _MAX_SIDE) -> np.ndarray:
    """Decode PNG/PGM bytes to a [0, 1] float image."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.size[0] > max_side or im.size[1] > max_side:
                raise InvalidInputError(
                    f"image exceeds maximum side of {max_side} px")
            if im.mode not in ("L", "I", "I;16", "F"):
                im = im.convert("L")
            arr = np.asarray(im)
    except InvalidInputError:
        raise
    except Exception as exc:
        raise InvalidInputError(f"could not decode image: {exc}") from exc
    return _normalize(arr)


def load_image(path: str) -> np.ndarray:
    """Load a grayscale PNG/PGM file to a [0, 1] float image."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InvalidInputError(f"cannot read image file {path}: {exc}") from exc
    return decode_image(data)


def encode_image(img: np.ndarray, bit_depth: int = 16,
                 fmt: str = "PNG") -> bytes:
    """Encode a [0, 1] float image to PNG or PGM bytes."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidInputError("expected a 2-D grayscale image")
    clipped = np.clip(img, 0.0, 1.0)
    buf = io.BytesIO()
    if bit_depth == 8:
        pil = Image.fromarray(np.round(clipped * 255.0).astype(np.uint8), "L")
    elif bit_depth == 16:
        pil = Image.fromarray(np.round(clipped * 65535.0).astype(np.uint16))
    else:
        raise InvalidInputError("bit depth must be 8 or 16")
    pil.save(buf, format=fmt)
    return buf.getvalue()


def save_image(path: str, img: np.ndarray, bit_depth: int = 16) -> None:
    """Save a [0, 1] float image; format chosen by extension (.png/.pgm)."""
    lower = str(path).lower()
    if lower.endswith(".pgm"):
        fmt = "PPM"
    elif lower.endswith(".png"):
        fmt = "PNG"
    else:
        raise InvalidInputError("image path must end in .png or .pgm")
    data = encode_image(img, bit_depth=bit_depth, fmt=fmt)
    with open(path, "wb") as fh:
        fh.write(data)


_OVERLAY_COLORS = [
    (252, 186, 3), (66, 135, 245), (52, 235, 116), (235, 64, 52),
    (182, 66, 245), (245, 66, 179), (66, 245, 230), (245, 147, 66),
]


def overlay_png_bytes(img: np.ndarray, polylines, colors=None,
                      upscale: int = 4) -> bytes:
    """Burn polylines into an upscaled RGB copy of the image.

    ``polylines`` is a sequence of (P, 2) arrays in (x, y) pixel
    coordinates; each gets a color from its own palette entry (cycled).
    """
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    base = np.round(img * 255.0).astype(np.uint8)
    pil = Image.fromarray(base, "L").convert("RGB")
    if upscale > 1:
        pil = pil.resize((pil.width * upscale, pil.height * upscale),
                         Image.NEAREST)
    draw = ImageDraw.Draw(pil)
    palette = colors if colors else _OVERLAY_COLORS
    for idx, line in enumerate(polylines):
        pts = np.asarray(line, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            continue
        # pixel centers sit at +0.5 in display coordinates
        coords = [((x + 0.5) * upscale, (y + 0.5) * upscale)
                  for x, y in pts[:, :2]]
        draw.line(coords, fill=palette[idx % len(palette)], width=max(1, upscale // 2))
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()
