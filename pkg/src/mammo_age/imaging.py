"""Image decoding and resizing to the 224x224x3 network input."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DecodeError

INPUT_SIZE = 224

# Rec. 601 luma
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageTensor:
    data: np.ndarray  # (224, 224, 3) float32 in [0, 1]
    source_id: str = ""


def decode(path) -> np.ndarray:
    """Read a PNG/JPEG as a float64 grayscale image in [0, 1].

    RGB sources are converted to luma; alpha is dropped. 8-bit data is scaled
    by 255 and 16-bit data by 65535.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError, UnidentifiedImageError, SyntaxError) as exc:
        raise DecodeError(path, str(exc)) from exc

    if mode in ("L", "LA", "RGB", "RGBA"):
        scale = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    elif mode == "1":
        scale = 1.0
    else:
        raise DecodeError(path, f"unsupported image mode {mode}")

    a = arr.astype(np.float64)
    if a.ndim == 3:
        if mode == "LA":
            a = a[..., 0]
        else:
            a = a[..., :3] @ _LUMA
    return np.clip(a / scale, 0.0, 1.0)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centred coordinates and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    # a + (b - a) * t keeps constants and identity resizes exact
    top = img[y0][:, x0] + (img[y0][:, x1] - img[y0][:, x0]) * fx
    bot = img[y1][:, x0] + (img[y1][:, x1] - img[y1][:, x0]) * fx
    return top + (bot - top) * fy[:, None]


def resize_to_input(img: np.ndarray, source_id: str = "") -> ImageTensor:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    gray = np.clip(bilinear_resize(img, INPUT_SIZE, INPUT_SIZE), 0.0, 1.0).astype(np.float32)
    return ImageTensor(np.repeat(gray[:, :, None], 3, axis=2), source_id)


def load_tensor(path, source_id: str = "") -> ImageTensor:
    return resize_to_input(decode(path), source_id)
