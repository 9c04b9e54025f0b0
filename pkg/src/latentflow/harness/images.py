"""PNG image I/O for the command line tools."""
from __future__ import annotations

import numpy as np
from PIL import Image

from latentflow.errors import FormatError


def save_png(path, image: np.ndarray) -> None:
    """``[3, H, W]`` in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image).transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    """Any Pillow-readable image -> ``[3, H, W]`` float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()
