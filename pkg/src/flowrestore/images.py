"""Image tensor helpers: PNG I/O, resizing, and range checks.

Convention throughout the package: an image is a float32 torch tensor of
shape (H, W, 3) with values in [0, 1]. PNG files are 8-bit RGB.
"""

from __future__ import annotations

import os

import numpy as np
import torch
from PIL import Image

_FILTERS = {"area": "area", "bilinear": "bilinear", "bicubic": "bicubic", "nearest": "nearest"}


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    return (arr * 255.0).round().astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def save_png(image: torch.Tensor, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path: str) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return from_uint8(arr)


def resize(image: torch.Tensor, height: int, width: int, mode: str = "bicubic") -> torch.Tensor:
    """Resize an (H, W, 3) image; output clamped to [0, 1]."""
    if mode not in _FILTERS:
        raise ValueError(f"unknown resize filter {mode!r}")
    if image.shape[0] == height and image.shape[1] == width:
        return image
    chw = image.permute(2, 0, 1).unsqueeze(0)
    kwargs = {} if mode in ("area", "nearest") else {"align_corners": False}
    out = torch.nn.functional.interpolate(chw, size=(height, width), mode=mode, **kwargs)
    return out.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0)


def check_image(image: torch.Tensor) -> torch.Tensor:
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    return image
