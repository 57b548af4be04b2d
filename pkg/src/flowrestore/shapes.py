"""Procedural training corpus: bright geometric shapes on textured backgrounds.

The corpus stands in for a natural-image dataset: degradation visibly
destroys the background texture and the anti-aliased shape edges, so
restoration quality is measurable both by PSNR and by whether a classical
shape detector still recognizes the content.

Renders are deterministic functions of the spec; the validator uses only
thresholding and region statistics (no learned weights).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy import ndimage

SHAPE_CLASSES = ("circle", "square", "triangle", "stripes")

# Backgrounds stay below this luminance, fills above it; the validator
# thresholds midway.
_BG_LUMA_MAX = 0.45
_FILL_LUMA_MIN = 0.66
_THRESHOLD = 0.55

_SUPERSAMPLE = 4
MIN_SIZE = 4
MIN_STRIPE_SIZE = 8


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    fill: tuple[float, float, float]
    texture_seed: int
    cx: float
    cy: float
    size: float
    orientation: str = "vertical"  # stripes only

    def validate(self, resolution: int) -> None:
        if self.shape not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape {self.shape!r}")
        min_size = MIN_STRIPE_SIZE if self.shape == "stripes" else MIN_SIZE
        if self.size < min_size:
            raise ValueError(f"{self.shape} size {self.size} below minimum {min_size}")
        half = self.size / 2.0
        if not (half <= self.cx <= resolution - half and half <= self.cy <= resolution - half):
            raise ValueError("shape extends outside the canvas")
        if self.orientation not in ("vertical", "horizontal"):
            raise ValueError(f"bad stripe orientation {self.orientation!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "ShapeSpec":
        d = json.loads(line)
        d["fill"] = tuple(d["fill"])
        return ShapeSpec(**d)


def _luma(rgb) -> float:
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


def _background(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Low-luminance texture: smooth blotches plus fine grain, mild tint.

    Amplitudes keep the fine grain visible but small: degradation destroys
    it measurably while the recoverable structure (shape, color, position)
    dominates the pixel budget.
    """
    base = rng.uniform(0.2, 0.3)
    coarse = rng.standard_normal((resolution // 4 + 1, resolution // 4 + 1))
    coarse = ndimage.zoom(coarse, 4.0, order=1)[:resolution, :resolution]
    fine = rng.standard_normal((resolution, resolution))
    gray = base + 0.035 * coarse + 0.012 * fine
    tint = rng.uniform(0.9, 1.1, size=3)
    img = gray[:, :, None] * tint[None, None, :]
    return np.clip(img, 0.08, _BG_LUMA_MAX)


def _mask(spec: ShapeSpec, resolution: int) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1], via supersampled inside tests."""
    ss = _SUPERSAMPLE
    n = resolution * ss
    coords = (np.arange(n) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)
    half = spec.size / 2.0
    dx, dy = xx - spec.cx, yy - spec.cy
    if spec.shape == "circle":
        inside = dx * dx + dy * dy <= half * half
    elif spec.shape == "square":
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= half
    elif spec.shape == "triangle":
        # upright isoceles triangle: apex at top, base at bottom
        inside = (np.abs(dy) <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    elif spec.shape == "stripes":
        in_box = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        width = spec.size / 4.0
        axis = dx if spec.orientation == "vertical" else dy
        band = np.floor((axis + half) / width).astype(int)
        inside = in_box & (band % 2 == 0)
    else:  # pragma: no cover - guarded by ShapeSpec.validate
        raise ValueError(spec.shape)
    inside = inside.astype(np.float32).reshape(resolution, ss, resolution, ss)
    return inside.mean(axis=(1, 3))


def synth_image(spec: ShapeSpec, resolution: int = 32) -> torch.Tensor:
    spec.validate(resolution)
    rng = np.random.default_rng(spec.texture_seed)
    bg = _background(rng, resolution)
    mask = _mask(spec, resolution)[:, :, None]
    fill = np.asarray(spec.fill, dtype=np.float32)[None, None, :]
    img = bg * (1.0 - mask) + fill * mask
    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))


def _random_fill(rng: np.random.Generator) -> tuple[float, float, float]:
    while True:
        rgb = tuple(float(v) for v in rng.uniform(0.45, 1.0, size=3))
        if _luma(rgb) >= _FILL_LUMA_MIN:
            return rgb


def random_spec(rng: np.random.Generator, resolution: int = 32) -> ShapeSpec:
    if resolution < 16:
        raise ValueError("corpus resolution must be at least 16")
    shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
    lo = MIN_STRIPE_SIZE + 4 if shape == "stripes" else 10
    hi = min(resolution - 3, max(lo + 1, int(resolution * 0.72)))
    size = float(rng.uniform(lo, hi))
    half = size / 2.0
    cx = float(rng.uniform(half, resolution - half))
    cy = float(rng.uniform(half, resolution - half))
    orientation = "vertical" if rng.random() < 0.5 else "horizontal"
    return ShapeSpec(
        shape=shape,
        fill=_random_fill(rng),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        cx=cx,
        cy=cy,
        size=size,
        orientation=orientation,
    )


def synth_corpus(n: int, seed: int, resolution: int = 32) -> tuple[list[torch.Tensor], list[ShapeSpec]]:
    """Render n deterministic images; returns (images, specs)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    specs = [random_spec(rng, resolution) for _ in range(n)]
    images = [synth_image(s, resolution) for s in specs]
    return images, specs


def _component_stats(mask: np.ndarray) -> list[dict]:
    labels, count = ndimage.label(mask)
    stats = []
    for idx in range(1, count + 1):
        ys, xs = np.nonzero(labels == idx)
        area = ys.size
        if area < 6:  # speckle
            continue
        h = ys.max() - ys.min() + 1
        w = xs.max() - xs.min() + 1
        stats.append({"area": area, "h": int(h), "w": int(w), "ys": ys, "xs": xs})
    return stats


def _corner_coverage(blob_mask: np.ndarray) -> float:
    """Mean fill fraction of the four bounding-box corner cells."""
    h, w = blob_mask.shape
    s = max(2, round(min(h, w) / 4))
    corners = (blob_mask[:s, :s], blob_mask[:s, -s:], blob_mask[-s:, :s], blob_mask[-s:, -s:])
    return float(np.mean([c.mean() for c in corners]))


def validate(image: torch.Tensor) -> tuple[str, float]:
    """Classify a render as a shape class or 'invalid', with a confidence.

    Threshold at mid-luminance, then decide from region geometry:
    several parallel elongated bands mean stripes; a single blob is
    classified by bounding-box extent (circle ~pi/4, triangle ~0.5) with
    corner coverage separating squares from circles (AA can shave a small
    square's extent down into circle territory).
    """
    arr = image.detach().cpu().numpy()
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("validate expects an (H, W, 3) image")
    luma = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    mask = luma > _THRESHOLD
    comps = _component_stats(mask)
    if not comps:
        return "invalid", 0.0
    comps.sort(key=lambda c: c["area"], reverse=True)

    if len(comps) >= 2:
        major = [c for c in comps if c["area"] >= 0.4 * comps[0]["area"]]
        if len(major) >= 2:
            aspects = [max(c["h"], c["w"]) / max(1, min(c["h"], c["w"])) for c in major]
            vertical = [c["h"] >= c["w"] for c in major]
            if min(aspects) >= 2.0 and (all(vertical) or not any(vertical)):
                return "stripes", min(1.0, min(aspects) / 4.0)
            return "invalid", 0.0

    blob = comps[0]
    total = sum(c["area"] for c in comps)
    if blob["area"] < 0.7 * total or blob["area"] < 12:
        return "invalid", 0.0
    ys, xs = blob["ys"], blob["xs"]
    sub = np.zeros((blob["h"], blob["w"]), dtype=bool)
    sub[ys - ys.min(), xs - xs.min()] = True
    extent = blob["area"] / float(blob["h"] * blob["w"])
    aspect = max(blob["h"], blob["w"]) / max(1, min(blob["h"], blob["w"]))
    if aspect > 1.8:
        # single elongated band: stripes whose partner bands were clipped
        return "invalid", 0.0
    if extent >= 0.66:
        cov = _corner_coverage(sub)
        if cov >= 0.68:
            return "square", min(1.0, 0.5 + (cov - 0.68) / 0.3)
        return "circle", min(1.0, 0.5 + (0.68 - cov) / 0.3)
    if extent >= 0.38:
        return "triangle", max(0.1, 1.0 - abs(extent - 0.5) / 0.14)
    return "invalid", 0.0
