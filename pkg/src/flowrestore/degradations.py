"""Staged stochastic image degradation for paired-data construction.

Two full rounds of blur -> random resize -> noise -> JPEG with re-sampled
parameters, then a final stage that applies an optional 2D sinc filter and
one more JPEG pass in randomized order while resizing to the target
low-quality size. Every stochastic choice is drawn from a stream derived
solely from the per-image seed, so a recorded seed reproduces the exact
output bytes.

Default ranges follow the classic second-order recipe; every value is a
config field so the realized pipeline lives in the config file.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy.special import j1

KERNEL_FAMILIES = ("iso", "aniso", "generalized", "plateau")
RESIZE_FILTERS = ("area", "bilinear", "bicubic")


class DegradationConfigError(ValueError):
    pass


@dataclass
class BlurConfig:
    prob: float = 1.0
    kernel_families: tuple[str, ...] = KERNEL_FAMILIES
    family_weights: tuple[float, ...] = (0.6, 0.2, 0.1, 0.1)
    sigma_range: tuple[float, float] = (0.2, 3.0)
    kernel_size_range: tuple[int, int] = (7, 21)
    beta_g_range: tuple[float, float] = (0.5, 4.0)
    beta_p_range: tuple[float, float] = (1.0, 2.0)


@dataclass
class ResizeConfig:
    filters: tuple[str, ...] = RESIZE_FILTERS
    scale_range: tuple[float, float] = (0.15, 1.5)
    updown_weights: tuple[float, float, float] = (0.2, 0.7, 0.1)  # up / down / keep
    anchor: str = "relative"  # "relative": current size; "lq": target LQ size


@dataclass
class NoiseConfig:
    prob: float = 1.0
    gaussian_prob: float = 0.5
    sigma_range: tuple[float, float] = (1.0 / 255.0, 30.0 / 255.0)
    poisson_scale_range: tuple[float, float] = (0.05, 3.0)
    gray_prob: float = 0.4


@dataclass
class JpegConfig:
    prob: float = 1.0
    quality_range: tuple[int, int] = (30, 95)


@dataclass
class DegradationStage:
    blur: BlurConfig = field(default_factory=BlurConfig)
    resize: ResizeConfig = field(default_factory=ResizeConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    jpeg: JpegConfig = field(default_factory=JpegConfig)


@dataclass
class FinalStage:
    sinc_prob: float = 0.8
    jpeg: JpegConfig = field(default_factory=lambda: JpegConfig(quality_range=(30, 95)))
    sinc_kernel_size_range: tuple[int, int] = (7, 21)


def _second_stage() -> DegradationStage:
    return DegradationStage(
        blur=BlurConfig(prob=0.8, sigma_range=(0.2, 1.5)),
        resize=ResizeConfig(scale_range=(0.3, 1.2), updown_weights=(0.3, 0.4, 0.3), anchor="lq"),
        noise=NoiseConfig(sigma_range=(1.0 / 255.0, 25.0 / 255.0), poisson_scale_range=(0.05, 2.5)),
    )


@dataclass
class DegradationConfig:
    stage1: DegradationStage = field(default_factory=DegradationStage)
    stage2: DegradationStage = field(default_factory=_second_stage)
    final: FinalStage = field(default_factory=FinalStage)
    scale: int = 4
    master_seed: int = 0

    def validate(self) -> None:
        for stage in (self.stage1, self.stage2):
            for name, rng in (
                ("blur.sigma_range", stage.blur.sigma_range),
                ("blur.kernel_size_range", stage.blur.kernel_size_range),
                ("resize.scale_range", stage.resize.scale_range),
                ("noise.sigma_range", stage.noise.sigma_range),
                ("noise.poisson_scale_range", stage.noise.poisson_scale_range),
                ("jpeg.quality_range", stage.jpeg.quality_range),
            ):
                if rng[0] > rng[1]:
                    raise DegradationConfigError(f"{name} must be ordered low <= high: {rng}")
            for name, p in (
                ("blur.prob", stage.blur.prob),
                ("noise.prob", stage.noise.prob),
                ("noise.gaussian_prob", stage.noise.gaussian_prob),
                ("noise.gray_prob", stage.noise.gray_prob),
                ("jpeg.prob", stage.jpeg.prob),
            ):
                if not 0.0 <= p <= 1.0:
                    raise DegradationConfigError(f"{name} must be a probability, got {p}")
            for fam in stage.blur.kernel_families:
                if fam not in KERNEL_FAMILIES:
                    raise DegradationConfigError(f"unknown kernel family {fam!r}")
            for flt in stage.resize.filters:
                if flt not in RESIZE_FILTERS:
                    raise DegradationConfigError(f"unknown resize filter {flt!r}")
        if not 0.0 <= self.final.sinc_prob <= 1.0:
            raise DegradationConfigError("final.sinc_prob must be a probability")
        if self.scale < 1:
            raise DegradationConfigError("scale must be >= 1")


# ---- blur kernels -----------------------------------------------------------


def gaussian_kernel(size: int, sigma_x: float, sigma_y: float, theta: float) -> np.ndarray:
    """Anisotropic Gaussian kernel (isotropic when sigma_x == sigma_y)."""
    half = size // 2
    ys, xs = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    ct, st = math.cos(theta), math.sin(theta)
    xr = ct * xs + st * ys
    yr = -st * xs + ct * ys
    k = np.exp(-0.5 * ((xr / sigma_x) ** 2 + (yr / sigma_y) ** 2))
    return k / k.sum()


def generalized_gaussian_kernel(size: int, sigma: float, beta: float) -> np.ndarray:
    half = size // 2
    ys, xs = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    r2 = xs**2 + ys**2
    k = np.exp(-((r2 / (2.0 * sigma**2)) ** beta))
    return k / k.sum()


def plateau_kernel(size: int, sigma: float, beta: float) -> np.ndarray:
    half = size // 2
    ys, xs = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    r2 = xs**2 + ys**2
    k = 1.0 / (1.0 + (r2 / (2.0 * sigma**2)) ** beta)
    return k / k.sum()


def sinc_kernel(size: int, omega_c: float) -> np.ndarray:
    """2D circular low-pass (sinc) filter with cutoff omega_c."""
    half = size // 2
    ys, xs = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    r = np.sqrt(xs**2 + ys**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = omega_c * j1(omega_c * r) / (2.0 * math.pi * r)
    k[half, half] = omega_c**2 / (4.0 * math.pi)
    return k / k.sum()


def _apply_kernel(img: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """Depthwise 2D filtering with reflect padding; img is (H, W, 3)."""
    k = torch.from_numpy(kernel).to(img.dtype)
    size = k.shape[0]
    pad = size // 2
    x = img.permute(2, 0, 1).unsqueeze(0)
    x = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    weight = k.expand(3, 1, size, size)
    out = torch.nn.functional.conv2d(x, weight, groups=3)
    return out.squeeze(0).permute(1, 2, 0)


# ---- randomized ops ---------------------------------------------------------


def _rand(g: torch.Generator) -> float:
    return float(torch.rand((), generator=g))


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * _rand(g)


def _choice(g: torch.Generator, options, weights=None):
    if weights is None:
        return options[int(torch.randint(len(options), (), generator=g))]
    w = torch.tensor(weights, dtype=torch.float64)
    idx = int(torch.multinomial(w, 1, generator=g))
    return options[idx]


def _odd_size(g: torch.Generator, lo: int, hi: int, image_min: int) -> int:
    sizes = [s for s in range(lo, hi + 1) if s % 2 == 1]
    if not sizes:
        raise DegradationConfigError(f"no odd kernel size in [{lo}, {hi}]")
    size = int(_choice(g, sizes))
    cap = image_min if image_min % 2 == 1 else image_min - 1
    return max(3, min(size, cap))


def _sample_blur_kernel(g: torch.Generator, cfg: BlurConfig, image_min: int) -> np.ndarray:
    size = _odd_size(g, *cfg.kernel_size_range, image_min=image_min)
    family = _choice(g, cfg.kernel_families, cfg.family_weights[: len(cfg.kernel_families)])
    if family == "iso":
        sigma = _uniform(g, *cfg.sigma_range)
        return gaussian_kernel(size, sigma, sigma, 0.0)
    if family == "aniso":
        sx = _uniform(g, *cfg.sigma_range)
        sy = _uniform(g, *cfg.sigma_range)
        theta = _uniform(g, -math.pi, math.pi)
        return gaussian_kernel(size, sx, sy, theta)
    if family == "generalized":
        sigma = _uniform(g, *cfg.sigma_range)
        beta = _uniform(g, *cfg.beta_g_range)
        return generalized_gaussian_kernel(size, sigma, beta)
    sigma = _uniform(g, *cfg.sigma_range)
    beta = _uniform(g, *cfg.beta_p_range)
    return plateau_kernel(size, sigma, beta)


def _interpolate(img: torch.Tensor, h: int, w: int, mode: str) -> torch.Tensor:
    if img.shape[0] == h and img.shape[1] == w:
        return img
    x = img.permute(2, 0, 1).unsqueeze(0)
    kwargs = {} if mode in ("area", "nearest") else {"align_corners": False}
    out = torch.nn.functional.interpolate(x, size=(h, w), mode=mode, **kwargs)
    return out.squeeze(0).permute(1, 2, 0)


def _random_resize(img: torch.Tensor, cfg: ResizeConfig, g: torch.Generator,
                   lq_h: int, lq_w: int) -> torch.Tensor:
    direction = _choice(g, ("up", "down", "keep"), cfg.updown_weights)
    if direction == "up":
        scale = _uniform(g, 1.0, max(1.0, cfg.scale_range[1]))
    elif direction == "down":
        scale = _uniform(g, min(1.0, cfg.scale_range[0]), 1.0)
    else:
        scale = 1.0
    mode = _choice(g, cfg.filters)
    if cfg.anchor == "lq":
        h, w = max(1, int(lq_h * scale)), max(1, int(lq_w * scale))
    else:
        h, w = max(1, int(img.shape[0] * scale)), max(1, int(img.shape[1] * scale))
    return _interpolate(img, h, w, mode)


def _add_noise(img: torch.Tensor, cfg: NoiseConfig, g: torch.Generator) -> torch.Tensor:
    gray = _rand(g) < cfg.gray_prob
    if _rand(g) < cfg.gaussian_prob:
        sigma = _uniform(g, *cfg.sigma_range)
        if gray:
            n = torch.randn(img.shape[:2], generator=g, dtype=img.dtype)[:, :, None]
        else:
            n = torch.randn(img.shape, generator=g, dtype=img.dtype)
        return img + sigma * n
    scale = _uniform(g, *cfg.poisson_scale_range)
    lam = 255.0 * max(scale, 1e-3)
    base = img.clamp(0.0, 1.0)
    if gray:
        level = base.mean(dim=2)
        noisy = torch.poisson(level * lam, generator=g) / lam
        return img + (noisy - level)[:, :, None]
    noisy = torch.poisson(base * lam, generator=g) / lam
    return img + (noisy - base)


def jpeg_roundtrip(img: torch.Tensor, quality: int) -> torch.Tensor:
    """Baseline JPEG encode/decode at the given quality; quantizes to 8 bits."""
    arr = (img.clamp(0.0, 1.0).numpy() * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    decoded = np.asarray(Image.open(buf).convert("RGB"))
    return torch.from_numpy(decoded.astype(np.float32) / 255.0)


def _apply_stage(img: torch.Tensor, stage: DegradationStage, g: torch.Generator,
                 lq_h: int, lq_w: int) -> torch.Tensor:
    if _rand(g) < stage.blur.prob:
        kernel = _sample_blur_kernel(g, stage.blur, image_min=min(img.shape[0], img.shape[1]))
        img = _apply_kernel(img, kernel)
    img = _random_resize(img, stage.resize, g, lq_h, lq_w)
    if _rand(g) < stage.noise.prob:
        img = _add_noise(img, stage.noise, g)
    if _rand(g) < stage.jpeg.prob:
        quality = int(round(_uniform(g, *stage.jpeg.quality_range)))
        img = jpeg_roundtrip(img, quality)
    return img


def degrade(hq: torch.Tensor, cfg: DegradationConfig, per_image_seed: int) -> torch.Tensor:
    """Degrade one HQ image to an LQ image of side HQ-side / cfg.scale."""
    cfg.validate()
    if hq.ndim != 3 or hq.shape[2] != 3:
        raise DegradationConfigError(f"expected (H, W, 3) image, got {tuple(hq.shape)}")
    h, w = hq.shape[0], hq.shape[1]
    if h % cfg.scale or w % cfg.scale:
        raise DegradationConfigError(f"image {h}x{w} not divisible by scale {cfg.scale}")
    lq_h, lq_w = h // cfg.scale, w // cfg.scale

    g = torch.Generator()
    g.manual_seed(per_image_seed)
    img = hq.to(torch.float32)
    img = _apply_stage(img, cfg.stage1, g, lq_h, lq_w)
    img = _apply_stage(img, cfg.stage2, g, lq_h, lq_w)

    # final: [resize-back + sinc] and JPEG in random order
    use_sinc = _rand(g) < cfg.final.sinc_prob
    sinc: np.ndarray | None = None
    if use_sinc:
        size = _odd_size(g, *cfg.final.sinc_kernel_size_range, image_min=min(lq_h, lq_w))
        lo = math.pi / 3 if size < 13 else math.pi / 5
        omega = _uniform(g, lo, math.pi)
        sinc = sinc_kernel(size, omega)
    jpeg_first = _rand(g) < 0.5
    do_jpeg = _rand(g) < cfg.final.jpeg.prob
    quality = int(round(_uniform(g, *cfg.final.jpeg.quality_range))) if do_jpeg else 0

    def resize_and_sinc(x: torch.Tensor) -> torch.Tensor:
        mode = _choice(g, cfg.stage2.resize.filters)
        x = _interpolate(x, lq_h, lq_w, mode)
        if sinc is not None:
            x = _apply_kernel(x, sinc)
        return x

    if jpeg_first:
        if do_jpeg:
            img = jpeg_roundtrip(img, quality)
        img = resize_and_sinc(img)
    else:
        img = resize_and_sinc(img)
        if do_jpeg:
            img = jpeg_roundtrip(img, quality)
    return img.clamp(0.0, 1.0)


def toy_config(scale: int = 4, master_seed: int = 0) -> DegradationConfig:
    """Ranges sized for ~32px toy images (smaller kernels, milder noise)."""
    stage1 = DegradationStage(
        blur=BlurConfig(sigma_range=(0.2, 1.6), kernel_size_range=(3, 9)),
        resize=ResizeConfig(scale_range=(0.6, 1.2)),
        noise=NoiseConfig(sigma_range=(1.0 / 255.0, 12.0 / 255.0), poisson_scale_range=(0.8, 3.0)),
        jpeg=JpegConfig(quality_range=(50, 95)),
    )
    stage2 = DegradationStage(
        blur=BlurConfig(prob=0.8, sigma_range=(0.2, 0.8), kernel_size_range=(3, 7)),
        resize=ResizeConfig(scale_range=(0.7, 1.2), updown_weights=(0.3, 0.4, 0.3), anchor="lq"),
        noise=NoiseConfig(sigma_range=(1.0 / 255.0, 8.0 / 255.0), poisson_scale_range=(0.8, 2.5)),
        jpeg=JpegConfig(quality_range=(50, 95)),
    )
    final = FinalStage(sinc_prob=0.4, jpeg=JpegConfig(quality_range=(50, 95)),
                       sinc_kernel_size_range=(3, 7))
    return DegradationConfig(stage1=stage1, stage2=stage2, final=final,
                             scale=scale, master_seed=master_seed)


def identity_config() -> DegradationConfig:
    """All stochastic stages disabled; degrade() becomes the identity map."""
    off_stage = DegradationStage(
        blur=BlurConfig(prob=0.0),
        resize=ResizeConfig(scale_range=(1.0, 1.0), updown_weights=(0.0, 0.0, 1.0)),
        noise=NoiseConfig(prob=0.0),
        jpeg=JpegConfig(prob=0.0),
    )
    final = FinalStage(sinc_prob=0.0, jpeg=JpegConfig(prob=0.0))
    return DegradationConfig(
        stage1=off_stage,
        stage2=DegradationStage(
            blur=BlurConfig(prob=0.0),
            resize=ResizeConfig(scale_range=(1.0, 1.0), updown_weights=(0.0, 0.0, 1.0), anchor="lq"),
            noise=NoiseConfig(prob=0.0),
            jpeg=JpegConfig(prob=0.0),
        ),
        final=final,
        scale=1,
    )
