"""Full-reference metrics (PSNR, SSIM) and the no-reference scorer registry.

The registry serves both evaluation and dataset filtering. Built-in proxy
scorers combine batch-normalized Laplacian variance (sharpness) and
gray-level entropy (information); external scorers plug in through a
subprocess contract (image paths on stdin, "path<TAB>score" lines on
stdout). All registry scores are normalized to higher-is-better.
"""

from __future__ import annotations

import math
import os
import subprocess
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .images import load_png


class MetricError(ValueError):
    pass


class ScorerError(RuntimeError):
    pass


# ---- full-reference metrics -------------------------------------------------


def psnr(a: torch.Tensor, b: torch.Tensor, max_val: float = 1.0) -> float:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    xs = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    w = torch.exp(-(xs**2) / (2.0 * sigma**2))
    w = w / w.sum()
    return torch.outer(w, w)


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    max_val: float = 1.0,
    sigma: float = 1.5,
) -> float:
    """Gaussian-window SSIM, averaged over channels and valid positions."""
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 3:
        raise MetricError("ssim expects (H, W, C) images")
    if min(a.shape[0], a.shape[1]) < window:
        raise MetricError(f"image smaller than SSIM window {window}")
    x = a.double().permute(2, 0, 1).unsqueeze(1)
    y = b.double().permute(2, 0, 1).unsqueeze(1)
    w = _gaussian_window(window, sigma, torch.float64)[None, None]
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    xx = F.conv2d(x * x, w) - mu_x * mu_x
    yy = F.conv2d(y * y, w) - mu_y * mu_y
    xy = F.conv2d(x * y, w) - mu_x * mu_y
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float((num / den).mean())


# ---- proxy scorer components ------------------------------------------------

_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def laplacian_variance(image: torch.Tensor) -> float:
    gray = (0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]).double()
    resp = F.conv2d(gray[None, None], _LAPLACIAN.double()[None, None])
    return float(resp.var(unbiased=False))


def gray_entropy(image: torch.Tensor, bins: int = 256) -> float:
    gray = 0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]
    levels = (gray.clamp(0.0, 1.0) * (bins - 1)).round().to(torch.long)
    counts = torch.bincount(levels.reshape(-1), minlength=bins).double()
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * p.log2()).sum())


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi <= lo:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


class ProxyScorer:
    """Weighted sum of batch-normalized sharpness and entropy components."""

    def __init__(self, name: str, w_sharp: float = 0.5, w_entropy: float = 0.5):
        self.name = name
        self.w_sharp = w_sharp
        self.w_entropy = w_entropy
        self.higher_is_better = True

    def score_batch(self, images: list[torch.Tensor]) -> list[float]:
        sharp = _minmax([laplacian_variance(img) for img in images])
        ent = _minmax([gray_entropy(img) for img in images])
        return [self.w_sharp * s + self.w_entropy * e for s, e in zip(sharp, ent)]

    def score_paths(self, paths: list[str]) -> dict[str, float]:
        scores = self.score_batch([load_png(p) for p in paths])
        return dict(zip(paths, scores))


class SubprocessScorer:
    """External scorer: paths in on stdin, "path<TAB>score" lines on stdout."""

    def __init__(self, name: str, command: list[str], higher_is_better: bool = True,
                 timeout: float = 600.0):
        self.name = name
        self.command = command
        self.higher_is_better = higher_is_better
        self.timeout = timeout

    def score_batch(self, images) -> list[float]:
        raise ScorerError(f"scorer {self.name!r} runs on files, not in-memory images")

    def score_paths(self, paths: list[str]) -> dict[str, float]:
        proc = subprocess.run(
            self.command,
            input="\n".join(paths) + "\n",
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise ScorerError(f"scorer {self.name!r} failed: {proc.stderr.strip()[:500]}")
        out: dict[str, float] = {}
        for line in proc.stdout.splitlines():
            if not line.strip():
                continue
            try:
                path, score = line.rsplit("\t", 1)
                out[path] = float(score)
            except ValueError as exc:
                raise ScorerError(f"scorer {self.name!r} emitted a bad line: {line!r}") from exc
        return out


class ScorerRegistry:
    def __init__(self, include_builtin: bool = True):
        self._scorers: dict[str, object] = {}
        if include_builtin:
            # sharpness dominates so blurring strictly lowers the default score
            self.register(ProxyScorer("proxy", 0.75, 0.25))
            self.register(ProxyScorer("proxy-sharp", 1.0, 0.0))
            self.register(ProxyScorer("proxy-entropy", 0.0, 1.0))

    def register(self, scorer) -> None:
        self._scorers[scorer.name] = scorer

    def names(self) -> list[str]:
        return sorted(self._scorers)

    def get(self, name: str):
        if name not in self._scorers:
            raise ScorerError(f"unknown scorer {name!r}; registered: {self.names()}")
        return self._scorers[name]

    def score_batch(self, name: str, images: list[torch.Tensor]) -> list[float]:
        scorer = self.get(name)
        raw = scorer.score_batch(images)
        sign = 1.0 if scorer.higher_is_better else -1.0
        return [sign * v for v in raw]

    def score_paths(self, name: str, paths: list[str]) -> dict[str, float]:
        scorer = self.get(name)
        raw = scorer.score_paths(paths)
        sign = 1.0 if scorer.higher_is_better else -1.0
        return {k: sign * v for k, v in raw.items()}


def nr_score(image: torch.Tensor, scorer_name: str, registry: ScorerRegistry) -> float:
    """Single-image no-reference score (batch of one; batch-relative parts zero)."""
    return registry.score_batch(scorer_name, [image])[0]


# ---- dataset evaluation -----------------------------------------------------

FULL_REFERENCE = ("psnr", "ssim")


@dataclass
class MetricReport:
    per_image: dict[str, dict[str, float]]
    means: dict[str, float]
    count: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "means": self.means,
            "per_image": self.per_image,
            "config": self.config,
        }


def evaluate_dataset(
    restored_dir: str,
    reference_dir: str | None,
    metric_names: list[str],
    registry: ScorerRegistry | None = None,
) -> MetricReport:
    """Per-image metrics plus dataset means over a directory of PNGs.

    Full-reference metrics require a reference directory with matching
    filenames; no-reference metrics come from the scorer registry.
    """
    registry = registry or ScorerRegistry()
    names = sorted(f for f in os.listdir(restored_dir) if f.lower().endswith(".png"))
    if not names:
        raise MetricError(f"no PNG images in {restored_dir}")
    full_ref = [m for m in metric_names if m in FULL_REFERENCE]
    no_ref = [m for m in metric_names if m not in FULL_REFERENCE]
    if full_ref and reference_dir is None:
        raise MetricError(f"metrics {full_ref} require a reference directory")

    restored = {n: load_png(os.path.join(restored_dir, n)) for n in names}
    per_image: dict[str, dict[str, float]] = {n: {} for n in names}

    if full_ref:
        for n in names:
            ref_path = os.path.join(reference_dir, n)
            if not os.path.exists(ref_path):
                raise MetricError(f"missing reference image for {n}")
            ref = load_png(ref_path)
            if "psnr" in full_ref:
                per_image[n]["psnr"] = psnr(restored[n], ref)
            if "ssim" in full_ref:
                per_image[n]["ssim"] = ssim(restored[n], ref)

    for metric in no_ref:
        scores = registry.score_batch(metric, [restored[n] for n in names])
        for n, s in zip(names, scores):
            per_image[n][metric] = s

    means = {}
    for metric in metric_names:
        vals = [per_image[n][metric] for n in names]
        means[metric] = sum(vals) / len(vals)
    return MetricReport(
        per_image=per_image,
        means=means,
        count=len(names),
        config={"metrics": list(metric_names), "reference": reference_dir},
    )
