"""Synthetic training-data factory: generate, score, filter, degrade.

Workflow: sample images from a trained flow model with an empty prompt,
score each with no-reference quality scorers, keep only images above the
per-scorer quantile threshold for every scorer, then degrade the keepers
into low-quality counterparts. Every stage is reproducible from recorded
seeds and the manifest is the single source of truth for what exists.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import torch

from . import __version__ as PIPELINE_VERSION
from .backbone import VelocityBackbone, tokenize
from .codec import LatentCodec
from .degradations import DegradationConfig, degrade
from .images import load_png, save_png
from .metrics import ScorerRegistry
from .sampling import integrate_flow


class PipelineError(RuntimeError):
    pass


@dataclass
class GenerationConfig:
    guidance_scale: float = 4.0
    steps: int = 20
    resolution: int = 32
    count: int = 16
    seed: int = 0
    prompt: str = ""
    batch_size: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 1:
            raise ValueError("guidance_scale must be >= 1")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass
class ManifestRecord:
    image_id: str
    hq_path: str
    gen_seed: int | None = None
    lq_path: str | None = None
    degrade_seed: int | None = None
    scores: dict[str, float] = field(default_factory=dict)
    selected: bool | None = None
    pipeline_version: str = PIPELINE_VERSION


@dataclass
class ScoreRecord:
    image_id: str
    scores: dict[str, float]


class DatasetManifest:
    """Ordered line-delimited records; saved atomically, loadable verbatim."""

    def __init__(self, records: list[ManifestRecord] | None = None):
        self.records: list[ManifestRecord] = records or []

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def save(self, path: str) -> None:
        directory = os.path.dirname(os.path.abspath(path)) or "."
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                for rec in self.records:
                    fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        if not os.path.exists(path):
            raise PipelineError(f"manifest not found: {path}")
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(ManifestRecord(**json.loads(line)))
        return cls(records)

    def selected_records(self) -> list[ManifestRecord]:
        """Records passing selection; an unfiltered manifest passes everything."""
        return [r for r in self.records if r.selected is not False]


def derive_seed(master_seed: int, key) -> int:
    """Stable per-item 63-bit seed from a master seed and item key."""
    digest = hashlib.sha256(f"{master_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


# ---- generation -------------------------------------------------------------


def generate_images(
    backbone: VelocityBackbone,
    codec: LatentCodec,
    cfg: GenerationConfig,
    out_dir: str,
    log_fn=None,
) -> DatasetManifest:
    """Sample cfg.count images from noise; each image depends only on (seed, index).

    With an empty prompt the model runs plain conditional sampling on its
    null embedding; a non-empty prompt enables guidance mixing between the
    null-prompt and prompt velocity fields.
    """
    if cfg.resolution % codec.spatial_factor:
        raise PipelineError(
            f"resolution {cfg.resolution} not divisible by codec factor {codec.spatial_factor}"
        )
    os.makedirs(out_dir, exist_ok=True)
    side = cfg.resolution // codec.spatial_factor
    null_cond = backbone.embed_text(None)
    prompt_ids = tokenize(cfg.prompt)
    cond = backbone.embed_text(prompt_ids) if prompt_ids else null_cond
    use_guidance = bool(prompt_ids) and cfg.guidance_scale != 1.0

    records: list[ManifestRecord] = []
    with torch.no_grad():
        for start in range(0, cfg.count, cfg.batch_size):
            idx = list(range(start, min(start + cfg.batch_size, cfg.count)))
            seeds = [derive_seed(cfg.seed, i) for i in idx]
            z = torch.stack([
                torch.randn((side, side, codec.latent_channels),
                            generator=torch.Generator().manual_seed(s))
                for s in seeds
            ])

            def velocity(zz, t):
                v = backbone.predict_velocity(zz, cond, t)
                if use_guidance:
                    v_null = backbone.predict_velocity(zz, null_cond, t)
                    v = v_null + cfg.guidance_scale * (v - v_null)
                return v

            z, _ = integrate_flow(z, velocity, cfg.steps)
            images = codec.decode(z)
            for i, s, img in zip(idx, seeds, images):
                image_id = f"gen_{i:06d}"
                path = os.path.join(out_dir, image_id + ".png")
                save_png(img, path)
                records.append(ManifestRecord(image_id=image_id, hq_path=path, gen_seed=s))
            if log_fn:
                log_fn(f"generated {len(records)}/{cfg.count}")
    return DatasetManifest(records)


# ---- scoring and selection --------------------------------------------------


def score_images(
    manifest: DatasetManifest,
    scorer_names: list[str],
    registry: ScorerRegistry | None = None,
    log_fn=None,
) -> list[ScoreRecord]:
    """One ScoreRecord per manifest image; scorer failures leave gaps.

    A record missing any requested score is excluded from selection later,
    so one bad plug-in never sinks the whole batch.
    """
    if not scorer_names:
        raise PipelineError("at least one scorer must be requested")
    registry = registry or ScorerRegistry()
    paths = [r.hq_path for r in manifest.records]
    by_path: dict[str, dict[str, float]] = {p: {} for p in paths}
    for name in scorer_names:
        try:
            scored = registry.score_paths(name, paths)
        except Exception as exc:  # scorer-level failure: all images lack this score
            if log_fn:
                log_fn(f"scorer {name!r} failed: {exc}")
            continue
        for p, v in scored.items():
            if p in by_path and math.isfinite(v):
                by_path[p][name] = v
    records = []
    for rec in manifest.records:
        rec.scores = dict(by_path[rec.hq_path])
        records.append(ScoreRecord(image_id=rec.image_id, scores=rec.scores))
    return records


def select_top(records: list[ScoreRecord], keep_fraction: float = 0.95) -> list[ScoreRecord]:
    """Keep records meeting the per-scorer top-ceil(keep*n) threshold for every scorer.

    Thresholds use the nearest-rank convention on each scorer's sorted
    column; ties at a threshold are kept. Records missing any scorer are
    never selected.
    """
    if not records:
        raise PipelineError("select_top requires at least one record")
    if not 0.0 <= keep_fraction <= 1.0:
        raise PipelineError("keep_fraction must lie in [0, 1]")
    scorer_names = sorted({name for r in records for name in r.scores})
    if not scorer_names:
        raise PipelineError("records carry no scores")
    complete = [r for r in records if all(name in r.scores for name in scorer_names)]
    k = math.ceil(keep_fraction * len(complete))
    if k == 0 or not complete:
        return []
    thresholds = {}
    for name in scorer_names:
        column = sorted((r.scores[name] for r in complete), reverse=True)
        thresholds[name] = column[k - 1]
    return [r for r in complete if all(r.scores[n] >= thresholds[n] for n in scorer_names)]


def apply_selection(manifest: DatasetManifest, selected: list[ScoreRecord]) -> DatasetManifest:
    chosen = {r.image_id for r in selected}
    for rec in manifest.records:
        rec.selected = rec.image_id in chosen
    return manifest


# ---- pair construction ------------------------------------------------------


def build_pairs(
    manifest: DatasetManifest,
    cfg: DegradationConfig,
    out_root: str,
    workers: int = 1,
    log_fn=None,
) -> DatasetManifest:
    """Degrade every selected HQ image into an LQ file with a recorded seed.

    Any per-record failure aborts the manifest write (no partial manifests);
    re-running with the same config reproduces identical LQ bytes.
    """
    cfg.validate()
    os.makedirs(out_root, exist_ok=True)
    targets = manifest.selected_records()
    failures: list[tuple[str, str]] = []

    def build_one(rec: ManifestRecord):
        try:
            seed = derive_seed(cfg.master_seed, rec.image_id)
            hq = load_png(rec.hq_path)
            lq = degrade(hq, cfg, seed)
            lq_path = os.path.join(out_root, rec.image_id + "_lq.png")
            save_png(lq, lq_path)
            rec.lq_path = lq_path
            rec.degrade_seed = seed
        except Exception as exc:
            failures.append((rec.image_id, str(exc)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build_one, targets))
    else:
        for i, rec in enumerate(targets):
            build_one(rec)
            if log_fn and (i + 1) % 200 == 0:
                log_fn(f"degraded {i + 1}/{len(targets)}")
    if failures:
        detail = "; ".join(f"{rid}: {msg}" for rid, msg in failures[:5])
        raise PipelineError(f"{len(failures)} pair(s) failed, manifest not written: {detail}")
    return manifest


def verify_pairs(manifest: DatasetManifest) -> list[str]:
    """Return ids of selected records whose files are missing or unreadable."""
    flagged = []
    for rec in manifest.selected_records():
        for path in (rec.hq_path, rec.lq_path):
            if path is None:
                flagged.append(rec.image_id)
                break
            try:
                load_png(path)
            except Exception:
                flagged.append(rec.image_id)
                break
    return flagged


def load_pair_tensors(manifest: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack (HQ, LQ) image tensors for all selected, paired records."""
    pairs = [r for r in manifest.selected_records() if r.lq_path]
    if not pairs:
        raise PipelineError("manifest holds no completed LQ/HQ pairs")
    hq = torch.stack([load_png(r.hq_path) for r in pairs])
    lq = torch.stack([load_png(r.lq_path) for r in pairs])
    return hq, lq
