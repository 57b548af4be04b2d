"""Rectified-flow training: timestep sampling, losses, and optimization loops.

The timestep sampler draws u ~ Uniform(-eps, 1+eps) and clamps to [0, 1],
which puts probability mass eps/(1+2*eps) on each endpoint so the model
sees exact t=1 (pure noise) and t=0 states during training. The objective
is a latent-space velocity MSE plus an optional pixel-space L1 between the
decoded interpolants, combined as mse + alpha * pixel.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import torch

from .adapter import ControlAdapter
from .backbone import TextConditioning, VelocityBackbone
from .codec import LatentCodec
from .images import resize

SAMPLER_STRATEGIES = ("clamped_uniform", "logit_normal")


@dataclass
class SamplerConfig:
    epsilon: float = 0.05
    strategy: str = "clamped_uniform"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must satisfy 0 <= eps < 0.5")
        if self.strategy not in SAMPLER_STRATEGIES:
            raise ValueError(f"unknown sampler strategy {self.strategy!r}")


@dataclass
class LossConfig:
    alpha: float = 1.0
    use_pixel_loss: bool = True

    def __post_init__(self):
        if not (self.alpha >= 0 and self.alpha == self.alpha):
            raise ValueError("alpha must be finite and >= 0")


@dataclass
class TrainRunConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"  # or "cosine" (anneals to ~0 over `steps`)
    lr_warmup_steps: int = 0
    adam_beta2: float = 0.999
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning_rate, batch_size, steps must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_warmup_steps < 0:
            raise ValueError("lr_warmup_steps must be >= 0")


def _make_scheduler(optimizer, run_cfg: TrainRunConfig, start_step: int = 0):
    if run_cfg.lr_schedule == "constant" and run_cfg.lr_warmup_steps == 0:
        return None
    warmup = run_cfg.lr_warmup_steps

    def factor(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        if run_cfg.lr_schedule != "cosine":
            return 1.0
        span = max(1, run_cfg.steps - warmup)
        progress = min(1.0, (step - warmup) / span)
        return 1e-3 + (1.0 - 1e-3) * 0.5 * (1.0 + math.cos(math.pi * progress))

    sched = torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    for _ in range(start_step):
        sched.step()
    return sched


@dataclass
class TrainingExample:
    z_0: torch.Tensor
    z_1: torch.Tensor
    t: float
    z_t: torch.Tensor
    v_gt: torch.Tensor
    z_lq: torch.Tensor
    cond: TextConditioning


# ---- timestep sampling ------------------------------------------------------


def sample_timesteps(n: int, rng: torch.Generator, cfg: SamplerConfig) -> torch.Tensor:
    if cfg.strategy == "logit_normal":
        return torch.sigmoid(torch.randn(n, generator=rng))
    eps = cfg.epsilon
    u = torch.rand(n, generator=rng) * (1.0 + 2.0 * eps) - eps
    return u.clamp(0.0, 1.0)


def sample_timestep(rng: torch.Generator, cfg: SamplerConfig) -> float:
    return float(sample_timesteps(1, rng, cfg)[0])


def make_training_example(
    z_0: torch.Tensor,
    z_lq: torch.Tensor,
    cond: TextConditioning,
    rng: torch.Generator,
    cfg: SamplerConfig,
) -> TrainingExample:
    if z_0.shape != z_lq.shape:
        raise ValueError(f"z_0 shape {tuple(z_0.shape)} != z_lq shape {tuple(z_lq.shape)}")
    z_1 = torch.randn(z_0.shape, generator=rng, dtype=z_0.dtype)
    t = sample_timestep(rng, cfg)
    v_gt = z_1 - z_0
    z_t = z_0 + t * v_gt
    return TrainingExample(z_0=z_0, z_1=z_1, t=t, z_t=z_t, v_gt=v_gt, z_lq=z_lq, cond=cond)


# ---- losses -----------------------------------------------------------------


def _broadcast_t(t, ref: torch.Tensor):
    if isinstance(t, (int, float)):
        return float(t)
    extra = ref.ndim - 1
    return t.reshape(-1, *([1] * extra)).to(dtype=ref.dtype)


def loss_mse(v_p: torch.Tensor, v_gt: torch.Tensor) -> torch.Tensor:
    if v_p.shape != v_gt.shape:
        raise ValueError(f"shape mismatch {tuple(v_p.shape)} vs {tuple(v_gt.shape)}")
    return ((v_p - v_gt) ** 2).mean()


def loss_pixel(
    v_p: torch.Tensor,
    v_gt: torch.Tensor,
    z_0: torch.Tensor,
    t,
    codec: LatentCodec,
) -> torch.Tensor:
    """Mean |decode(z_0 + t*v_p) - decode(z_0 + t*v_gt)|, unclamped decode.

    Decoding the noisy interpolant (not a predicted clean endpoint) keeps
    gradients flowing through the decoder at every timestep.
    """
    if v_p.shape != v_gt.shape or v_p.shape != z_0.shape:
        raise ValueError("v_p, v_gt, z_0 must share a shape")
    tb = _broadcast_t(t, z_0)
    a = codec.decode(z_0 + tb * v_p, clamp=False)
    b = codec.decode(z_0 + tb * v_gt, clamp=False)
    return (a - b).abs().mean()


def total_loss(
    v_p: torch.Tensor,
    v_gt: torch.Tensor,
    z_0: torch.Tensor,
    t,
    codec: LatentCodec,
    cfg: LossConfig,
) -> torch.Tensor:
    mse = loss_mse(v_p, v_gt)
    if not cfg.use_pixel_loss or cfg.alpha == 0.0:
        return mse
    return mse + cfg.alpha * loss_pixel(v_p, v_gt, z_0, t, codec)


# ---- finite-difference gradient verification --------------------------------


def finite_difference_check(
    loss_fn,
    parameters,
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-7,
) -> tuple[float, int]:
    """Compare autograd gradients of loss_fn() against central differences.

    Returns (max relative error, number of parameters checked). loss_fn
    must rebuild the full forward pass on every call.
    """
    params = [p for p in parameters if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
    worst, checked = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                lp = float(loss_fn())
                flat[i] = orig - step
                lm = float(loss_fn())
                flat[i] = orig
                numeric = (lp - lm) / (2.0 * step)
                analytic = float(gflat[i])
                denom = max(abs(numeric), abs(analytic))
                err = abs(numeric - analytic)
                rel = 0.0 if err <= atol else err / max(denom, 1e-30)
                worst = max(worst, rel)
                checked += 1
    if worst > rtol:
        raise AssertionError(f"gradient mismatch: max rel error {worst:.3e} > {rtol}")
    return worst, checked


# ---- training loops ---------------------------------------------------------


class LossLog:
    """Append-only JSONL loss records: step, loss_mse, loss_pixel, total, wall."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def smoothed_total(self, step: int, window: int = 50) -> float:
        vals = [r["total"] for r in self.records if step - window < r["step"] <= step]
        if not vals:
            raise ValueError(f"no loss records near step {step}")
        return sum(vals) / len(vals)


def encode_pairs(
    hq_images: torch.Tensor,
    lq_images: torch.Tensor,
    codec: LatentCodec,
    upsample: str = "bicubic",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode HQ and (upsampled) LQ image stacks into latent stacks."""
    target_h, target_w = hq_images.shape[1], hq_images.shape[2]
    ups = torch.stack([resize(img, target_h, target_w, mode=upsample) for img in lq_images])
    with torch.no_grad():
        z0 = codec.encode(hq_images)
        zlq = codec.encode(ups)
    return z0, zlq


def _snapshot_train_state(adapter, optimizer, rng, step):
    import copy

    return {
        "step": step,
        "adapter": {k: v.clone() for k, v in adapter.state_dict().items()},
        "optimizer": copy.deepcopy(optimizer.state_dict()),
        "rng": rng.get_state().clone(),
    }


def train_adapter(
    backbone: VelocityBackbone,
    adapter: ControlAdapter,
    codec: LatentCodec,
    z0_latents: torch.Tensor,
    zlq_latents: torch.Tensor,
    run_cfg: TrainRunConfig,
    sampler_cfg: SamplerConfig | None = None,
    loss_cfg: LossConfig | None = None,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    resume_state: dict | None = None,
    log_fn=None,
) -> tuple[ControlAdapter, LossLog, dict]:
    """Optimize adapter parameters against a frozen backbone and codec.

    Returns (adapter, loss log, training-state dict for resume). The
    backbone and codec are verified bitwise-unchanged after the run.
    """
    sampler_cfg = sampler_cfg or SamplerConfig()
    loss_cfg = loss_cfg or LossConfig()
    if z0_latents.numel() == 0:
        raise ValueError("empty training set")
    if z0_latents.shape != zlq_latents.shape:
        raise ValueError("clean and control latent stacks must align")

    before = backbone.fingerprint()
    backbone.requires_grad_(False)
    codec.requires_grad_(False)
    adapter.requires_grad_(True)
    if adapter.backbone_fingerprint != before:
        from .adapter import FingerprintMismatchError

        raise FingerprintMismatchError("adapter does not match this backbone")

    optimizer = torch.optim.AdamW(
        [p for p in adapter.parameters() if p.requires_grad],
        lr=run_cfg.learning_rate,
        weight_decay=run_cfg.weight_decay,
        betas=(0.9, run_cfg.adam_beta2),
    )
    rng = torch.Generator()
    rng.manual_seed(run_cfg.seed)
    start_step = 0
    if resume_state is not None:
        adapter.load_state_dict(resume_state["adapter"])
        optimizer.load_state_dict(resume_state["optimizer"])
        rng.set_state(resume_state["rng"])
        start_step = resume_state["step"]
    scheduler = _make_scheduler(optimizer, run_cfg, start_step)

    log = LossLog(log_path)
    cond = backbone.embed_text(None)
    n = z0_latents.shape[0]
    wall_start = time.monotonic()
    state = _snapshot_train_state(adapter, optimizer, rng, start_step)

    for step in range(start_step, run_cfg.steps):
        idx = torch.randint(n, (run_cfg.batch_size,), generator=rng)
        z0 = z0_latents[idx]
        zlq = zlq_latents[idx]
        t = sample_timesteps(run_cfg.batch_size, rng, sampler_cfg)
        z1 = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        v_gt = z1 - z0
        z_t = z0 + t.reshape(-1, 1, 1, 1) * v_gt

        v_p = adapter.controlled_velocity(z_t, zlq, cond, t, backbone)
        mse = loss_mse(v_p, v_gt)
        if loss_cfg.use_pixel_loss and loss_cfg.alpha > 0:
            pix = loss_pixel(v_p, v_gt, z0, t, codec)
            loss = mse + loss_cfg.alpha * pix
        else:
            pix = torch.zeros(())
            loss = mse
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()

        record = {
            "step": step + 1,
            "loss_mse": mse.item(),
            "loss_pixel": pix.item(),
            "total": loss.item(),
            "wall": time.monotonic() - wall_start,
        }
        log.append(record)
        if log_fn and (step + 1) % run_cfg.log_every == 0:
            log_fn(f"adapter step {record['step']}/{run_cfg.steps} total={record['total']:.4f}")
        if run_cfg.checkpoint_every and (step + 1) % run_cfg.checkpoint_every == 0:
            state = _snapshot_train_state(adapter, optimizer, rng, step + 1)
            if checkpoint_path:
                adapter.save(checkpoint_path)
                torch.save(state, checkpoint_path + ".trainstate")

    state = _snapshot_train_state(adapter, optimizer, rng, run_cfg.steps)
    if checkpoint_path:
        adapter.save(checkpoint_path)
        torch.save(state, checkpoint_path + ".trainstate")

    after = backbone.fingerprint()
    if after != before:
        raise RuntimeError("backbone parameters changed during adapter training")
    return adapter, log, state


def train_backbone(
    backbone: VelocityBackbone,
    codec: LatentCodec,
    images: torch.Tensor,
    run_cfg: TrainRunConfig,
    sampler_cfg: SamplerConfig | None = None,
    log_path: str | None = None,
    log_fn=None,
) -> tuple[VelocityBackbone, LossLog]:
    """Pretrain the velocity backbone on empty-prompt examples (latent MSE)."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    if images.numel() == 0:
        raise ValueError("empty training corpus")
    with torch.no_grad():
        latents = codec.encode(images)
    optimizer = torch.optim.AdamW(
        backbone.parameters(), lr=run_cfg.learning_rate,
        weight_decay=run_cfg.weight_decay, betas=(0.9, run_cfg.adam_beta2),
    )
    scheduler = _make_scheduler(optimizer, run_cfg)
    rng = torch.Generator()
    rng.manual_seed(run_cfg.seed)
    cond = backbone.embed_text(None)
    log = LossLog(log_path)
    n = latents.shape[0]
    wall_start = time.monotonic()
    for step in range(run_cfg.steps):
        idx = torch.randint(n, (run_cfg.batch_size,), generator=rng)
        z0 = latents[idx]
        t = sample_timesteps(run_cfg.batch_size, rng, sampler_cfg)
        z1 = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        v_gt = z1 - z0
        z_t = z0 + t.reshape(-1, 1, 1, 1) * v_gt
        v_p = backbone.predict_velocity(z_t, cond, t)
        loss = loss_mse(v_p, v_gt)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        record = {
            "step": step + 1,
            "loss_mse": loss.item(),
            "loss_pixel": 0.0,
            "total": loss.item(),
            "wall": time.monotonic() - wall_start,
        }
        log.append(record)
        if log_fn and (step + 1) % run_cfg.log_every == 0:
            log_fn(f"backbone step {record['step']}/{run_cfg.steps} mse={record['total']:.4f}")
    return backbone, log
