"""Flow integration and restoration inference.

Sampling starts from pure Gaussian noise at t=1 and Euler-integrates the
learned velocity field down a uniform time grid to t=0. Restoration runs
the same loop with the adapter injecting control signals derived from the
degraded input's latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .adapter import ControlAdapter, FingerprintMismatchError
from .backbone import VelocityBackbone
from .codec import LatentCodec
from .images import check_image, resize


@dataclass
class RestoreConfig:
    steps: int = 20
    guidance_scale: float = 1.0
    seed: int = 0
    target_resolution: int = 32
    upsample: str = "bicubic"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class FlowTrajectory:
    """Ordered (t, latent) pairs from t=1 down to t=0."""

    points: list[tuple[float, torch.Tensor]]

    def __post_init__(self):
        ts = [t for t, _ in self.points]
        if ts and (ts[0] != 1.0 or ts[-1] != 0.0 or any(a <= b for a, b in zip(ts, ts[1:]))):
            raise ValueError("trajectory times must strictly decrease from 1 to 0")


def euler_step(z: torch.Tensor, t: float, dt: float, v: torch.Tensor) -> torch.Tensor:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t - dt < -1e-9:
        raise ValueError(f"step from t={t} by dt={dt} would pass below 0")
    return z - dt * v


def integrate_flow(
    z_init: torch.Tensor,
    velocity_fn,
    steps: int,
    keep_trajectory: bool = False,
) -> tuple[torch.Tensor, FlowTrajectory | None]:
    """Euler-integrate dz/dt = v from t=1 to t=0 on the grid t_k = k/steps.

    Exactly ``steps`` velocity evaluations. velocity_fn(z, t) must return a
    tensor of z's shape.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = z_init
    points = [(1.0, z)] if keep_trajectory else None
    for k in range(steps, 0, -1):
        t_k = k / steps
        t_next = (k - 1) / steps
        v = velocity_fn(z, t_k)
        if v.shape != z.shape:
            raise ValueError(f"velocity shape {tuple(v.shape)} != state shape {tuple(z.shape)}")
        z = euler_step(z, t_k, t_k - t_next, v)
        if points is not None:
            points.append((t_next, z))
    return z, (FlowTrajectory(points) if points is not None else None)


def _check_fingerprint(backbone: VelocityBackbone, adapter: ControlAdapter) -> None:
    if adapter.backbone_fingerprint != backbone.fingerprint():
        raise FingerprintMismatchError("adapter/backbone fingerprint mismatch")


def restore(
    lq: torch.Tensor,
    backbone: VelocityBackbone,
    adapter: ControlAdapter,
    codec: LatentCodec,
    cfg: RestoreConfig,
    keep_trajectory: bool = False,
) -> tuple[torch.Tensor, FlowTrajectory | None]:
    """Restore one degraded image; deterministic given (lq, parameters, seed)."""
    check_image(lq)
    _check_fingerprint(backbone, adapter)
    res = cfg.target_resolution
    if res % codec.spatial_factor:
        raise ValueError(
            f"target resolution {res} not divisible by codec factor {codec.spatial_factor}"
        )
    upsampled = resize(lq, res, res, mode=cfg.upsample)
    with torch.no_grad():
        z_lq = codec.encode(upsampled)
        cond = backbone.embed_text(None)
        rng = torch.Generator().manual_seed(cfg.seed)
        z = torch.randn(z_lq.shape, generator=rng)

        def velocity(zz, t):
            return adapter.controlled_velocity(zz, z_lq, cond, t, backbone)

        z, traj = integrate_flow(z, velocity, cfg.steps, keep_trajectory=keep_trajectory)
        image = codec.decode(z)
    return image, traj


def generate_unconditional(
    backbone: VelocityBackbone,
    codec: LatentCodec,
    cfg: RestoreConfig,
    adapter: ControlAdapter | None = None,
    keep_trajectory: bool = False,
) -> tuple[torch.Tensor, FlowTrajectory | None]:
    """Sample one image from noise with no control input.

    When an adapter is supplied, the controlled path runs with an all-zero
    control latent; with a freshly initialized adapter the result is
    identical to the adapter-free path.
    """
    res = cfg.target_resolution
    if res % codec.spatial_factor:
        raise ValueError(
            f"target resolution {res} not divisible by codec factor {codec.spatial_factor}"
        )
    side = res // codec.spatial_factor
    with torch.no_grad():
        cond = backbone.embed_text(None)
        rng = torch.Generator().manual_seed(cfg.seed)
        z = torch.randn((side, side, codec.latent_channels), generator=rng)
        if adapter is None:
            def velocity(zz, t):
                return backbone.predict_velocity(zz, cond, t)
        else:
            _check_fingerprint(backbone, adapter)
            z_zero = torch.zeros_like(z)

            def velocity(zz, t):
                return adapter.controlled_velocity(zz, z_zero, cond, t, backbone)

        z, traj = integrate_flow(z, velocity, cfg.steps, keep_trajectory=keep_trajectory)
        image = codec.decode(z)
    return image, traj
