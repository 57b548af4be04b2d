"""Latent codec: pixel space <-> latent space.

Two kinds behind one interface:

* ``identity`` - latent equals the image (spatial factor 1, 3 channels).
  Keeps the two-space loss structure analytically checkable.
* ``conv_autoencoder`` - a small convolutional autoencoder (default 4x
  spatial compression into 8 channels) trained on the toy corpus.

After training, latents are standardized (per-channel shift/scale measured
on the training corpus) so the flow model sees roughly unit-variance
inputs; the statistics are stored in the checkpoint and inverted on decode.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import torch
from torch import nn

from .checkpoint import CheckpointError, load_archive, save_archive

IDENTITY = "identity"
CONV_AUTOENCODER = "conv_autoencoder"


class CodecConfigError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class CodecTrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 2e-3
    seed: int = 0
    hidden_channels: int = 48


def _to_chw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2) if x.ndim == 4 else x.permute(2, 0, 1).unsqueeze(0)


def _from_chw(x: torch.Tensor, batched: bool) -> torch.Tensor:
    out = x.permute(0, 2, 3, 1)
    return out if batched else out.squeeze(0)


class LatentCodec(nn.Module):
    """Encoder/decoder pair; pure function of (input, parameters)."""

    def __init__(
        self,
        kind: str = CONV_AUTOENCODER,
        spatial_factor: int = 4,
        latent_channels: int = 8,
        hidden_channels: int = 48,
    ):
        super().__init__()
        if kind not in (IDENTITY, CONV_AUTOENCODER):
            raise CodecConfigError(f"unknown codec kind {kind!r}")
        if kind == IDENTITY:
            if spatial_factor != 1 or latent_channels != 3:
                raise CodecConfigError("identity codec requires spatial_factor=1, latent_channels=3")
        else:
            n_down = math.log2(spatial_factor)
            if spatial_factor < 2 or n_down != int(n_down):
                raise CodecConfigError("conv codec spatial_factor must be a power of two >= 2")
        self.kind = kind
        self.spatial_factor = int(spatial_factor)
        self.latent_channels = int(latent_channels)
        self.hidden_channels = int(hidden_channels)

        if kind == CONV_AUTOENCODER:
            h = hidden_channels
            enc: list[nn.Module] = [nn.Conv2d(3, h, 3, padding=1), nn.GELU()]
            for _ in range(int(math.log2(spatial_factor))):
                enc += [nn.Conv2d(h, h, 4, stride=2, padding=1), nn.GELU()]
            enc += [nn.Conv2d(h, latent_channels, 3, padding=1)]
            # nearest-upsample + conv avoids transposed-conv checkerboarding
            dec: list[nn.Module] = [nn.Conv2d(latent_channels, h, 3, padding=1), nn.GELU()]
            for _ in range(int(math.log2(spatial_factor))):
                dec += [
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(h, h, 3, padding=1),
                    nn.GELU(),
                ]
            dec += [nn.Conv2d(h, 3, 3, padding=1)]
            self.encoder = nn.Sequential(*enc)
            self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_shift", torch.zeros(latent_channels))
        self.register_buffer("latent_scale", torch.ones(latent_channels))

    @classmethod
    def identity(cls) -> "LatentCodec":
        return cls(kind=IDENTITY, spatial_factor=1, latent_channels=3)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) or (B, H, W, 3) image -> latent with the same rank."""
        batched = image.ndim == 4
        h, w = image.shape[-3], image.shape[-2]
        if image.shape[-1] != 3:
            raise ShapeMismatchError(f"expected 3 channels, got {image.shape[-1]}")
        if h % self.spatial_factor or w % self.spatial_factor:
            raise ShapeMismatchError(
                f"image size {h}x{w} not divisible by spatial factor {self.spatial_factor}"
            )
        if self.kind == IDENTITY:
            return image
        z = self.encoder(_to_chw(image))
        z = (z - self.latent_shift[None, :, None, None]) / self.latent_scale[None, :, None, None]
        return _from_chw(z, batched)

    def decode(self, latent: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """Latent -> image; clamped to [0, 1] unless ``clamp=False`` (analytic tests)."""
        if latent.shape[-1] != self.latent_channels:
            raise ShapeMismatchError(
                f"expected {self.latent_channels} latent channels, got {latent.shape[-1]}"
            )
        if self.kind == IDENTITY:
            return latent.clamp(0.0, 1.0) if clamp else latent
        batched = latent.ndim == 4
        z = _to_chw(latent)
        z = z * self.latent_scale[None, :, None, None] + self.latent_shift[None, :, None, None]
        x = self.decoder(z)
        out = _from_chw(x, batched)
        return out.clamp(0.0, 1.0) if clamp else out

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "spatial_factor": self.spatial_factor,
            "latent_channels": self.latent_channels,
            "hidden_channels": self.hidden_channels,
        }

    def save(self, path: str) -> None:
        save_archive(path, {"artifact": "codec", **self.header()}, dict(self.state_dict()))

    @classmethod
    def load(cls, path: str) -> "LatentCodec":
        header, tensors = load_archive(path)
        if header.get("artifact") != "codec":
            raise CheckpointError(f"not a codec checkpoint: {path}")
        codec = cls(
            kind=header["kind"],
            spatial_factor=header["spatial_factor"],
            latent_channels=header["latent_channels"],
            hidden_channels=header.get("hidden_channels", 48),
        )
        codec.load_state_dict(tensors)
        codec.eval()
        return codec


def train_codec(
    corpus: list[torch.Tensor] | torch.Tensor,
    config: CodecTrainConfig | None = None,
    spatial_factor: int = 4,
    latent_channels: int = 8,
    kind: str = CONV_AUTOENCODER,
    log_fn=None,
) -> tuple[LatentCodec, list[float]]:
    """Train a conv autoencoder on pixel L1; returns (codec, per-epoch losses).

    Latent standardization statistics are computed on the corpus after the
    final epoch and baked into the codec buffers.
    """
    if kind != CONV_AUTOENCODER:
        raise CodecConfigError(f"only the {CONV_AUTOENCODER!r} kind is trainable, got {kind!r}")
    config = config or CodecTrainConfig()
    if isinstance(corpus, list):
        if not corpus:
            raise CodecConfigError("training corpus is empty")
        corpus = torch.stack(corpus)
    if corpus.numel() == 0:
        raise CodecConfigError("training corpus is empty")

    torch.manual_seed(config.seed)
    codec = LatentCodec(
        kind=CONV_AUTOENCODER,
        spatial_factor=spatial_factor,
        latent_channels=latent_channels,
        hidden_channels=config.hidden_channels,
    )
    opt = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    n = corpus.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.epochs * steps_per_epoch), eta_min=config.learning_rate * 1e-4
    )
    order_rng = torch.Generator().manual_seed(config.seed)
    history: list[float] = []
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=order_rng)
        total, count = 0.0, 0
        start = time.monotonic()
        for i in range(0, n, config.batch_size):
            batch = corpus[perm[i : i + config.batch_size]]
            recon = codec.decode(codec.encode(batch), clamp=False)
            loss = (recon - batch).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * batch.shape[0]
            count += batch.shape[0]
        history.append(total / count)
        if log_fn:
            log_fn(f"codec epoch {epoch + 1}/{config.epochs} "
                   f"l1={history[-1]:.5f} ({time.monotonic() - start:.1f}s)")

    codec.eval()
    with torch.no_grad():
        stats = []
        for i in range(0, n, config.batch_size):
            stats.append(codec.encoder(_to_chw(corpus[i : i + config.batch_size])))
        raw = torch.cat(stats)
        codec.latent_shift.copy_(raw.mean(dim=(0, 2, 3)))
        codec.latent_scale.copy_(raw.std(dim=(0, 2, 3)).clamp_min(1e-4))
    return codec, history
