"""Toy multimodal diffusion-transformer velocity model.

Dual-stream transformer over latent patches and text tokens: each block
runs joint attention across the concatenated streams, with per-stream
feed-forward nets and timestep/pooled-text modulation. The model predicts
the straight-line flow velocity from (noisy latent, text conditioning,
timestep).

Every block accepts an optional additive injection on each stream's input,
which is how the control adapter steers a frozen backbone. A zero injection
is exactly a no-op, so a zero-initialized adapter leaves the model's output
bitwise unchanged.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict

import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import CheckpointError, fingerprint_module, load_archive, save_archive


class ShapeMismatchError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass
class BackboneConfig:
    n_blocks: int = 8
    hidden_dim: int = 128
    n_heads: int = 4
    patch_size: int = 2
    latent_channels: int = 8
    text_dim: int = 32
    pooled_dim: int = 32
    vocab_size: int = 256
    mlp_ratio: float = 4.0
    time_freq_dim: int = 64

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.time_freq_dim % 2:
            raise ValueError("time_freq_dim must be even")


@dataclass
class TextConditioning:
    """Sequence embedding p (L, text_dim) and pooled embedding y (pooled_dim,)."""

    p: torch.Tensor
    y: torch.Tensor


@dataclass
class BlockInjection:
    """Additive per-token control signals for one block's stream inputs."""

    z: torch.Tensor  # image stream, (T_img, hidden) or (B, T_img, hidden)
    p: torch.Tensor | None = None  # text stream; None means zero


def tokenize(text: str) -> list[int]:
    """UTF-8 byte tokenizer; ids fit any vocabulary of size >= 256."""
    return list(text.encode("utf-8"))


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1], scaled by 1000 as in DiT practice."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None].to(freqs.dtype) * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _sincos_1d(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=positions.dtype, device=positions.device) / half
    )
    args = positions[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def positional_2d(gh: int, gw: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2D sin/cos embedding for a gh x gw token grid, shape (gh*gw, dim)."""
    half = dim // 2
    ys = torch.arange(gh, dtype=dtype, device=device).repeat_interleave(gw)
    xs = torch.arange(gw, dtype=dtype, device=device).repeat(gh)
    return torch.cat([_sincos_1d(ys, half), _sincos_1d(xs, dim - half)], dim=-1)


def positional_1d(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    return _sincos_1d(torch.arange(length, dtype=dtype, device=device), dim)


class TextEmbedder(nn.Module):
    """Toy stand-in for pretrained text encoders.

    Maps token ids to a sequence embedding and a pooled embedding; the
    empty prompt maps to a dedicated learned null embedding pair.
    """

    def __init__(self, vocab_size: int, text_dim: int, pooled_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Embedding(vocab_size, text_dim)
        self.null_seq = nn.Parameter(torch.randn(1, text_dim) * 0.02)
        self.null_pooled = nn.Parameter(torch.randn(pooled_dim) * 0.02)
        self.pool_proj = nn.Linear(text_dim, pooled_dim)

    def forward(self, token_ids: list[int] | None) -> TextConditioning:
        if not token_ids:
            return TextConditioning(p=self.null_seq.detach().clone(),
                                    y=self.null_pooled.detach().clone())
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise VocabularyError(
                f"token id out of range [0, {self.vocab_size}): {ids.min().item()}..{ids.max().item()}"
            )
        p = self.table(ids)
        y = self.pool_proj(p.mean(dim=0))
        return TextConditioning(p=p.detach().clone(), y=y.detach().clone())


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


class MMDiTBlock(nn.Module):
    """One dual-stream block: joint attention + per-stream MLP, adaLN-modulated."""

    def __init__(self, hidden_dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        inner = int(hidden_dim * mlp_ratio)
        self.img_mod = nn.Linear(hidden_dim, 6 * hidden_dim)
        self.txt_mod = nn.Linear(hidden_dim, 6 * hidden_dim)
        self.img_norm1 = nn.LayerNorm(hidden_dim, elementwise_affine=False)
        self.txt_norm1 = nn.LayerNorm(hidden_dim, elementwise_affine=False)
        self.img_qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.txt_qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.img_attn_out = nn.Linear(hidden_dim, hidden_dim)
        self.txt_attn_out = nn.Linear(hidden_dim, hidden_dim)
        self.img_norm2 = nn.LayerNorm(hidden_dim, elementwise_affine=False)
        self.txt_norm2 = nn.LayerNorm(hidden_dim, elementwise_affine=False)
        self.img_mlp = nn.Sequential(
            nn.Linear(hidden_dim, inner), nn.GELU(approximate="tanh"), nn.Linear(inner, hidden_dim)
        )
        self.txt_mlp = nn.Sequential(
            nn.Linear(hidden_dim, inner), nn.GELU(approximate="tanh"), nn.Linear(inner, hidden_dim)
        )

    def _heads(self, qkv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, n, _ = qkv.shape
        qkv = qkv.view(b, n, 3, self.n_heads, self.hidden_dim // self.n_heads)
        q, k, v = qkv.unbind(dim=2)
        return q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2)

    def forward(
        self,
        z: torch.Tensor,
        p: torch.Tensor,
        vec: torch.Tensor,
        injection: BlockInjection | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if injection is not None:
            z = z + injection.z
            if injection.p is not None:
                p = p + injection.p

        act = F.silu(vec)
        zs1, zc1, zg1, zs2, zc2, zg2 = self.img_mod(act).chunk(6, dim=-1)
        ps1, pc1, pg1, ps2, pc2, pg2 = self.txt_mod(act).chunk(6, dim=-1)

        zh = _modulate(self.img_norm1(z), zs1, zc1)
        ph = _modulate(self.txt_norm1(p), ps1, pc1)
        qz, kz, vz = self._heads(self.img_qkv(zh))
        qp, kp, vp = self._heads(self.txt_qkv(ph))
        q = torch.cat([qp, qz], dim=2)
        k = torch.cat([kp, kz], dim=2)
        v = torch.cat([vp, vz], dim=2)
        attn = F.scaled_dot_product_attention(q, k, v)
        attn = attn.transpose(1, 2).reshape(z.shape[0], -1, self.hidden_dim)
        n_txt = p.shape[1]
        z = z + zg1[:, None, :] * self.img_attn_out(attn[:, n_txt:])
        p = p + pg1[:, None, :] * self.txt_attn_out(attn[:, :n_txt])

        z = z + zg2[:, None, :] * self.img_mlp(_modulate(self.img_norm2(z), zs2, zc2))
        p = p + pg2[:, None, :] * self.txt_mlp(_modulate(self.txt_norm2(p), ps2, pc2))
        return z, p


class VelocityBackbone(nn.Module):
    """Rectified-flow velocity predictor with per-block injection hooks."""

    def __init__(self, config: BackboneConfig | None = None, **overrides):
        super().__init__()
        if config is None:
            config = BackboneConfig(**overrides)
        self.config = config
        c = config
        patch_dim = c.patch_size * c.patch_size * c.latent_channels
        self.embedder = TextEmbedder(c.vocab_size, c.text_dim, c.pooled_dim)
        self.patch_embed = nn.Linear(patch_dim, c.hidden_dim)
        self.text_in = nn.Linear(c.text_dim, c.hidden_dim)
        self.time_in = nn.Sequential(
            nn.Linear(c.time_freq_dim, c.hidden_dim), nn.SiLU(), nn.Linear(c.hidden_dim, c.hidden_dim)
        )
        self.pooled_in = nn.Sequential(
            nn.Linear(c.pooled_dim, c.hidden_dim), nn.SiLU(), nn.Linear(c.hidden_dim, c.hidden_dim)
        )
        self.blocks = nn.ModuleList(
            MMDiTBlock(c.hidden_dim, c.n_heads, c.mlp_ratio) for _ in range(c.n_blocks)
        )
        self.final_norm = nn.LayerNorm(c.hidden_dim, elementwise_affine=False)
        self.final_mod = nn.Linear(c.hidden_dim, 2 * c.hidden_dim)
        self.out_proj = nn.Linear(c.hidden_dim, patch_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    # ---- token plumbing -------------------------------------------------

    def _grid(self, z: torch.Tensor) -> tuple[int, int]:
        p = self.config.patch_size
        h, w, ch = z.shape[-3], z.shape[-2], z.shape[-1]
        if ch != self.config.latent_channels:
            raise ShapeMismatchError(f"expected {self.config.latent_channels} latent channels, got {ch}")
        if h % p or w % p:
            raise ShapeMismatchError(f"latent size {h}x{w} not divisible by patch size {p}")
        return h // p, w // p

    def patchify(self, z: torch.Tensor) -> torch.Tensor:
        gh, gw = self._grid(z)
        p, ch = self.config.patch_size, self.config.latent_channels
        b = z.shape[0]
        z = z.view(b, gh, p, gw, p, ch).permute(0, 1, 3, 2, 4, 5)
        return z.reshape(b, gh * gw, p * p * ch)

    def unpatchify(self, tokens: torch.Tensor, gh: int, gw: int) -> torch.Tensor:
        p, ch = self.config.patch_size, self.config.latent_channels
        b = tokens.shape[0]
        z = tokens.view(b, gh, gw, p, p, ch).permute(0, 1, 3, 2, 4, 5)
        return z.reshape(b, gh * p, gw * p, ch)

    def latent_tokens(self, z: torch.Tensor) -> torch.Tensor:
        """Patch-embedded image tokens with positional encoding; z is (B, h, w, C)."""
        gh, gw = self._grid(z)
        tokens = self.patch_embed(self.patchify(z))
        pos = positional_2d(gh, gw, self.config.hidden_dim, dtype=tokens.dtype, device=tokens.device)
        return tokens + pos[None]

    def text_tokens(self, p: torch.Tensor) -> torch.Tensor:
        tokens = self.text_in(p)
        pos = positional_1d(p.shape[1], self.config.hidden_dim, dtype=tokens.dtype, device=tokens.device)
        return tokens + pos[None]

    def cond_vector(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        feats = timestep_features(t, self.config.time_freq_dim)
        return self.time_in(feats) + self.pooled_in(y)

    # ---- public ops ------------------------------------------------------

    def embed_text(self, token_ids: list[int] | None) -> TextConditioning:
        return self.embedder(token_ids)

    def predict_velocity(
        self,
        z_t: torch.Tensor,
        cond: TextConditioning,
        t: float | torch.Tensor,
        injections: list[BlockInjection] | None = None,
    ) -> torch.Tensor:
        """Velocity for latent z_t at time t; output shape equals input shape.

        ``injections`` must have one entry per block when given; an
        all-zero injection yields output identical to no injection.
        """
        batched = z_t.ndim == 4
        z = z_t if batched else z_t.unsqueeze(0)
        b = z.shape[0]
        gh, gw = self._grid(z)

        p = cond.p if cond.p.ndim == 3 else cond.p.unsqueeze(0)
        y = cond.y if cond.y.ndim == 2 else cond.y.unsqueeze(0)
        if p.shape[0] == 1 and b > 1:
            p = p.expand(b, -1, -1)
        if y.shape[0] == 1 and b > 1:
            y = y.expand(b, -1)

        if isinstance(t, (int, float)):
            t_vec = torch.full((b,), float(t), dtype=z.dtype, device=z.device)
        else:
            t_vec = t.reshape(-1).to(dtype=z.dtype)
            if t_vec.numel() == 1 and b > 1:
                t_vec = t_vec.expand(b)
        if bool((t_vec < 0).any()) or bool((t_vec > 1).any()):
            raise ValueError("timestep t must lie in [0, 1]")

        if injections is not None and len(injections) != len(self.blocks):
            raise ShapeMismatchError(
                f"expected {len(self.blocks)} injections, got {len(injections)}"
            )

        tokens = self.latent_tokens(z)
        txt = self.text_tokens(p)
        vec = self.cond_vector(t_vec, y)

        for i, block in enumerate(self.blocks):
            inj = injections[i] if injections is not None else None
            if inj is not None:
                zi = inj.z if inj.z.ndim == 3 else inj.z.unsqueeze(0)
                pi = None
                if inj.p is not None:
                    pi = inj.p if inj.p.ndim == 3 else inj.p.unsqueeze(0)
                inj = BlockInjection(z=zi, p=pi)
            tokens, txt = block(tokens, txt, vec, inj)

        shift, scale = self.final_mod(F.silu(vec)).chunk(2, dim=-1)
        tokens = _modulate(self.final_norm(tokens), shift, scale)
        out = self.unpatchify(self.out_proj(tokens), gh, gw)
        return out if batched else out.squeeze(0)

    forward = predict_velocity

    # ---- persistence -----------------------------------------------------

    def fingerprint(self) -> str:
        return fingerprint_module(self, extra=asdict(self.config))

    def save(self, path: str) -> None:
        header = {"artifact": "backbone", **asdict(self.config)}
        save_archive(path, header, dict(self.state_dict()))

    @classmethod
    def load(cls, path: str) -> "VelocityBackbone":
        header, tensors = load_archive(path)
        if header.get("artifact") != "backbone":
            raise CheckpointError(f"not a backbone checkpoint: {path}")
        cfg = BackboneConfig(**{k: v for k, v in header.items() if k in BackboneConfig.__dataclass_fields__})
        model = cls(cfg)
        model.load_state_dict(tensors)
        model.eval()
        return model

    def clone_block(self, index: int = 0) -> MMDiTBlock:
        return copy.deepcopy(self.blocks[index])
