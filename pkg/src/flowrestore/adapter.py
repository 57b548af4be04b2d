"""Control adapter for a frozen velocity backbone.

One extra transformer block (copied from the backbone's first block)
extracts control features from the degraded-input latent; lightweight
squeeze-excitation pairs then distill those features into per-block
additive injections for both the image and text streams.

Everything that touches the backbone output is zero-initialized (the
injection MLP's final layer, every excitation layer, the embedding
offsets), so a fresh adapter reproduces the uncontrolled backbone exactly.

Supported variants, mirroring the ablation grid:

* ``se``          - rank-r squeeze/excite pair per block per branch (default)
* ``full_mlp``    - full-rank linear layer per block per branch
* ``single_mlp``  - one shared full-rank layer per branch for all blocks
* ``no_text_se``  - image-branch control only; text injections stay zero
* ``no_theta``    - SE control without the learnable embedding offsets
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import BlockInjection, MMDiTBlock, TextConditioning, VelocityBackbone
from .checkpoint import CheckpointError, fingerprint_module, load_archive, save_archive

ADAPTER_MODES = ("se", "full_mlp", "single_mlp", "no_text_se", "no_theta")


class AdapterConfigError(ValueError):
    pass


class FingerprintMismatchError(RuntimeError):
    """Adapter checkpoint does not match the supplied backbone."""


class SqueezeExcite(nn.Module):
    """Two stacked affine maps: squeeze to rank r, excite back to width c.

    No inner nonlinearity; expressivity comes from the rank bottleneck.
    The excitation weight and bias start at exactly zero.
    """

    def __init__(self, hidden_dim: int, rank: int):
        super().__init__()
        self.squeeze = nn.Linear(hidden_dim, rank)
        self.excite = nn.Linear(rank, hidden_dim)
        nn.init.zeros_(self.excite.weight)
        nn.init.zeros_(self.excite.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.squeeze.in_features:
            raise AdapterConfigError(
                f"expected feature width {self.squeeze.in_features}, got {x.shape[-1]}"
            )
        return self.excite(self.squeeze(x))


def _zero_linear(hidden_dim: int) -> nn.Linear:
    layer = nn.Linear(hidden_dim, hidden_dim)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class ControlAdapter(nn.Module):
    def __init__(self, backbone: VelocityBackbone, rank: int = 32, mode: str = "se"):
        super().__init__()
        cfg = backbone.config
        if mode not in ADAPTER_MODES:
            raise AdapterConfigError(f"unknown adapter mode {mode!r}")
        if not 1 <= rank <= cfg.hidden_dim:
            raise AdapterConfigError(f"rank must be in [1, {cfg.hidden_dim}], got {rank}")
        self.rank = int(rank)
        self.mode = mode
        self.n_blocks = cfg.n_blocks
        self.hidden_dim = cfg.hidden_dim
        self.backbone_fingerprint = backbone.fingerprint()

        self.control_block: MMDiTBlock = backbone.clone_block(0)
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.latent_channels
        final = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        self.inj_mlp = nn.Sequential(
            nn.Linear(patch_dim, cfg.hidden_dim), nn.GELU(approximate="tanh"), final
        )

        if mode == "no_theta":
            self.register_buffer("theta_p", torch.zeros(cfg.text_dim))
            self.register_buffer("theta_y", torch.zeros(cfg.pooled_dim))
        else:
            self.theta_p = nn.Parameter(torch.zeros(cfg.text_dim))
            self.theta_y = nn.Parameter(torch.zeros(cfg.pooled_dim))

        if mode in ("se", "no_theta", "no_text_se"):
            self.ctrl_img = nn.ModuleList(
                SqueezeExcite(cfg.hidden_dim, rank) for _ in range(cfg.n_blocks)
            )
            if mode != "no_text_se":
                self.ctrl_txt = nn.ModuleList(
                    SqueezeExcite(cfg.hidden_dim, rank) for _ in range(cfg.n_blocks)
                )
        elif mode == "full_mlp":
            self.ctrl_img = nn.ModuleList(_zero_linear(cfg.hidden_dim) for _ in range(cfg.n_blocks))
            self.ctrl_txt = nn.ModuleList(_zero_linear(cfg.hidden_dim) for _ in range(cfg.n_blocks))
        elif mode == "single_mlp":
            self.ctrl_img = _zero_linear(cfg.hidden_dim)
            self.ctrl_txt = _zero_linear(cfg.hidden_dim)

    # ---- forward ---------------------------------------------------------

    def features(
        self,
        z_t: torch.Tensor,
        z_lq: torch.Tensor,
        cond: TextConditioning,
        t: float | torch.Tensor,
        backbone: VelocityBackbone,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """One control-block forward; returns (image features, text features)."""
        if z_t.shape != z_lq.shape:
            raise AdapterConfigError(
                f"z_t shape {tuple(z_t.shape)} != z_lq shape {tuple(z_lq.shape)}"
            )
        batched = z_t.ndim == 4
        z = z_t if batched else z_t.unsqueeze(0)
        lq = z_lq if batched else z_lq.unsqueeze(0)
        b = z.shape[0]

        p = cond.p if cond.p.ndim == 3 else cond.p.unsqueeze(0)
        y = cond.y if cond.y.ndim == 2 else cond.y.unsqueeze(0)
        if p.shape[0] == 1 and b > 1:
            p = p.expand(b, -1, -1)
        if y.shape[0] == 1 and b > 1:
            y = y.expand(b, -1)
        if isinstance(t, (int, float)):
            t = torch.full((b,), float(t), dtype=z.dtype, device=z.device)
        else:
            t = t.reshape(-1).to(dtype=z.dtype)
            if t.numel() == 1 and b > 1:
                t = t.expand(b)

        z_c = backbone.latent_tokens(z) + self.inj_mlp(backbone.patchify(lq))
        p_c = backbone.text_tokens(p + self.theta_p)
        vec = backbone.cond_vector(t, y + self.theta_y)
        f_z, f_p = self.control_block(z_c, p_c, vec)
        return f_z, f_p

    def injections(self, f_z: torch.Tensor, f_p: torch.Tensor) -> list[BlockInjection]:
        if self.mode == "single_mlp":
            z_inj = self.ctrl_img(f_z)
            p_inj = self.ctrl_txt(f_p)
            return [BlockInjection(z=z_inj, p=p_inj) for _ in range(self.n_blocks)]
        if self.mode == "no_text_se":
            return [BlockInjection(z=se(f_z), p=None) for se in self.ctrl_img]
        return [
            BlockInjection(z=zi(f_z), p=pi(f_p))
            for zi, pi in zip(self.ctrl_img, self.ctrl_txt)
        ]

    def controlled_velocity(
        self,
        z_t: torch.Tensor,
        z_lq: torch.Tensor,
        cond: TextConditioning,
        t: float | torch.Tensor,
        backbone: VelocityBackbone,
    ) -> torch.Tensor:
        f_z, f_p = self.features(z_t, z_lq, cond, t, backbone)
        inj = self.injections(f_z, f_p)
        if z_t.ndim == 3:
            inj = [BlockInjection(z=i.z.squeeze(0), p=None if i.p is None else i.p.squeeze(0))
                   for i in inj]
        return backbone.predict_velocity(z_t, cond, t, injections=inj)

    forward = controlled_velocity

    # ---- persistence -----------------------------------------------------

    def header(self) -> dict:
        return {
            "artifact": "adapter",
            "rank": self.rank,
            "mode": self.mode,
            "n_blocks": self.n_blocks,
            "hidden_dim": self.hidden_dim,
            "backbone_fingerprint": self.backbone_fingerprint,
        }

    def save(self, path: str) -> None:
        save_archive(path, self.header(), dict(self.state_dict()))

    @classmethod
    def load(cls, path: str, backbone: VelocityBackbone) -> "ControlAdapter":
        header, tensors = load_archive(path)
        if header.get("artifact") != "adapter":
            raise CheckpointError(f"not an adapter checkpoint: {path}")
        actual = backbone.fingerprint()
        if header["backbone_fingerprint"] != actual:
            raise FingerprintMismatchError(
                "adapter was trained against a different backbone "
                f"(checkpoint {header['backbone_fingerprint'][:12]}..., live {actual[:12]}...)"
            )
        adapter = cls(backbone, rank=header["rank"], mode=header["mode"])
        adapter.load_state_dict(tensors)
        adapter.eval()
        return adapter

    def fingerprint(self) -> str:
        return fingerprint_module(self, extra={"rank": self.rank, "mode": self.mode})


# ---- parameter accounting -------------------------------------------------


@dataclass(frozen=True)
class ParamAudit:
    hidden_dim: int
    rank: int
    n_blocks: int
    branches: int
    se_per_layer: int
    se_total: int
    full_per_layer: int
    full_total: int

    @property
    def ratio(self) -> float:
        return self.se_total / self.full_total


def count_adapter_params(hidden_dim: int, rank: int, n_blocks: int, branches: int = 2) -> ParamAudit:
    """Closed-form SE vs full-rank control parameter counts.

    Per layer: SE holds a (r x c) squeeze plus bias and a (c x r) excite
    plus bias; the full-rank variant holds one (c x c) map plus bias.
    """
    if min(hidden_dim, rank, n_blocks, branches) < 1:
        raise ValueError("all audit arguments must be positive")
    c, r = hidden_dim, rank
    se_layer = 2 * r * c + r + c
    full_layer = c * c + c
    return ParamAudit(
        hidden_dim=c,
        rank=r,
        n_blocks=n_blocks,
        branches=branches,
        se_per_layer=se_layer,
        se_total=branches * n_blocks * se_layer,
        full_per_layer=full_layer,
        full_total=branches * n_blocks * full_layer,
    )
