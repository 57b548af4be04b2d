import pytest
import torch

from flowrestore.backbone import BackboneConfig, VelocityBackbone


def tiny_backbone_config(**overrides) -> BackboneConfig:
    base = dict(
        n_blocks=2,
        hidden_dim=16,
        n_heads=2,
        patch_size=2,
        latent_channels=3,
        text_dim=8,
        pooled_dim=8,
        vocab_size=16,
        mlp_ratio=2.0,
        time_freq_dim=8,
    )
    base.update(overrides)
    return BackboneConfig(**base)


def randomize_(module: torch.nn.Module, seed: int = 0, std: float = 0.1) -> torch.nn.Module:
    """Overwrite every parameter with small random values (breaks zero inits)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)
    return module


@pytest.fixture
def tiny_backbone() -> VelocityBackbone:
    torch.manual_seed(0)
    model = VelocityBackbone(tiny_backbone_config())
    torch.nn.init.normal_(model.out_proj.weight, std=0.05)
    return model
