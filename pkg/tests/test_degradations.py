import numpy as np
import pytest
import torch

from flowrestore.degradations import (
    BlurConfig,
    DegradationConfig,
    DegradationConfigError,
    DegradationStage,
    FinalStage,
    JpegConfig,
    NoiseConfig,
    ResizeConfig,
    degrade,
    gaussian_kernel,
    generalized_gaussian_kernel,
    identity_config,
    jpeg_roundtrip,
    plateau_kernel,
    sinc_kernel,
    toy_config,
)
from flowrestore.shapes import synth_image, random_spec


def _noise_only_config(sigma: float) -> DegradationConfig:
    silent = dict(blur=BlurConfig(prob=0.0),
                  resize=ResizeConfig(scale_range=(1.0, 1.0), updown_weights=(0.0, 0.0, 1.0)),
                  jpeg=JpegConfig(prob=0.0))
    stage1 = DegradationStage(noise=NoiseConfig(prob=1.0, gaussian_prob=1.0,
                                                sigma_range=(sigma, sigma), gray_prob=0.0),
                              **silent)
    stage2 = DegradationStage(noise=NoiseConfig(prob=0.0), **silent)
    return DegradationConfig(stage1=stage1, stage2=stage2,
                             final=FinalStage(sinc_prob=0.0, jpeg=JpegConfig(prob=0.0)),
                             scale=1)


def test_identity_pipeline_returns_input_exactly():
    img = torch.rand(16, 16, 3)
    assert torch.equal(degrade(img, identity_config(), per_image_seed=42), img)


def test_degrade_deterministic_and_in_range():
    rng = np.random.default_rng(0)
    spec = random_spec(rng)
    img = synth_image(spec)
    cfg = toy_config(scale=4)
    a = degrade(img, cfg, per_image_seed=7)
    b = degrade(img, cfg, per_image_seed=7)
    assert torch.equal(a, b)
    assert a.shape == (8, 8, 3)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_different_seeds_differ():
    img = synth_image(random_spec(np.random.default_rng(1)))
    cfg = toy_config(scale=4)
    assert not torch.equal(degrade(img, cfg, 1), degrade(img, cfg, 2))


def test_gaussian_noise_statistics():
    img = torch.full((256, 256, 3), 0.5)
    out = degrade(img, _noise_only_config(0.1), per_image_seed=3)
    std = float((out - out.mean()).pow(2).mean().sqrt())
    assert 0.095 <= std <= 0.105


def test_output_size_follows_scale():
    img = torch.rand(32, 32, 3)
    for scale in (1, 2, 4):
        cfg = toy_config(scale=scale)
        out = degrade(img, cfg, per_image_seed=11)
        assert out.shape == (32 // scale, 32 // scale, 3)


def test_divisibility_enforced():
    cfg = toy_config(scale=4)
    with pytest.raises(DegradationConfigError):
        degrade(torch.rand(30, 32, 3), cfg, per_image_seed=0)


def test_invalid_ranges_rejected():
    cfg = toy_config()
    cfg.stage1.blur = BlurConfig(sigma_range=(3.0, 0.2))
    with pytest.raises(DegradationConfigError):
        degrade(torch.rand(32, 32, 3), cfg, per_image_seed=0)
    cfg2 = toy_config()
    cfg2.stage2.noise = NoiseConfig(prob=1.5)
    with pytest.raises(DegradationConfigError):
        degrade(torch.rand(32, 32, 3), cfg2, per_image_seed=0)


def test_kernels_normalized_and_symmetric():
    for k in (
        gaussian_kernel(9, 1.2, 1.2, 0.0),
        generalized_gaussian_kernel(9, 1.2, 1.5),
        plateau_kernel(9, 1.2, 1.5),
        sinc_kernel(9, 2.0),
    ):
        assert k.shape == (9, 9)
        assert abs(k.sum() - 1.0) < 1e-9
        assert np.allclose(k, k[::-1, ::-1], atol=1e-12)
    iso = gaussian_kernel(9, 1.0, 1.0, 0.0)
    assert np.allclose(iso, iso.T, atol=1e-12)


def test_anisotropic_kernel_is_elongated():
    k = gaussian_kernel(15, 3.0, 0.6, 0.0)
    row_spread = (k.sum(axis=0) * np.arange(15) ** 2).sum()
    col_spread = (k.sum(axis=1) * np.arange(15) ** 2).sum()
    assert row_spread != pytest.approx(col_spread, rel=0.05)


def test_jpeg_roundtrip_quality_and_determinism():
    img = synth_image(random_spec(np.random.default_rng(2)))
    a = jpeg_roundtrip(img, 95)
    b = jpeg_roundtrip(img, 95)
    assert torch.equal(a, b)
    assert float((a - img).abs().mean()) < 0.03
    rough = jpeg_roundtrip(img, 10)
    assert float((rough - img).abs().mean()) > float((a - img).abs().mean())


def test_degrade_rejects_bad_shape():
    with pytest.raises(DegradationConfigError):
        degrade(torch.rand(16, 16), toy_config(), per_image_seed=0)
