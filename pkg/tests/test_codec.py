import pytest
import torch

from flowrestore.codec import (
    CodecConfigError,
    CodecTrainConfig,
    LatentCodec,
    ShapeMismatchError,
    train_codec,
)
from flowrestore.shapes import synth_corpus


def test_identity_encode_is_elementwise_identity():
    codec = LatentCodec.identity()
    x = torch.rand(16, 16, 3)
    assert torch.equal(codec.encode(x), x)


def test_identity_decode_clamps():
    codec = LatentCodec.identity()
    z = torch.tensor([[[0.5, 1.5, -0.25]]])
    out = codec.decode(z)
    assert torch.equal(out, torch.tensor([[[0.5, 1.0, 0.0]]]))


def test_identity_roundtrip_equals_clamp():
    codec = LatentCodec.identity()
    x = torch.randn(8, 8, 3)
    assert torch.equal(codec.decode(codec.encode(x)), x.clamp(0.0, 1.0))


def test_identity_unclamped_decode_is_exact():
    codec = LatentCodec.identity()
    z = torch.randn(8, 8, 3) * 3
    assert torch.equal(codec.decode(z, clamp=False), z)


def test_identity_spec_constraints():
    with pytest.raises(CodecConfigError):
        LatentCodec(kind="identity", spatial_factor=4, latent_channels=3)
    with pytest.raises(CodecConfigError):
        LatentCodec(kind="mystery")


def test_conv_codec_shape_arithmetic():
    codec = LatentCodec(spatial_factor=4, latent_channels=8)
    z = codec.encode(torch.rand(32, 32, 3))
    assert z.shape == (8, 8, 8)
    out = codec.decode(z)
    assert out.shape == (32, 32, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_conv_codec_divisibility_error():
    codec = LatentCodec(spatial_factor=4, latent_channels=8)
    with pytest.raises(ShapeMismatchError):
        codec.encode(torch.rand(30, 32, 3))


def test_decode_channel_mismatch_error():
    codec = LatentCodec(spatial_factor=4, latent_channels=8)
    with pytest.raises(ShapeMismatchError):
        codec.decode(torch.rand(8, 8, 4))


def test_encode_is_deterministic():
    codec = LatentCodec(spatial_factor=2, latent_channels=4)
    x = torch.rand(8, 8, 3)
    assert torch.equal(codec.encode(x), codec.encode(x))


def test_train_codec_rejects_empty_corpus():
    with pytest.raises(CodecConfigError):
        train_codec([], CodecTrainConfig(epochs=1))


def test_train_codec_rejects_identity_kind():
    with pytest.raises(CodecConfigError):
        train_codec([torch.rand(8, 8, 3)], CodecTrainConfig(epochs=1), kind="identity")


def test_train_codec_constant_corpus_near_perfect():
    torch.manual_seed(0)
    colors = torch.rand(12, 1, 1, 3)
    corpus = colors.expand(12, 8, 8, 3).contiguous()
    codec, history = train_codec(
        corpus.repeat(32, 1, 1, 1),
        CodecTrainConfig(epochs=300, batch_size=32, learning_rate=1e-2, seed=1, hidden_channels=24),
        spatial_factor=2,
        latent_channels=4,
    )
    with torch.no_grad():
        err = (codec.decode(codec.encode(corpus), clamp=False) - corpus).abs().mean()
    assert float(err) <= 1e-3
    assert history[-1] < history[0]


def test_train_codec_loss_decreases_on_shapes():
    images, _ = synth_corpus(64, seed=5, resolution=16)
    codec, history = train_codec(
        images,
        CodecTrainConfig(epochs=3, batch_size=16, seed=0, hidden_channels=24),
        spatial_factor=2,
        latent_channels=4,
    )
    assert history[-1] < history[0]


def test_checkpoint_roundtrip(tmp_path):
    images, _ = synth_corpus(16, seed=2, resolution=16)
    codec, _ = train_codec(
        images,
        CodecTrainConfig(epochs=1, batch_size=8, hidden_channels=16),
        spatial_factor=2,
        latent_channels=4,
    )
    path = str(tmp_path / "codec.pt")
    codec.save(path)
    loaded = LatentCodec.load(path)
    x = torch.rand(16, 16, 3)
    assert torch.equal(codec.encode(x), loaded.encode(x))
    assert torch.equal(codec.decode(codec.encode(x)), loaded.decode(loaded.encode(x)))
