import numpy as np
import pytest

from latentflow.encoders import ContextEncoder, EncoderConfig, ImageEncoder, encode_context, encode_features
from latentflow.errors import ConfigError
from latentflow.harness.optim import Adam, OptimConfig
from latentflow.ndtensor import backward


@pytest.fixture(scope="module")
def encoders():
    rng = np.random.default_rng(0)
    return ImageEncoder(32, rng), ContextEncoder(64, rng)


def test_feature_shape(encoders):
    img = np.random.default_rng(1).random((3, 64, 64))
    assert encode_features(encoders[0], img).shape == (32, 8, 8)
    assert encode_context(encoders[1], img).shape == (64, 8, 8)


def test_batched_input(encoders):
    imgs = np.random.default_rng(1).random((2, 3, 16, 24))
    out = encoders[0](imgs)
    assert out.shape == (2, 32, 2, 3)
    assert np.allclose(out.data[1], encoders[0](imgs[1]).data, atol=1e-6)


@pytest.mark.parametrize("shape", [(3, 60, 64), (3, 64, 12), (3, 4, 8)])
def test_non_multiple_of_8_rejected(encoders, shape):
    with pytest.raises(ConfigError):
        encoders[0](np.zeros(shape))


def test_different_images_give_different_features(encoders):
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
    for enc in encoders:
        assert np.max(np.abs(enc(a).data - enc(b).data)) > 0


def test_encoders_are_separately_parameterized(encoders):
    img, ctx = encoders
    assert img.convs[0].weight is not ctx.convs[0].weight
    assert not np.array_equal(img.convs[0].weight.data, ctx.convs[0].weight.data)


def test_frozen_encoder_unchanged_by_optimizer_step():
    rng = np.random.default_rng(0)
    enc, other = ImageEncoder(8, rng, (4, 8)), ContextEncoder(8, rng, (4, 8))
    enc.freeze()
    before = {k: v.copy() for k, v in enc.state_dict().items()}
    img = rng.random((3, 16, 16))
    opt = Adam(enc.parameters() + other.parameters(), OptimConfig(lr=1e-2, warmup=0))
    backward((enc(img) * other(img)).sum())
    assert all(p.grad is None for p in enc.parameters())
    opt.step()
    for k, v in enc.state_dict().items():
        assert np.array_equal(v, before[k])
    assert any(p.grad is not None for p in other.parameters())


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(feature_dim=0)
    with pytest.raises(ConfigError):
        EncoderConfig(context_dim=-1)
