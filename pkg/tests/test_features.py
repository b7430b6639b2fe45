import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from torch import nn

from hasanet import features
from hasanet.dsp import Waveform
from hasanet.errors import CapabilityError, ValidationError
from hasanet.features import LayerStack, LayerWeights, fuse_layers, softmax
from hasanet.model import LayerFusion

FS = 16000


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * FS)) / FS
    return Waveform(amp * np.sin(2 * np.pi * freq * t), FS)


def test_spectrogram_shape_one_second():
    f = features.spectrogram(Waveform(np.random.default_rng(0).standard_normal(FS) * 0.1, FS), 32, 16)
    assert f.frames.shape == (61, 257)
    assert f.frame_hop_seconds == pytest.approx(0.016)


@pytest.mark.parametrize("n", [512, 513, 767, 768, 4000, 22050])
def test_spectrogram_frame_count_formula(n):
    f = features.spectrogram(Waveform(np.ones(n) * 0.01, FS))
    assert f.n_frames == (n - 512) // 256 + 1


def test_zero_signal_hits_log_floor():
    f = features.spectrogram(Waveform(np.zeros(FS), FS))
    assert np.all(f.frames == np.log(1e-10))


def test_sine_peaks_at_expected_bin():
    f = features.spectrogram(tone(1000.0))
    assert np.all(np.argmax(f.frames, axis=1) == round(1000 * 512 / FS))


def test_spectrogram_rejections():
    with pytest.raises(ValidationError):
        features.spectrogram(Waveform(np.ones(100), FS))
    with pytest.raises(ValidationError):
        features.spectrogram(tone(440), frame_ms=10, hop_ms=16)
    with pytest.raises(ValidationError):
        features.spectrogram(tone(440), frame_ms=64, hop_ms=16)


def test_fuse_uniform_two_layers():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 5, 3))
    out = fuse_layers(np.stack([a, b]), LayerWeights.uniform(2)).frames
    np.testing.assert_allclose(out, (a + b) / 2, atol=1e-12)


def test_fuse_hand_softmax():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 4, 6))
    out = fuse_layers(np.stack([a, b]), LayerWeights([np.log(3.0), 0.0])).frames
    np.testing.assert_allclose(out, 0.75 * a + 0.25 * b, atol=1e-12)


def test_fuse_last_layer_is_exact_slice():
    stack = np.random.default_rng(3).standard_normal((4, 7, 5))
    out = fuse_layers(stack, LayerWeights([5.0, -1.0, 2.0, 0.3], mode="last_layer")).frames
    assert np.array_equal(out, stack[-1])
    assert np.array_equal(LayerWeights.uniform(4, "last_layer").normalized(), [0, 0, 0, 1])


def test_fuse_dimension_mismatch():
    with pytest.raises(ValidationError):
        fuse_layers(np.zeros((3, 2, 2)), LayerWeights.uniform(2))
    with pytest.raises(ValidationError):
        LayerWeights([0.0], mode="mean")


def test_layer_types_validate():
    with pytest.raises(ValidationError):
        LayerStack(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        features.FeatureSequence(np.array([[np.nan]]), 0.01, "x")
    with pytest.raises(ValidationError):
        features.FeatureSequence(np.zeros((0, 3)), 0.01, "x")


def test_softmax_sums_to_one_over_random_logits():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        z = rng.normal(scale=rng.uniform(0.1, 50), size=rng.integers(1, 30))
        assert abs(softmax(z).sum() - 1.0) < 1e-6


@given(hnp.arrays(float, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_softmax_property(z):
    w = softmax(z)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_fuse_is_linear_in_stack(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 4, 5))
    w = LayerWeights(rng.standard_normal(3))
    lhs = fuse_layers(alpha * a + beta * b, w).frames
    rhs = alpha * fuse_layers(a, w).frames + beta * fuse_layers(b, w).frames
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_fuse_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    stack = rng.standard_normal((4, 6, 3))
    z = rng.standard_normal(4)
    w = softmax(z)
    fused = np.tensordot(w, stack, axes=(0, 0))
    h = 1e-5
    for k in range(4):
        analytic = w[k] * (stack[k] - fused)
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        numeric = (fuse_layers(stack, LayerWeights(zp)).frames - fuse_layers(stack, LayerWeights(zm)).frames) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert rel.max() < 1e-4


def test_model_fusion_matches_numpy_and_autograd():
    rng = np.random.default_rng(5)
    stack = rng.standard_normal((3, 5, 4))
    fusion = LayerFusion(3, "weighted_sum").double()
    with torch.no_grad():
        fusion.logits.copy_(torch.tensor(rng.standard_normal(3)))
    out = fusion(torch.tensor(stack)[None])[0]
    ref = fuse_layers(stack, LayerWeights(fusion.logits.detach().numpy())).frames
    np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-12)
    out.sum().backward()
    w = softmax(fusion.logits.detach().numpy())
    expected = [w[k] * (stack[k] - ref).sum() for k in range(3)]
    np.testing.assert_allclose(fusion.logits.grad.numpy(), expected, atol=1e-10)


def test_mock_provider_shape_and_determinism():
    x = Waveform(np.random.default_rng(6).standard_normal(FS) * 0.1, FS)
    p = features.make_provider("mock")
    s = features.embed(p, x)
    assert s.shape[0] == 4 and s.shape[2] == 32 and abs(s.shape[1] - 50) <= 1
    again = features.embed(features.make_provider("mock"), x)
    assert np.array_equal(s.layers, again.layers)
    other = features.embed(features.make_provider("mock", seed=1), x)
    assert not np.array_equal(s.layers, other.layers)


def test_mock_provider_depends_on_input():
    p = features.make_provider("mock")
    a = features.embed(p, tone(300)).layers
    b = features.embed(p, tone(3000)).layers
    assert np.abs(a - b).max() > 1e-3


def test_mock_provider_resamples_other_rates():
    p = features.make_provider("mock")
    s = features.embed(p, Waveform(np.random.default_rng(7).standard_normal(8000) * 0.1, 8000))
    assert abs(s.shape[1] - 50) <= 1


def test_spectrogram_provider_passes_embed_contract():
    p = features.make_provider("spectrogram")
    s = features.embed(p, tone(500, seconds=1.4))
    assert s.shape[:1] == (1,) and s.shape[2] == 257


class _LyingProvider:
    provider_id, n_layers, dim, hop_seconds = "liar", 2, 8, 0.02

    def __init__(self, shape):
        self.shape = shape

    def layer_stack(self, x):
        return np.zeros(self.shape)


@pytest.mark.parametrize("shape", [(3, 50, 8), (2, 50, 9), (2, 40, 8)])
def test_embed_rejects_undeclared_shapes(shape):
    with pytest.raises(CapabilityError):
        features.embed(_LyingProvider(shape), tone(440))


def test_missing_provider_is_capability_error():
    with pytest.raises(CapabilityError):
        features.embed(None, tone(440))
    with pytest.raises(CapabilityError):
        features.whisper_features(None, tone(440))
    with pytest.raises(ValidationError):
        features.make_provider("mfcc")


def test_unavailable_pretrained_weights(monkeypatch, tmp_path):
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("HF_HOME", str(tmp_path))
    with pytest.raises(CapabilityError):
        features.make_provider("ssl_ws", model=str(tmp_path / "no-such-model"))
    with pytest.raises(CapabilityError):
        features.make_provider("whisper", model=str(tmp_path / "no-such-model"))


class _FakeSSL(nn.Module):
    class config:
        num_hidden_layers = 24
        hidden_size = 1024
        conv_stride = (5, 2, 2, 2, 2, 2, 2)

    def __init__(self):
        super().__init__()
        self.feature_extractor = nn.Linear(1, 1)
        self.encoder = nn.Linear(1, 1)


def test_ssl_adapter_takes_layer_count_from_model_config():
    enc = features.HFSSLEncoder(_FakeSSL())
    assert (enc.n_layers, enc.dim, enc.hop_seconds) == (24, 1024, 0.02)
    assert set(enc.param_groups()) == {"conv", "transformer"}


def test_whisper_mock_single_sequence():
    p = features.make_provider("mock_whisper")
    x = Waveform(np.random.default_rng(8).standard_normal(FS) * 0.1, FS)
    f = features.whisper_features(p, x)
    assert f.frames.shape[1] == p.dim and abs(f.n_frames - 50) <= 1
    assert np.array_equal(f.frames, features.whisper_features(features.make_provider("mock_whisper"), x).frames)
    fused = fuse_layers(features.embed(p, x), LayerWeights.uniform(1)).frames
    np.testing.assert_allclose(fused, f.frames, atol=1e-12)


def test_whisper_features_requires_single_layer():
    with pytest.raises(CapabilityError):
        features.whisper_features(features.make_provider("mock"), tone(440))


def test_encoder_param_groups_and_version():
    p = features.make_provider("mock")
    groups = p.param_groups()
    assert set(groups) == {"conv", "transformer"}
    ids = [id(q) for g in groups.values() for q in g]
    assert len(ids) == len(set(ids)) == len(list(p.parameters()))
    v = p.version
    with torch.no_grad():
        groups["transformer"][0].add_(1.0)
    assert p.version != v


def test_feature_cache_hits_and_invalidates(tmp_path):
    cache = features.FeatureCache(tmp_path)
    p = features.make_provider("mock")
    calls = []

    def compute():
        calls.append(1)
        return np.arange(6.0).reshape(2, 3)

    a = cache.get_or_compute("u1", p, compute)
    b = cache.get_or_compute("u1", p, compute)
    assert len(calls) == 1 and np.array_equal(a, b)
    with torch.no_grad():
        next(p.parameters()).mul_(2.0)
    cache.get_or_compute("u1", p, compute)
    assert len(calls) == 2
    assert len((tmp_path / "index.jsonl").read_text().splitlines()) == 2
    assert features.FeatureCache.key("u", "p", "1") != features.FeatureCache.key("u", "p", "2")


def test_default_layer_modes():
    assert features.default_layer_mode("ssl_ll") == "last_layer"
    assert features.default_layer_mode("ssl_ws") == "weighted_sum"
