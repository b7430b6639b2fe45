"""Acoustic feature providers.

Every provider declares ``n_layers``, ``dim`` and ``hop_seconds`` and maps a
waveform to an ``(L, T, D)`` layer stack.  Spectrograms are the single-layer
baseline; torch encoders (mock SSL, mock Whisper, and adapters around
Hugging Face WavLM/Whisper models) are also fine-tunable through named
parameter groups.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import dsp
from .dsp import Waveform
from .errors import CapabilityError, ValidationError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_hop_seconds: float
    provider_id: str

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValidationError("feature sequence must be a (T, D) matrix with T >= 1")
        if not np.all(np.isfinite(f)):
            raise ValidationError("feature sequence contains non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class LayerStack:
    layers: np.ndarray
    frame_hop_seconds: float = 0.02
    provider_id: str = ""

    def __post_init__(self):
        x = np.asarray(self.layers)
        if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError("layer stack must have shape (L, T, D) with L, T >= 1")
        object.__setattr__(self, "layers", x)

    @property
    def shape(self):
        return self.layers.shape


@dataclass(frozen=True)
class LayerWeights:
    logits: np.ndarray
    mode: str = "weighted_sum"

    def __post_init__(self):
        if self.mode not in ("weighted_sum", "last_layer"):
            raise ValidationError(f"layer weight mode must be weighted_sum or last_layer, got {self.mode!r}")
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=float).reshape(-1))

    @classmethod
    def uniform(cls, n_layers: int, mode: str = "weighted_sum") -> "LayerWeights":
        return cls(np.zeros(n_layers), mode)

    def normalized(self) -> np.ndarray:
        if self.mode == "last_layer":
            w = np.zeros(self.logits.size)
            w[-1] = 1.0
            return w
        return softmax(self.logits)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def fuse_layers(stack: LayerStack | np.ndarray, weights: LayerWeights) -> FeatureSequence:
    """Softmax-weighted sum over layers; last-layer mode returns the final slice as is."""
    s = stack if isinstance(stack, LayerStack) else LayerStack(stack)
    if weights.logits.size != s.shape[0]:
        raise ValidationError(f"{weights.logits.size} layer weights for a stack of {s.shape[0]} layers")
    if weights.mode == "last_layer":
        frames = s.layers[-1]
    else:
        frames = np.tensordot(weights.normalized(), s.layers, axes=(0, 0))
    return FeatureSequence(frames, s.frame_hop_seconds, s.provider_id)


def spectrogram(x: Waveform, frame_ms: float = 32.0, hop_ms: float = 16.0, n_fft: int = 512,
                eps: float = LOG_FLOOR) -> FeatureSequence:
    """Log-magnitude STFT with a Hann window; no padding, so T = floor((N - frame) / hop) + 1."""
    if not frame_ms >= hop_ms > 0:
        raise ValidationError("spectrogram needs frame_ms >= hop_ms > 0")
    frame = int(round(frame_ms * 1e-3 * x.sample_rate))
    hop = int(round(hop_ms * 1e-3 * x.sample_rate))
    if frame > n_fft:
        raise ValidationError(f"frame of {frame} samples exceeds the {n_fft}-point transform")
    if len(x) < frame:
        raise ValidationError(f"utterance of {len(x)} samples is shorter than one {frame}-sample frame")
    n = (len(x) - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    frames = x.samples[idx] * np.hanning(frame + 2)[1:-1]
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    return FeatureSequence(np.log(np.maximum(mag, eps)), hop / x.sample_rate, "spectrogram")


# --- provider contract ---------------------------------------------------------

class SpectrogramProvider:
    tunable_groups: tuple[str, ...] = ()
    sample_rate = dsp.CANONICAL_RATE
    n_layers = 1

    def __init__(self, frame_ms=32.0, hop_ms=16.0, n_fft=512):
        self.frame_ms, self.hop_ms, self.n_fft = frame_ms, hop_ms, n_fft
        self.dim = n_fft // 2 + 1
        self.hop_seconds = hop_ms * 1e-3
        self.window_seconds = frame_ms * 1e-3  # unpadded analysis: frames lost at the edges
        self.provider_id = "spectrogram"
        self.version = f"stft-{frame_ms:g}-{hop_ms:g}-{n_fft}"

    def layer_stack(self, x: Waveform) -> np.ndarray:
        return spectrogram(x, self.frame_ms, self.hop_ms, self.n_fft).frames[None]


class TorchEncoder(nn.Module):
    """Base for differentiable providers.

    Subclasses implement ``forward(wave: (N,) tensor) -> (L, T, D) tensor`` and
    ``param_groups()``; group names are ``"conv"`` (front end) and
    ``"transformer"``.
    """

    provider_id = "torch"
    sample_rate = dsp.CANONICAL_RATE
    n_layers = 1
    dim = 1
    hop_seconds = 0.02

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        raise NotImplementedError

    @property
    def tunable_groups(self) -> tuple[str, ...]:
        return tuple(self.param_groups())

    @property
    def version(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def layer_stack(self, x: Waveform) -> np.ndarray:
        if x.sample_rate != self.sample_rate:
            x = dsp.resample(x, self.sample_rate)
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            out = self(torch.as_tensor(x.samples, dtype=dtype))
        return out.cpu().numpy().astype(np.float64)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class MockSSLEncoder(TorchEncoder):
    """Small stand-in for a wav2vec-style encoder.

    Front end: a learnable filterbank convolution, initialised as Hann-windowed
    cosines at mel-spaced centre frequencies, whose band powers are averaged to
    a 20 ms hop and log-compressed.  Back end: ``n_layers`` pre-norm
    transformer layers (randomly initialised) whose outputs form the stack.
    """

    kernel, stride = 256, 16

    def __init__(self, n_layers: int = 4, dim: int = 32, seed: int = 0, channels: int = 32, heads: int = 4):
        super().__init__()
        self.n_layers, self.dim, self.seed = n_layers, dim, seed
        self.provider_id = f"mock-ssl-L{n_layers}-D{dim}-s{seed}"

        def build():
            self.filters = nn.Conv1d(1, channels, kernel_size=self.kernel, stride=self.stride, bias=False)
            self.pool = nn.Conv1d(channels, channels, kernel_size=25, stride=20, bias=False)
            self.proj = nn.Linear(channels, dim)
            self.layers = nn.ModuleList(
                nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                           batch_first=True, norm_first=True)
                for _ in range(n_layers)
            )
            with torch.no_grad():
                self.filters.weight.copy_(torch.from_numpy(_cosine_bank(channels, self.kernel, 16000)))
                self.pool.weight.zero_()
                self.pool.weight[torch.arange(channels), torch.arange(channels), :] = 1.0 / 25
        _seeded(seed, build)

    def param_groups(self):
        conv = list(self.filters.parameters()) + list(self.pool.parameters())
        transformer = list(self.proj.parameters()) + list(self.layers.parameters())
        return {"conv": conv, "transformer": transformer}

    def frontend(self, wave: torch.Tensor) -> torch.Tensor:
        pad = (self.kernel - 4 * self.stride) // 2
        y = self.filters(F.pad(wave.reshape(1, 1, -1), (pad, pad)))
        power = self.pool(y ** 2)
        return torch.log(1e-6 + power.abs()).transpose(1, 2)  # (1, T, C)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        h = self.proj(self.frontend(wave))
        outs = []
        for layer in self.layers:
            h = layer(h)
            outs.append(h[0])
        return torch.stack(outs)


def _cosine_bank(channels: int, kernel: int, fs: int, fmin: float = 100.0, fmax: float = 7000.0) -> np.ndarray:
    """Unit-norm Hann-windowed cosines at mel-spaced centres, shape (C, 1, K)."""
    mel = 2595.0 * np.log10(1.0 + np.array([fmin, fmax]) / 700.0)
    centres = 700.0 * (10 ** (np.linspace(mel[0], mel[1], channels) / 2595.0) - 1.0)
    t = (np.arange(kernel) - kernel / 2) / fs
    w = np.hanning(kernel)[None, :] * np.cos(2 * np.pi * centres[:, None] * t[None, :])
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return w[:, None, :].astype(np.float32)


def mel_filterbank(n_mels: int, n_fft: int, fs: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = fmax or fs / 2

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1 / fs)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, c, hi = edges[m:m + 3]
        fb[m] = np.clip(np.minimum((bins - lo) / (c - lo), (hi - bins) / (hi - c)), 0, None)
    return fb


class MockWhisperEncoder(TorchEncoder):
    """Whisper-shaped encoder: log-mel, two 1-D convolutions (second one
    strided by 2), then transformer layers.  Only the final representation is
    exposed, so ``n_layers`` is 1."""

    def __init__(self, dim: int = 24, n_mels: int = 40, n_transformer: int = 2, seed: int = 0):
        super().__init__()
        self.dim, self.seed = dim, seed
        self.n_layers = 1
        self.provider_id = f"mock-whisper-D{dim}-s{seed}"
        self.n_fft, self.mel_hop = 400, 160
        self.register_buffer("mel", torch.tensor(mel_filterbank(n_mels, self.n_fft, self.sample_rate), dtype=torch.float32))
        self.register_buffer("window", torch.hann_window(self.n_fft))

        def build():
            self.conv1 = nn.Conv1d(n_mels, dim, kernel_size=3, padding=1)
            self.conv2 = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1)
            self.blocks = nn.ModuleList(
                nn.TransformerEncoderLayer(dim, 4, dim_feedforward=2 * dim, dropout=0.0, batch_first=True)
                for _ in range(n_transformer)
            )
        _seeded(seed, build)

    def param_groups(self):
        return {"conv": list(self.conv1.parameters()) + list(self.conv2.parameters()),
                "transformer": list(self.blocks.parameters())}

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        spec = torch.stft(wave, self.n_fft, self.mel_hop, window=self.window.to(wave.dtype), return_complex=True)
        logmel = torch.log10(torch.clamp(self.mel.to(wave.dtype) @ spec.abs() ** 2, min=1e-10))
        h = nn.functional.gelu(self.conv1(logmel[None]))
        h = nn.functional.gelu(self.conv2(h)).transpose(1, 2)
        t = torch.arange(h.shape[1], dtype=h.dtype)[:, None]
        freqs = torch.exp(-np.log(10000.0) * torch.arange(0, self.dim, 2, dtype=h.dtype) / self.dim)
        pos = torch.zeros(h.shape[1], self.dim, dtype=h.dtype)
        pos[:, 0::2] = torch.sin(t * freqs)
        pos[:, 1::2] = torch.cos(t * freqs[: self.dim // 2])
        h = h + pos
        for block in self.blocks:
            h = block(h)
        return h[0][None]


class HFSSLEncoder(TorchEncoder):
    """Adapter for a Hugging Face SSL speech model (WavLM, HuBERT, wav2vec 2.0).

    The layer stack holds the outputs of every transformer encoder layer;
    the count comes from the model configuration.
    """

    def __init__(self, model, provider_id: str = "hf-ssl"):
        super().__init__()
        self.model = model
        cfg = model.config
        self.n_layers = int(cfg.num_hidden_layers)
        self.dim = int(cfg.hidden_size)
        self.hop_seconds = float(np.prod(cfg.conv_stride)) / self.sample_rate
        self.provider_id = provider_id

    @classmethod
    def from_pretrained(cls, name: str = "microsoft/wavlm-large"):
        try:
            from transformers import AutoModel
            model = AutoModel.from_pretrained(name)
        except Exception as exc:  # network, missing weights, missing package
            raise CapabilityError(f"SSL model {name!r} is unavailable: {exc}") from exc
        return cls(model, provider_id=f"hf:{name}")

    def param_groups(self):
        conv = list(self.model.feature_extractor.parameters())
        conv_ids = {id(p) for p in conv}
        rest = [p for p in self.model.parameters() if id(p) not in conv_ids]
        return {"conv": conv, "transformer": rest}

    def forward(self, wave):
        out = self.model(wave[None], output_hidden_states=True)
        return torch.stack(out.hidden_states[1:])[:, 0]


class HFWhisperEncoder(TorchEncoder):
    """Adapter returning the representation after Whisper's transformer layers."""

    def __init__(self, model, provider_id: str = "hf-whisper"):
        super().__init__()
        self.encoder = model.get_encoder() if hasattr(model, "get_encoder") else model
        cfg = self.encoder.config
        self.n_layers = 1
        self.dim = int(cfg.d_model)
        self.hop_seconds = 0.02
        self.provider_id = provider_id
        self.n_mels = int(cfg.num_mel_bins)
        self.n_input_frames = 2 * int(cfg.max_source_positions)
        from transformers import WhisperFeatureExtractor
        self.extractor = WhisperFeatureExtractor(feature_size=self.n_mels)

    @classmethod
    def from_pretrained(cls, name: str = "openai/whisper-large-v2"):
        try:
            from transformers import WhisperModel
            model = WhisperModel.from_pretrained(name)
        except Exception as exc:
            raise CapabilityError(f"Whisper model {name!r} is unavailable: {exc}") from exc
        return cls(model, provider_id=f"hf:{name}")

    def param_groups(self):
        conv = list(self.encoder.conv1.parameters()) + list(self.encoder.conv2.parameters())
        conv_ids = {id(p) for p in conv}
        return {"conv": conv, "transformer": [p for p in self.encoder.parameters() if id(p) not in conv_ids]}

    def forward(self, wave):
        feats = self.extractor(wave.detach().cpu().numpy().astype(np.float32), sampling_rate=self.sample_rate,
                               return_tensors="pt").input_features[..., : self.n_input_frames]
        n_valid = min(self.n_input_frames, 1 + wave.shape[0] // self.extractor.hop_length)
        h = self.encoder(feats.to(wave.dtype)).last_hidden_state
        return h[:, : (n_valid + 1) // 2]


# --- contract-level operations ---------------------------------------------------

def _check_available(provider):
    if provider is None or not hasattr(provider, "layer_stack"):
        raise CapabilityError("no feature provider registered")


def embed(provider, x: Waveform) -> LayerStack:
    """Run an embedding provider and verify its declared shape."""
    _check_available(provider)
    layers = provider.layer_stack(x)
    if layers.shape[0] != provider.n_layers or layers.shape[2] != provider.dim:
        raise CapabilityError(f"provider {provider.provider_id} declared (L={provider.n_layers}, D={provider.dim}) "
                              f"but produced {layers.shape}")
    expected = x.duration / provider.hop_seconds
    slack = 1.5 + getattr(provider, "window_seconds", 0.0) / provider.hop_seconds
    if abs(layers.shape[1] - expected) > slack:
        raise CapabilityError(f"provider {provider.provider_id}: {layers.shape[1]} frames for {expected:.1f} expected")
    return LayerStack(layers, provider.hop_seconds, provider.provider_id)


def whisper_features(provider, x: Waveform) -> FeatureSequence:
    """Final-layer Whisper representation as a feature sequence (no layer fusion)."""
    _check_available(provider)
    if provider.n_layers != 1:
        raise CapabilityError(f"provider {provider.provider_id} is not a single-output Whisper-style encoder")
    stack = provider.layer_stack(x)
    return FeatureSequence(stack[0], provider.hop_seconds, provider.provider_id)


PROVIDERS = ("spectrogram", "mock", "mock_whisper", "ssl_ll", "ssl_ws", "whisper")


def make_provider(name: str, **options):
    """Instantiate a provider by configuration name."""
    if name == "spectrogram":
        return SpectrogramProvider(**options)
    if name == "mock":
        return MockSSLEncoder(**options)
    if name == "mock_whisper":
        return MockWhisperEncoder(**options)
    if name in ("ssl_ll", "ssl_ws"):
        return HFSSLEncoder.from_pretrained(options.get("model", "microsoft/wavlm-large"))
    if name == "whisper":
        return HFWhisperEncoder.from_pretrained(options.get("model", "openai/whisper-large-v2"))
    raise ValidationError(f"unknown provider {name!r}; expected one of {PROVIDERS}")


def default_layer_mode(name: str) -> str:
    return "last_layer" if name == "ssl_ll" else "weighted_sum"


# --- cache -------------------------------------------------------------------

class FeatureCache:
    """Per-item ``.npy`` files named by a hash of (item, provider id, provider version)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.jsonl"

    @staticmethod
    def key(item_id: str, provider_id: str, provider_version: str) -> str:
        return hashlib.sha256(f"{item_id}\x1f{provider_id}\x1f{provider_version}".encode()).hexdigest()

    def path(self, item_id, provider_id, provider_version) -> Path:
        return self.root / f"{self.key(item_id, provider_id, provider_version)}.npy"

    def get(self, item_id, provider_id, provider_version):
        p = self.path(item_id, provider_id, provider_version)
        return np.load(p) if p.exists() else None

    def put(self, item_id, provider_id, provider_version, array) -> Path:
        p = self.path(item_id, provider_id, provider_version)
        np.save(p, np.asarray(array))
        with open(self.index_path, "a") as fh:
            fh.write(json.dumps({"item_id": item_id, "provider_id": provider_id,
                                 "provider_version": provider_version, "file": p.name}) + "\n")
        return p

    def get_or_compute(self, item_id, provider, compute):
        version = provider.version
        hit = self.get(item_id, provider.provider_id, version)
        if hit is not None:
            return hit
        value = compute()
        self.put(item_id, provider.provider_id, version, value)
        return value
