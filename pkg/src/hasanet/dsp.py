"""Waveform operations used to build the five-condition corpus and to present
stimuli to a listener (presentation level and NAL-R linear amplification)."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .audiograms import FREQUENCIES, HearingLossPattern
from .errors import HasaNetError, ValidationError

log = logging.getLogger(__name__)

CANONICAL_RATE = 16000
REF_DB_SPL = 100.0  # digital rms 1.0 is presented at 100 dB SPL
PRESENTATION_DB_SPL = 65.0
TRAIN_SNRS = (15.0, 10.0, 5.0, 0.0)
TEST_SNRS = (17.5, 12.5, 7.5, 2.5)
NALR_OFFSETS = (-17.0, -8.0, 1.0, -1.0, -2.0, -2.0)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise ValidationError("waveform must be a non-empty 1-D signal")
        if not np.all(np.isfinite(x)):
            raise ValidationError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValidationError("sample rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class RoomImpulseResponse:
    samples: np.ndarray
    sample_rate: int
    scale_factor: float = 1.0
    rir_id: str = ""

    def __post_init__(self):
        h = np.asarray(self.samples, dtype=np.float64)
        if h.ndim != 1 or h.size == 0 or not np.all(np.isfinite(h)):
            raise ValidationError(f"RIR {self.rir_id}: samples must be a finite 1-D array")
        if not self.scale_factor > 0:
            raise ValidationError(f"RIR {self.rir_id}: scale factor must be positive")
        object.__setattr__(self, "samples", h)

    @property
    def energy(self) -> float:
        return float(np.sum(self.samples ** 2))


def rms(x) -> float:
    x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x ** 2)))


def snr_db(clean, noise) -> float:
    """Power ratio of two signal components in dB."""
    c = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, float)
    n = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, float)
    return float(10 * np.log10(np.sum(c ** 2) / np.sum(n ** 2)))


def _require_same_rate(a: int, b: int, what: str):
    if a != b:
        raise ValidationError(f"{what}: sample rates differ ({a} vs {b})")


def fit_length(noise: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop a random contiguous segment (or tile, then crop) to length ``n``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if noise.size < n:
        noise = np.tile(noise, int(np.ceil(n / noise.size)) + 1)
    start = int(rng.integers(0, noise.size - n + 1))
    return noise[start:start + n]


def mix_at_snr(clean: Waveform, noise: Waveform, snr: float, rng=None) -> Waveform:
    """Return ``clean + alpha * noise`` with the noise scaled to the requested SNR."""
    _require_same_rate(clean.sample_rate, noise.sample_rate, "mix_at_snr")
    segment = fit_length(noise.samples, len(clean), _as_rng(rng))
    rc, rn = rms(clean.samples), rms(segment)
    if rc == 0 or rn == 0:
        raise ValidationError("mix_at_snr: clean and noise must both have non-zero rms")
    alpha = rc / (rn * 10 ** (snr / 20))
    return clean.with_samples(clean.samples + alpha * segment)


def _as_rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def convolve_truncated(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    # direct summation for small kernels keeps results reproducible to the last bit
    if x.size * h.size <= 1 << 16:
        y = np.convolve(x, h)
    else:
        y = signal.fftconvolve(x, h)
    return y[: x.size]


def apply_reverb(clean: Waveform, rir: RoomImpulseResponse) -> Waveform:
    """Convolve with the scaled RIR, keep ``len(clean)`` samples, bound the peak to 1."""
    _require_same_rate(clean.sample_rate, rir.sample_rate, "apply_reverb")
    if rir.energy == 0:
        raise ValidationError(f"RIR {rir.rir_id or '?'} has zero energy")
    y = convolve_truncated(clean.samples, rir.scale_factor * rir.samples)
    peak = np.max(np.abs(y))
    if peak > 1:
        y = y / peak
    return clean.with_samples(y)


# --- vocoder ---------------------------------------------------------------

VOCODER_LOW_HZ = 80.0
VOCODER_HIGH_HZ = 7600.0
ENVELOPE_CUTOFF_HZ = 160.0
MIN_BAND_HZ = 10.0


def vocoder_band_edges(n_channels: int, low: float = VOCODER_LOW_HZ, high: float = VOCODER_HIGH_HZ) -> np.ndarray:
    return np.geomspace(low, high, n_channels + 1)


def _band_sos(lo, hi, fs):
    # order-2 prototype -> 4th-order band-pass
    return signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")


def vocode(clean: Waveform, kind: str = "tone", n_channels: int = 8, seed: int = 0) -> Waveform:
    """Channel vocoder with sine ("tone") or band-limited noise ("noise") carriers.

    The input mean is removed first; the output is rms-matched to the
    zero-mean input.
    """
    if kind not in ("tone", "noise"):
        raise ValidationError(f"vocoder kind must be 'tone' or 'noise', got {kind!r}")
    fs = clean.sample_rate
    if fs < 16000:
        raise ValidationError("vocoder needs a sample rate of at least 16 kHz")
    if n_channels < 2:
        raise ValidationError("vocoder needs at least 2 channels")
    edges = vocoder_band_edges(n_channels)
    if edges[-1] >= fs / 2 or np.min(np.diff(edges)) < MIN_BAND_HZ:
        raise ValidationError(f"{n_channels} channels cannot be realised between {VOCODER_LOW_HZ:g} and {VOCODER_HIGH_HZ:g} Hz")

    x = clean.samples - clean.samples.mean()
    target = rms(x)
    n = x.size
    t = np.arange(n) / fs
    env_sos = signal.butter(4, ENVELOPE_CUTOFF_HZ, btype="lowpass", fs=fs, output="sos")
    rng = np.random.default_rng([seed, 0x70C0])
    out = np.zeros(n)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sos = _band_sos(lo, hi, fs)
        band = signal.sosfiltfilt(sos, x)
        env = np.maximum(signal.sosfiltfilt(env_sos, np.abs(signal.hilbert(band))), 0.0)
        if kind == "tone":
            carrier = np.sin(2 * np.pi * np.sqrt(lo * hi) * t)
            out += env * carrier
        else:
            carrier = signal.sosfiltfilt(sos, rng.standard_normal(n))
            carrier /= rms(carrier) + 1e-12
            out += signal.sosfiltfilt(sos, env * carrier)
    r = rms(out)
    if r > 0 and target > 0:
        out *= target / r
    return clean.with_samples(out)


# --- enhancement -------------------------------------------------------------

class EnhancementProvider(Protocol):
    name: str

    def __call__(self, x: Waveform) -> Waveform: ...


class IdentityEnhancer:
    name = "identity"

    def __call__(self, x: Waveform) -> Waveform:
        return x


class SpectralSubtraction:
    """Power spectral subtraction with a spectral floor.

    The noise power is a low per-bin temporal percentile, median-smoothed
    across frequency so narrowband speech/tonal energy is not taken as noise.
    """

    name = "spectral-subtraction"

    def __init__(self, floor=0.002, n_fft=512, hop=128, percentile=10.0, smooth_bins=31, over_subtraction=1.0):
        self.floor = floor
        self.n_fft = n_fft
        self.hop = hop
        self.percentile = percentile
        self.smooth_bins = smooth_bins
        self.over_subtraction = over_subtraction

    def __call__(self, x: Waveform) -> Waveform:
        kw = dict(fs=x.sample_rate, nperseg=self.n_fft, noverlap=self.n_fft - self.hop, window="hann")
        _, _, spec = signal.stft(x.samples, **kw)
        power = np.abs(spec) ** 2
        # bin power of stationary noise is ~exponential: rescale the percentile to the mean
        noise = np.percentile(power, self.percentile, axis=1) / -np.log1p(-self.percentile / 100)
        noise = signal.medfilt(noise, self.smooth_bins)
        gain = np.maximum(1.0 - self.over_subtraction * noise[:, None] / np.maximum(power, 1e-20), self.floor)
        _, y = signal.istft(spec * np.sqrt(gain), **kw)
        y = y[: len(x)]
        if y.size < len(x):
            y = np.pad(y, (0, len(x) - y.size))
        return x.with_samples(y)


class EnhancementFailed(HasaNetError):
    module = "signal_pipeline"


def enhance(noisy: Waveform, provider: EnhancementProvider, utterance_id: str = "") -> Waveform:
    try:
        out = provider(noisy)
    except Exception as exc:
        raise EnhancementFailed(f"enhancement provider {getattr(provider, 'name', provider)!r} failed on {utterance_id!r}: {exc}") from exc
    if len(out) != len(noisy) or out.sample_rate != noisy.sample_rate:
        raise EnhancementFailed(f"provider changed length or rate for {utterance_id!r}")
    return out


# --- presentation ------------------------------------------------------------

def set_level(x: Waveform, target_db_spl: float = PRESENTATION_DB_SPL, ref_db_spl: float = REF_DB_SPL) -> Waveform:
    r = rms(x)
    if r == 0:
        raise ValidationError("set_level: silent input")
    return x.with_samples(x.samples * (10 ** ((target_db_spl - ref_db_spl) / 20) / r))


def nalr_gains(pattern: HearingLossPattern) -> np.ndarray:
    """Insertion gain (dB) at 250..6000 Hz, clamped at 0 dB.

    A normal-hearing (all-zero) pattern gets no prescription at all; the
    formula alone would still give +1 dB at 1 kHz.
    """
    h = pattern.as_array()
    if not np.any(h):
        return np.zeros(h.size)
    x = 0.05 * (h[1] + h[2] + h[3])
    return np.maximum(0.0, x + 0.31 * h + np.asarray(NALR_OFFSETS))


def nalr_response_db(pattern: HearingLossPattern, freqs) -> np.ndarray:
    """Target gain curve: log-frequency interpolation between anchors, flat beyond them."""
    f = np.clip(np.asarray(freqs, dtype=float), FREQUENCIES[0], FREQUENCIES[-1])
    return np.interp(np.log2(f), np.log2(FREQUENCIES), nalr_gains(pattern))


def nalr_filter(pattern: HearingLossPattern, sample_rate: int = CANONICAL_RATE, numtaps: int = 1025) -> np.ndarray:
    grid = np.linspace(0, sample_rate / 2, 1024)
    gain = 10 ** (nalr_response_db(pattern, np.maximum(grid, 1.0)) / 20)
    return signal.firwin2(numtaps, grid, gain, fs=sample_rate)


def apply_nalr(x: Waveform, pattern: HearingLossPattern, numtaps: int = 1025) -> Waveform:
    """Linear-phase NAL-R amplification (zero group delay after centring)."""
    if not np.any(nalr_gains(pattern) > 0):
        return x.with_samples(x.samples.copy())
    h = nalr_filter(pattern, x.sample_rate, numtaps)
    return x.with_samples(signal.fftconvolve(x.samples, h, mode="same"))


# --- audio I/O ---------------------------------------------------------------

def resample(x: Waveform, rate: int) -> Waveform:
    if x.sample_rate == rate:
        return x
    g = gcd(x.sample_rate, rate)
    return Waveform(signal.resample_poly(x.samples, rate // g, x.sample_rate // g), rate)


def read_wav(path, rate: int = CANONICAL_RATE) -> Waveform:
    fs, data = wavfile.read(str(path))
    data = np.asarray(data)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    return resample(Waveform(data.astype(np.float64), fs), rate)


def write_wav(path, x: Waveform) -> None:
    """16-bit PCM mono. Signals peaking above full scale are rejected."""
    peak = np.max(np.abs(x.samples))
    if peak > 1.0:
        raise ValidationError(f"{path}: peak {peak:.3f} exceeds full scale; normalise before writing")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(x.samples * 32767), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), x.sample_rate, pcm)


def peak_normalise(x: Waveform, peak: float = 0.99) -> Waveform:
    p = np.max(np.abs(x.samples))
    return x if p <= peak else x.with_samples(x.samples * (peak / p))


def direct_to_reverberant_db(rir: RoomImpulseResponse, direct_ms: float = 2.5) -> float:
    """Energy within ``direct_ms`` of the main peak against the remainder."""
    h = rir.samples
    k = int(np.argmax(np.abs(h)))
    w = max(1, int(round(direct_ms * 1e-3 * rir.sample_rate)))
    direct = np.sum(h[max(0, k - w):k + w + 1] ** 2)
    tail = np.sum(h ** 2) - direct
    return float(10 * np.log10(direct / max(tail, 1e-12)))


def snr_pool(values: Sequence[float]) -> tuple[float, ...]:
    vals = tuple(float(v) for v in values)
    if not vals or any(not np.isfinite(v) for v in vals):
        raise ValidationError("SNR pool must be a non-empty list of finite values")
    return vals
