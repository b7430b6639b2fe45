"""Five-condition corpus: records, manifests, recipes and audio rendering.

A manifest is planned first (which SNR, RIR and vocoder each clean utterance
gets) and rendered to audio separately, so record bookkeeping can be checked
at full scale without synthesising any audio.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import signal

from . import dsp
from .dsp import RoomImpulseResponse, Waveform
from .errors import ValidationError

log = logging.getLogger(__name__)

PIPELINE_VERSION = "1"
CONDITIONS = ("noisy", "enhanced", "reverberation", "dereverberation", "vocoded")
ROLES = ("train", "validation", "test")
VOCODER_KINDS = ("tone", "noise")


def stable_hash(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def utterance_rng(seed: int, *key) -> np.random.Generator:
    """Independent stream per (seed, key) -- stable under reordering."""
    return np.random.default_rng([seed, stable_hash(*key)])


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    condition: str
    audio_path: str
    source_clean_path: str
    snr_db: float | None = None
    rir_id: str | None = None
    vocoder_kind: str | None = None
    audiogram_id: str | None = None
    quality_target: float | None = None
    intelligibility_target: float | None = None

    def __post_init__(self):
        c = self.condition
        if c not in CONDITIONS:
            raise ValidationError(f"{self.utterance_id}: unknown condition {c!r}")
        if (self.snr_db is not None) != (c in ("noisy", "enhanced")):
            raise ValidationError(f"{self.utterance_id}/{c}: snr_db must be set exactly for noisy/enhanced records")
        if (self.rir_id is not None) != (c in ("reverberation", "dereverberation")):
            raise ValidationError(f"{self.utterance_id}/{c}: rir_id must be set exactly for reverberation/dereverberation records")
        if (self.vocoder_kind is not None) != (c == "vocoded"):
            raise ValidationError(f"{self.utterance_id}/{c}: vocoder_kind must be set exactly for vocoded records")
        if self.vocoder_kind is not None and self.vocoder_kind not in VOCODER_KINDS:
            raise ValidationError(f"{self.utterance_id}: vocoder_kind must be tone or noise")
        for name in ("quality_target", "intelligibility_target"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"{self.utterance_id}/{c}: {name}={v} outside [0, 1]")

    @property
    def record_key(self) -> tuple[str, str]:
        return (self.utterance_id, self.condition)

    @property
    def key(self) -> tuple[str, str, str | None]:
        return (self.utterance_id, self.condition, self.audiogram_id)


@dataclass
class DatasetManifest:
    records: list[UtteranceRecord]
    role: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"manifest role must be one of {ROLES}")
        keys = [r.key for r in self.records]
        if len(set(keys)) != len(keys):
            seen, dups = set(), []
            for k in keys:
                if k in seen:
                    dups.append(k)
                seen.add(k)
            raise ValidationError(f"duplicate (utterance_id, condition, audiogram_id) triples: {dups[:5]}")

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self.records)

    @property
    def utterance_ids(self) -> list[str]:
        return sorted({r.utterance_id for r in self.records})

    def condition_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CONDITIONS}
        for r in self.records:
            counts[r.condition] += 1
        return counts

    def subset(self, utterance_ids: Iterable[str], role: str | None = None) -> "DatasetManifest":
        keep = set(utterance_ids)
        return DatasetManifest([r for r in self.records if r.utterance_id in keep], role or self.role, dict(self.provenance))

    def by_record(self) -> dict[tuple[str, str], UtteranceRecord]:
        return {r.record_key: r for r in self.records}

    # JSON-lines with a provenance sidecar
    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=False) + "\n" for r in self.records)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        meta = {"role": self.role, **self.provenance}
        _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, role: str | None = None) -> "DatasetManifest":
        path = Path(path)
        records = [UtteranceRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        meta = json.loads(_meta_path(path).read_text()) if _meta_path(path).exists() else {}
        meta_role = meta.pop("role", "train")
        return cls(records, role or meta_role, meta)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


# --- recipes ---------------------------------------------------------------

@dataclass(frozen=True)
class Recipe:
    """Parameter pools per clean-speech subset plus the published dataset sizes."""

    name: str
    snr_pools: Mapping[str, tuple[float, ...]]
    rir_pool_sizes: Mapping[str, int]
    vocoder_channels: int = 8
    reference_counts: Mapping[str, int] = field(default_factory=dict)
    conditions: tuple[str, ...] = CONDITIONS

    def __post_init__(self):
        if tuple(self.conditions) != CONDITIONS:
            raise ValidationError(f"recipe {self.name} must cover the five conditions {CONDITIONS}")
        if set(self.snr_pools) != set(self.rir_pool_sizes):
            raise ValidationError(f"recipe {self.name}: SNR and RIR pools must name the same subsets")


IN_DOMAIN = Recipe(
    "in_domain",
    snr_pools={"validation": dsp.TRAIN_SNRS, "test": dsp.TEST_SNRS},
    rir_pool_sizes={"validation": 315, "test": 10},
    reference_counts={"clean_validation": 770, "clean_test": 824, "clean": 1594, "records": 7970, "rirs_train": 315, "rirs_test": 10},
)

OOD = Recipe(
    "ood",
    snr_pools={"train": dsp.TRAIN_SNRS, "test": dsp.TEST_SNRS},
    rir_pool_sizes={"train": 315, "test": 10},
    reference_counts={"clean_train": 4620, "clean_test": 1260, "records_train": 23100, "records_test": 6300,
                  "validation_utterances": 460, "rirs_train": 315, "rirs_test": 10},
)

RECIPES = {r.name: r for r in (IN_DOMAIN, OOD)}


@dataclass(frozen=True)
class CleanItem:
    utterance_id: str
    path: str
    subset: str


@dataclass(frozen=True)
class RirItem:
    rir_id: str
    path: str
    scale_factor: float = 1.0


@dataclass
class AssetSet:
    """Source assets; paths are relative to ``root``."""

    root: Path
    clean: list[CleanItem]
    noise: list[str]
    rirs: list[RirItem]

    def missing(self) -> list[str]:
        paths = [c.path for c in self.clean] + list(self.noise) + [r.path for r in self.rirs]
        return [p for p in paths if not (self.root / p).exists()]

    @classmethod
    def scan(cls, root, clean_dir="clean", noise_dir="noise", rir_dir="rir") -> "AssetSet":
        """Clean files may sit in per-subset folders (``clean/<subset>/*.wav``)."""
        root = Path(root)
        clean = []
        for p in sorted((root / clean_dir).rglob("*.wav")):
            rel = p.relative_to(root / clean_dir)
            subset = rel.parts[0] if len(rel.parts) > 1 else "train"
            clean.append(CleanItem(p.stem, str(p.relative_to(root)), subset))
        noise = [str(p.relative_to(root)) for p in sorted((root / noise_dir).glob("*.wav"))]
        rirs = load_rir_table(root, rir_dir)
        return cls(root, clean, noise, rirs)


def load_rir_table(root, rir_dir="rir") -> list[RirItem]:
    """RIR pool: WAV files plus a ``rirs.csv`` sidecar with ``rir_id,scale_factor``."""
    root = Path(root)
    table = root / rir_dir / "rirs.csv"
    if not table.exists():
        return [RirItem(p.stem, str(p.relative_to(root))) for p in sorted((root / rir_dir).glob("*.wav"))]
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RirItem(r["rir_id"], f"{rir_dir}/{r['rir_id']}.wav", float(r["scale_factor"])) for r in rows]


def _rir_pool(rirs: Sequence[RirItem], size: int, subset: str) -> list[RirItem]:
    ordered = sorted(rirs, key=lambda r: r.rir_id)
    if len(ordered) < size:
        log.info("subset %s: recipe asks for %d RIRs, %d available; using all", subset, size, len(ordered))
    # test RIRs come from the end of the ordered pool so they differ from training RIRs when possible
    return ordered[-size:] if subset == "test" else ordered[:size]


def build_manifest(assets: AssetSet, recipe: Recipe, seed: int = 0, role: str = "train",
                   subsets: Sequence[str] | None = None) -> DatasetManifest:
    """Plan all five conditions for every clean utterance.

    SNRs are balanced over each subset's pool, the RIR is one seeded draw
    from the subset's pool, and vocoder kinds split the utterances in half.
    """
    missing = assets.missing()
    if missing:
        raise ValidationError(f"{len(missing)} missing asset(s): " + ", ".join(missing))
    clean = [c for c in assets.clean if subsets is None or c.subset in subsets]
    unknown = sorted({c.subset for c in clean} - set(recipe.snr_pools))
    if unknown:
        raise ValidationError(f"recipe {recipe.name} has no parameter pools for subset(s) {unknown}")
    if clean and not assets.noise:
        raise ValidationError("at least one noise recording is required")
    ids = [c.utterance_id for c in clean]
    if len(set(ids)) != len(ids):
        raise ValidationError("clean utterance ids must be unique")

    vocoder_of = _vocoder_assignment(ids, seed)
    records = []
    for subset in sorted({c.subset for c in clean}):
        members = sorted((c for c in clean if c.subset == subset), key=lambda c: c.utterance_id)
        pool = recipe.snr_pools[subset]
        order = np.random.default_rng([seed, stable_hash("snr", subset)]).permutation(len(members))
        rirs = _rir_pool(assets.rirs, recipe.rir_pool_sizes[subset], subset)
        if members and not rirs:
            raise ValidationError("at least one RIR is required")
        for rank, idx in enumerate(order):
            item = members[idx]
            snr = float(pool[rank % len(pool)])
            rir = rirs[int(utterance_rng(seed, "rir", item.utterance_id).integers(len(rirs)))]
            records += _records_for(item, snr, rir.rir_id, vocoder_of[item.utterance_id])
    records.sort(key=lambda r: (r.utterance_id, CONDITIONS.index(r.condition)))
    provenance = {"seed": seed, "pipeline_version": PIPELINE_VERSION, "recipe": recipe.name,
                  "vocoder_channels": recipe.vocoder_channels, "reference_counts": dict(recipe.reference_counts)}
    return DatasetManifest(records, role, provenance)


def _vocoder_assignment(ids: Sequence[str], seed: int) -> dict[str, str]:
    ordered = sorted(ids)
    perm = np.random.default_rng([seed, stable_hash("vocoder")]).permutation(len(ordered))
    half = (len(ordered) + 1) // 2
    return {ordered[i]: ("tone" if rank < half else "noise") for rank, i in enumerate(perm)}


def _records_for(item: CleanItem, snr: float, rir_id: str, kind: str) -> list[UtteranceRecord]:
    uid = item.utterance_id
    src = f"clean/{uid}.wav"
    return [
        UtteranceRecord(uid, "noisy", f"noisy/{uid}.wav", src, snr_db=snr),
        UtteranceRecord(uid, "enhanced", f"enhanced/{uid}.wav", src, snr_db=snr),
        UtteranceRecord(uid, "reverberation", f"reverberation/{uid}.wav", src, rir_id=rir_id),
        UtteranceRecord(uid, "dereverberation", f"dereverberation/{uid}.wav", src, rir_id=rir_id),
        UtteranceRecord(uid, "vocoded", f"vocoded/{uid}.wav", src, vocoder_kind=kind),
    ]


def render_manifest(manifest: DatasetManifest, assets: AssetSet, out_dir, seed: int | None = None,
                    enhancer: dsp.EnhancementProvider | None = None,
                    dereverberator: dsp.EnhancementProvider | None = None) -> None:
    """Synthesise every record's audio under ``out_dir`` (paths as in the manifest)."""
    out_dir = Path(out_dir)
    seed = manifest.provenance.get("seed", 0) if seed is None else seed
    channels = manifest.provenance.get("vocoder_channels", 8)
    enhancer = enhancer or dsp.SpectralSubtraction()
    dereverberator = dereverberator or dsp.SpectralSubtraction()
    clean_items = {c.utterance_id: c for c in assets.clean}
    rir_items = {r.rir_id: r for r in assets.rirs}
    noises = [dsp.read_wav(assets.root / p) for p in assets.noise]
    rir_cache: dict[str, RoomImpulseResponse] = {}

    by_utt: dict[str, list[UtteranceRecord]] = {}
    for r in manifest:
        by_utt.setdefault(r.utterance_id, []).append(r)
    for uid, recs in sorted(by_utt.items()):
        clean = dsp.read_wav(assets.root / clean_items[uid].path)
        dsp.write_wav(out_dir / recs[0].source_clean_path, dsp.peak_normalise(clean))
        rng = utterance_rng(seed, "noise", uid)
        noise = noises[int(rng.integers(len(noises)))]
        noisy = None
        reverb = None
        for r in sorted(recs, key=lambda r: CONDITIONS.index(r.condition)):
            if r.condition in ("noisy", "enhanced"):
                if noisy is None:
                    noisy = dsp.mix_at_snr(clean, noise, r.snr_db, rng)
                y = noisy if r.condition == "noisy" else dsp.enhance(noisy, enhancer, uid)
            elif r.condition in ("reverberation", "dereverberation"):
                if reverb is None:
                    if r.rir_id not in rir_cache:
                        item = rir_items[r.rir_id]
                        h = dsp.read_wav(assets.root / item.path)
                        rir_cache[r.rir_id] = RoomImpulseResponse(h.samples, h.sample_rate, item.scale_factor, item.rir_id)
                    reverb = dsp.apply_reverb(clean, rir_cache[r.rir_id])
                y = reverb if r.condition == "reverberation" else dsp.enhance(reverb, dereverberator, uid)
            else:
                y = dsp.vocode(clean, r.vocoder_kind, channels, seed=stable_hash(seed, uid) % (2 ** 32))
            dsp.write_wav(out_dir / r.audio_path, dsp.peak_normalise(y))


# --- synthetic desk-scale assets ---------------------------------------------

@dataclass(frozen=True)
class VoiceStyle:
    f0_range: tuple[float, float]
    formants: tuple[tuple[float, float, float], ...]
    syllable_ms: tuple[float, float]
    gap_ms: tuple[float, float]


IN_DOMAIN_VOICE = VoiceStyle((95, 160), ((500, 1500, 2500), (300, 2200, 3000), (700, 1100, 2400), (400, 900, 2600)),
                             (90, 240), (40, 160))
OOD_VOICE = VoiceStyle((170, 260), ((600, 1700, 2800), (350, 2500, 3300), (800, 1300, 2700), (450, 1000, 2900)),
                       (70, 180), (30, 120))


def synth_speech(rng: np.random.Generator, duration: float, fs: int = dsp.CANONICAL_RATE,
                 style: VoiceStyle = IN_DOMAIN_VOICE) -> np.ndarray:
    """Syllable train of formant-shaped harmonic complexes and fricative bursts, with pauses."""
    n = int(duration * fs)
    x = np.zeros(n)
    pos = int(rng.uniform(0.04, 0.12) * fs)
    f0_base = rng.uniform(*style.f0_range)
    while pos < n - int(0.05 * fs):
        length = min(int(rng.uniform(*style.syllable_ms) * 1e-3 * fs), n - pos)
        t = np.arange(length) / fs
        env = np.sin(np.pi * np.arange(length) / length) ** 2
        if rng.random() < 0.8:
            f0 = f0_base * (1 + 0.1 * rng.standard_normal()) * (1 + 0.15 * (t / t[-1] - 0.5) * rng.uniform(-1, 1))
            phase = 2 * np.pi * np.cumsum(f0) / fs
            formants = style.formants[int(rng.integers(len(style.formants)))]
            seg = np.zeros(length)
            for h in range(1, int(7000 / f0.max())):
                fh = h * f0.mean()
                amp = sum(np.exp(-0.5 * ((fh - fc) / (0.12 * fc)) ** 2) / (i + 1) for i, fc in enumerate(formants)) + 0.02
                seg += amp * np.sin(h * phase)
        else:
            lo = rng.uniform(2500, 4000)
            sos = signal.butter(2, [lo, min(lo * 1.8, 7800)], btype="bandpass", fs=fs, output="sos")
            seg = 3 * signal.sosfilt(sos, rng.standard_normal(length))
        x[pos:pos + length] += env * seg
        pos += length + int(rng.uniform(*style.gap_ms) * 1e-3 * fs)
    return 0.05 * x / (dsp.rms(x) + 1e-12)


def synth_noise(kind: str, rng: np.random.Generator, duration: float, fs: int = dsp.CANONICAL_RATE) -> np.ndarray:
    n = int(duration * fs)
    white = rng.standard_normal(n)
    if kind == "white":
        y = white
    elif kind in ("pink", "speech-shaped"):
        spec = np.fft.rfft(white)
        f = np.maximum(np.fft.rfftfreq(n, 1 / fs), 20.0)
        if kind == "pink":
            spec /= np.sqrt(f)
        else:
            # flat to 500 Hz, then -9 dB/octave
            spec /= np.maximum(f / 500.0, 1.0) ** 1.5
        y = np.fft.irfft(spec, n)
    elif kind == "babble":
        y = sum(np.roll(synth_speech(rng, duration, fs), int(rng.integers(n))) for _ in range(6))
    else:
        raise ValidationError(f"unknown noise kind {kind!r}")
    return 0.1 * y / dsp.rms(y)


NOISE_KINDS = ("white", "pink", "speech-shaped", "babble")


def synth_rir(rng: np.random.Generator, rt60: float, fs: int = dsp.CANONICAL_RATE, drr_db: float = 0.0) -> np.ndarray:
    n = int(max(rt60, 0.05) * fs)
    t = np.arange(n) / fs
    tail = rng.standard_normal(n) * np.exp(-6.9 * t / rt60)
    tail[: int(0.002 * fs)] = 0
    delay = int(rng.integers(8, 40))
    h = np.zeros(n + delay)
    h[delay:] = tail
    direct_energy = np.sum(tail ** 2) * 10 ** (drr_db / 10)
    h[delay] = np.sqrt(direct_energy)
    return 0.9 * h / np.max(np.abs(h))


def synthesize_assets(root, subsets: Mapping[str, int], seed: int = 0, duration: tuple[float, float] = (1.0, 1.5),
                      n_rirs: int = 12, style: VoiceStyle = IN_DOMAIN_VOICE, prefix: str = "utt",
                      scale_factors: Sequence[float] = (1.0,)) -> AssetSet:
    """Write a small clean/noise/RIR asset tree and return it scanned."""
    root = Path(root)
    fs = dsp.CANONICAL_RATE
    rng = np.random.default_rng([seed, stable_hash("assets", prefix)])
    for subset, count in subsets.items():
        for i in range(count):
            uid = f"{prefix}_{subset}_{i:05d}"
            d = rng.uniform(*duration)
            dsp.write_wav(root / "clean" / subset / f"{uid}.wav", Waveform(synth_speech(utterance_rng(seed, uid), d, fs, style), fs))
    for kind in NOISE_KINDS:
        dsp.write_wav(root / "noise" / f"{kind}.wav", Waveform(synth_noise(kind, rng, 5.0, fs), fs))
    rows = []
    for j in range(n_rirs):
        rid = f"rir{j:03d}"
        rt60 = 0.2 + 0.7 * j / max(n_rirs - 1, 1)
        drr = rng.uniform(-6, 6)
        dsp.write_wav(root / "rir" / f"{rid}.wav", Waveform(synth_rir(rng, rt60, fs, drr), fs))
        rows.append((rid, scale_factors[j % len(scale_factors)]))
    with open(root / "rir" / "rirs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rir_id", "scale_factor"])
        w.writerows(rows)
    return AssetSet.scan(root)


def rir_effects(assets: AssetSet) -> dict[str, float]:
    """Direct-to-reverberant ratio (dB) per RIR id."""
    out = {}
    for item in assets.rirs:
        h = dsp.read_wav(assets.root / item.path)
        out[item.rir_id] = dsp.direct_to_reverberant_db(RoomImpulseResponse(h.samples, h.sample_rate, item.scale_factor, item.rir_id))
    return out


def relocate(records: Iterable[UtteranceRecord], **changes) -> list[UtteranceRecord]:
    return [replace(r, **changes) for r in records]
