"""Audiogram catalog: generation, shape classification, splitting and patterns.

Thresholds are dB HL at the six audiometric frequencies used by the model.
Concrete catalog values are produced from parametric shape templates, one per
clinical category, and quantised to 5 dB steps.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

FREQUENCIES = (250, 500, 1000, 2000, 4000, 6000)
LOSS_CATEGORIES = ("flat", "sloping", "rising", "cookie-bite", "noise-notched", "high-frequency")
CATEGORIES = LOSS_CATEGORIES + ("normal",)
UNCLASSIFIED = "unclassified"
PER_CATEGORY = 7
NORMAL_ID = "normal"
HEARING_LOSS_LIMIT_DB = 20.0
MAX_DB_HL = 120.0
STEP_DB = 5


@dataclass(frozen=True)
class Audiogram:
    id: str
    thresholds: Mapping[int, float]
    category: str

    def __post_init__(self):
        keys = set(self.thresholds)
        if keys != set(FREQUENCIES):
            raise ValidationError(f"audiogram {self.id}: thresholds must cover exactly {FREQUENCIES}, got {sorted(keys)}")
        vals = np.array([self.thresholds[f] for f in FREQUENCIES], dtype=float)
        if not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.max() > MAX_DB_HL:
            raise ValidationError(f"audiogram {self.id}: thresholds must be finite and within [0, {MAX_DB_HL:g}] dB HL")
        if self.category not in CATEGORIES:
            raise ValidationError(f"audiogram {self.id}: unknown category {self.category!r}")
        all_zero = bool(np.all(vals == 0))
        if (self.category == "normal") != all_zero:
            raise ValidationError(f"audiogram {self.id}: category 'normal' iff all thresholds are 0")
        # plain dict so instances are hashable-free but comparable
        object.__setattr__(self, "thresholds", {f: float(self.thresholds[f]) for f in FREQUENCIES})

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(self.thresholds[f] for f in FREQUENCIES)

    @property
    def is_normal(self) -> bool:
        return self.category == "normal"


@dataclass(frozen=True)
class HearingLossPattern:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(FREQUENCIES):
            raise ValidationError(f"hearing-loss pattern needs {len(FREQUENCIES)} values, got {len(vals)}")
        if any(not np.isfinite(v) or v < 0 or v > MAX_DB_HL for v in vals):
            raise ValidationError("hearing-loss pattern values must lie in [0, 120] dB HL")
        object.__setattr__(self, "values", vals)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class AudiogramSplit:
    train: tuple[Audiogram, ...]
    validation: tuple[Audiogram, ...]
    test: tuple[Audiogram, ...]
    seed: int = field(default=0, compare=False)

    def ids(self, role: str) -> list[str]:
        return [a.id for a in getattr(self, role)]

    def check(self) -> None:
        sizes = (len(self.train), len(self.validation), len(self.test))
        if sizes != (31, 13, 13):
            raise ValidationError(f"split sizes must be (31, 13, 13), got {sizes}")
        train, val, test = (set(self.ids(r)) for r in ("train", "validation", "test"))
        if train & test != {NORMAL_ID}:
            raise ValidationError("train and test may only share the normal-hearing audiogram")
        if not val <= train:
            raise ValidationError("validation audiograms must be drawn from the training set")
        for role, expected in (("train", 5), ("validation", 2), ("test", 2)):
            counts = _category_counts(getattr(self, role))
            for cat in LOSS_CATEGORIES:
                if counts.get(cat, 0) != expected:
                    raise ValidationError(f"{role}: expected {expected} {cat} audiograms, got {counts.get(cat, 0)}")
            if counts.get("normal", 0) != 1:
                raise ValidationError(f"{role}: normal-hearing audiogram missing")


def make_pattern(a: Audiogram) -> HearingLossPattern:
    return HearingLossPattern(tuple(a.thresholds[f] for f in FREQUENCIES))


def normal_audiogram() -> Audiogram:
    return Audiogram(NORMAL_ID, {f: 0.0 for f in FREQUENCIES}, "normal")


# --- shape rules -----------------------------------------------------------
# Each rule is tested independently; generation templates are built so that
# exactly one of them fires.

def _is_flat(t):
    return t.max() - t.min() <= 15 and t.mean() > HEARING_LOSS_LIMIT_DB


def _is_sloping(t):
    return bool(np.all(np.diff(t) >= 0)) and t[-1] - t[0] >= 30


def _is_rising(t):
    return bool(np.all(np.diff(t) <= 0)) and t[0] - t[-1] >= 30


def _is_cookie_bite(t):
    mid = max(t[2], t[3])
    return mid == t.max() and mid - max(t[0], t[-1]) >= 20


def _is_noise_notched(t):
    return t[4] - max(t[3], t[5]) >= 20


def _is_high_frequency(t):
    return t[:3].max() <= HEARING_LOSS_LIMIT_DB and min(t[4], t[5]) >= 40


_RULES = {
    "flat": _is_flat,
    "sloping": _is_sloping,
    "rising": _is_rising,
    "cookie-bite": _is_cookie_bite,
    "noise-notched": _is_noise_notched,
    "high-frequency": _is_high_frequency,
}


def matching_categories(thresholds: Sequence[float]) -> list[str]:
    t = np.asarray(thresholds, dtype=float)
    if np.all(t == 0):
        return ["normal"]
    return [name for name, rule in _RULES.items() if rule(t)]


def classify_audiogram(a: Audiogram | Mapping[int, float]) -> str:
    """Return the single matching shape category, or ``"unclassified"``.

    Shapes matching no rule, or more than one, are reported as unclassified
    rather than resolved by precedence.
    """
    thresholds = a.thresholds if isinstance(a, Audiogram) else a
    missing = [f for f in FREQUENCIES if f not in thresholds]
    if missing:
        raise ValidationError(f"thresholds missing at {missing} Hz")
    hits = matching_categories([thresholds[f] for f in FREQUENCIES])
    return hits[0] if len(hits) == 1 else UNCLASSIFIED


# --- generation ------------------------------------------------------------

def _q(x):
    return float(np.clip(STEP_DB * np.round(np.asarray(x, dtype=float) / STEP_DB), 0, MAX_DB_HL))


def _steps(rng, n, choices):
    return [int(rng.choice(choices)) for _ in range(n)]


def _template(category: str, index: int, rng: np.random.Generator) -> list[float]:
    if category == "flat":
        return [_q(25 + 10 * index)] * 6
    if category == "sloping":
        start = int(rng.choice((25, 30, 35, 40)))
        t = [start]
        for d in _steps(rng, 5, (0, 5, 10, 15, 20)):
            t.append(t[-1] + d)
        if t[-1] - t[0] < 30:
            t[-1] = t[0] + 30 + 5 * index
            t[-2] = min(t[-2], t[-1])
        return [_q(v) for v in t]
    if category == "rising":
        start = int(rng.choice((50, 55, 60, 65, 70, 75)))
        t = [start]
        for d in _steps(rng, 5, (0, 5, 10, 15)):
            t.append(max(t[-1] - d, 0))
        if t[0] - t[-1] < 30:
            t[-1] = max(t[0] - 30 - 5 * (index % 3), 0)
            t[-2] = max(t[-2], t[-1])
        return [_q(v) for v in t]
    if category == "cookie-bite":
        peak = int(rng.choice((40, 45, 50, 55, 60, 65)))
        edge_lo = peak - int(rng.choice((20, 25, 30, 35)))
        edge_hi = peak - int(rng.choice((20, 25, 30)))
        t1k = peak - int(rng.choice((0, 5, 10)))
        t1k = max(t1k, 30)
        t500 = (edge_lo + t1k) / 2
        t4k = min(peak, (peak + edge_hi) / 2 + int(rng.choice((-5, 0, 5))))
        return [_q(edge_lo), _q(t500), _q(t1k), _q(peak), _q(t4k), _q(edge_hi)]
    if category == "noise-notched":
        low = _steps(rng, 3, (0, 5, 10, 15, 20))
        t2k = int(rng.choice((10, 15, 20, 25)))
        t6k = int(rng.choice((10, 15, 20, 25, 30, 35)))
        t4k = max(t2k, t6k) + int(rng.choice((20, 25, 30, 35, 40, 45)))
        return [_q(v) for v in (*low, t2k, t4k, t6k)]
    if category == "high-frequency":
        low = sorted(_steps(rng, 3, (0, 5, 10, 15, 20)))
        t4k = int(rng.choice((40, 45, 50, 55, 60, 65, 70, 75, 80)))
        t6k = max(t4k - int(rng.choice((5, 10, 15))), 40)
        if t6k >= t4k:
            t4k = t6k + 5
        t2k = int(rng.choice((low[-1], low[-1] + 5, low[-1] + 10, 25, 30, 35)))
        t2k = min(t2k, t4k - 5)
        return [_q(v) for v in (*low, t2k, t4k, t6k)]
    raise ValidationError(f"no template for category {category!r}")


def generate_catalog(seed: int = 0) -> list[Audiogram]:
    """43 audiograms: seven per loss category plus one normal-hearing entry."""
    rng = np.random.default_rng([seed, 0xA0D1])
    catalog = []
    for category in LOSS_CATEGORIES:
        seen = set()
        index = 0
        while len(seen) < PER_CATEGORY:
            values = _template(category, index, rng)
            key = tuple(values)
            if key in seen or matching_categories(values) != [category]:
                continue
            seen.add(key)
            index += 1
            aid = f"{category}-{index:02d}"
            catalog.append(Audiogram(aid, dict(zip(FREQUENCIES, values)), category))
    catalog.append(normal_audiogram())
    return catalog


def _category_counts(audiograms: Iterable[Audiogram]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for a in audiograms:
        counts[a.category] = counts.get(a.category, 0) + 1
    return counts


def check_catalog(catalog: Sequence[Audiogram]) -> None:
    counts = _category_counts(catalog)
    expected = {c: PER_CATEGORY for c in LOSS_CATEGORIES} | {"normal": 1}
    if counts != expected or len(catalog) != 43:
        raise ValidationError(f"catalog must hold 7 audiograms per loss category plus 1 normal; got {counts}")
    if len({a.id for a in catalog}) != len(catalog):
        raise ValidationError("catalog audiogram ids must be unique")


def split_catalog(catalog: Sequence[Audiogram], seed: int = 0) -> AudiogramSplit:
    """Per category: 5 train / 2 test, validation = 2 of the train five."""
    check_catalog(catalog)
    rng = np.random.default_rng([seed, 0x5B17])
    train, val, test = [], [], []
    for category in LOSS_CATEGORIES:
        members = sorted((a for a in catalog if a.category == category), key=lambda a: a.id)
        order = rng.permutation(len(members))
        picked = [members[i] for i in order]
        train += picked[:5]
        test += picked[5:7]
        val += [picked[i] for i in sorted(rng.choice(5, size=2, replace=False))]
    normal = next(a for a in catalog if a.is_normal)
    split = AudiogramSplit(tuple(train + [normal]), tuple(val + [normal]), tuple(test + [normal]), seed=seed)
    split.check()
    return split


# --- serialisation ---------------------------------------------------------

CSV_FIELDS = ["id", "category"] + [f"t{f}" for f in FREQUENCIES]


def catalog_to_csv(catalog: Iterable[Audiogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for a in catalog:
        w.writerow([a.id, a.category] + [int(round(v)) for v in a.values])
    return buf.getvalue()


def catalog_from_csv(text: str) -> list[Audiogram]:
    rows = csv.DictReader(io.StringIO(text))
    if rows.fieldnames != CSV_FIELDS:
        raise ValidationError(f"catalog CSV header must be {','.join(CSV_FIELDS)}")
    return [
        Audiogram(r["id"], {f: float(r[f"t{f}"]) for f in FREQUENCIES}, r["category"])
        for r in rows
    ]


def save_catalog(catalog: Iterable[Audiogram], path) -> None:
    Path(path).write_text(catalog_to_csv(catalog))


def load_catalog(path) -> list[Audiogram]:
    return catalog_from_csv(Path(path).read_text())
