"""Ground-truth score tables: imported HASQI/HASPI values or synthetic proxies."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .audiograms import HearingLossPattern
from .corpus import UtteranceRecord, stable_hash
from .errors import ValidationError
from .model import TargetPair

Key = tuple[str, str, str]
SCORE_HEADER = ("utterance_id", "condition", "audiogram_id", "hasqi", "haspi")
HIST_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class ScoreTable(Mapping):
    """Immutable map (utterance_id, condition, audiogram_id) -> TargetPair."""

    def __init__(self, entries: Mapping[Key, TargetPair] | Iterable[tuple[Key, TargetPair]] = (), source: str = ""):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        data: dict[Key, TargetPair] = {}
        for key, pair in items:
            key = tuple(str(k) for k in key)
            if key in data:
                raise ValidationError(f"duplicate score key {key}")
            if not isinstance(pair, TargetPair):
                pair = TargetPair(*pair)
            data[key] = pair
        self._data = data
        self.source = source

    def __getitem__(self, key):
        return self._data[tuple(key)]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def missing(self, keys: Iterable[Key]) -> list[Key]:
        return [tuple(k) for k in keys if tuple(k) not in self._data]

    def check_coverage(self, keys: Iterable[Key]) -> None:
        gaps = self.missing(keys)
        if gaps:
            shown = ", ".join("/".join(k) for k in gaps[:10])
            raise ValidationError(f"score table lacks {len(gaps)} key(s): {shown}"
                                  + (" ..." if len(gaps) > 10 else ""),
                                  module="target_scores", hint="import or generate scores for every pairing combo")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for key in sorted(self._data):
            p = self._data[key]
            w.writerow([*key, repr(p.quality), repr(p.intelligibility)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())


def import_scores(path, expected_keys: Iterable[Key] | None = None) -> ScoreTable:
    """Read a score CSV; every problem is reported with its line number."""
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SCORE_HEADER:
        raise ValidationError(f"{path}: header must be {','.join(SCORE_HEADER)}", module="target_scores")
    errors, entries, first_line = [], {}, {}
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(SCORE_HEADER):
            errors.append(f"line {line}: expected {len(SCORE_HEADER)} fields, got {len(row)}")
            continue
        uid, cond, aid, q, i = (c.strip() for c in row)
        try:
            q, i = float(q), float(i)
        except ValueError:
            errors.append(f"line {line}: scores must be numbers")
            continue
        bad = [n for n, v in (("hasqi", q), ("haspi", i)) if not (0.0 <= v <= 1.0)]
        if bad:
            errors.append(f"line {line}: {', '.join(bad)} outside [0, 1]")
            continue
        key = (uid, cond, aid)
        if key in entries:
            errors.append(f"line {line}: duplicate key {'/'.join(key)} (first on line {first_line[key]})")
            continue
        entries[key] = TargetPair(q, i)
        first_line[key] = line
    if errors:
        raise ValidationError(f"{path}: " + "; ".join(errors), module="target_scores")
    table = ScoreTable(entries, source=str(path))
    if expected_keys is not None:
        table.check_coverage(expected_keys)
    return table


# --- synthetic proxy ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticParams:
    """Knobs of the proxy map.

    Both targets are logistic in a drive ``e - loss_weight * mean_loss`` where
    ``e`` is an effective SNR in dB derived from the record's condition.
    """

    enhanced_gain_db: float = 5.0
    dereverb_gain_db: float = 4.0
    vocoded_db: Mapping[str, float] = field(default_factory=lambda: {"tone": 8.0, "noise": 4.0})
    quality_vocoder_penalty_db: float = 4.0
    loss_weight: float = 0.2  # dB of drive per dB HL of mean loss
    q_low: float = 0.1
    q_high: float = 0.9
    q_centre: float = 0.0
    q_width: float = 5.0
    i_centre: float = -6.0
    i_width: float = 3.0
    jitter: float = 0.01


def effective_snr(record: UtteranceRecord, rir_effects: Mapping[str, float] | None, params: SyntheticParams) -> float:
    c = record.condition
    if c == "noisy":
        return float(record.snr_db)
    if c == "enhanced":
        return float(record.snr_db) + params.enhanced_gain_db
    if c in ("reverberation", "dereverberation"):
        if not rir_effects or record.rir_id not in rir_effects:
            raise ValidationError(f"{record.utterance_id}/{c}: no acoustic summary for RIR {record.rir_id!r}",
                                  module="target_scores", hint="pass rir_effects(assets)")
        drr = float(rir_effects[record.rir_id])
        return drr + (params.dereverb_gain_db if c == "dereverberation" else 0.0)
    return float(params.vocoded_db[record.vocoder_kind])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def synthetic_targets(record: UtteranceRecord, pattern: HearingLossPattern, seed: int = 0,
                      rir_effects: Mapping[str, float] | None = None,
                      params: SyntheticParams = SyntheticParams()) -> TargetPair:
    """Deterministic proxy scores.

    Jitter depends on (seed, utterance, condition) only, so for a fixed record
    both scores are non-increasing in the pattern's mean loss.
    """
    e = effective_snr(record, rir_effects, params)
    drive = e - params.loss_weight * pattern.mean_loss
    q_drive = drive - (params.quality_vocoder_penalty_db if record.condition == "vocoded" else 0.0)
    q = params.q_low + (params.q_high - params.q_low) * _sigmoid((q_drive - params.q_centre) / params.q_width)
    i = _sigmoid((drive - params.i_centre) / params.i_width)
    if params.jitter:
        rng = np.random.default_rng([seed, stable_hash("target", record.utterance_id, record.condition)])
        dq, di = rng.uniform(-params.jitter, params.jitter, 2)
        q, i = q + dq, i + di
    return TargetPair(float(np.clip(q, 0.0, 1.0)), float(np.clip(i, 0.0, 1.0)))


@dataclass(frozen=True)
class ScoreProvider:
    """Source of targets; ``imported`` wraps a table, ``synthetic`` computes proxies."""

    kind: str
    version: str
    table: ScoreTable | None = None
    seed: int = 0
    rir_effects: Mapping[str, float] | None = None
    params: SyntheticParams = SyntheticParams()

    def __post_init__(self):
        if self.kind not in ("imported", "synthetic"):
            raise ValidationError(f"score provider kind must be imported or synthetic, got {self.kind!r}")
        if self.kind == "imported" and self.table is None:
            raise ValidationError("imported score provider needs a table")

    @classmethod
    def imported(cls, path, expected_keys=None) -> "ScoreProvider":
        return cls("imported", f"csv:{Path(path).name}", import_scores(path, expected_keys))

    @classmethod
    def synthetic(cls, seed: int = 0, rir_effects=None, params: SyntheticParams = SyntheticParams()) -> "ScoreProvider":
        return cls("synthetic", "synthetic-v1", None, seed, rir_effects, params)

    def score(self, record: UtteranceRecord, audiogram_id: str, pattern: HearingLossPattern) -> TargetPair:
        if self.kind == "imported":
            return self.table[(record.utterance_id, record.condition, audiogram_id)]
        return synthetic_targets(record, pattern, self.seed, self.rir_effects, self.params)

    def table_for(self, combos: Iterable[Key], records: Mapping[tuple[str, str], UtteranceRecord],
                  patterns: Mapping[str, HearingLossPattern]) -> ScoreTable:
        combos = list(combos)
        if self.kind == "imported":
            self.table.check_coverage(combos)
            return ScoreTable({k: self.table[k] for k in combos}, self.table.source)
        return ScoreTable({k: self.score(records[k[:2]], k[2], patterns[k[2]]) for k in combos}, self.version)


# --- histogram -----------------------------------------------------------------

def score_histogram(table: ScoreTable | Mapping[Key, TargetPair]) -> dict[str, list[float]]:
    """Percent of scores in [0,.2), [.2,.4), [.4,.6), [.6,.8), [.8,1] per metric."""
    if len(table) == 0:
        raise ValidationError("cannot histogram an empty score table", module="target_scores")
    out = {}
    for metric in ("quality", "intelligibility"):
        v = np.array([getattr(p, metric) for p in table.values()])
        idx = np.searchsorted(HIST_EDGES[1:-1], v, side="right")
        counts = np.bincount(idx, minlength=5)
        out[metric] = list(100.0 * counts / v.size)
    return out


def histogram_csv(hist: Mapping[str, list[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "bin", "percent"])
    for metric, pct in hist.items():
        for k, p in enumerate(pct):
            lo, hi = HIST_EDGES[k], HIST_EDGES[k + 1]
            w.writerow([metric, f"[{lo:.1f},{hi:.1f}{']' if k == 4 else ')'}", f"{p:.6f}"])
    return buf.getvalue()
