"""MSE, Pearson and Spearman correlation, and the per-condition / per-type report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .audiograms import CATEGORIES
from .corpus import CONDITIONS
from .errors import UndefinedCorrelation, ValidationError
from .model import TASKS, Prediction, TargetPair

METRICS = ("mse", "lcc", "srcc")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64).reshape(-1)
    b = np.asarray(truth, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValidationError(f"length mismatch: {a.size} predictions vs {b.size} targets", module="metrics")
    if a.size == 0:
        raise ValidationError("metrics need at least one value", module="metrics")
    return a, b


def mse(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.mean((a - b) ** 2))


def lcc(pred, truth) -> float:
    """Pearson correlation; constant inputs raise ``UndefinedCorrelation``."""
    a, b = _pair(pred, truth)
    if a.size < 2:
        raise UndefinedCorrelation("correlation needs at least two values")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    da, db = a - a.mean(), b - b.mean()
    r = np.sum(da * db) / np.sqrt(np.sum(da * da) * np.sum(db * db))
    return float(np.clip(r, -1.0, 1.0))


def srcc(pred, truth) -> float:
    """Spearman correlation: Pearson on average ranks."""
    a, b = _pair(pred, truth)
    return lcc(rankdata(a), rankdata(b))


@dataclass(frozen=True)
class Cell:
    n: int
    mse: float | None = None
    lcc: float | None = None
    srcc: float | None = None

    @classmethod
    def compute(cls, pred: Sequence[float], truth: Sequence[float]) -> "Cell":
        if len(pred) == 0:
            return cls(0)
        values = {"mse": mse(pred, truth)}
        for name, fn in (("lcc", lcc), ("srcc", srcc)):
            try:
                values[name] = fn(pred, truth)
            except UndefinedCorrelation:
                values[name] = None
        return cls(len(pred), **values)

    def get(self, metric: str) -> float | None:
        return getattr(self, metric)


def _fmt(v: float | None, digits: int = 3) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


@dataclass
class TaskReport:
    overall: Cell
    by_condition: dict[str, Cell]
    by_type: dict[str, Cell]


@dataclass
class EvalReport:
    tasks: dict[str, TaskReport]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tasks[TASKS[0]].overall.n

    def to_dict(self) -> dict:
        def cell(c: Cell):
            return {"n": c.n, "mse": c.mse, "lcc": c.lcc, "srcc": c.srcc}
        return {
            "meta": self.meta,
            "tasks": {t: {"overall": cell(r.overall),
                          "by_condition": {k: cell(v) for k, v in r.by_condition.items()},
                          "by_type": {k: cell(v) for k, v in r.by_type.items()}}
                      for t, r in self.tasks.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        def cell(c):
            return Cell(**c)
        tasks = {t: TaskReport(cell(r["overall"]), {k: cell(v) for k, v in r["by_condition"].items()},
                               {k: cell(v) for k, v in r["by_type"].items()})
                 for t, r in d["tasks"].items()}
        return cls(tasks, dict(d.get("meta", {})))

    def rows(self) -> Iterable[tuple[str, str, str, Cell]]:
        for t, r in self.tasks.items():
            yield t, "overall", "all", r.overall
            for k, c in r.by_condition.items():
                yield t, "condition", k, c
            for k, c in r.by_type.items():
                yield t, "type", k, c

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "partition", "group", "n", *METRICS])
        for t, part, group, c in self.rows():
            w.writerow([t, part, group, c.n, *(_fmt(c.get(m), 6) for m in METRICS)])
        return buf.getvalue()

    def to_text(self) -> str:
        """Rows per group, MSE/LCC/SRCC columns for each task."""
        lines = []
        head = f"{'':<18}" + "".join(f"{t:^27}" for t in self.tasks)
        sub = f"{'':<18}" + "".join(f"{'MSE':>9}{'LCC':>9}{'SRCC':>9}" for _ in self.tasks)
        for title, attr in (("overall", None), ("condition", "by_condition"), ("hearing-loss type", "by_type")):
            lines += [title, head, sub]
            groups = ["all"] if attr is None else list(getattr(self.tasks[TASKS[0]], attr))
            for g in groups:
                row = f"{g:<18}"
                for r in self.tasks.values():
                    c = r.overall if attr is None else getattr(r, attr)[g]
                    row += "".join(f"{_fmt(c.get(m)):>9}" for m in METRICS)
                lines.append(row)
            lines.append("")
        return "\n".join(lines)


def utterance_scores(p) -> tuple[float, float]:
    if isinstance(p, Prediction):
        return p.utterance_quality, p.utterance_intelligibility
    if isinstance(p, TargetPair):
        return p.quality, p.intelligibility
    q, i = p
    return float(q), float(i)


def build_report(predictions: Mapping[tuple, object], targets: Mapping[tuple, TargetPair],
                 categories: Mapping[str, str], meta: Mapping | None = None) -> EvalReport:
    """Report over keys ``(utterance_id, condition, audiogram_id)``.

    ``predictions`` values may be ``Prediction`` objects or utterance-level
    ``(quality, intelligibility)`` pairs; ``categories`` maps audiogram id to
    hearing-loss category.
    """
    pk, tk = set(map(tuple, predictions)), set(map(tuple, targets))
    if pk != tk:
        orphans = sorted(pk ^ tk)
        raise ValidationError(f"{len(orphans)} key(s) present on one side only: "
                              + ", ".join("/".join(map(str, k)) for k in orphans[:10]), module="metrics")
    keys = sorted(pk)
    for k in keys:
        if k[1] not in CONDITIONS:
            raise ValidationError(f"key {k}: unknown condition", module="metrics")
        if k[2] not in categories:
            raise ValidationError(f"key {k}: audiogram {k[2]!r} has no category", module="metrics")
    pred = np.array([utterance_scores(predictions[k]) for k in keys]).reshape(-1, 2)
    true = np.array([utterance_scores(targets[k]) for k in keys]).reshape(-1, 2)
    cond = np.array([k[1] for k in keys])
    cat = np.array([categories[k[2]] for k in keys])
    tasks = {}
    for j, task in enumerate(TASKS):
        p, t = pred[:, j], true[:, j]
        tasks[task] = TaskReport(
            Cell.compute(p, t),
            {c: Cell.compute(p[cond == c], t[cond == c]) for c in CONDITIONS},
            {c: Cell.compute(p[cat == c], t[cat == c]) for c in CATEGORIES},
        )
    return EvalReport(tasks, dict(meta or {}))


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Cell-wise mean of per-fold metrics; undefined fold values are skipped."""
    if not reports:
        raise ValidationError("no reports to aggregate", module="metrics")

    def avg(cells: list[Cell]) -> Cell:
        out = {}
        for m in METRICS:
            vals = [c.get(m) for c in cells if c.get(m) is not None]
            out[m] = float(np.mean(vals)) if vals else None
        return Cell(sum(c.n for c in cells), **out)

    tasks = {}
    for task in reports[0].tasks:
        rs = [r.tasks[task] for r in reports]
        tasks[task] = TaskReport(
            avg([r.overall for r in rs]),
            {k: avg([r.by_condition[k] for r in rs]) for k in rs[0].by_condition},
            {k: avg([r.by_type[k] for r in rs]) for k in rs[0].by_type},
        )
    return EvalReport(tasks, {"aggregate": "mean", "folds": len(reports)})
