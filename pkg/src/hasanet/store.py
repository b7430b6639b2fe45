"""Run configuration, run records and the prepared-data directory."""
from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import audiograms as ag
from . import corpus
from .corpus import stable_hash
from .errors import ValidationError
from .features import PROVIDERS
from .targets import ScoreProvider, ScoreTable, histogram_csv, import_scores, score_histogram
from .training import (DEFAULT_SIZES, FINETUNE_MODES, PairingPlan, TrainConfig, build_pairing, kfold_partitions,
                       kfold_units, random_pairing)

ASSET_ENV = "HASANET_ASSET_ROOT"
TUNABLE_PROVIDERS = ("mock", "mock_whisper", "ssl_ll", "ssl_ws", "whisper")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs",
    "provider": "mock",
    "provider_options": {},
    "targets": "synthetic",
    "data": {
        "assets": None,
        "dir": None,
        "recipe": "in_domain",
        "demo": None,
        "demo_duration": [1.0, 1.5],
        "k": 5,
        "fold": 0,
        "fold_unit": "utterance",
        "val_fraction": 0.1,
        "catalog_seed": 0,
    },
    "model": {},
    "train": TrainConfig().to_dict(),
    "transfer": {"sizes": list(DEFAULT_SIZES)},
}


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: Mapping | None = None) -> dict:
    """Defaults, then the JSON config file, then flag overrides (one key each)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {p} does not exist", module="cli")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {p}: {e}", module="cli") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for k in parents:
            node = node.setdefault(k, {})
        node[leaf] = value
    if os.environ.get(ASSET_ENV):
        cfg["data"]["assets"] = os.environ[ASSET_ENV]
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def parse_targets(spec: str) -> tuple[str, str | int]:
    """``synthetic``, ``synthetic:<seed>`` or ``imported:<path>``."""
    kind, _, arg = str(spec).partition(":")
    if kind == "synthetic":
        try:
            return kind, int(arg) if arg else 0
        except ValueError:
            raise ValidationError(f"synthetic target seed must be an integer, got {arg!r}", module="cli") from None
    if kind == "imported":
        if not arg:
            raise ValidationError("imported targets need a path: imported:<scores.csv>", module="cli")
        return kind, arg
    raise ValidationError(f"--targets must be synthetic[:seed] or imported:<path>, got {spec!r}", module="cli")


def validate_config(cfg: Mapping, command: str) -> TrainConfig:
    """Check the configuration before any compute; returns the parsed TrainConfig."""
    if cfg["provider"] not in PROVIDERS:
        raise ValidationError(f"unknown provider {cfg['provider']!r}; choose from {PROVIDERS}", module="cli")
    try:
        train_cfg = TrainConfig(**cfg["train"])
    except TypeError as e:
        raise ValidationError(f"train section: {e}", module="cli") from None
    mode = train_cfg.finetune_mode
    if command == "finetune" and mode == "none":
        raise ValidationError("finetune needs --mode PF, EF or TWO_STAGE", module="cli")
    if mode != "none" and cfg["provider"] not in TUNABLE_PROVIDERS:
        raise ValidationError(f"mode {mode} needs a tunable provider; {cfg['provider']!r} is frozen-only",
                              module="cli", hint=f"tunable providers: {', '.join(TUNABLE_PROVIDERS)}")
    if mode not in FINETUNE_MODES:
        raise ValidationError(f"unknown mode {mode!r}", module="cli")
    kind, arg = parse_targets(cfg["targets"])
    if kind == "imported" and not Path(arg).exists():
        raise ValidationError(f"score file {arg} does not exist", module="cli")
    d = cfg["data"]
    if d["recipe"] not in corpus.RECIPES:
        raise ValidationError(f"unknown recipe {d['recipe']!r}; choose from {sorted(corpus.RECIPES)}", module="cli")
    if d["fold_unit"] not in ("utterance", "record"):
        raise ValidationError("data.fold_unit must be utterance or record", module="cli")
    if command == "prepare" and d["demo"] is None and not d["assets"]:
        raise ValidationError("prepare needs --assets DIR (or HASANET_ASSET_ROOT, or --demo N)", module="cli")
    if command == "prepare" and d["assets"] and d["demo"] is None and not Path(d["assets"]).is_dir():
        raise ValidationError(f"asset directory {d['assets']} does not exist", module="cli")
    if command in ("train", "finetune", "transfer") and not d["dir"]:
        raise ValidationError(f"{command} needs --data DIR (a prepared data directory)", module="cli")
    if d["dir"] and command != "prepare" and not (Path(d["dir"]) / "prepare.json").exists():
        raise ValidationError(f"{d['dir']} is not a prepared data directory (run `hasanet prepare`)", module="cli")
    return train_cfg


# --- run records ---------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunRecord:
    run_id: str
    command: str
    config_hash: str
    started: str
    ended: str | None = None
    status: str = "running"
    fingerprints: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def finished(self) -> bool:
        return self.status == "finished"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        p = Path(run_dir) / "run.json"
        if not p.exists():
            raise ValidationError(f"{run_dir} has no run.json", module="store")
        return cls(**json.loads(p.read_text()))


class Run:
    """A run directory: config snapshot, record, and artifacts below it."""

    def __init__(self, out_root, command: str, cfg: Mapping, run_id: str | None = None):
        self.cfg = dict(cfg)
        h = config_hash(cfg)
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        self.run_id = run_id or f"{command}-{stamp}-{h[:8]}"
        self.dir = Path(out_root) / self.run_id
        if self.dir.exists():
            raise ValidationError(f"run directory {self.dir} already exists", module="store")
        self.dir.mkdir(parents=True)
        (self.dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")
        self.record = RunRecord(self.run_id, command, h, _now())
        self._write()

    def _write(self):
        (self.dir / "run.json").write_text(self.record.to_json())

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def finalize(self, status: str = "finished", **summary) -> RunRecord:
        if self.record.ended is not None:
            raise ValidationError(f"run {self.run_id} is already finalized", module="store")
        self.record.summary.update(summary)
        self.record.fingerprints = {
            str(p.relative_to(self.dir)): file_digest(p)
            for p in sorted(self.dir.rglob("*")) if p.is_file() and p.name != "run.json"
        }
        self.record.status = status
        self.record.ended = _now()
        self._write()
        return self.record


def verify_run(run_dir) -> RunRecord:
    """Check the stored config snapshot still hashes to the recorded value."""
    rec = RunRecord.load(run_dir)
    cfg = json.loads((Path(run_dir) / "config.json").read_text())
    if config_hash(cfg) != rec.config_hash:
        raise ValidationError(f"run {rec.run_id}: config snapshot does not match its recorded hash", module="store")
    return rec


# --- prepared data -------------------------------------------------------------

ROLE_FILES = ("train", "validation", "test")


def _write_pairing(plan: PairingPlan, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan.to_csv())


def _read_pairing(path: Path, role: str) -> PairingPlan:
    rows = path.read_text().splitlines()[1:]
    combos = tuple(tuple(r.split(",")) for r in rows if r)
    per = 1
    if combos:
        counts: dict = {}
        for c in combos:
            counts[c[:2]] = counts.get(c[:2], 0) + 1
        per = next(iter(counts.values()))
    return PairingPlan(combos, role, per)


def _role_manifests(manifest: corpus.DatasetManifest, cfg: Mapping) -> dict[str, corpus.DatasetManifest]:
    """Split a manifest into train/validation/test roles.

    In-domain: one fold of the k-fold partition is the test set and a
    hash-chosen share of the rest is held out for validation.  OOD: the
    recipe's train/test subsets, with validation carved from train.
    """
    d, seed = cfg["data"], cfg["seed"]
    sub = lambda recs, role: corpus.DatasetManifest(recs, role, dict(manifest.provenance))  # noqa: E731
    if d["recipe"] == "ood":
        subset_of = manifest.provenance.get("subset_of", {})
        test_ids = {u for u in manifest.utterance_ids if subset_of.get(u) == "test"}
        train_ids = sorted(set(manifest.utterance_ids) - test_ids)
        n_val = max(1, int(round(d["val_fraction"] * len(train_ids))))
        val_ids = set(sorted(train_ids, key=lambda u: (stable_hash(seed, "val", u), u))[:n_val])
        pick = lambda ids: [r for r in manifest if r.utterance_id in ids]  # noqa: E731
        return {"train": sub(pick(set(train_ids) - val_ids), "train"), "validation": sub(pick(val_ids), "validation"),
                "test": sub(pick(test_ids), "test")}
    unit = d["fold_unit"]
    folds = kfold_partitions(kfold_units(manifest, unit), d["k"], seed)
    test_units = set(folds[d["fold"]])
    rest = [u for f, fold in enumerate(folds) if f != d["fold"] for u in fold]
    n_val = max(1, int(round(d["val_fraction"] * len(rest))))
    val_units = set(sorted(rest, key=lambda u: (stable_hash(seed, "val", u), u))[:n_val])
    unit_of = (lambda r: r.utterance_id) if unit == "utterance" else (lambda r: r.record_key)
    return {
        "train": sub([r for r in manifest if unit_of(r) not in test_units | val_units], "train"),
        "validation": sub([r for r in manifest if unit_of(r) in val_units], "validation"),
        "test": sub([r for r in manifest if unit_of(r) in test_units], "test"),
    }


def prepare_data(cfg: Mapping, out_dir) -> Path:
    """Build manifests, audio, pairings and (synthetic) scores in ``out_dir``.

    Work happens in a temporary sibling directory that is renamed into place
    only on success, so failures leave nothing behind.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ValidationError(f"output directory {out_dir} is not empty", module="cli")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(prefix=".prepare-", dir=out_dir.parent))
    try:
        _prepare_into(cfg, work)
        if out_dir.exists():
            out_dir.rmdir()
        work.rename(out_dir)
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    return out_dir


def _prepare_into(cfg: Mapping, work: Path) -> None:
    d, seed = cfg["data"], cfg["seed"]
    recipe = corpus.RECIPES[d["recipe"]]
    if d["demo"] is not None:
        n = int(d["demo"])
        if d["recipe"] == "ood":
            subsets = {"train": n - max(1, n // 5), "test": max(1, n // 5)}
            style, prefix = corpus.OOD_VOICE, "ood"
        else:
            subsets = {"validation": (n + 1) // 2, "test": n // 2}
            style, prefix = corpus.IN_DOMAIN_VOICE, "utt"
        assets = corpus.synthesize_assets(work / "assets", {k: v for k, v in subsets.items() if v}, seed,
                                          tuple(d["demo_duration"]), style=style, prefix=prefix)
    else:
        assets = corpus.AssetSet.scan(d["assets"])
    if not assets.clean:
        raise ValidationError(f"no clean utterances found under {assets.root}/clean", module="corpus")
    manifest = corpus.build_manifest(assets, recipe, seed, "train")
    manifest.provenance["subset_of"] = {c.utterance_id: c.subset for c in assets.clean}
    corpus.render_manifest(manifest, assets, work / "audio", seed)

    catalog = ag.generate_catalog(d["catalog_seed"])
    split = ag.split_catalog(catalog, d["catalog_seed"])
    ag.save_catalog(catalog, work / "catalog.csv")
    (work / "split.json").write_text(json.dumps({r: split.ids(r) for r in ROLE_FILES} | {"seed": split.seed},
                                                indent=2) + "\n")
    manifest.save(work / "manifests" / "all.jsonl")
    roles = _role_manifests(manifest, cfg)
    pairings = {}
    for role, m in roles.items():
        m.save(work / "manifests" / f"{role}.jsonl")
        if d["recipe"] == "ood":
            pairings[role] = random_pairing(m, [a.id for a in catalog], seed, role)
        else:
            pairings[role] = build_pairing(m, split, role, seed)
        _write_pairing(pairings[role], work / "pairings" / f"{role}.csv")

    kind, arg = parse_targets(cfg["targets"])
    all_combos = [c for p in pairings.values() for c in p.combos]
    patterns = {a.id: ag.make_pattern(a) for a in catalog}
    if kind == "synthetic":
        provider = ScoreProvider.synthetic(int(arg), corpus.rir_effects(assets))
        table = provider.table_for(all_combos, manifest.by_record(), patterns)
    else:
        table = import_scores(arg, all_combos)
        table = ScoreTable({k: table[k] for k in all_combos}, table.source)
    table.save(work / "scores.csv")
    (work / "histogram.csv").write_text(histogram_csv(score_histogram(table)))
    counts = {"clean": len(assets.clean), "records": len(manifest),
              **{f"records_{r}": len(m) for r, m in roles.items()},
              **{f"combos_{r}": len(p) for r, p in pairings.items()}}
    (work / "prepare.json").write_text(json.dumps({
        "config": cfg, "config_hash": config_hash(cfg), "counts": counts,
        "reference_counts": dict(recipe.reference_counts), "targets": kind,
    }, indent=2, sort_keys=True, default=str) + "\n")


@dataclass
class PreparedData:
    root: Path
    info: dict
    catalog: list[ag.Audiogram]
    split: ag.AudiogramSplit

    @classmethod
    def load(cls, root) -> "PreparedData":
        root = Path(root)
        if not (root / "prepare.json").exists():
            raise ValidationError(f"{root} is not a prepared data directory", module="store")
        info = json.loads((root / "prepare.json").read_text())
        catalog = ag.load_catalog(root / "catalog.csv")
        by_id = {a.id: a for a in catalog}
        ids = json.loads((root / "split.json").read_text())
        split = ag.AudiogramSplit(*(tuple(by_id[i] for i in ids[r]) for r in ROLE_FILES), seed=ids.get("seed", 0))
        return cls(root, info, catalog, split)

    @property
    def audio_root(self) -> Path:
        return self.root / "audio"

    @property
    def recipe(self) -> str:
        return self.info["config"]["data"]["recipe"]

    def manifest(self, role: str = "all") -> corpus.DatasetManifest:
        return corpus.DatasetManifest.load(self.root / "manifests" / f"{role}.jsonl",
                                           None if role == "all" else role)

    def pairing(self, role: str) -> PairingPlan:
        return _read_pairing(self.root / "pairings" / f"{role}.csv", role)

    def scores(self, targets: str | None = None) -> ScoreTable:
        if targets:
            kind, arg = parse_targets(targets)
            if kind == "imported":
                return import_scores(arg)
        return import_scores(self.root / "scores.csv")

    @property
    def patterns(self) -> dict[str, ag.HearingLossPattern]:
        return {a.id: ag.make_pattern(a) for a in self.catalog}

    @property
    def categories(self) -> dict[str, str]:
        return {a.id: a.category for a in self.catalog}
