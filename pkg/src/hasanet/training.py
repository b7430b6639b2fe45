"""Training protocols: audiogram pairing, fitting, fine-tuning regimes, k-fold and transfer."""
from __future__ import annotations

import contextlib
import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from . import dsp
from .audiograms import NORMAL_ID, AudiogramSplit, HearingLossPattern
from .corpus import CONDITIONS, DatasetManifest, stable_hash, utterance_rng
from .errors import CapabilityError, TrainingError, ValidationError
from .features import FeatureCache, embed
from .metrics import EvalReport, build_report, mean_report
from .model import (AssessmentSystem, Batch, HASANet, LossParts, ModelConfig, Prediction, TargetPair,
                    batch_loss, pad_stacks, predictions_from_output)
from .targets import ScoreProvider, ScoreTable

log = logging.getLogger(__name__)

Key = tuple[str, str, str]
FINETUNE_MODES = ("none", "PF", "EF", "TWO_STAGE")
LOG_HEADER = ("epoch", "split", "loss_total", "loss_q", "loss_i", "lr")


# --- pairing -----------------------------------------------------------------

@dataclass(frozen=True)
class PairingPlan:
    combos: tuple[Key, ...]
    role: str
    per_record: int = 3

    def __post_init__(self):
        combos = tuple(tuple(str(x) for x in c) for c in self.combos)
        object.__setattr__(self, "combos", combos)
        if self.role not in ("train", "validation", "test"):
            raise ValidationError(f"pairing role must be train, validation or test, got {self.role!r}")
        if len(set(combos)) != len(combos):
            raise ValidationError("pairing contains duplicate (utterance, condition, audiogram) triples")
        per = {}
        for c in combos:
            per[c[:2]] = per.get(c[:2], 0) + 1
        bad = [k for k, n in per.items() if n != self.per_record]
        if bad:
            raise ValidationError(f"{len(bad)} record(s) not paired with exactly {self.per_record} audiograms, e.g. {bad[0]}")

    def __len__(self):
        return len(self.combos)

    @property
    def utterance_ids(self) -> list[str]:
        return sorted({c[0] for c in self.combos})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["utterance_id", "condition", "audiogram_id"])
        w.writerows(self.combos)
        return buf.getvalue()


def build_pairing(manifest: DatasetManifest, split: AudiogramSplit, role: str = "train", seed: int = 0,
                  pool_role: str | None = None, n_sampled: int = 2) -> PairingPlan:
    """Pair every record with ``n_sampled`` impaired audiograms from the role's pool plus the normal one."""
    pool_role = pool_role or role
    members = getattr(split, pool_role)
    pool = sorted(a.id for a in members if not a.is_normal)
    if len(pool) < n_sampled or NORMAL_ID not in {a.id for a in members}:
        raise ValidationError(f"{pool_role} audiogram pool needs {n_sampled} impaired audiograms plus the normal one, "
                              f"has {len(pool)} impaired", module="training")
    combos = []
    for uid, cond in sorted({r.record_key for r in manifest}):
        rng = utterance_rng(seed, "pair", role, uid, cond)
        picks = sorted(rng.choice(len(pool), size=n_sampled, replace=False))
        combos += [(uid, cond, pool[p]) for p in picks] + [(uid, cond, NORMAL_ID)]
    return PairingPlan(tuple(combos), role, n_sampled + 1)


def random_pairing(manifest: DatasetManifest, audiogram_ids: Sequence[str], seed: int = 0,
                   role: str = "train") -> PairingPlan:
    """One randomly chosen audiogram per record."""
    ids = sorted(set(audiogram_ids))
    if not ids:
        raise ValidationError("random pairing needs at least one audiogram")
    combos = []
    for uid, cond in sorted({r.record_key for r in manifest}):
        combos.append((uid, cond, ids[int(utterance_rng(seed, "random-pair", role, uid, cond).integers(len(ids)))]))
    return PairingPlan(tuple(combos), role, 1)


# --- examples and batches ----------------------------------------------------

@dataclass
class Example:
    key: Key
    pattern: np.ndarray
    target: TargetPair
    stack: np.ndarray | None = None  # (L, T, D)
    wave: np.ndarray | None = None


def extract_features(manifest: DatasetManifest, audio_root, provider, cache: FeatureCache | None = None
                     ) -> dict[tuple[str, str], np.ndarray]:
    """Layer stack per (utterance, condition), float32."""
    root = Path(audio_root)
    out = {}
    for r in manifest:
        if r.record_key in out:
            continue

        def compute(r=r):
            return embed(provider, dsp.read_wav(root / r.audio_path)).layers
        stack = cache.get_or_compute(r.audio_path, provider, compute) if cache is not None else compute()
        out[r.record_key] = np.asarray(stack, dtype=np.float32)
    return out


def load_waves(manifest: DatasetManifest, audio_root) -> dict[tuple[str, str], np.ndarray]:
    root = Path(audio_root)
    out = {}
    for r in manifest:
        if r.record_key not in out:
            x = dsp.read_wav(root / r.audio_path)
            if x.sample_rate != dsp.CANONICAL_RATE:
                x = dsp.resample(x, dsp.CANONICAL_RATE)
            out[r.record_key] = x.samples.astype(np.float32)
    return out


@dataclass
class Corpus:
    """Everything needed to turn pairing combos into training examples."""

    manifest: DatasetManifest
    patterns: Mapping[str, HearingLossPattern]
    categories: Mapping[str, str]
    scores: ScoreProvider
    stacks: Mapping[tuple[str, str], np.ndarray] | None = None
    waves: Mapping[tuple[str, str], np.ndarray] | None = None

    def targets(self, pairing: PairingPlan) -> ScoreTable:
        return self.scores.table_for(pairing.combos, self.manifest.by_record(), self.patterns)

    def examples(self, pairing: PairingPlan) -> list[Example]:
        table = self.targets(pairing)
        out = []
        for k in pairing.combos:
            rk = k[:2]
            out.append(Example(
                k, self.patterns[k[2]].as_array(), table[k],
                None if self.stacks is None else self.stacks[rk],
                None if self.waves is None else self.waves[rk],
            ))
        return out


def make_batch(examples: Sequence[Example], dtype=torch.float32, use_waves: bool = False) -> Batch:
    patterns = torch.tensor(np.stack([e.pattern for e in examples]), dtype=dtype)
    tq = torch.tensor([e.target.quality for e in examples], dtype=dtype)
    ti = torch.tensor([e.target.intelligibility for e in examples], dtype=dtype)
    keys = [e.key for e in examples]
    if use_waves:
        if any(e.wave is None for e in examples):
            raise ValidationError("waveform batches need waveforms on every example")
        return Batch(keys, patterns, tq, ti, waves=[torch.as_tensor(e.wave, dtype=dtype) for e in examples])
    if any(e.stack is None for e in examples):
        raise ValidationError("feature batches need a layer stack on every example")
    stacks, lengths = pad_stacks([torch.as_tensor(e.stack, dtype=dtype) for e in examples])
    return Batch(keys, patterns, tq, ti, stacks=stacks, lengths=lengths)


def iter_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None,
                 dtype=torch.float32, use_waves: bool = False) -> Iterator[Batch]:
    order = rng.permutation(len(examples)) if rng is not None else np.arange(len(examples))
    for s in range(0, len(order), batch_size):
        yield make_batch([examples[i] for i in order[s:s + batch_size]], dtype, use_waves)


# --- configuration and logging -----------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    provider_lr: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    finetune_mode: str = "none"
    stage1_epochs: int | None = None  # TWO_STAGE; defaults to max_epochs
    optimizer: str = "adam"
    threads: int = 1

    def __post_init__(self):
        for name in ("base_lr", "provider_lr"):
            if not isinstance(getattr(self, name), (int, float)) or isinstance(getattr(self, name), bool):
                raise ValidationError(f"{name} must be a number, got {getattr(self, name)!r}")
        for name in ("batch_size", "max_epochs", "patience", "seed", "threads"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise ValidationError(f"{name} must be an integer, got {getattr(self, name)!r}")
        if self.base_lr <= 0 or self.provider_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValidationError(f"finetune_mode must be one of {FINETUNE_MODES}, got {self.finetune_mode!r}")
        if self.optimizer != "adam":
            raise ValidationError("only the Adam optimizer is supported")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.threads < 1:
            raise ValidationError("batch_size, patience and threads must be positive; max_epochs non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, parts: LossParts, lr: float):
        self.rows.append({"epoch": epoch, "split": split, "loss_total": parts.total,
                          "loss_q": parts.quality, "loss_i": parts.intelligibility, "lr": lr})

    def curve(self, split: str = "validation") -> list[float]:
        return [r["loss_total"] for r in self.rows if r["split"] == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r["epoch"], r["split"], repr(r["loss_total"]), repr(r["loss_q"]), repr(r["loss_i"]), repr(r["lr"])])
        return buf.getvalue()

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())


@contextlib.contextmanager
def numeric_mode(threads: int = 1):
    """Fixed intra-op thread count so runs are bit-for-bit repeatable."""
    previous = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _dtype(system) -> torch.dtype:
    return next(system.parameters()).dtype


def predict(system: AssessmentSystem, examples: Sequence[Example], batch_size: int = 32,
            use_waves: bool = False) -> dict[Key, Prediction]:
    out = {}
    with torch.no_grad():
        for batch in iter_batches(examples, batch_size, dtype=_dtype(system), use_waves=use_waves):
            for k, p in zip(batch.keys, predictions_from_output(system(batch))):
                out[k] = p
    return out


def evaluate_loss(system: AssessmentSystem, examples: Sequence[Example], batch_size: int = 32,
                  use_waves: bool = False) -> LossParts:
    """Mean per-utterance loss over ``examples``."""
    if not examples:
        raise ValidationError("cannot evaluate on an empty set")
    sums = np.zeros(3)
    with torch.no_grad():
        for batch in iter_batches(examples, batch_size, dtype=_dtype(system), use_waves=use_waves):
            parts = batch_loss(system(batch), batch.target_q, batch.target_i)
            sums += len(batch.keys) * np.array([p.item() for p in parts])
    sums /= len(examples)
    return LossParts(*map(float, sums))


def evaluate(system: AssessmentSystem, examples: Sequence[Example], categories: Mapping[str, str],
             use_waves: bool = False, meta: Mapping | None = None) -> EvalReport:
    preds = predict(system, examples, use_waves=use_waves)
    return build_report(preds, {e.key: e.target for e in examples}, categories, meta)


# --- fitting -----------------------------------------------------------------

@dataclass
class FitResult:
    best_epoch: int
    best_validation: LossParts
    epochs_run: int
    update_counts: dict[str, int]


def head_parameters(system: AssessmentSystem) -> list[torch.nn.Parameter]:
    m = system.model
    return [p for n, p in m.named_parameters() if not (n == "fusion.logits" and m.config.layer_mode == "last_layer")]


def fit(system: AssessmentSystem, groups: Sequence[tuple[str, list, float]], train_ex: Sequence[Example],
        val_ex: Sequence[Example], config: TrainConfig, log_: TrainingLog, max_epochs: int | None = None,
        use_waves: bool = False, stage: str = "train", epoch_offset: int = 0) -> FitResult:
    """Adam over ``groups`` of (name, params, lr); keeps the best-validation parameters.

    Parameters outside ``groups`` get ``requires_grad=False`` for the duration.
    """
    if not train_ex:
        raise ValidationError("training set is empty", module="training")
    if not val_ex:
        raise ValidationError("validation set is empty", module="training")
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    active = {id(p) for _, ps, _ in groups for p in ps}
    saved_flags = [(p, p.requires_grad) for p in system.parameters()]
    for p in system.parameters():
        p.requires_grad_(id(p) in active)
    head_lr = groups[0][2]
    dtype = _dtype(system)
    counts = {name: 0 for name, _, _ in groups}
    try:
        with numeric_mode(config.threads):
            opt = torch.optim.Adam([{"params": ps, "lr": lr} for _, ps, lr in groups])
            best = evaluate_loss(system, val_ex, config.batch_size, use_waves)
            log_.add(epoch_offset, "validation", best, head_lr)
            best_state, best_epoch, bad, ran = copy.deepcopy(system.state_dict()), epoch_offset, 0, 0
            for epoch in range(epoch_offset + 1, epoch_offset + max_epochs + 1):
                rng = np.random.default_rng([config.seed, epoch, stable_hash(stage)])
                sums = np.zeros(3)
                for b, batch in enumerate(iter_batches(train_ex, config.batch_size, rng, dtype, use_waves)):
                    opt.zero_grad()
                    try:
                        parts = batch_loss(system(batch), batch.target_q, batch.target_i)
                    except TrainingError as exc:
                        raise TrainingError(f"epoch {epoch}, batch {b}: {exc.args[0]}", hint=exc.hint) from exc
                    if not torch.isfinite(parts[0]):
                        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}",
                                            hint="lower the learning rate or check the inputs")
                    parts[0].backward()
                    for name, ps, _ in groups:
                        if any(p.grad is not None and bool(torch.any(p.grad != 0)) for p in ps):
                            counts[name] += 1
                    opt.step()
                    sums += len(batch.keys) * np.array([p.item() for p in parts])
                log_.add(epoch, "train", LossParts(*map(float, sums / len(train_ex))), head_lr)
                val = evaluate_loss(system, val_ex, config.batch_size, use_waves)
                log_.add(epoch, "validation", val, head_lr)
                ran += 1
                if val.total < best.total:
                    best, best_epoch, bad = val, epoch, 0
                    best_state = copy.deepcopy(system.state_dict())
                else:
                    bad += 1
                    if bad >= config.patience:
                        break
            system.load_state_dict(best_state)
    finally:
        for p, flag in saved_flags:
            p.requires_grad_(flag)
    return FitResult(best_epoch, best, ran, counts)


def train(system: AssessmentSystem, train_ex: Sequence[Example], val_ex: Sequence[Example], config: TrainConfig,
          log_: TrainingLog | None = None) -> tuple[FitResult, TrainingLog]:
    """Train the assessment head on precomputed features (the encoder stays fixed)."""
    log_ = log_ or TrainingLog()
    use_waves = train_ex[0].stack is None if train_ex else False
    result = fit(system, [("head", head_parameters(system), config.base_lr)], train_ex, val_ex, config, log_,
                 use_waves=use_waves)
    return result, log_


# --- fine-tuning -------------------------------------------------------------

def hash_parameters(params: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class FinetuneResult:
    mode: str
    stages: list[dict]
    hashes_before: dict[str, str]
    hashes_after: dict[str, str]
    frozen_groups: tuple[str, ...]
    update_counts: dict[str, int]
    log: TrainingLog

    @property
    def stage_lrs(self) -> list[float]:
        return [s["lr"] for s in self.stages]

    def frozen_unchanged(self) -> bool:
        return all(self.hashes_before[g] == self.hashes_after[g] for g in self.frozen_groups)


def check_tunable(provider, mode: str) -> None:
    if mode == "none":
        return
    groups = getattr(provider, "param_groups", None)
    if groups is None:
        pid = getattr(provider, "provider_id", type(provider).__name__)
        raise CapabilityError(f"fine-tuning mode {mode} needs a tunable provider; {pid} is frozen-only",
                              hint="use mode 'none' or a tunable provider (mock, ssl_ll, ssl_ws)")
    missing = {"conv", "transformer"} - set(groups())
    if missing:
        raise CapabilityError(f"provider lacks parameter group(s) {sorted(missing)} required by {mode}")


def finetune(system: AssessmentSystem, mode: str, train_ex: Sequence[Example], val_ex: Sequence[Example],
             config: TrainConfig, log_: TrainingLog | None = None) -> FinetuneResult:
    """Apply one fine-tuning regime to the encoder and head, on raw waveforms.

    PF: transformer stack at ``provider_lr``, front end frozen.  EF: both
    encoder groups at ``provider_lr``.  TWO_STAGE: head alone at
    ``base_lr``, then everything at ``provider_lr``.
    """
    if mode not in FINETUNE_MODES:
        raise ValidationError(f"unknown fine-tuning mode {mode!r}")
    log_ = log_ or TrainingLog()
    head = head_parameters(system)
    if mode == "none":
        use_waves = train_ex[0].stack is None
        r = fit(system, [("head", head, config.base_lr)], train_ex, val_ex, config, log_, use_waves=use_waves)
        return FinetuneResult(mode, [{"name": "head", "lr": config.base_lr, "epochs": r.epochs_run}], {}, {}, (),
                              r.update_counts, log_)
    check_tunable(system.encoder, mode)
    enc = system.encoder.param_groups()
    conv, transformer = enc["conv"], enc["transformer"]
    lo, hi = config.provider_lr, config.base_lr
    if mode == "PF":
        plan = [("finetune", [("head", head, hi), ("transformer", transformer, lo)], config.max_epochs)]
        frozen = ("conv",)
    elif mode == "EF":
        plan = [("finetune", [("head", head, hi), ("transformer", transformer, lo), ("conv", conv, lo)], config.max_epochs)]
        frozen = ()
    else:
        stage1 = config.max_epochs if config.stage1_epochs is None else config.stage1_epochs
        plan = [("stage1", [("head", head, hi)], stage1),
                ("stage2", [("head", head, lo), ("transformer", transformer, lo), ("conv", conv, lo)], config.max_epochs)]
        frozen = ()
    named = {"head": head, "conv": conv, "transformer": transformer}
    before = {g: hash_parameters(ps) for g, ps in named.items()}
    counts = {g: 0 for g in named}
    stages, offset = [], 0
    for name, groups, epochs in plan:
        r = fit(system, groups, train_ex, val_ex, config, log_, max_epochs=epochs, use_waves=True,
                stage=name, epoch_offset=offset)
        offset += r.epochs_run
        for g, n in r.update_counts.items():
            counts[g] += n
        stages.append({"name": name, "lr": groups[0][2], "groups": {g: lr for g, _, lr in groups},
                       "epochs": r.epochs_run, "best_epoch": r.best_epoch})
    after = {g: hash_parameters(ps) for g, ps in named.items()}
    return FinetuneResult(mode, stages, before, after, frozen, counts, log_)


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    """Parameter blob plus human-readable metadata."""

    config: ModelConfig
    state: dict
    provider_id: str
    stage: str
    seed: int
    data_fingerprint: str = ""
    layer_logits: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, system: AssessmentSystem, provider_id: str, stage: str, seed: int,
                data_fingerprint: str = "", **extra) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in system.state_dict().items()}
        logits = system.model.fusion.logits.detach().cpu().tolist()
        return cls(system.model.config, state, provider_id, stage, seed, data_fingerprint, logits, extra)

    def meta(self) -> dict:
        return {"model_config": self.config.to_dict(), "provider_id": self.provider_id, "stage": self.stage,
                "seed": self.seed, "data_fingerprint": self.data_fingerprint, "layer_logits": self.layer_logits,
                **self.extra}

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.state, d / "params.pt")
        (d / "checkpoint.json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        if not (d / "params.pt").exists() or not (d / "checkpoint.json").exists():
            raise ValidationError(f"{d} is not a checkpoint directory (params.pt + checkpoint.json)")
        meta = json.loads((d / "checkpoint.json").read_text())
        state = torch.load(d / "params.pt", weights_only=True)
        known = {"model_config", "provider_id", "stage", "seed", "data_fingerprint", "layer_logits"}
        return cls(ModelConfig(**meta["model_config"]), state, meta["provider_id"], meta["stage"], meta["seed"],
                   meta.get("data_fingerprint", ""), meta.get("layer_logits", []),
                   {k: v for k, v in meta.items() if k not in known})

    def build(self, encoder=None) -> AssessmentSystem:
        system = AssessmentSystem(HASANet(self.config, self.seed), encoder)
        model_state = {k[len("model."):]: v for k, v in self.state.items() if k.startswith("model.")}
        system.model.load_state_dict(model_state)
        enc_state = {k[len("encoder."):]: v for k, v in self.state.items() if k.startswith("encoder.")}
        if encoder is not None and enc_state:
            encoder.load_state_dict(enc_state)
        return system


def data_fingerprint(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for e in sorted(examples, key=lambda e: e.key):
        h.update(("\x1f".join(e.key) + f"|{e.target.quality!r}|{e.target.intelligibility!r}\n").encode())
    return h.hexdigest()[:16]


# --- k-fold ------------------------------------------------------------------

def kfold_partitions(units: Iterable, k: int = 5, seed: int = 0) -> list[list]:
    """Split ``units`` into ``k`` folds of near-equal size.

    Order is a hash of (seed, unit), so membership does not depend on the
    order units are listed in.
    """
    units = sorted(set(units))
    if k < 2:
        raise ValidationError("k-fold needs k >= 2")
    if k > len(units):
        raise ValidationError(f"k={k} exceeds the number of units ({len(units)})")
    ordered = sorted(units, key=lambda u: (stable_hash(seed, "fold", u), u))
    return [sorted(ordered[i::k]) for i in range(k)]


@dataclass
class FoldOutcome:
    fold: int
    n_train_combos: int
    n_test_combos: int
    report: EvalReport
    fit: FitResult | None = None


@dataclass
class KFoldResult:
    folds: list[FoldOutcome]
    aggregate: EvalReport


def fold_pairings(manifest: DatasetManifest, split: AudiogramSplit, folds: Sequence[Sequence], test_fold: int,
                  unit: str = "utterance", seed: int = 0, val_fraction: float = 0.1
                  ) -> tuple[PairingPlan, PairingPlan, PairingPlan]:
    """Train/validation/test pairings for one fold.

    ``unit`` is ``"utterance"`` (all conditions of an utterance share a fold)
    or ``"record"`` (utterance-condition pairs are the unit).  A hash-chosen
    ``val_fraction`` of the training units is held back for early stopping.
    """
    def select(units):
        units = set(units)
        if unit == "utterance":
            return [r for r in manifest if r.utterance_id in units]
        return [r for r in manifest if r.record_key in units]

    test_units = folds[test_fold]
    train_units = [u for f, fold in enumerate(folds) if f != test_fold for u in fold]
    n_val = int(round(val_fraction * len(train_units)))
    val_units = set(sorted(train_units, key=lambda u: (stable_hash(seed, "val", u), u))[:n_val])
    fit_units = [u for u in train_units if u not in val_units]
    sub = lambda recs, role: DatasetManifest(recs, role, dict(manifest.provenance))  # noqa: E731
    train_p = build_pairing(sub(select(fit_units), "train"), split, "train", seed)
    val_p = build_pairing(sub(select(val_units), "validation"), split, "validation", seed) if val_units else None
    test_p = build_pairing(sub(select(test_units), "test"), split, "test", seed)
    return train_p, val_p, test_p


def kfold_units(manifest: DatasetManifest, unit: str = "utterance") -> list:
    if unit == "utterance":
        return manifest.utterance_ids
    if unit == "record":
        return sorted({r.record_key for r in manifest})
    raise ValidationError(f"fold unit must be utterance or record, got {unit!r}")


def kfold_cv(corpus: Corpus, split: AudiogramSplit, build_system: Callable[[], AssessmentSystem],
             config: TrainConfig, k: int = 5, unit: str = "utterance", val_fraction: float = 0.1) -> KFoldResult:
    """Train a fresh system per fold, test on the held-out fold, average the fold metrics."""
    folds = kfold_partitions(kfold_units(corpus.manifest, unit), k, config.seed)
    outcomes = []
    for f in range(k):
        train_p, val_p, test_p = fold_pairings(corpus.manifest, split, folds, f, unit, config.seed, val_fraction)
        if val_p is None:
            raise ValidationError("validation split is empty; raise val_fraction or add utterances")
        system = build_system()
        result, _ = train(system, corpus.examples(train_p), corpus.examples(val_p), config)
        test_ex = corpus.examples(test_p)
        report = evaluate(system, test_ex, corpus.categories, use_waves=test_ex[0].stack is None, meta={"fold": f})
        outcomes.append(FoldOutcome(f, len(train_p), len(test_p), report, result))
        log.info("fold %d: quality LCC %s", f, report.tasks["quality"].overall.lcc)
    return KFoldResult(outcomes, mean_report([o.report for o in outcomes]))


# --- transfer ladder ---------------------------------------------------------

FULL = "full"
DEFAULT_SIZES = (0, 100, 200, 400, 800, 1600, 3200, 6400, 12800, FULL)


@dataclass(frozen=True)
class TransferPlan:
    sizes: tuple = DEFAULT_SIZES

    def __post_init__(self):
        sizes = tuple(FULL if str(s).lower() == FULL else int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        finite = [s for s in sizes if s != FULL]
        if FULL in sizes[:-1]:
            raise ValidationError("'full' may only be the last transfer size")
        if any(b <= a for a, b in zip(finite, finite[1:])) or any(s < 0 for s in finite):
            raise ValidationError("transfer sizes must be non-negative and strictly increasing")
        steps = [s for s in finite if s > 0]
        if any(b != 2 * a for a, b in zip(steps, steps[1:])):
            raise ValidationError("each few-shot size must double its predecessor")


def stratified_subsample(examples: Sequence[Example], size: int, seed: int = 0) -> list[Example]:
    """``size`` examples with counts per condition as equal as possible."""
    if size > len(examples):
        raise ValidationError(f"requested {size} combos but only {len(examples)} are available")
    rng = np.random.default_rng([seed, stable_hash("subsample", size)])
    by_cond = {c: [e for e in examples if e.key[1] == c] for c in CONDITIONS}
    for c in CONDITIONS:
        by_cond[c] = [by_cond[c][i] for i in rng.permutation(len(by_cond[c]))]
    quota = {c: 0 for c in CONDITIONS}
    remaining = size
    while remaining:
        open_ = [c for c in CONDITIONS if quota[c] < len(by_cond[c])]
        share, extra = divmod(remaining, len(open_))
        for j, c in enumerate(open_):
            take = min(share + (1 if j < extra else 0), len(by_cond[c]) - quota[c])
            quota[c] += take
            remaining -= take
    picked = [e for c in CONDITIONS for e in by_cond[c][:quota[c]]]
    return sorted(picked, key=lambda e: e.key)


@dataclass
class TransferOutcome:
    size: int | str
    n_train: int
    validation: LossParts
    report: EvalReport | None
    epochs: int = 0


def transfer_protocol(system: AssessmentSystem, train_ex: Sequence[Example], val_ex: Sequence[Example],
                      test_ex: Sequence[Example] | None, plan: TransferPlan, config: TrainConfig,
                      categories: Mapping[str, str] | None = None) -> list[TransferOutcome]:
    """Zero-, few- and full-shot adaptation of a trained system to out-of-domain data.

    Each finite size trains a copy of ``system`` on a stratified subsample
    of that many combos; size 0 evaluates ``system`` untouched.
    """
    for s in plan.sizes:
        if s != FULL and s > len(train_ex):
            raise ValidationError(f"transfer size {s} exceeds the {len(train_ex)} available OOD combos")
    outcomes = []
    use_waves = bool(train_ex) and train_ex[0].stack is None
    for s in plan.sizes:
        if s == 0:
            model = system
            epochs = 0
            chosen = []
        else:
            chosen = list(train_ex) if s == FULL else stratified_subsample(train_ex, s, config.seed)
            model = copy.deepcopy(system)
            r = fit(model, [("head", head_parameters(model), config.base_lr)], chosen, val_ex, config, TrainingLog(),
                    use_waves=use_waves, stage=f"transfer-{s}")
            epochs = r.epochs_run
        val = evaluate_loss(model, val_ex, config.batch_size, use_waves)
        report = (evaluate(model, test_ex, categories, use_waves, {"size": s})
                  if test_ex and categories is not None else None)
        outcomes.append(TransferOutcome(s, len(chosen), val, report, epochs))
        log.info("transfer size %s: validation loss %.4f", s, val.total)
    return outcomes
