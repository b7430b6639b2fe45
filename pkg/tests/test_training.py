import copy

import numpy as np
import pytest
import torch

from conftest import stub_assets
from hasanet import audiograms, corpus, features, metrics, training
from hasanet.audiograms import AudiogramSplit, NORMAL_ID
from hasanet.corpus import CONDITIONS, DatasetManifest, UtteranceRecord
from hasanet.errors import CapabilityError, TrainingError, ValidationError
from hasanet.model import AssessmentSystem, HASANet, ModelConfig
from hasanet.targets import ScoreProvider
from hasanet.training import (DEFAULT_SIZES, FULL, Checkpoint, Corpus, PairingPlan, TrainConfig, TransferPlan,
                              build_pairing, fold_pairings, kfold_partitions, random_pairing)

FAST = dict(batch_size=8, max_epochs=3, patience=3, base_lr=3e-3)


@pytest.fixture(scope="module")
def split():
    return audiograms.split_catalog(audiograms.generate_catalog(0), 0)


@pytest.fixture(scope="module")
def small(tmp_path_factory, split):
    """Rendered 10-utterance corpus with mock-provider stacks and waveforms."""
    root = tmp_path_factory.mktemp("small")
    assets = corpus.synthesize_assets(root / "assets", {"validation": 6, "test": 4}, seed=3,
                                      duration=(0.5, 0.7), n_rirs=4)
    m = corpus.build_manifest(assets, corpus.IN_DOMAIN, seed=3)
    corpus.render_manifest(m, assets, root / "audio")
    catalog = split.train + split.test
    provider = features.make_provider("mock")
    c = Corpus(m, {a.id: audiograms.make_pattern(a) for a in catalog}, {a.id: a.category for a in catalog},
               ScoreProvider.synthetic(0, corpus.rir_effects(assets)),
               stacks=training.extract_features(m, root / "audio", provider),
               waves=training.load_waves(m, root / "audio"))
    return c, provider


def tiny_system(seed=0, encoder=None):
    cfg = ModelConfig(feature_dim_in=32, n_layers=4, fusion_dim=16, blstm_units=8, trunk_dense_units=8,
                      attention_heads=2)
    return AssessmentSystem(HASANet(cfg, seed), encoder)


def examples(small, split, role="train", pool_role=None, ids=None):
    c, _ = small
    m = c.manifest if ids is None else c.manifest.subset(ids)
    return c.examples(build_pairing(m, split, role, seed=0, pool_role=pool_role))


# --- pairing -----------------------------------------------------------------

def test_single_record_gives_three_combos(split):
    m = DatasetManifest([UtteranceRecord("u", "noisy", "a", "c", snr_db=5.0)])
    plan = build_pairing(m, split, "train")
    assert len(plan) == 3 and sum(c[2] == NORMAL_ID for c in plan.combos) == 1
    train_ids = set(split.ids("train"))
    assert all(c[2] in train_ids for c in plan.combos)


@pytest.mark.parametrize("role", ["train", "validation", "test"])
def test_pairing_counts_and_pools(tmp_path, split, role):
    m = corpus.build_manifest(stub_assets(tmp_path, {"validation": 7, "test": 5}), corpus.IN_DOMAIN)
    plan = build_pairing(m, split, role, seed=1)
    assert len(plan) == 3 * len(m)
    assert {c[2] for c in plan.combos} <= set(split.ids(role))
    assert plan.combos == build_pairing(m, split, role, seed=1).combos
    assert plan.combos != build_pairing(m, split, role, seed=2).combos


def test_full_scale_fold_combo_counts(tmp_path, split):
    m = corpus.build_manifest(stub_assets(tmp_path, {"validation": 770, "test": 824}), corpus.IN_DOMAIN)
    folds = kfold_partitions(training.kfold_units(m, "record"), 5)
    assert [len(f) for f in folds] == [1594] * 5
    for f in (0, 3):
        train_p, val_p, test_p = fold_pairings(m, split, folds, f, unit="record", val_fraction=0.0)
        assert (len(train_p), len(test_p)) == (19128, 4782)
        assert val_p is None


def test_utterance_folds_sizes_disjoint_and_complete(tmp_path, split):
    ids = [f"utt{i:04d}" for i in range(1594)]
    folds = kfold_partitions(ids, 5)
    assert sorted(len(f) for f in folds) == [318, 319, 319, 319, 319]
    union = [u for f in folds for u in f]
    assert sorted(union) == ids and len(set(union)) == len(union)
    assert kfold_partitions(list(reversed(ids)), 5) == folds


def test_fold_keeps_conditions_together(tmp_path, split):
    m = corpus.build_manifest(stub_assets(tmp_path, {"validation": 20, "test": 10}), corpus.IN_DOMAIN)
    folds = kfold_partitions(m.utterance_ids, 5)
    train_p, val_p, test_p = fold_pairings(m, split, folds, 2)
    tr, va, te = (set(p.utterance_ids) for p in (train_p, val_p, test_p))
    assert not (tr & te) and not (va & te) and not (tr & va)
    assert te == set(folds[2]) and tr | va | te == set(m.utterance_ids)
    for p in (train_p, test_p):
        conds = {}
        for uid, cond, _ in p.combos:
            conds.setdefault(uid, set()).add(cond)
        assert all(v == set(CONDITIONS) for v in conds.values())


def test_kfold_rejections():
    with pytest.raises(ValidationError):
        kfold_partitions(["a", "b"], 3)
    with pytest.raises(ValidationError):
        kfold_partitions(["a", "b"], 1)


def test_pairing_plan_invariants(split):
    with pytest.raises(ValidationError):
        PairingPlan((("u", "noisy", "a"), ("u", "noisy", "a"), ("u", "noisy", "b")), "train")
    with pytest.raises(ValidationError):
        PairingPlan((("u", "noisy", "a"),), "train")
    small_pool = AudiogramSplit(split.train[:1] + tuple(a for a in split.train if a.is_normal), (), ())
    m = DatasetManifest([UtteranceRecord("u", "noisy", "a", "c", snr_db=5.0)])
    with pytest.raises(ValidationError, match="pool"):
        build_pairing(m, small_pool, "train")


def test_random_pairing_one_per_record(tmp_path):
    m = corpus.build_manifest(stub_assets(tmp_path, {"train": 30, "test": 10}), corpus.OOD)
    ids = [a.id for a in audiograms.generate_catalog(0)]
    plan = random_pairing(m, ids, seed=4)
    assert len(plan) == len(m) and plan.per_record == 1
    assert plan.combos == random_pairing(m, ids, seed=4).combos
    assert len({c[2] for c in plan.combos}) > 10


# --- training ----------------------------------------------------------------

def test_config_validation():
    TrainConfig()
    for bad in (dict(base_lr=0), dict(provider_lr=-1e-5), dict(finetune_mode="FULL"), dict(optimizer="sgd"),
                dict(batch_size=0), dict(patience=0), dict(base_lr="x"), dict(max_epochs=1.5), dict(seed=True)):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)
    c = TrainConfig()
    assert (c.base_lr, c.provider_lr, c.batch_size, c.max_epochs, c.patience) == (1e-4, 1e-5, 16, 100, 10)


def test_zero_epochs_returns_initialisation(small, split):
    train_ex = examples(small, split, "train", ids=small[0].manifest.utterance_ids[:6])
    val_ex = examples(small, split, "validation", ids=small[0].manifest.utterance_ids[6:])
    system = tiny_system()
    init = copy.deepcopy(system.state_dict())
    result, log = training.train(system, train_ex, val_ex, TrainConfig(max_epochs=0))
    assert result.epochs_run == 0 and result.best_epoch == 0
    assert all(torch.equal(init[k], v) for k, v in system.state_dict().items())
    assert len(log.rows) == 1


def test_training_is_deterministic_and_improves(small, split):
    ids = small[0].manifest.utterance_ids
    train_ex = examples(small, split, "train", ids=ids[:7])
    val_ex = examples(small, split, "validation", ids=ids[7:])
    curves, states = [], []
    for _ in range(2):
        system = tiny_system(seed=5)
        result, log = training.train(system, train_ex, val_ex, TrainConfig(seed=5, **FAST))
        curves.append(log.curve("validation"))
        states.append(system.state_dict())
    assert curves[0] == curves[1]
    assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])
    assert min(curves[0][1:]) < curves[0][0]
    assert log.to_csv().splitlines()[0] == "epoch,split,loss_total,loss_q,loss_i,lr"


def test_best_validation_state_is_kept(small, split):
    ids = small[0].manifest.utterance_ids
    train_ex = examples(small, split, "train", ids=ids[:7])
    val_ex = examples(small, split, "validation", ids=ids[7:])
    system = tiny_system(seed=6)
    result, log = training.train(system, train_ex, val_ex, TrainConfig(seed=6, **FAST))
    assert training.evaluate_loss(system, val_ex, 8).total == pytest.approx(min(log.curve()), rel=1e-6)
    assert result.best_validation.total == min(log.curve())


def test_non_finite_input_aborts_with_location(small, split):
    ids = small[0].manifest.utterance_ids
    train_ex = examples(small, split, "train", ids=ids[:2])
    val_ex = examples(small, split, "validation", ids=ids[7:8])
    bad = copy.copy(train_ex[0])
    bad.stack = train_ex[0].stack.copy()
    bad.stack[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 1, batch \d+: non-finite activations after layer 'fusion'"):
        training.train(tiny_system(), [bad] + train_ex[1:], val_ex, TrainConfig(max_epochs=1, batch_size=4))


def test_empty_sets_rejected(small, split):
    ex = examples(small, split, "test", ids=small[0].manifest.utterance_ids[:1])
    with pytest.raises(ValidationError):
        training.train(tiny_system(), [], ex, TrainConfig(max_epochs=1))
    with pytest.raises(ValidationError):
        training.train(tiny_system(), ex, [], TrainConfig(max_epochs=1))


def test_checkpoint_round_trip(tmp_path, small, split):
    ex = examples(small, split, "test", ids=small[0].manifest.utterance_ids[:2])
    system = tiny_system(seed=3)
    ck = Checkpoint.capture(system, "mock", "train", 3, training.data_fingerprint(ex), note="x")
    ck.save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck")
    assert back.meta() == ck.meta()
    a = training.predict(system, ex)
    b = training.predict(back.build(), ex)
    assert all(np.array_equal(a[k].frame_quality, b[k].frame_quality) for k in a)
    with pytest.raises(ValidationError):
        Checkpoint.load(tmp_path)


# --- fine-tuning -------------------------------------------------------------

def _ft_sets(small, split):
    ids = small[0].manifest.utterance_ids
    return examples(small, split, "train", ids=ids[:2]), examples(small, split, "validation", ids=ids[8:9])


def test_partial_finetune_freezes_front_end(small, split):
    train_ex, val_ex = _ft_sets(small, split)
    system = tiny_system(encoder=features.make_provider("mock"))
    r = training.finetune(system, "PF", train_ex, val_ex, TrainConfig(max_epochs=1, batch_size=4, patience=1))
    assert r.frozen_unchanged() and r.hashes_before["conv"] == r.hashes_after["conv"]
    assert r.update_counts["transformer"] > 0 and r.update_counts["conv"] == 0


def test_entire_finetune_updates_every_group(small, split):
    train_ex, val_ex = _ft_sets(small, split)
    system = tiny_system(encoder=features.make_provider("mock"))
    r = training.finetune(system, "EF", train_ex, val_ex, TrainConfig(max_epochs=1, batch_size=4, patience=1))
    assert all(n > 0 for n in r.update_counts.values())
    assert r.stages[0]["groups"] == {"head": 1e-4, "transformer": 1e-5, "conv": 1e-5}


def test_two_stage_learning_rates(small, split):
    train_ex, val_ex = _ft_sets(small, split)
    system = tiny_system(encoder=features.make_provider("mock"))
    r = training.finetune(system, "TWO_STAGE", train_ex, val_ex, TrainConfig(max_epochs=1, batch_size=4, patience=1))
    assert r.stage_lrs == [1e-4, 1e-5]
    assert [s["name"] for s in r.stages] == ["stage1", "stage2"]
    assert set(r.stages[0]["groups"]) == {"head"}


def test_finetune_needs_tunable_provider(small, split):
    train_ex, val_ex = _ft_sets(small, split)
    with pytest.raises(CapabilityError):
        training.check_tunable(features.make_provider("spectrogram"), "PF")
    with pytest.raises(CapabilityError):
        training.finetune(tiny_system(), "EF", train_ex, val_ex, TrainConfig(max_epochs=1))
    training.check_tunable(features.make_provider("spectrogram"), "none")
    with pytest.raises(ValidationError):
        training.finetune(tiny_system(), "LoRA", train_ex, val_ex, TrainConfig(max_epochs=1))


# --- transfer ----------------------------------------------------------------

def test_default_transfer_plan():
    assert TransferPlan().sizes == (0, 100, 200, 400, 800, 1600, 3200, 6400, 12800, FULL)
    assert DEFAULT_SIZES[-1] == "full"
    assert TransferPlan((0, 50, 100, "FULL")).sizes == (0, 50, 100, FULL)


@pytest.mark.parametrize("sizes", [(0, 100, 300), (100, 0), (0, FULL, 100), (0, 100, 100), (-1, 0)])
def test_bad_transfer_plans(sizes):
    with pytest.raises(ValidationError):
        TransferPlan(sizes)


def test_stratified_subsample(small, split):
    ex = examples(small, split, "train")
    sub = training.stratified_subsample(ex, 20, seed=1)
    counts = {c: sum(e.key[1] == c for e in sub) for c in CONDITIONS}
    assert counts == {c: 4 for c in CONDITIONS}
    assert [e.key for e in sub] == [e.key for e in training.stratified_subsample(ex, 20, seed=1)]
    assert len(training.stratified_subsample(ex, 7, seed=1)) == 7
    with pytest.raises(ValidationError):
        training.stratified_subsample(ex, len(ex) + 1)


def test_transfer_size_zero_leaves_system_untouched(small, split):
    ids = small[0].manifest.utterance_ids
    train_ex = examples(small, split, "train", ids=ids[:6])
    val_ex = examples(small, split, "validation", ids=ids[6:8])
    test_ex = examples(small, split, "test", ids=ids[8:])
    system = tiny_system(seed=2)
    init = copy.deepcopy(system.state_dict())
    out = training.transfer_protocol(system, train_ex, val_ex, test_ex, TransferPlan((0, 10, 20, FULL)),
                                     TrainConfig(**FAST), small[0].categories)
    assert [o.size for o in out] == [0, 10, 20, FULL]
    assert [o.n_train for o in out] == [0, 10, 20, len(train_ex)]
    assert out[0].epochs == 0 and out[0].report is not None
    assert all(torch.equal(init[k], v) for k, v in system.state_dict().items())
    with pytest.raises(ValidationError, match="exceeds"):
        training.transfer_protocol(system, train_ex, val_ex, None, TransferPlan((0, 1000)), TrainConfig(**FAST))


# --- k-fold ------------------------------------------------------------------

def test_kfold_aggregate_is_mean_of_folds(small, split):
    c, _ = small
    res = training.kfold_cv(c, split, lambda: tiny_system(1), TrainConfig(batch_size=8, max_epochs=1, patience=1),
                            k=5, val_fraction=0.2)
    assert len(res.folds) == 5
    assert sum(o.n_test_combos for o in res.folds) == 3 * len(c.manifest)
    for task in ("quality", "intelligibility"):
        for m in ("mse", "lcc", "srcc"):
            vals = [o.report.tasks[task].overall.get(m) for o in res.folds]
            vals = [v for v in vals if v is not None]
            agg = res.aggregate.tasks[task].overall.get(m)
            assert agg == pytest.approx(float(np.mean(vals)), abs=1e-12)
