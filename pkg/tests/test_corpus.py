import json
from pathlib import Path

import numpy as np
import pytest
from conftest import stub_assets
from hypothesis import given, strategies as st

from hasanet import corpus, dsp
from hasanet.corpus import CONDITIONS, DatasetManifest, UtteranceRecord
from hasanet.errors import ValidationError


def test_in_domain_full_scale_counts(tmp_path):
    assets = stub_assets(tmp_path, {"validation": 770, "test": 824})
    m = corpus.build_manifest(assets, corpus.IN_DOMAIN, seed=0)
    assert len(m) == 7970
    assert m.condition_counts() == {c: 1594 for c in CONDITIONS}
    kinds = [r.vocoder_kind for r in m if r.condition == "vocoded"]
    assert kinds.count("tone") == 797 and kinds.count("noise") == 797
    assert corpus.IN_DOMAIN.reference_counts["records"] == 7970


def test_ood_full_scale_counts(tmp_path):
    assets = stub_assets(tmp_path, {"train": 4620, "test": 1260})
    m = corpus.build_manifest(assets, corpus.OOD, seed=0)
    train = m.subset([c.utterance_id for c in assets.clean if c.subset == "train"])
    test = m.subset([c.utterance_id for c in assets.clean if c.subset == "test"])
    assert (len(train), len(test)) == (23100, 6300)
    assert corpus.OOD.reference_counts["records_train"] == 23100 and corpus.OOD.reference_counts["records_test"] == 6300


@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 1000))
def test_every_clean_utterance_under_every_condition(tmp_path_factory, n_val, n_test, seed):
    root = tmp_path_factory.mktemp("a")
    assets = stub_assets(root, {"validation": n_val, "test": n_test})
    m = corpus.build_manifest(assets, corpus.IN_DOMAIN, seed=seed)
    assert len(m) == 5 * (n_val + n_test)
    assert m.condition_counts() == {c: n_val + n_test for c in CONDITIONS}
    for r in m:
        if r.condition in ("noisy", "enhanced"):
            pool = dsp.TRAIN_SNRS if r.utterance_id.startswith("validation") else dsp.TEST_SNRS
            assert r.snr_db in pool


def test_snr_balanced_over_pool(tmp_path):
    m = corpus.build_manifest(stub_assets(tmp_path, {"test": 40}), corpus.IN_DOMAIN, seed=2)
    snrs = [r.snr_db for r in m if r.condition == "noisy"]
    assert sorted(set(snrs)) == sorted(dsp.TEST_SNRS) and all(snrs.count(s) == 10 for s in dsp.TEST_SNRS)


def test_noisy_and_enhanced_share_snr_and_reverb_pairs_share_rir(tmp_path):
    m = corpus.build_manifest(stub_assets(tmp_path, {"validation": 12}), corpus.IN_DOMAIN, seed=1)
    by = m.by_record()
    for uid in m.utterance_ids:
        assert by[(uid, "noisy")].snr_db == by[(uid, "enhanced")].snr_db
        assert by[(uid, "reverberation")].rir_id == by[(uid, "dereverberation")].rir_id


def test_manifest_deterministic_and_seed_sensitive(tmp_path):
    assets = stub_assets(tmp_path, {"validation": 30, "test": 30})
    a = corpus.build_manifest(assets, corpus.IN_DOMAIN, seed=5).to_jsonl()
    assert a == corpus.build_manifest(assets, corpus.IN_DOMAIN, seed=5).to_jsonl()
    assert a != corpus.build_manifest(assets, corpus.IN_DOMAIN, seed=6).to_jsonl()


def test_empty_clean_set_gives_empty_manifest(tmp_path):
    assert len(corpus.build_manifest(stub_assets(tmp_path, {}), corpus.IN_DOMAIN)) == 0


def test_missing_assets_listed(tmp_path):
    assets = stub_assets(tmp_path, {"validation": 3})
    for c in assets.clean[:2]:
        (tmp_path / c.path).unlink()
    with pytest.raises(ValidationError) as e:
        corpus.build_manifest(assets, corpus.IN_DOMAIN)
    assert "2 missing" in str(e.value)
    for c in assets.clean[:2]:
        assert c.path in str(e.value)


def test_unknown_subset_rejected(tmp_path):
    with pytest.raises(ValidationError):
        corpus.build_manifest(stub_assets(tmp_path, {"elsewhere": 2}), corpus.IN_DOMAIN)


def test_record_invariants():
    ok = dict(utterance_id="u", audio_path="a", source_clean_path="c")
    UtteranceRecord(condition="noisy", snr_db=5.0, **ok)
    with pytest.raises(ValidationError):
        UtteranceRecord(condition="noisy", **ok)
    with pytest.raises(ValidationError):
        UtteranceRecord(condition="vocoded", vocoder_kind="tone", snr_db=1.0, **ok)
    with pytest.raises(ValidationError):
        UtteranceRecord(condition="reverberation", **ok)
    with pytest.raises(ValidationError):
        UtteranceRecord(condition="vocoded", vocoder_kind="chirp", **ok)
    with pytest.raises(ValidationError):
        UtteranceRecord(condition="whispered", **ok)
    with pytest.raises(ValidationError):
        UtteranceRecord(condition="noisy", snr_db=0.0, quality_target=1.5, **ok)


def test_manifest_rejects_duplicates_and_bad_role():
    r = UtteranceRecord("u", "noisy", "a", "c", snr_db=1.0)
    with pytest.raises(ValidationError):
        DatasetManifest([r, r])
    with pytest.raises(ValidationError):
        DatasetManifest([], role="dev")


def test_manifest_jsonl_round_trip(tmp_path):
    m = corpus.build_manifest(stub_assets(tmp_path / "a", {"test": 4}), corpus.IN_DOMAIN, seed=3, role="test")
    m.save(tmp_path / "m.jsonl")
    back = DatasetManifest.load(tmp_path / "m.jsonl")
    assert back.records == m.records and back.role == "test" and back.provenance["seed"] == 3
    fields = set(json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0]))
    assert fields == {"utterance_id", "condition", "audio_path", "source_clean_path", "snr_db", "rir_id",
                      "vocoder_kind", "audiogram_id", "quality_target", "intelligibility_target"}


def test_render_writes_every_record(tmp_path, demo_assets):
    m = corpus.build_manifest(demo_assets, corpus.IN_DOMAIN, seed=3)
    corpus.render_manifest(m, demo_assets, tmp_path / "out")
    for r in m:
        x = dsp.read_wav(tmp_path / "out" / r.audio_path)
        clean = dsp.read_wav(tmp_path / "out" / r.source_clean_path)
        assert len(x) == len(clean) and np.max(np.abs(x.samples)) <= 1.0


def test_render_is_byte_identical(tmp_path, demo_assets):
    m = corpus.build_manifest(demo_assets, corpus.IN_DOMAIN, seed=3).subset(["utt_test_00000", "utt_validation_00001"])
    corpus.render_manifest(m, demo_assets, tmp_path / "a")
    corpus.render_manifest(m, demo_assets, tmp_path / "b")
    for r in m:
        assert (tmp_path / "a" / r.audio_path).read_bytes() == (tmp_path / "b" / r.audio_path).read_bytes()


def test_synth_noise_kinds_and_rir(rng):
    for kind in corpus.NOISE_KINDS:
        y = corpus.synth_noise(kind, np.random.default_rng(0), 0.2)
        assert y.size == 3200 and abs(dsp.rms(y) - 0.1) < 1e-9
    with pytest.raises(ValidationError):
        corpus.synth_noise("hum", rng, 0.1)
    h = corpus.synth_rir(np.random.default_rng(1), 0.4, drr_db=3.0)
    assert np.max(np.abs(h)) == pytest.approx(0.9)
    d = dsp.direct_to_reverberant_db(dsp.RoomImpulseResponse(h, dsp.CANONICAL_RATE))
    assert 0.0 < d < 6.0


def test_rir_table_sidecar(demo_assets):
    table = corpus.load_rir_table(demo_assets.root)
    assert [r.rir_id for r in table] == ["rir000", "rir001", "rir002", "rir003"]
    assert set(corpus.rir_effects(demo_assets)) == {r.rir_id for r in table}


def test_stable_hash_and_utterance_rng():
    assert corpus.stable_hash("a", 1) == corpus.stable_hash("a", 1) != corpus.stable_hash("a", 2)
    a = corpus.utterance_rng(0, "x").standard_normal(3)
    assert np.array_equal(a, corpus.utterance_rng(0, "x").standard_normal(3))
