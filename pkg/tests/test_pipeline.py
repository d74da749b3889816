import io

import numpy as np
import pytest

from growset.cleaner import Relabel
from growset.core import DataRecord, PipelineConfig, normalize
from growset.errors import CorruptCheckpoint, DimMismatch
from growset.formats import write_manifest
from growset.pipeline import Admitted, GrowthState, Rejected
from growset.synth import SynthSpec, TruthHook, generate

from conftest import unit_rows


def manifest_text(state):
    buf = io.StringIO()
    write_manifest(state.manifest, buf)
    return buf.getvalue()


def mm(rid, v, p=None):
    return DataRecord.build(rid, v, v if p is None else p, payload_ref=rid)


def test_first_record_and_duplicate():
    st = GrowthState(PipelineConfig(mode="multimodal"))
    v = normalize([0.3, 0.1, 0.9, 0.2])
    assert st.step(mm("a", v)) == Admitted(1.0, False, 0)
    second = st.step(mm("b", v))
    assert isinstance(second, Admitted) and second.gain == 0.0
    st.check_invariants()


def test_mismatched_pair_rejected():
    st = GrowthState(PipelineConfig(mode="multimodal", delta=0.3))
    res = st.step(mm("a", [1, 0, 0, 0], [0, 1, 0, 0]))
    assert isinstance(res, Rejected) and res.reason == "noise"
    assert st.counters.rejected == 1 and st.counters.seen == 1 and not st.manifest


def test_gain_uses_only_earlier_records(rng):
    data = unit_rows(rng, 60, 8)
    st = GrowthState(PipelineConfig(mode="unconditioned", k=3))
    st.grow(DataRecord(f"r{i}", v) for i, v in enumerate(data))
    for i in (5, 20, 59):
        d = 1.0 - data[:i].astype(np.float64) @ data[i].astype(np.float64)
        expect = np.float32(np.sort(d)[:3].mean())
        assert st.manifest[i].gain == pytest.approx(float(expect), abs=1e-6)


def test_empty_stream_and_fresh_checkpoint():
    cfg = PipelineConfig(mode="classification")
    st = GrowthState(cfg)
    before = st.checkpoint()
    st.grow([])
    assert st.checkpoint() == before
    back = GrowthState.resume(before)
    assert back.stats()["seen"] == 0 and back.config == cfg


def test_stats_counters(rng):
    st = GrowthState(PipelineConfig(mode="unconditioned"))
    s = st.stats()
    assert (s["seen"], s["admitted"], s["rejected"], s["relabeled"]) == (0, 0, 0, 0)
    data = unit_rows(rng, 100, 8)
    st.grow(DataRecord(f"r{i}", v) for i, v in enumerate(data))
    st.step(DataRecord("r3", data[3]))
    s = st.stats()
    assert s["admitted"] == 100 and sum(s["gain_histogram"]) == 100
    assert s["rejected"] == 1 and s["reject_reasons"] == {"duplicate_id": 1}
    assert s["seen"] == s["admitted"] + s["rejected"]


def test_dim_mismatch_raises():
    st = GrowthState(PipelineConfig(mode="unconditioned"))
    st.step(DataRecord.build("a", [1, 0, 0]))
    with pytest.raises(DimMismatch):
        st.step(DataRecord.build("b", [1, 0]))
    assert st.counters.seen == 1


def test_resume_with_other_dim_rejects():
    st = GrowthState(PipelineConfig(mode="unconditioned"))
    st.step(DataRecord.build("a", [1, 0, 0]))
    back = GrowthState.resume(st.checkpoint())
    with pytest.raises(DimMismatch):
        back.step(DataRecord.build("b", [1, 0, 0, 0]))


def test_missing_pair_is_counted_rejection():
    st = GrowthState(PipelineConfig(mode="multimodal"))
    res = st.step(DataRecord.build("a", [1, 0]))
    assert isinstance(res, Rejected) and res.reason == "MissingPair"
    assert st.counters.rejected == 1


def test_hook_failure_does_not_abort():
    def flaky(rec):
        if rec.id == "bad":
            raise RuntimeError("hook crashed")
        return Relabel(paired=rec.primary)
    st = GrowthState(PipelineConfig(mode="multimodal", delta=0.3), flaky)
    st.grow([mm("bad", [1, 0, 0], [0, 1, 0]), mm("ok", [0, 0, 1], [0, 1, 0])])
    assert st.reject_reasons == {"hook_failure": 1}
    assert st.manifest[0].record.id == "ok" and st.manifest[0].relabeled


def test_gain_decay_iid():
    d = generate(SynthSpec(clusters=2, dim=16, points_per_cluster=500, mode="unconditioned", seed=2))
    st = GrowthState(PipelineConfig(mode="unconditioned"))
    st.grow(d.records)
    g = np.array([r.gain for r in st.manifest])
    dec = g.reshape(10, -1).mean(axis=1)
    assert dec[-1] < dec[0]


def test_planted_noise_relabeled_with_truth_hook():
    d = generate(SynthSpec(clusters=2, dim=32, points_per_cluster=500, noise_fraction=0.25, seed=4))
    st = GrowthState(PipelineConfig(mode="multimodal", delta=0.5), TruthHook(d.truth))
    st.grow(d.records)
    frac = st.counters.relabeled / len(d.records)
    assert 0.20 <= frac <= 0.30
    relabeled = {r.record.id for r in st.manifest if r.relabeled}
    assert relabeled <= d.noise_ids


def test_label_noise_scores_below_threshold():
    d = generate(SynthSpec(clusters=2, dim=16, points_per_cluster=500, noise_fraction=0.25,
                           mode="classification", spread=0.6, seed=1))
    st = GrowthState(PipelineConfig(mode="classification", delta=0.5, k=8))
    st.grow(d.records)
    assert st.counters.uncleaned == 100  # default warmup
    scored = {r.record.id for r in st.manifest[100:]}
    caught = {r.record.id for r in st.manifest if r.relabeled}
    noisy = d.noise_ids & scored
    assert len(caught & noisy) / len(noisy) >= 0.90
    assert len(caught - d.noise_ids) / len(scored - d.noise_ids) <= 0.05
    # majority relabel restores the planted label
    truth = {t["id"]: t["true_label"] for t in d.truth}
    fixed = [r for r in st.manifest if r.relabeled and r.record.id in truth]
    assert np.mean([r.record.label == truth[r.record.id] for r in fixed]) > 0.95


def test_split_resume_equals_unsplit():
    d = generate(SynthSpec(clusters=3, dim=16, points_per_cluster=667, noise_fraction=0.1, seed=9))
    recs = d.records[:2000]
    cfg = PipelineConfig(mode="multimodal", delta=0.4, seed=11)
    whole = GrowthState(cfg, TruthHook(d.truth)).grow(recs)
    first = GrowthState(cfg, TruthHook(d.truth)).grow(recs[:1000])
    second = GrowthState.resume(first.checkpoint(), TruthHook(d.truth)).grow(recs[1000:])
    assert manifest_text(second) == manifest_text(whole)
    assert second.checkpoint() == whole.checkpoint()


def test_online_threshold_resume():
    d = generate(SynthSpec(dim=16, points_per_cluster=300, noise_fraction=0.2, seed=3))
    cfg = PipelineConfig(mode="multimodal", delta_mode="online_stats", z=1.5, warmup=50, delta=0.3)
    whole = GrowthState(cfg).grow(d.records)
    part = GrowthState(cfg).grow(d.records[:250])
    rest = GrowthState.resume(part.checkpoint()).grow(d.records[250:])
    assert rest.checkpoint() == whole.checkpoint()


def test_corrupt_checkpoint():
    st = GrowthState(PipelineConfig(mode="unconditioned"))
    st.step(DataRecord.build("a", [1, 0, 0]))
    blob = st.checkpoint()
    for bad in (blob[:-1], b"XXXX" + blob[4:], blob[:20], b""):
        with pytest.raises(CorruptCheckpoint):
            GrowthState.resume(bad)
    flipped = bytearray(blob)
    flipped[30] ^= 1
    with pytest.raises(CorruptCheckpoint):
        GrowthState.resume(bytes(flipped))


def test_threaded_hooks_match_serial():
    d = generate(SynthSpec(dim=16, points_per_cluster=200, noise_fraction=0.3, seed=5))
    cfg = PipelineConfig(mode="multimodal", delta=0.5)
    serial = GrowthState(cfg, TruthHook(d.truth)).grow(d.records)
    threaded = GrowthState(cfg, TruthHook(d.truth)).grow(d.records, threads=4)
    assert manifest_text(serial) == manifest_text(threaded)
    assert threaded.counters == serial.counters


def test_progress_callback_cadence(rng):
    calls = []
    st = GrowthState(PipelineConfig(mode="unconditioned", progress_every=10))
    st.grow((DataRecord(f"r{i}", v) for i, v in enumerate(unit_rows(rng, 35, 4))),
            progress=lambda s: calls.append(s.counters.seen))
    assert calls == [10, 20, 30]
