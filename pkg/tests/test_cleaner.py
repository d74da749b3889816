import sys
import textwrap

import numpy as np
import pytest

from growset.cleaner import (
    Cleaner,
    CleanerConfig,
    CommandHook,
    OnlineStats,
    Pass,
    Reject,
    Relabel,
    classify_score,
    hook_request,
    majority_label,
    parse_hook_response,
    score_pair,
)
from growset.core import DataRecord, normalize, seeded_rng
from growset.errors import ConfigError, EmptyCleanSet, HookFailure, MissingPair

E0 = [1, 0, 0, 0]
E1 = [0, 1, 0, 0]


def pair(sim, rid="a"):
    return DataRecord.build(rid, E0, [sim, np.sqrt(1 - sim * sim), 0, 0], payload_ref="p://" + rid)


def test_score_pair_examples():
    assert score_pair(DataRecord.build("x", E0, E0)) == pytest.approx(1.0)
    assert score_pair(DataRecord.build("x", E0, E1)) == 0.0
    assert score_pair(DataRecord.build("x", E0, [-1, 0, 0, 0])) == pytest.approx(-1.0)
    with pytest.raises(MissingPair):
        score_pair(DataRecord.build("x", E0))


def test_classify_score_examples():
    assert classify_score(2, [2, 2, 2, 2]) == 1.0
    assert classify_score(2, [0, 1, 0, 1]) == 0.0
    assert classify_score(2, [2, 1, 0, 1]) == 0.25
    with pytest.raises(EmptyCleanSet):
        classify_score(0, [])


def test_majority_label_tie_goes_nearest():
    assert majority_label([3, 1, 1, 3]) == 3
    assert majority_label([1, 3, 3]) == 3
    assert majority_label([]) is None


def test_clean_fixed_threshold_examples():
    c = Cleaner(CleanerConfig(delta=0.3))
    out = c.clean(pair(0.9), score_pair)
    assert isinstance(out, Pass) and not out.relabeled
    out = c.clean(pair(0.1), score_pair, lambda r: Relabel(paired=r.primary))
    assert isinstance(out, Pass) and out.relabeled and out.score == pytest.approx(1.0)
    assert np.array_equal(out.record.paired, out.record.primary)
    out = c.clean(pair(0.1), score_pair)
    assert isinstance(out, Reject) and out.reason == "noise"


def test_clean_hook_outcomes():
    c = Cleaner(CleanerConfig(delta=0.3))
    assert c.clean(pair(0.1), score_pair, lambda r: None).reason == "noise"
    assert c.clean(pair(0.1), score_pair, lambda r: Relabel(paired=np.array(E1))).detail \
        == "still below threshold after relabel"

    def boom(r):
        raise RuntimeError("x")
    assert c.clean(pair(0.1), score_pair, boom).reason == "hook_failure"
    assert c.clean(pair(0.1), score_pair, lambda r: Relabel(paired=np.ones(3))).reason == "hook_failure"
    assert c.clean(pair(0.1), score_pair, lambda r: Relabel(paired=np.zeros(4))).reason == "hook_failure"
    # the hook is not consulted for clean records
    assert c.clean(pair(0.9), score_pair, boom).relabeled is False


def test_online_stats_matches_numpy():
    x = seeded_rng(0, "t").normal(0.4, 0.1, 5000)
    s = OnlineStats()
    for v in x:
        s.update(float(v))
    assert s.mean == pytest.approx(x.mean(), abs=1e-12)
    assert s.std == pytest.approx(x.std(), rel=1e-9)
    assert s.threshold(1.0, 100, 0.3) == pytest.approx(x.mean() - x.std(), rel=1e-9)
    assert OnlineStats().threshold(1.0, 100, 0.3) == 0.3


def test_online_threshold_uses_prior_scores_only():
    cfg = CleanerConfig(delta_mode="online_stats", delta=0.0, z=1.0, warmup=3)
    c = Cleaner(cfg)
    for v in (0.8, 0.9, 1.0):
        c.clean(pair(v), score_pair)
    before = c.threshold
    assert before == pytest.approx(0.9 - np.std([0.8, 0.9, 1.0]), abs=1e-6)
    out = c.clean(pair(0.1), score_pair, lambda r: Relabel(paired=r.primary))
    assert out.relabeled
    # the pre-relabel score was recorded, not the rescored 1.0
    assert c.stats.count == 4
    assert c.stats.mean == pytest.approx((0.8 + 0.9 + 1.0 + 0.1) / 4, abs=1e-6)


def test_online_stats_converges_on_stream():
    rng = seeded_rng(5, "t")
    c = Cleaner(CleanerConfig(delta_mode="online_stats", z=2.0, warmup=50))
    for s in rng.normal(0.6, 0.05, 3000):
        c.stats.update(float(s))
    assert c.threshold == pytest.approx(0.5, abs=0.01)


def test_cleaner_config_validation():
    with pytest.raises(ConfigError):
        CleanerConfig(delta_mode="dynamic")
    with pytest.raises(ConfigError):
        CleanerConfig(delta=3.0)


def test_hook_protocol_messages():
    r = DataRecord.build("id1", E0, label=4, payload_ref="s3://x")
    assert hook_request(r) == '{"id":"id1","payload_ref":"s3://x","label":4}'
    assert parse_hook_response("{}") is None
    assert parse_hook_response('{"label": 2}').label == 2
    np.testing.assert_array_equal(parse_hook_response('{"paired_embedding": [0, 1]}').paired, [0, 1])
    for bad in ("nope", "[1]", '{"label": "a"}', '{"label": true}', '{"paired_embedding": ["x"]}'):
        with pytest.raises(HookFailure):
            parse_hook_response(bad)


HOOK_SRC = textwrap.dedent("""
    import json, sys, time
    for line in sys.stdin:
        req = json.loads(line)
        if req["id"] == "slow":
            time.sleep(5)
        if req["id"] == "die":
            sys.exit(1)
        print(json.dumps({"paired_embedding": [1, 0, 0, 0]}), flush=True)
""")


@pytest.fixture
def hook_script(tmp_path):
    p = tmp_path / "hook.py"
    p.write_text(HOOK_SRC)
    return [sys.executable, str(p)]


def test_command_hook_roundtrip_and_failures(hook_script):
    with CommandHook(hook_script, timeout=1.0, workers=2) as hook:
        res = hook(pair(0.1, "a"))
        np.testing.assert_array_equal(res.paired, E0)
        c = Cleaner(CleanerConfig(delta=0.3))
        assert c.clean(pair(0.1, "b"), score_pair, hook).relabeled
        with pytest.raises(HookFailure, match="timed out"):
            hook(pair(0.1, "slow"))
        with pytest.raises(HookFailure):
            hook(pair(0.1, "die"))
        # a fresh process serves the next request
        assert hook(pair(0.1, "c")).paired is not None


def test_command_hook_missing_binary():
    with pytest.raises(HookFailure, match="cannot start"):
        CommandHook(["/nonexistent/hook"])(pair(0.1))
