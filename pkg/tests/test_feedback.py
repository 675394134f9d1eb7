import numpy as np
import pytest

from mqme import demogen, feedback as FB
from mqme.demogen import DegradedOracle, Trajectory
from mqme.errors import FormatError, UsageError
from mqme.sim import EnvConfig, Kind

TRAIN = (Kind.SHORTSTICK, Kind.LONGSTICK, Kind.GRIPPER)


@pytest.fixture(scope="module")
def pool576():
    ds = demogen.build_dataset(EnvConfig(layout_pool=0), quotas=(192, 4), embodiments=TRAIN)
    return ds


def test_oracle_score_examples():
    assert FB.oracle_score(Trajectory.from_rewards([0, 0, 1])) == pytest.approx(1 / 3)
    assert FB.oracle_score(Trajectory.from_rewards([0, 0, 0])) == 0


def test_shorter_success_scores_higher():
    cfg = EnvConfig(layout_pool=0)
    succ = []
    for seed in range(40):
        for eps in (0.0, 0.3):
            t = demogen.rollout(DegradedOracle(eps), cfg, Kind.MEDIUMSTICK, seed)
            if t.success:
                succ.append(t)
    succ.sort(key=lambda t: t.length)
    short, long = succ[0], succ[-1]
    assert short.length < long.length
    assert FB.oracle_score(short) > FB.oracle_score(long)


def test_preferences(pool576):
    prefs = FB.sample_preferences(pool576, 5000, seed=0)
    assert len(prefs) == 5000
    for p in prefs[:500]:
        si, sj = FB.oracle_score(p.i.resolve(pool576)), FB.oracle_score(p.j.resolve(pool576))
        assert si != sj
        assert (si > sj) == (p.mu == (1, 0))
    p = prefs[0]
    assert p.swapped().mu == (p.mu[1], p.mu[0]) and p.swapped().preferred == p.preferred


def test_preferences_n_invalid(small_dataset):
    with pytest.raises(UsageError):
        FB.sample_preferences(small_dataset, 0)


def test_triplets(pool576):
    trips = FB.sample_triplets(pool576, 32, seed=3)
    assert len(trips) == 32
    for t in trips:
        a, p, n = (FB.oracle_score(r.resolve(pool576)) for r in (t.anchor, t.positive, t.negative))
        assert a > p > n
    assert trips == FB.sample_triplets(pool576, 32, seed=3)
    assert trips != FB.sample_triplets(pool576, 32, seed=4)


def test_buckets_576(pool576):
    refs = FB.pooled_refs(pool576)
    assert len(refs) == 576
    b = FB.bucketize(pool576, 18)
    assert [len(x) for x in b.buckets] == [32] * 18
    union = [r for x in b.buckets for r in x]
    assert len(set(union)) == len(union) == 576


def test_buckets_are_sorted(small_dataset):
    assert len(FB.pooled_refs(small_dataset)) == 32
    ds = demogen.build_dataset(EnvConfig(layout_pool=0), quotas=(16, 4))
    assert len(FB.pooled_refs(ds)) == 64
    b = FB.bucketize(ds, 2)
    s = [[FB.oracle_score(r.resolve(ds)) for r in x] for x in b.buckets]
    assert max(s[0]) <= min(s[1])


def test_bucket_surplus_keeps_order(pool576):
    b = FB.bucketize(pool576, 18, bucket_size=30)
    s = [[FB.oracle_score(r.resolve(pool576)) for r in x] for x in b.buckets]
    assert all(max(a) <= min(c) for a, c in zip(s, s[1:]))
    with pytest.raises(UsageError):
        FB.bucketize(pool576, 0)
    with pytest.raises(UsageError):
        FB.bucketize(pool576, 18, bucket_size=40)


def test_feedback_round_trip(pool576, tmp_path):
    fb = FB.FeedbackSet(FB.sample_preferences(pool576, 50), FB.sample_triplets(pool576, 20),
                        FB.bucketize(pool576, 18), header="seed=0")
    text = FB.dumps_feedback(fb)
    back = FB.loads_feedback(text)
    assert FB.dumps_feedback(back) == text
    assert back.preferences == fb.preferences and back.triplets == fb.triplets
    FB.save_feedback(fb, tmp_path / "f.txt")
    assert FB.load_feedback(tmp_path / "f.txt").buckets.buckets == fb.buckets.buckets
    with pytest.raises(FormatError):
        FB.loads_feedback("P shortstick:train:0 shortstick:train:0 1 0\n")
    with pytest.raises(FormatError):
        FB.loads_feedback("Q nonsense\n")


def test_trajref_parse():
    r = FB.TrajRef(Kind.GRIPPER, "test", 12)
    assert FB.TrajRef.parse(str(r)) == r
    with pytest.raises(FormatError):
        FB.TrajRef.parse("gripper-test-12")
