import numpy as np
import pytest
from scipy import stats

from aimgate.buffers import (AGENT, EXPERT, Buffer, Transition, human_buffer,
                             load_buffer, novice_buffer, save_buffer,
                             transition_from_json, transition_to_json)
from aimgate.errors import EmptySourceError, InvariantViolation
from aimgate.spaces import symmetric_box

BOX2 = symmetric_box(2)


def _t(actor=EXPERT, step=0, done=False, outcome=None):
    return Transition(s=np.array([0.1, 0.2]), a=np.array([0.0, 0.0]),
                      s_next=np.array([0.3, 0.4]), actor=actor, done=done,
                      outcome=outcome, step_index=step)


def test_push_grows_and_enforces_actor():
    buf = human_buffer()
    for i in range(3):
        buf.push(_t(step=i))
    assert len(buf) == 3
    buf.push(_t(step=3))
    assert len(buf) == 4
    with pytest.raises(InvariantViolation):
        buf.push(_t(actor=AGENT))


def test_push_preserves_order():
    buf = novice_buffer()
    for i in range(2000):
        buf.push(_t(actor=AGENT, step=i))
    assert [t.step_index for t in buf.entries[:500]] == list(range(500))


def test_outcome_requires_done():
    with pytest.raises(InvariantViolation):
        _t(done=False, outcome="success")


def test_sample_single_entry_repeats():
    buf = human_buffer()
    buf.push(_t(step=7))
    got = buf.sample(4, np.random.default_rng(0))
    assert len(got) == 4
    assert all(t.step_index == 7 for t in got)


def test_sample_deterministic_for_seed():
    buf = human_buffer()
    for i in range(50):
        buf.push(_t(step=i))
    a = [t.step_index for t in buf.sample(32, np.random.default_rng(123))]
    b = [t.step_index for t in buf.sample(32, np.random.default_rng(123))]
    assert a == b


def test_sample_empty_raises():
    with pytest.raises(EmptySourceError):
        human_buffer().sample(1, np.random.default_rng(0))


def test_sample_uniformity_chisquare():
    # frequency of each entry over many draws should look uniform
    n_entries, draws = 100, 100_000
    buf = human_buffer()
    for i in range(n_entries):
        buf.push(_t(step=i))
    rng = np.random.default_rng(42)
    counts = np.zeros(n_entries)
    for t in buf.sample(draws, rng):
        counts[t.step_index] += 1
    _, p = stats.chisquare(counts)
    assert p > 0.001


def test_transition_jsonl_roundtrip(tmp_path):
    buf = human_buffer()
    rng = np.random.default_rng(3)
    for i in range(20):
        buf.push(Transition(s=rng.normal(size=2), a=rng.uniform(-1, 1, 2),
                            s_next=rng.normal(size=2), actor=EXPERT,
                            done=i == 19, outcome="timeout" if i == 19 else None,
                            step_index=i))
    path = tmp_path / "buf.jsonl"
    save_buffer(path, buf, BOX2)
    loaded = load_buffer(path, EXPERT, BOX2)
    assert len(loaded) == len(buf)
    for a, b in zip(buf.entries, loaded.entries):
        assert np.array_equal(a.s, b.s)
        assert np.array_equal(a.a, b.a)
        assert np.array_equal(a.s_next, b.s_next)
        assert (a.actor, a.done, a.outcome, a.step_index) == \
               (b.actor, b.done, b.outcome, b.step_index)


def test_transition_json_keys():
    line = transition_to_json(_t(), BOX2)
    doc = __import__("json").loads(line)
    assert set(doc) == {"s", "a", "s_next", "actor", "done", "outcome", "step"}
    t = transition_from_json(line, BOX2)
    assert t.actor == EXPERT
