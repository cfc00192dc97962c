import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast.errors import NumericError
from gridcast.nn import Module
from gridcast.tensor_core import Tensor, mse
from gridcast.training import (ETA_MAX, SgdrSchedule, Snapshot, SnapshotStore, TrainHistory, TrainingAborted,
                               lr_at, should_stop, snapshot_average, train)


def test_lr_examples():
    S = 100
    assert lr_at(0, S) == 3e-4
    assert lr_at(50, S) == pytest.approx(1.5e-4, abs=1e-18)
    assert lr_at(S - 1, S) < 1e-7
    with pytest.raises(ValueError):
        lr_at(S, S)
    with pytest.raises(ValueError):
        lr_at(-1, S)


def test_lr_strictly_decreasing_and_restarts():
    sched = SgdrSchedule(steps_per_epoch=3)
    S = sched.steps_per_cycle
    assert S == 21
    lrs = [sched.lr_at(s) for s in range(S)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    for cycle in range(4):
        assert sched.lr_global(cycle * S) == ETA_MAX


class Quadratic(Module):
    def __init__(self, dims=3):
        super().__init__()
        self.w = self.param("w", np.ones(dims))


class ScriptedData:
    """Quadratic training loss; validation replays a fixed score list."""

    def __init__(self, scores, n_train=8, loss_override=None):
        self.scores = list(scores)
        self.n_train = n_train
        self.calls = 0
        self.loss_override = loss_override
        self.target = np.arange(3, dtype=float)

    def loss(self, model, indices):
        if self.loss_override is not None:
            return Tensor(np.array(self.loss_override))
        return mse(model.w, Tensor(self.target))

    def validate(self, model):
        s = self.scores[self.calls]
        self.calls += 1
        return s


def _cycles(bests, epochs=7):
    """Per-epoch scores whose per-cycle minima are ``bests``."""
    out = []
    for b in bests:
        out += [b + 1.0 + e for e in range(epochs - 1)] + [b]
    return out


def _run(scores, **kw):
    data = ScriptedData(scores)
    sched = SgdrSchedule(steps_per_epoch=2)
    return train(Quadratic(), data, sched, seed=0, batch_size=4, **kw)


def test_stops_when_cycle_fails_to_improve():
    store, hist = _run(_cycles([5.0, 4.0, 4.5, 1.0]))
    assert hist.cycle_best == [5.0, 4.0, 4.5]
    assert len(store) == 3
    assert hist.stop_reason == "no improvement"
    assert len(hist.step_loss) == 3 * 7 * 2


def test_continues_while_improving():
    store, hist = _run(_cycles([5.0, 4.0, 3.9, 3.95]))
    assert hist.cycle_best == [5.0, 4.0, 3.9, 3.95]
    assert len(store) == 4


def test_tie_stops():
    _, hist = _run(_cycles([5.0, 5.0, 1.0]))
    assert hist.cycle_best == [5.0, 5.0]


def test_max_cycles():
    _, hist = _run(_cycles([5, 4, 3, 2]), max_cycles=2)
    assert len(hist.cycle_best) == 2 and hist.stop_reason == "max cycles"


def test_snapshot_is_best_epoch_of_cycle():
    scores = [3.0, 2.0, 9.0, 9.0, 9.0, 9.0, 9.0] + _cycles([1.0]) + _cycles([8.0])
    store, hist = _run(scores)
    assert [(s.cycle, s.epoch, s.score) for s in store.snapshots] == [(0, 1, 2.0), (1, 6, 1.0), (2, 6, 8.0)]


@given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=8))
def test_stop_rule(bests):
    expected = len(bests) >= 2 and bests[-1] >= min(bests[:-1])
    assert should_stop(bests) == expected


def test_determinism():
    def once():
        data = ScriptedData(_cycles([5, 4, 4.5]))
        return train(Quadratic(), data, SgdrSchedule(2), seed=5, batch_size=4)

    (s1, h1), (s2, h2) = once(), once()
    assert h1.to_kv() == h2.to_kv()
    for a, b in zip(s1.snapshots, s2.snapshots):
        assert a.params["w"].tobytes() == b.params["w"].tobytes()


def test_history_round_trip(tmp_path):
    _, hist = _run(_cycles([5.0, 4.0, 4.5]))
    hist.save(tmp_path / "h.kv")
    back = TrainHistory.load(tmp_path / "h.kv")
    assert back == hist


def test_non_finite_loss_aborts_with_history():
    data = ScriptedData(_cycles([1.0]), loss_override=float("nan"))
    with pytest.raises(TrainingAborted) as info:
        train(Quadratic(), data, SgdrSchedule(2), seed=0, batch_size=4)
    assert isinstance(info.value, NumericError)
    assert info.value.history.stop_reason == "non-finite loss"


def test_schedule_mismatch_and_empty_split():
    with pytest.raises(ValueError):
        train(Quadratic(), ScriptedData([1.0]), SgdrSchedule(3), seed=0, batch_size=4)
    with pytest.raises(ValueError):
        train(Quadratic(), ScriptedData([1.0], n_train=0), SgdrSchedule(0), seed=0)


def _store(values, scores=None):
    scores = scores or list(range(len(values)))
    st_ = SnapshotStore()
    for c, (v, s) in enumerate(zip(values, scores)):
        st_.add(Snapshot(c, 0, float(s), {"w": np.asarray(v, dtype=np.float32)}))
    return st_


def test_snapshot_average_examples():
    np.testing.assert_array_equal(snapshot_average(_store([[0.0], [1.0], [2.0]]))["w"], [1.0])
    one = _store([[0.25, 7.0]])
    out = snapshot_average(one)["w"]
    assert out.tobytes() == one.snapshots[0].params["w"].tobytes()
    same = _store([[0.1, 0.2]] * 3)
    assert snapshot_average(same)["w"].tobytes() == same.snapshots[0].params["w"].tobytes()
    with pytest.raises(ValueError):
        snapshot_average(SnapshotStore())


def test_average_uses_top_three_by_score():
    st_ = _store([[100.0], [0.0], [3.0], [6.0]], scores=[9.0, 1.0, 2.0, 3.0])
    assert snapshot_average(st_)["w"][0] == 3.0


def test_store_invariants():
    st_ = _store([[0.0]])
    with pytest.raises(ValueError):
        st_.add(Snapshot(0, 1, 1.0, {"w": np.zeros(1)}))
    with pytest.raises(NumericError):
        st_.add(Snapshot(1, 0, math.inf, {"w": np.zeros(1)}))


@given(st.integers(0, 2**32 - 1), st.permutations([0, 1, 2]))
@settings(max_examples=40, deadline=None)
def test_average_is_permutation_invariant(seed, perm):
    r = np.random.default_rng(seed)
    vals = [r.standard_normal((4, 3)).astype(np.float32) for _ in range(3)]
    a = snapshot_average(_store(vals, [1.0, 1.0, 1.0]))["w"]
    b = snapshot_average(_store([vals[i] for i in perm], [1.0, 1.0, 1.0]))["w"]
    assert a.tobytes() == b.tobytes()
    assert a.shape == (4, 3)
