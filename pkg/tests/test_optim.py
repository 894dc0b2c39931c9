import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechqformer import tensor as T
from speechqformer.errors import ConfigError, TrainingError
from speechqformer.optim import (AdamState, ScheduleConfig, adam_step, batch_indices, clip_by_global_norm,
                                 global_norm, lr_at, train_steps)
from speechqformer.tensor import Tensor

SCHED = ScheduleConfig()


def test_schedule_anchor_values():
    assert lr_at(0, SCHED) == 1e-6
    assert lr_at(SCHED.warmup_steps, SCHED) == 1e-4
    assert lr_at(SCHED.total_steps, SCHED) == 1e-5


def test_schedule_continuous_at_warmup():
    w = SCHED.warmup_steps
    assert abs(lr_at(w - 1e-9, SCHED) - lr_at(w, SCHED)) < 1e-12
    assert abs(lr_at(w + 1e-9, SCHED) - lr_at(w, SCHED)) < 1e-12


def test_schedule_midpoint_of_cosine():
    mid = (SCHED.warmup_steps + SCHED.total_steps) / 2
    assert lr_at(mid, SCHED) == pytest.approx((1e-4 + 1e-5) / 2, rel=1e-12)


@given(st.integers(1, 500), st.integers(1, 3000))
def test_schedule_monotone_after_warmup(warmup, extra):
    cfg = ScheduleConfig(warmup_steps=warmup, total_steps=warmup + extra)
    lrs = [lr_at(s, cfg) for s in range(warmup, cfg.total_steps + 1, max(1, extra // 50))]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    warm = [lr_at(s, cfg) for s in range(0, warmup + 1)]
    assert all(a <= b for a, b in zip(warm, warm[1:]))


def test_schedule_rejects_bad_config():
    with pytest.raises(ConfigError):
        ScheduleConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ConfigError):
        ScheduleConfig(lr_peak=1e-7)
    with pytest.raises(ValueError):
        lr_at(SCHED.total_steps + 1, SCHED)


def test_adam_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    adam_step(p, g, AdamState(), 1e-2)
    # bias-corrected first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    expect = np.array([1.0, -2.0, 3.0]) - 1e-2 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expect, rtol=0, atol=1e-15)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    st_ = AdamState()
    adam_step(p, {"w": np.array([1.0, 1.0])}, st_, 1e-3)
    before = p["w"].data.copy()
    m = st_.m["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, st_, 0.0)
    np.testing.assert_array_equal(p["w"].data, before)
    np.testing.assert_allclose(st_.m["w"], 0.9 * m)


def test_adam_rejects_nonfinite_before_touching_anything():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(TrainingError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": np.array([np.nan, 1.0])}, AdamState(), 1e-3)
    np.testing.assert_array_equal(p["a"].data, np.ones(2))


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm, clipped = clip_by_global_norm(g, 1.0)
    assert norm == 5.0 and clipped
    assert global_norm(g) == pytest.approx(1.0)
    norm, clipped = clip_by_global_norm({"a": np.array([0.1])}, 1.0)
    assert not clipped


@given(st.integers(1, 50), st.integers(1, 9), st.integers(0, 100), st.integers(0, 40))
def test_batch_indices_cover_each_epoch(n, bs, seed, epoch):
    per_epoch = -(-n // bs)
    seen = np.concatenate([batch_indices(n, bs, seed, epoch * per_epoch + b) for b in range(per_epoch)])
    np.testing.assert_array_equal(np.sort(seen), np.arange(n))
    last = batch_indices(n, bs, seed, epoch * per_epoch + per_epoch - 1)
    assert len(last) == n - bs * (per_epoch - 1)


def test_train_steps_aborts_on_nonfinite_loss():
    w = Tensor(np.array([1.0]), requires_grad=True)

    def loss_fn(step):
        return T.scale(T.tsum(w), float("inf") if step == 2 else 1.0), {}

    with pytest.raises(TrainingError, match="step 2"):
        train_steps({"w": w}, loss_fn, AdamState(), ScheduleConfig(warmup_steps=1, total_steps=5), 0, 5)


def test_train_steps_records_and_early_stop():
    w = Tensor(np.array([2.0]), requires_grad=True)
    records = []

    def after(r):
        records.append(r)
        return r["step"] == 3

    done = train_steps({"w": w}, lambda s: (T.tsum(T.mul(w, w)), {"x": 1.0}), AdamState(),
                       ScheduleConfig(warmup_steps=1, total_steps=10), 0, 10, 1.0, after)
    assert done == 4
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert records[0]["lr"] == 1e-6 and records[0]["x"] == 1.0
    assert records[0]["clipped"] and records[0]["grad_norm"] == pytest.approx(4.0)
