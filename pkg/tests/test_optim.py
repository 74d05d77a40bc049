import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m3ae.errors import ConfigError, NumericError
from m3ae.optim import LARS, AdamW, ScheduleConfig, decays, lr_at
from m3ae.tensor import Tensor


def _param(value, grad=None):
    p = Tensor(np.array(value, np.float64), requires_grad=True)
    p.grad = None if grad is None else np.array(grad, np.float64)
    return p


def _ref_adamw(p, grads, lr, b1, b2, eps, wd):
    # scalar textbook loop, one element at a time
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * mh / (math.sqrt(vh) + eps)
    return p


def test_adamw_first_step():
    p = _param([1.0], [1.0])
    AdamW({"w": p}, weight_decay=0.0).step(0.1)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_gradient_only_decays():
    p = _param([2.0, -3.0])
    opt = AdamW({"blocks.0.w": p}, weight_decay=0.05)
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [2.0 * 0.995, -3.0 * 0.995])
    q = _param([2.0])
    AdamW({"blocks.0.b": q}, weight_decay=0.05).step(0.1)
    assert q.data[0] == 2.0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(-3, 3),
       st.floats(1e-4, 0.3), st.floats(0, 0.2))
@settings(max_examples=60, deadline=None)
def test_adamw_matches_reference(grads, p0, lr, wd):
    p = _param([p0])
    opt = AdamW({"enc.tok": p}, betas=(0.9, 0.95), eps=1e-8, weight_decay=wd)
    for g in grads:
        p.grad = np.array([g])
        opt.step(lr)
    assert p.data[0] == pytest.approx(_ref_adamw(p0, grads, lr, 0.9, 0.95, 1e-8, wd), rel=1e-9, abs=1e-12)


def test_adamw_minimizes_quadratic():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(5)
    p = _param(np.zeros(5))
    opt = AdamW({"x": p}, weight_decay=0.0)
    for t in range(600):
        p.grad = 2 * (p.data - target)
        opt.step(0.05 * (1 - t / 600))
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_adamw_rejects_nonfinite():
    p = _param([1.0], [np.nan])
    with pytest.raises(NumericError, match="w"):
        AdamW({"w": p}).step(0.1)
    assert p.data[0] == 1.0


def test_adamw_state_roundtrip():
    rng = np.random.default_rng(1)
    grads = rng.standard_normal((6, 3))
    a = _param(np.ones(3))
    opt = AdamW({"w": a})
    for g in grads[:3]:
        a.grad = g
        opt.step(0.01)
    b = _param(a.data.copy())
    opt2 = AdamW({"w": b})
    opt2.load_state_arrays({k: v.copy() for k, v in opt.state_arrays().items()}, opt.step_count)
    for g in grads[3:]:
        a.grad = g
        b.grad = g.copy()
        opt.step(0.01)
        opt2.step(0.01)
    np.testing.assert_array_equal(a.data, b.data)


def test_decay_exclusions():
    for name in ["enc.blocks.0.attn.qkv.w", "enc.tok", "enc.patch.w", "dec.embed.w", "dec.img_head.w"]:
        assert decays(name), name
    for name in ["enc.blocks.0.attn.qkv.b", "enc.blocks.1.ln1.g", "enc.norm.g", "enc.cls",
                 "dec.mask_token", "enc.txt_pos", "enc.type_img", "dec.type_txt"]:
        assert not decays(name), name


def test_lars_identities():
    assert LARS.trust_ratio(np.zeros(3), np.ones(3)) == 1.0
    assert LARS.trust_ratio(np.ones(3), np.zeros(3)) == 1.0
    assert LARS.trust_ratio(np.array([3.0, 4.0]), np.array([0.0, 0.5])) == pytest.approx(10.0)
    # zero gradient and no decay: parameter untouched
    p = _param([1.0, 2.0])
    LARS({"w": p}).step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_lars_step_and_momentum():
    p = _param([3.0, 4.0], [0.0, 0.5])
    opt = LARS({"w": p}, momentum=0.9)
    opt.step(0.1)
    # trust ratio 5 / 0.5 = 10, so the update is lr * 10 * g
    np.testing.assert_allclose(p.data, [3.0, 3.5])
    bias = _param([1.0], [2.0])
    opt = LARS({"head.b": bias}, momentum=0.5)
    opt.step(0.1)
    opt.step(0.1)
    # plain momentum SGD: buf 2 then 3
    assert bias.data[0] == pytest.approx(1.0 - 0.2 - 0.3)


def test_schedule_peak_scaling():
    s = ScheduleConfig(base_lr=1.5e-4, batch_size=4096, steps_per_epoch=10, epochs=10)
    assert s.peak_lr == pytest.approx(2.4e-3)


def test_schedule_shape():
    s = ScheduleConfig(base_lr=1e-3, batch_size=256, steps_per_epoch=10, epochs=10, warmup_epochs=2)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10) == pytest.approx(0.5e-3)
    assert lr_at(s, 20) == pytest.approx(1e-3)
    assert lr_at(s, 60) == pytest.approx(0.5e-3)
    assert lr_at(s, 100) == 0.0 and lr_at(s, 500) == 0.0
    lrs = [lr_at(s, t) for t in range(101)]
    assert all(a <= b for a, b in zip(lrs[:20], lrs[1:21]))
    assert all(a >= b for a, b in zip(lrs[20:], lrs[21:]))


def test_schedule_errors():
    with pytest.raises(ConfigError):
        ScheduleConfig(1e-3, 256, 10, epochs=1, warmup_epochs=2)
    s = ScheduleConfig(1e-3, 256, 10, epochs=1)
    with pytest.raises(ConfigError):
        lr_at(s, -1)
    assert lr_at(s, 0) == pytest.approx(1e-3)
