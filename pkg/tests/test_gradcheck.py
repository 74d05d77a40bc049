import time

import numpy as np

from m3ae import tensor as T
from m3ae.gradcheck import check_model, check_ops, grad_check, op_cases
from m3ae.model import ModelConfig
from m3ae.tensor import _make


def _bad_square(a):
    # forward x^2 with a deliberately wrong backward (x instead of 2x)
    return _make(a.data ** 2, (a,), lambda g: (g * a.data,))


def test_every_op_passes(backend):
    results = check_ops(tol=1e-4, n_samples=30)
    assert {n for n, _ in results} == {n for n, _, _ in op_cases()}
    for name, rep in results:
        assert rep.passed, (name, rep.failures[:2])


def test_wrong_backward_is_caught():
    rng = np.random.default_rng(0)
    good = grad_check(lambda x: T.sum_(x * x), [rng.standard_normal(6)], tol=1e-4)
    assert good.passed
    bad = grad_check(lambda x: T.sum_(_bad_square(x)), [rng.standard_normal(6)], tol=1e-4)
    assert not bad.passed and bad.max_rel_err > 0.4


def test_vanishing_gradient_is_judged_on_scale():
    # coordinate with zero true gradient: round-off there must not fail the check
    f = lambda x: T.sum_(x[:1] * x[:1] * 1e3) + T.sum_(x[1:] * 0.0)  # noqa: E731
    rep = grad_check(f, [np.array([1.0, 2.0, 3.0])], tol=1e-4, coords=[(0, 0), (0, 1), (0, 2)])
    assert rep.passed and rep.n_checked == 3


def test_model_loss_gradients():
    t0 = time.perf_counter()
    rep = check_model(ModelConfig.from_preset("tiny", vocab_size=24), tol=1e-3, seed=1)
    assert rep.passed, rep.failures[:3]
    assert rep.n_checked > 100 and time.perf_counter() - t0 < 60
