"""Central finite-difference check of tape gradients."""
from dataclasses import dataclass, field

import numpy as np

from m3ae import tensor as T
from m3ae.tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and np.isfinite(self.max_rel_err)


def grad_check(f, inputs, tol=1e-5, n_samples=50, eps=1e-6, seed=0, coords=None, floor=None):
    """Compare backward gradients of ``f(*inputs)`` with central differences.

    Inputs are promoted to float64 leaves. ``n_samples`` coordinates are drawn
    uniformly over all input elements. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is 1e-3 of the largest
    sampled gradient magnitude, so coordinates with a vanishing gradient are
    judged on the scale of the whole gradient rather than on round-off.

    ``coords`` (a list of ``(input_index, flat_position)``) replaces the random
    draw, and ``floor`` replaces the default relative-error floor.
    """
    leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in inputs]
    loss = f(*leaves)
    if loss.ndim != 0:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]

    sizes = np.array([t.size for t in leaves])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if coords is None:
        rng = np.random.default_rng(seed)
        flat = rng.choice(total, size=min(n_samples, total), replace=False)
    else:
        flat = np.array([offsets[i] + p for i, p in coords], dtype=np.int64)

    coords, a_vals, n_vals = [], [], []
    with no_grad():
        for k in np.sort(flat):
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            pos = int(k - offsets[which])
            x = leaves[which].data.reshape(-1)
            orig = x[pos]
            x[pos] = orig + eps
            up = float(f(*leaves).data)
            x[pos] = orig - eps
            down = float(f(*leaves).data)
            x[pos] = orig
            coords.append((which, pos))
            a_vals.append(float(analytic[which].reshape(-1)[pos]))
            n_vals.append((up - down) / (2 * eps))

    a_vals, n_vals = np.array(a_vals), np.array(n_vals)
    if floor is None:
        floor = max(1e-3 * float(np.abs(a_vals).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a_vals), np.abs(n_vals)), floor)
    rel = np.abs(a_vals - n_vals) / denom
    failures = [(coords[i], a_vals[i], n_vals[i], rel[i]) for i in np.flatnonzero(~(rel < tol))]
    return GradCheckReport(float(rel.max(initial=0.0)), len(coords), tol, failures)


class _Projector:
    """Scalar ``sum(out * R)`` with a fixed random ``R`` per output shape.

    A plain sum would hide errors in ops whose outputs have constant sums (softmax).
    """

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.cache = {}

    def __call__(self, out):
        if out.shape not in self.cache:
            self.cache[out.shape] = self.rng.standard_normal(out.shape)
        return T.sum_(out * Tensor(self.cache[out.shape]))


def op_cases(seed=0):
    """``(name, f, inputs)`` for every differentiable primitive, each reduced to a scalar."""
    rng = np.random.default_rng(seed)
    n = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    P = _Projector(seed + 1)
    key_mask = np.array([[True, True, False, True, True]] * 2)
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    soft = rng.dirichlet(np.ones(5), size=3)
    return [
        ("add", lambda a, b: P(a + b), [n(3, 4), n(4)]),
        ("sub", lambda a, b: P(a - b), [n(3, 4), n(3, 4)]),
        ("mul", lambda a, b: P(a * b), [n(3, 4), n(3, 4)]),
        ("div", lambda a, b: P(a / b), [n(3, 4), pos(3, 4)]),
        ("scale", lambda a: P(T.scale(a, -1.7)), [n(3, 4)]),
        ("exp", lambda a: P(T.exp(a)), [n(3, 4)]),
        ("log", lambda a: P(T.log(a)), [pos(3, 4)]),
        ("sqrt", lambda a: P(T.sqrt(a)), [pos(3, 4)]),
        ("gelu", lambda a: P(T.gelu(a)), [n(4, 5) * 2]),
        ("softmax", lambda a: P(T.softmax(a)), [n(3, 5)]),
        ("softmax_masked", lambda a: P(T.softmax(a, key_mask=key_mask)), [n(2, 3, 5)]),
        ("softmax_axis0", lambda a: P(T.softmax(a, axis=0)), [n(4, 3)]),
        ("layer_norm", lambda x, w, b: P(T.layer_norm(x, w, b, eps=1e-6)), [n(3, 6), n(6), n(6)]),
        ("matmul", lambda a, b: P(a @ b), [n(3, 4), n(4, 5)]),
        ("matmul_batched", lambda a, b: P(a @ b), [n(2, 3, 4), n(2, 4, 5)]),
        ("matmul_bcast", lambda a, b: P(a @ b), [n(2, 3, 4), n(4, 5)]),
        ("reshape", lambda a: P(T.reshape(a, (6, 2))), [n(3, 4)]),
        ("transpose", lambda a: P(T.transpose(a, (2, 0, 1))), [n(2, 3, 4)]),
        ("index", lambda a: P(a[1:, ::2]), [n(3, 4)]),
        ("concat", lambda a, b: P(T.concat([a, b], axis=1)), [n(2, 3), n(2, 2)]),
        ("gather_rows", lambda t: P(T.gather_rows(t, idx)), [n(5, 3)]),
        ("sum", lambda a: P(T.sum_(a, axis=1)), [n(3, 4)]),
        ("mean", lambda a: P(T.mean(a, axis=0, keepdims=True)), [n(3, 4)]),
        ("cross_entropy", lambda z: P(T.cross_entropy(z, np.array([0, 4, 2]))), [n(3, 5)]),
        ("soft_cross_entropy", lambda z: P(T.soft_cross_entropy(z, soft)), [n(3, 5)]),
    ]


def check_ops(tol=1e-4, n_samples=30, seed=0):
    """Run :func:`grad_check` on every primitive; returns ``[(name, report)]``."""
    return [(name, grad_check(f, inputs, tol=tol, n_samples=n_samples, seed=seed))
            for name, f, inputs in op_cases(seed)]


def random_batch(config, rng, n=3):
    """Normalized-looking random batch; the last example has no caption."""
    from m3ae.data import MaskPlan, MultimodalBatch, sample_mask

    L = config.max_text_len
    images = rng.standard_normal((n, config.n_patches, config.patch_dim))
    token_ids = np.zeros((n, L), np.int64)
    pad = np.zeros((n, L), bool)
    plans = []
    for i in range(n):
        length = 0 if i == n - 1 else min(L, 5 + 2 * i)
        token_ids[i, :length] = rng.integers(2, config.vocab_size, size=length)
        pad[i, :length] = True
        ik, im = sample_mask(config.n_patches, 0.75, rng)
        tk, tm = sample_mask(length, 0.75, rng) if length else (np.zeros(0, np.int64),) * 2
        plans.append(MaskPlan(ik, im, tk, tm, 0.75, 0.75))
    return MultimodalBatch(images, token_ids, pad.any(axis=1), pad, plans, np.arange(n))


def check_model(config, tol=1e-3, seed=0, per_param=2, eps=1e-6):
    """End-to-end check of the pretraining loss with respect to every parameter.

    Runs in float64. For each parameter the coordinate with the largest
    gradient plus ``per_param - 1`` random coordinates are compared; the error
    floor is 1e-3 of the largest gradient anywhere in the model.
    """
    from m3ae.model import M3AE, forward
    from m3ae.objective import LossWeights, total_loss

    rng = np.random.default_rng(seed)
    model = M3AE(config, seed=seed, dtype=np.float64)
    batch = random_batch(config, rng)
    names = list(model.params)

    def f(*leaves):
        model.params = dict(zip(names, leaves))
        pred, logits, _ = forward(model, batch)
        return total_loss(pred, logits, batch, LossWeights()).total

    inputs = [model.params[k].data.copy() for k in names]
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    f(*leaves).backward()
    grads = [np.zeros_like(x) if t.grad is None else t.grad for t, x in zip(leaves, inputs)]
    coords = []
    for i, g in enumerate(grads):
        flat = np.abs(g).reshape(-1)
        picks = {int(flat.argmax())}
        picks.update(int(p) for p in rng.choice(flat.size, size=min(per_param - 1, flat.size),
                                                 replace=False))
        coords.extend((i, p) for p in sorted(picks))
    floor = 1e-3 * max(float(np.abs(g).max()) for g in grads)
    report = grad_check(f, inputs, tol=tol, eps=eps, coords=coords, floor=floor)
    report.names = names
    return report
