"""Compare the compiled and numpy kernel backends.

Times each hot kernel at the shapes a tiny-preset training step produces, plus
one full forward/backward step, and prints a table of median milliseconds.

    python3 benchmarks/bench_kernels.py [--repeat 30] [--batch 64]
"""
import argparse
import timeit

import numpy as np

from m3ae import kernels
from m3ae.data import MaskPlan, MultimodalBatch
from m3ae.model import M3AE, ModelConfig, forward
from m3ae.objective import LossWeights, total_loss


def kernel_cases(batch, rng):
    heads, t, d = 4, 45, 64
    x = rng.standard_normal((batch * t, 4 * d)).astype(np.float32)
    scores = rng.standard_normal((batch, heads, t, t)).astype(np.float32)
    mask = np.ones((batch, t), bool)
    mask[:, -5:] = False
    y = kernels.softmax(scores, mask)
    h = rng.standard_normal((batch * t, d)).astype(np.float32)
    w, b = np.ones(d, np.float32), np.zeros(d, np.float32)
    _, xhat, rstd = kernels.layer_norm(h, w, b, 1e-6)
    idx = rng.integers(0, 500, batch * t)
    return {
        "gelu": lambda: kernels.gelu(x),
        "gelu_grad": lambda: kernels.gelu_grad(x, x),
        "softmax_masked": lambda: kernels.softmax(scores, mask),
        "softmax_grad": lambda: kernels.softmax_grad(y, scores),
        "layer_norm": lambda: kernels.layer_norm(h, w, b, 1e-6),
        "layer_norm_grad": lambda: kernels.layer_norm_grad(h, xhat, rstd, w),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(500, idx, h),
    }


def train_step_case(batch, rng):
    cfg = ModelConfig.from_preset("tiny", vocab_size=40)
    model = M3AE(cfg)
    n, keep = cfg.n_patches, cfg.n_patches // 4
    plans = []
    for _ in range(batch):
        perm = rng.permutation(n)
        tperm = rng.permutation(8)
        plans.append(MaskPlan(np.sort(perm[:keep]), np.sort(perm[keep:]), np.sort(tperm[:2]),
                              np.sort(tperm[2:]), 0.75, 0.75))
    ids = np.zeros((batch, cfg.max_text_len), np.int64)
    ids[:, :8] = rng.integers(2, 40, (batch, 8))
    b = MultimodalBatch(rng.standard_normal((batch, n, cfg.patch_dim)).astype(np.float32), ids,
                        np.ones(batch, bool), ids != 0, plans)

    def step():
        model.zero_grad()
        pred, logits, _ = forward(model, b)
        total_loss(pred, logits, b, LossWeights()).total.backward()
    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled backend unavailable; timing the numpy fallback only")
    timings = {}
    for name in backends:
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        cases = kernel_cases(args.batch, rng)
        cases["train_step"] = train_step_case(args.batch, rng)
        for case, fn in cases.items():
            fn()  # warm-up
            runs = timeit.repeat(fn, number=1, repeat=args.repeat if case != "train_step" else 5)
            timings.setdefault(case, {})[name] = 1e3 * float(np.median(runs))
    header = f"{'kernel':<18}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for case, row in timings.items():
        line = f"{case:<18}" + "".join(f"{row[b]:>12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    return timings


if __name__ == "__main__":
    main()
