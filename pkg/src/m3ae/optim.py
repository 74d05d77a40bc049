"""AdamW and LARS over named parameters, plus the warmup-cosine schedule."""
import math
from dataclasses import dataclass

import numpy as np

from m3ae.errors import ConfigError, NumericError

# dotted name components whose parameters are excluded from weight decay:
# biases, LayerNorms, CLS, mask token, learnable positions, modality types
NO_DECAY = ("b", "ln1", "ln2", "norm", "cls", "mask_token", "cls_pos", "txt_pos", "type_img",
            "type_txt")


def matches(name, components):
    """True when any dotted component of ``name`` is listed in ``components``."""
    return not set(name.split(".")).isdisjoint(components)


def decays(name, exclude=NO_DECAY):
    return not matches(name, exclude)


def _check_finite(params):
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericError(f"non-finite gradient in {name} ({bad} entries); step aborted")


def _grad(p):
    return p.grad if p.grad is not None else np.zeros_like(p.data)


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Parameters without a gradient are stepped with a zero gradient.
    """

    def __init__(self, params, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05, no_decay=NO_DECAY):
        self.params = dict(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = tuple(no_decay)
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr):
        _check_finite(self.params)
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = _grad(p)
            dt = p.data.dtype.type
            m = self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            v = self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * g * g
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            data = p.data
            if self.weight_decay and decays(name, self.no_decay):
                data = data * dt(1.0 - lr * self.weight_decay)
            p.data = (data - dt(lr) * update).astype(p.data.dtype)

    def state_arrays(self, prefix="optim"):
        out = {}
        for n in self.params:
            out[f"{prefix}/m/{n}"] = self.m[n]
            out[f"{prefix}/v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays, step, prefix="optim"):
        for n, p in self.params.items():
            self.m[n] = np.asarray(arrays[f"{prefix}/m/{n}"], p.data.dtype).copy()
            self.v[n] = np.asarray(arrays[f"{prefix}/v/{n}"], p.data.dtype).copy()
        self.step_count = int(step)


class LARS:
    """SGD momentum with a per-tensor trust ratio ``|p| / |g + wd p|``.

    The ratio is 1 when either norm is zero. Tensors matched by ``no_adapt``
    (biases by default) use neither weight decay nor the trust ratio.
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0, no_adapt=("b",)):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_adapt = tuple(no_adapt)
        self.step_count = 0
        self.buf = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    @staticmethod
    def trust_ratio(p, d):
        pn, dn = float(np.linalg.norm(p)), float(np.linalg.norm(d))
        return pn / dn if pn > 0 and dn > 0 else 1.0

    def step(self, lr):
        _check_finite(self.params)
        self.step_count += 1
        for name, p in self.params.items():
            g = _grad(p)
            dt = p.data.dtype.type
            if matches(name, self.no_adapt):
                d = g
            else:
                d = g + dt(self.weight_decay) * p.data if self.weight_decay else g
                d = d * dt(self.trust_ratio(p.data, d))
            buf = self.buf[name] = dt(self.momentum) * self.buf[name] + d
            p.data = (p.data - dt(lr) * buf).astype(p.data.dtype)


@dataclass
class ScheduleConfig:
    base_lr: float
    batch_size: int
    steps_per_epoch: int
    epochs: float
    warmup_epochs: float = 0.0
    final_lr: float = 0.0
    reference_batch: int = 256

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup ({self.warmup_epochs}) exceeds total epochs ({self.epochs})")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")

    @property
    def peak_lr(self):
        return self.base_lr * self.batch_size / self.reference_batch

    @property
    def warmup_steps(self):
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self):
        return int(round(self.epochs * self.steps_per_epoch))


def lr_at(schedule, step):
    """Linear warmup from 0 to the peak, then cosine decay to ``final_lr``."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    peak, warm, total = schedule.peak_lr, schedule.warmup_steps, schedule.total_steps
    if step < warm:
        return peak * step / warm
    if step >= total:
        return schedule.final_lr
    progress = (step - warm) / max(total - warm, 1)
    return schedule.final_lr + 0.5 * (peak - schedule.final_lr) * (1.0 + math.cos(math.pi * progress))
