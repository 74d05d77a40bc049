"""Pretraining loop and supervised heads (linear probe, partial fine-tuning)."""
import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from m3ae import tensor as T
from m3ae.data import BatchConfig, build_batch, patchify, random_resized_crop, stream
from m3ae.errors import ConfigError, DataError, NumericError
from m3ae.model import M3AE, block, embed_visible, extract_features, forward, load_checkpoint, \
    mae_forward, save_checkpoint, trunc_normal
from m3ae.objective import LossBreakdown, LossWeights, masked_image_loss, total_loss
from m3ae.optim import LARS, AdamW, ScheduleConfig, lr_at
from m3ae.tensor import Tensor

METRICS_HEADER = ["step", "lr", "total", "image_mse", "text_ce", "img_masked", "txt_masked", "seconds"]


@dataclass
class PretrainConfig:
    epochs: float = 50
    batch_size: int = 4096
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: float = 5
    final_lr: float = 0.0
    r_img: float = 0.75
    r_txt: float = 0.75
    w_img: float = 1.0
    w_txt: float = 0.5
    norm_pix: bool = False
    augment: bool = True
    crop_scale: tuple = (0.5, 1.0)
    paired_fraction: float | None = None
    seed: int = 0
    checkpoint_every: int = 0
    log_wall_time: bool = False

    def batch_config(self, model_config):
        return BatchConfig(model_config.patch_size, model_config.max_text_len, self.r_img,
                           self.r_txt, self.augment, tuple(self.crop_scale))

    def weights(self):
        return LossWeights(self.w_img, self.w_txt, self.norm_pix)


class MetricsLog:
    """Append-only per-step rows, written as CSV."""

    def __init__(self, path=None, append=False):
        self.rows = []
        self.path = Path(path) if path else None
        if self.path and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(METRICS_HEADER) + "\n")

    def append(self, row):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("metrics steps must increase")
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(self._format(row))

    @staticmethod
    def _format(row):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            ["" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k]
             for k in METRICS_HEADER])
        return buf.getvalue()

    def column(self, key):
        return np.array([r[key] for r in self.rows], dtype=np.float64)


@dataclass
class PretrainResult:
    model: M3AE
    optimizer: AdamW
    metrics: MetricsLog
    step: int
    checkpoint: Path | None = None


def schedule_for(n_examples, cfg):
    batch = min(cfg.batch_size, n_examples)
    spe = math.ceil(n_examples / batch)
    return batch, ScheduleConfig(cfg.base_lr, batch, spe, cfg.epochs, cfg.warmup_epochs, cfg.final_lr)


def epoch_order(seed, epoch, n):
    return stream(seed, 0xE90C, epoch).permutation(n)


def m3ae_step_loss(model, batch, weights):
    pred, logits, _ = forward(model, batch)
    return total_loss(pred, logits, batch, weights)


def mae_step_loss(model, batch, weights):
    """Image-only reference objective; the batch must carry no text."""
    if batch.text_present.any():
        raise ConfigError("the image-only reference path takes unpaired batches only")
    pred = mae_forward(model, batch.images, batch.plans)
    img, n_img = masked_image_loss(pred, batch.images, batch.plans, weights.norm_pix)
    return LossBreakdown(T.scale(img, weights.w_img), float(img.data), 0.0, n_img, 0)


def pretrain(model, dataset, cfg, out_dir=None, resume=None, stop_at=None, log_path=None,
             step_loss=None):
    """Masked multimodal pretraining of ``model`` on ``dataset``.

    Args:
        model: an :class:`M3AE` (mutated in place).
        dataset: a :class:`~m3ae.data.Dataset`; captions may be absent for any subset.
        cfg: :class:`PretrainConfig`.
        out_dir: if given, checkpoints go to ``out_dir/checkpoint.m3ae``.
        resume: checkpoint path written by an earlier, interrupted run. An
            existing ``log_path`` is then appended to rather than truncated.
        stop_at: stop after this many total steps (for stop/resume).
        log_path: optional CSV file receiving one metrics row per step.
        step_loss: ``(model, batch, weights) -> LossBreakdown``; defaults to the
            multimodal objective. :func:`mae_step_loss` gives the image-only reference.
    """
    if cfg.paired_fraction is not None:
        dataset = dataset.with_paired_fraction(cfg.paired_fraction, cfg.seed)
    if len(dataset) == 0:
        raise DataError("cannot pretrain on an empty dataset")
    if dataset.image_size != model.config.image_size:
        raise ConfigError(f"dataset image size {dataset.image_size} != model {model.config.image_size}")
    step_loss = m3ae_step_loss if step_loss is None else step_loss
    batch, sched = schedule_for(len(dataset), cfg)
    bcfg = cfg.batch_config(model.config)
    weights = cfg.weights()
    opt = AdamW(model.params, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    start = 0
    if resume is not None:
        loaded, extra, meta = load_checkpoint(resume)
        for n, p in model.params.items():
            p.data = loaded.params[n].data.astype(model.dtype)
        start = int(meta["step"])
        opt.load_state_arrays(extra, start)
    ckpt = Path(out_dir) / "checkpoint.m3ae" if out_dir else None
    metrics = MetricsLog(log_path, append=resume is not None)
    end = sched.total_steps if stop_at is None else min(stop_at, sched.total_steps)
    t0 = time.perf_counter()
    order, order_epoch = None, -1
    step = start
    for step in range(start, end):
        epoch, i = divmod(step, sched.steps_per_epoch)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(cfg.seed, epoch, len(dataset)), epoch
        idx = order[i * batch: (i + 1) * batch]
        b = build_batch(dataset, idx, bcfg, stream(cfg.seed, 0xBA7C, step))
        lr = lr_at(sched, step)
        model.zero_grad()
        loss = step_loss(model, b, weights)
        if not np.isfinite(loss.total.data):
            where = f"; last good checkpoint {ckpt}" if ckpt and ckpt.exists() else ""
            raise NumericError(f"non-finite loss at step {step}{where}")
        loss.total.backward()
        opt.step(lr)
        metrics.append({"step": step, "lr": float(lr), "total": float(loss.total.data),
                        "image_mse": loss.image_mse, "text_ce": loss.text_ce,
                        "img_masked": loss.img_masked, "txt_masked": loss.txt_masked,
                        "seconds": round(time.perf_counter() - t0, 3) if cfg.log_wall_time else None})
        if ckpt and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_state(ckpt, model, opt, step + 1, cfg)
    step = end
    model.zero_grad()
    if ckpt:
        save_training_state(ckpt, model, opt, step, cfg)
    return PretrainResult(model, opt, metrics, step, ckpt)


def save_training_state(path, model, opt, step, cfg):
    save_checkpoint(path, model, opt.state_arrays(), meta={"step": step, "pretrain": asdict(cfg)})


# -- supervised heads ----------------------------------------------------------------------
def split_indices(n, test_fraction=0.2, seed=0):
    """Seeded train/test split; both parts sorted."""
    perm = stream(seed, 0x5B117).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def dataset_patches(dataset, indices=None, patch=None):
    imgs = dataset.images if indices is None else dataset.images[indices]
    return patchify(dataset.normalize(imgs), patch).astype(np.float32)


def check_labels(labels, n_classes):
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise DataError(f"label {bad} outside class range [0, {n_classes})")


@dataclass
class ProbeConfig:
    base_lr: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.9
    batch_size: int = 2048
    epochs: float = 90
    warmup_epochs: float = 10
    label_key: str = "shape"
    n_classes: int = 4
    test_fraction: float = 0.2
    split_seed: int = 0
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    weight: np.ndarray
    bias: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    history: list = field(default_factory=list)


def fit_linear_classifier(train_x, train_y, cfg):
    """LARS-trained linear layer on standardized features (no affine normalization)."""
    check_labels(train_y, cfg.n_classes)
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0) + 1e-6
    xs = ((train_x - mean) / std).astype(np.float32)
    n, d = xs.shape
    w = Tensor(trunc_normal(stream(cfg.seed, 0x11EAD), (d, cfg.n_classes), 0.01).astype(np.float32),
               requires_grad=True)
    b = Tensor(np.zeros(cfg.n_classes, np.float32), requires_grad=True)
    params = {"head.w": w, "head.b": b}
    batch = min(cfg.batch_size, n)
    sched = ScheduleConfig(cfg.base_lr, batch, math.ceil(n / batch), cfg.epochs, cfg.warmup_epochs)
    opt = LARS(params, cfg.momentum, cfg.weight_decay)
    history = []
    for step in range(sched.total_steps):
        epoch, i = divmod(step, sched.steps_per_epoch)
        idx = epoch_order(cfg.seed, epoch, n)[i * batch: (i + 1) * batch]
        w.grad = b.grad = None
        loss = T.mean(T.cross_entropy(Tensor(xs[idx]) @ w + b, train_y[idx]))
        loss.backward()
        opt.step(lr_at(sched, step))
        history.append(float(loss.data))
    return w.data.copy(), b.data.copy(), mean, std, history


def classify(x, weight, bias, mean, std):
    return (((x - mean) / std).astype(np.float32) @ weight + bias).argmax(axis=1)


def train_linear_probe(model, dataset, cfg, features=None):
    """Linear probe on frozen CLS features; accuracy on the held-out split."""
    labels = dataset.labels(cfg.label_key)
    check_labels(labels, cfg.n_classes)
    if features is None:
        features = extract_features(model, dataset_patches(dataset, patch=model.config.patch_size))
    tr, te = split_indices(len(dataset), cfg.test_fraction, cfg.split_seed)
    w, b, mean, std, hist = fit_linear_classifier(features[tr], labels[tr], cfg)
    acc = float((classify(features[te], w, b, mean, std) == labels[te]).mean()) if te.size else float("nan")
    train_acc = float((classify(features[tr], w, b, mean, std) == labels[tr]).mean())
    return ProbeResult(acc, train_acc, w, b, mean, std, hist)


@dataclass
class FinetuneConfig:
    blocks: int = 2
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1024
    epochs: float = 50
    warmup_epochs: float = 5
    label_smoothing: float = 0.1
    flip: bool = True
    crop: bool = True
    crop_scale: tuple = (0.5, 1.0)
    label_key: str = "shape"
    n_classes: int = 4
    test_fraction: float = 0.2
    split_seed: int = 0
    seed: int = 0


@dataclass
class FinetuneResult:
    model: M3AE
    head: dict
    accuracy: float
    history: list


def trainable_names(config, k):
    if not 0 <= k <= config.enc_depth:
        raise ConfigError(f"fine-tune depth k={k} outside [0, {config.enc_depth}]")
    prefixes = tuple(f"enc.blocks.{i}." for i in range(config.enc_depth - k, config.enc_depth))
    return [n for n in config.param_shapes() if n.startswith(prefixes) or n.startswith("enc.norm.")]


def classifier_forward(model, head, patches, k):
    """Logits and penultimate (normed CLS) features; only the last ``k`` blocks are taped."""
    cfg = model.config
    keep = np.arange(cfg.n_patches)
    first = cfg.enc_depth - k
    with T.no_grad():
        x, layout = embed_visible(model, patches, None, [keep] * len(patches), [[]] * len(patches))
        for i in range(first):
            x = block(x, model, f"enc.blocks.{i}", cfg.enc_heads, layout.valid, cfg.ln_eps)
    x = Tensor(x.data)
    for i in range(first, cfg.enc_depth):
        x = block(x, model, f"enc.blocks.{i}", cfg.enc_heads, layout.valid, cfg.ln_eps)
    x = T.layer_norm(x, model["enc.norm.w"], model["enc.norm.b"], cfg.ln_eps)
    feats = x[:, 0]
    return feats @ head["head.w"] + head["head.b"], feats


def _augment(images, rng, cfg):
    out = []
    for im in images:
        if cfg.crop:
            im = random_resized_crop(im, rng, tuple(cfg.crop_scale))
        if cfg.flip and rng.random() < 0.5:
            im = im[:, ::-1]
        out.append(im)
    return np.stack(out)


def partial_finetune(model, dataset, cfg, train_idx=None):
    """Fine-tune the last ``cfg.blocks`` encoder blocks, final norm and a new head.

    Works on a copy of ``model``; parameters outside the trainable set never change.
    """
    model = model.copy()
    names = trainable_names(model.config, cfg.blocks)
    for n, p in model.params.items():
        p.requires_grad = n in names
    labels = dataset.labels(cfg.label_key)
    check_labels(labels, cfg.n_classes)
    tr, te = split_indices(len(dataset), cfg.test_fraction, cfg.split_seed)
    if train_idx is not None:
        tr = np.asarray(train_idx)
    d = model.config.enc_dim
    head = {"head.w": Tensor(trunc_normal(stream(cfg.seed, 0xF17E), (d, cfg.n_classes), 2e-5)
                             .astype(model.dtype), requires_grad=True),
            "head.b": Tensor(np.zeros(cfg.n_classes, model.dtype), requires_grad=True)}
    params = {**{n: model.params[n] for n in names}, **head}
    batch = min(cfg.batch_size, len(tr))
    sched = ScheduleConfig(cfg.base_lr, batch, math.ceil(len(tr) / batch), cfg.epochs, cfg.warmup_epochs)
    opt = AdamW(params, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    eps = cfg.label_smoothing
    history = []
    for step in range(sched.total_steps):
        epoch, i = divmod(step, sched.steps_per_epoch)
        idx = tr[epoch_order(cfg.seed, epoch, len(tr))[i * batch: (i + 1) * batch]]
        rng = stream(cfg.seed, 0xF7A6, step)
        imgs = _augment(dataset.images[idx], rng, cfg) if (cfg.crop or cfg.flip) else dataset.images[idx]
        patches = patchify(dataset.normalize(imgs), model.config.patch_size).astype(model.dtype)
        for p in params.values():
            p.grad = None
        logits, _ = classifier_forward(model, head, patches, cfg.blocks)
        q = np.full(logits.shape, eps / cfg.n_classes, dtype=model.dtype)
        q[np.arange(len(idx)), labels[idx]] += 1.0 - eps
        loss = T.mean(T.soft_cross_entropy(logits, q))
        loss.backward()
        opt.step(lr_at(sched, step))
        history.append(float(loss.data))
    for p in model.params.values():
        p.requires_grad = True
    acc = float((predict_logits(model, head, dataset_patches(dataset, te, model.config.patch_size),
                                cfg.blocks)[0].argmax(axis=1) == labels[te]).mean()) if te.size else float("nan")
    return FinetuneResult(model, {k: v.data.copy() for k, v in head.items()}, acc, history)


def predict_logits(model, head, patches, k=0, batch_size=256):
    """Inference logits and penultimate features of a classifier built by fine-tuning."""
    head = {n: Tensor(v.data if isinstance(v, Tensor) else v) for n, v in head.items()}
    logits, feats = [], []
    with T.no_grad():
        for s in range(0, len(patches), batch_size):
            lg, f = classifier_forward(model, head, patches[s: s + batch_size], k)
            logits.append(lg.data)
            feats.append(f.data)
    return np.concatenate(logits), np.concatenate(feats)
