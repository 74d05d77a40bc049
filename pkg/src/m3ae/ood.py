"""Out-of-distribution scoring: Mahalanobis distance, max softmax, AUROC."""
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from m3ae.data import patchify
from m3ae.errors import ConfigError, DataError, NumericError
from m3ae.train import FinetuneConfig, partial_finetune, predict_logits, split_indices


@dataclass
class GaussianFit:
    classes: np.ndarray
    means: np.ndarray  # [C, d]
    cov: np.ndarray  # [d, d] shared within-class covariance
    eps: float
    cho: tuple  # Cholesky factor of cov + eps * I

    def precision(self):
        return linalg.cho_solve(self.cho, np.eye(self.cov.shape[0]))


def fit_gaussian(features, labels, eps=None):
    """Class means and tied covariance (pooled within-class scatter / n).

    ``eps`` defaults to ``1e-4 * trace(cov) / d``.
    """
    x = np.asarray(features, np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(labels):
        raise DataError(f"features {x.shape} and labels {labels.shape} disagree")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size == 0 or counts.min() < 2:
        raise DataError("every class needs at least two samples for a covariance fit")
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    centered = x - means[np.searchsorted(classes, labels)]
    cov = centered.T @ centered / len(x)
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    if eps is None:
        eps = 1e-4 * np.trace(cov) / d
    if not eps > 0:
        raise ConfigError(f"covariance regularizer must be positive, got {eps}")
    reg = cov + eps * np.eye(d)
    try:
        cho = linalg.cho_factor(reg, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError(f"covariance not positive definite (condition ~{np.linalg.cond(reg):.3g})") from exc
    return GaussianFit(classes, means, cov, float(eps), cho)


def mahalanobis_score(fit, x):
    """``min_c (x - mu_c)^T (cov + eps I)^-1 (x - mu_c)``; higher means more OOD."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    if x.shape[1] != fit.means.shape[1]:
        raise DataError(f"feature dim {x.shape[1]} != fit dim {fit.means.shape[1]}")
    best = np.full(len(x), np.inf)
    for mu in fit.means:
        diff = x - mu
        q = np.einsum("nd,dn->n", diff, linalg.cho_solve(fit.cho, diff.T))
        best = np.minimum(best, q)
    return best


def max_softmax_score(logits):
    """Negated maximum class probability; higher means more OOD."""
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return -(p.max(axis=1) / p.sum(axis=1))


def auroc(in_scores, out_scores):
    """P(random OOD score > random in-distribution score), ties counted 1/2."""
    a = np.asarray(in_scores, np.float64).ravel()
    b = np.asarray(out_scores, np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("AUROC needs non-empty in- and out-distribution score sets")
    ranks = rankdata(np.concatenate([a, b]))
    r_out = ranks[a.size:].sum()
    return float((r_out - b.size * (b.size + 1) / 2.0) / (a.size * b.size))


@dataclass
class OodConfig:
    method: str = "mahalanobis"
    blocks: int = -1  # -1: fine-tune every encoder block
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1024
    epochs: float = 100
    warmup_epochs: float = 10
    label_key: str = "shape"
    n_classes: int = 4
    eps: float | None = None
    test_fraction: float = 0.2
    split_seed: int = 0
    seed: int = 0


METHODS = ("mahalanobis", "max_softmax")


def ood_benchmark(model, in_ds, out_ds, cfg, checkpoint=None):
    """Fine-tune on the in-distribution train split, then score both held-out splits.

    Both datasets are normalized with the in-distribution statistics. Returns the
    report dictionary with the AUROC of every method.
    """
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown OOD method {cfg.method!r}; choose from {METHODS}")
    k = model.config.enc_depth if cfg.blocks < 0 else cfg.blocks
    ft = partial_finetune(model, in_ds, FinetuneConfig(
        blocks=k, base_lr=cfg.base_lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
        beta2=cfg.beta2, batch_size=cfg.batch_size, epochs=cfg.epochs,
        warmup_epochs=cfg.warmup_epochs, label_smoothing=0.0, flip=True, crop=False,
        label_key=cfg.label_key, n_classes=cfg.n_classes, test_fraction=cfg.test_fraction,
        split_seed=cfg.split_seed, seed=cfg.seed))
    p = model.config.patch_size
    tr, te = split_indices(len(in_ds), cfg.test_fraction, cfg.split_seed)
    _, te_out = split_indices(len(out_ds), cfg.test_fraction, cfg.split_seed)
    if te.size == 0 or te_out.size == 0:
        raise DataError("held-out splits are empty; raise test_fraction or dataset size")

    def run(ds, idx):
        patches = patchify(in_ds.normalize(ds.images[idx]), p).astype(model.dtype)
        return predict_logits(ft.model, ft.head, patches, k)

    tr_logits, tr_feats = run(in_ds, tr)
    in_logits, in_feats = run(in_ds, te)
    out_logits, out_feats = run(out_ds, te_out)
    fit = fit_gaussian(tr_feats, in_ds.labels(cfg.label_key)[tr], cfg.eps)
    scores = {
        "mahalanobis": (mahalanobis_score(fit, in_feats), mahalanobis_score(fit, out_feats)),
        "max_softmax": (max_softmax_score(in_logits), max_softmax_score(out_logits)),
    }
    aurocs = {m: auroc(*s) for m, s in scores.items()}
    return {"method": cfg.method, "auroc": aurocs[cfg.method], "aurocs": aurocs,
            "n_in": int(te.size), "n_out": int(te_out.size), "checkpoint": checkpoint,
            "seed": cfg.seed, "finetune_accuracy": ft.accuracy, "config": asdict(cfg)}
