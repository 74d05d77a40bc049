import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m3ae import tensor as T
from m3ae.data import MaskPlan, MultimodalBatch
from m3ae.errors import ConfigError
from m3ae.gradcheck import check_model, random_batch
from m3ae.model import ModelConfig
from m3ae.objective import DegenerateLossError, LossWeights, masked_image_loss, masked_text_loss, total_loss
from m3ae.tensor import Tensor

EMPTY = np.zeros(0, np.int64)


def _plan(img_mask, n_img, txt_mask=EMPTY, n_txt=0):
    img_mask = np.asarray(img_mask, np.int64)
    txt_mask = np.asarray(txt_mask, np.int64)
    return MaskPlan(np.setdiff1d(np.arange(n_img), img_mask), img_mask,
                    np.setdiff1d(np.arange(n_txt), txt_mask), txt_mask, 0.75, 0.75)


def test_image_loss_zero_and_offset():
    rng = np.random.default_rng(0)
    target = rng.standard_normal((2, 4, 6))
    plans = [_plan([0, 2], 4), _plan([1], 4)]
    loss, n = masked_image_loss(Tensor(target), target, plans)
    assert float(loss.data) == 0.0 and n == 3
    loss, _ = masked_image_loss(Tensor(target + 1.0), target, plans)
    assert float(loss.data) == pytest.approx(1.0)


def test_image_loss_pools_over_masked_elements():
    pred = np.zeros((2, 3, 2))
    target = np.zeros((2, 3, 2))
    target[0, 0] = 3.0  # masked in example 0
    target[1, 1] = 1.0  # masked in example 1
    target[1, 2] = 100.0  # visible: must be ignored
    plans = [_plan([0], 3), _plan([0, 1], 3)]
    loss, n = masked_image_loss(Tensor(pred), target, plans)
    # pooled: (9 + 9 + 1 + 1) / (3 patches * 2 elements)
    assert n == 3 and float(loss.data) == pytest.approx(20 / 6)


def test_image_loss_gradient_is_local():
    rng = np.random.default_rng(1)
    pred = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
    plans = [_plan([1, 4], 5), _plan([0], 5)]
    loss, _ = masked_image_loss(pred, rng.standard_normal((2, 5, 3)), plans)
    loss.backward()
    visible = [np.setdiff1d(np.arange(5), p.image_mask) for p in plans]
    for r, v in enumerate(visible):
        assert np.all(pred.grad[r, v] == 0)
    assert np.all(pred.grad[0, [1, 4]] != 0)


def test_image_loss_norm_pix():
    rng = np.random.default_rng(2)
    target = rng.standard_normal((1, 2, 8)) * 5 + 3
    plans = [_plan([0, 1], 2)]
    t = target[0]
    normed = (t - t.mean(-1, keepdims=True)) / np.sqrt(t.var(-1, keepdims=True) + 1e-6)
    loss, _ = masked_image_loss(Tensor(normed[None]), target, plans, norm_pix=True)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_image_loss_degenerate():
    with pytest.raises(DegenerateLossError):
        masked_image_loss(Tensor(np.zeros((1, 4, 2))), np.zeros((1, 4, 2)), [_plan([], 4)])


def test_text_loss_uniform_logits():
    v = 30
    plans = [_plan([], 1, [0, 2], 4)]
    loss, n = masked_text_loss(Tensor(np.zeros((1, 4, v))), np.array([[3, 4, 5, 6]]), plans)
    assert n == 2 and float(loss.data) == pytest.approx(math.log(30))
    assert math.log(30) == pytest.approx(3.4012, abs=1e-4)


def test_text_loss_margin_limit():
    ids = np.array([[2, 3]])
    plans = [_plan([], 1, [0, 1], 2)]
    values = []
    for margin in (1.0, 5.0, 20.0):
        logits = np.zeros((1, 2, 5))
        logits[0, 0, 2] = logits[0, 1, 3] = margin
        values.append(float(masked_text_loss(Tensor(logits), ids, plans)[0].data))
    assert values[0] > values[1] > values[2] and values[2] < 1e-7


def test_text_loss_all_unpaired():
    plans = [_plan([0], 2), _plan([1], 2)]
    loss, n = masked_text_loss(None, np.zeros((2, 4), np.int64), plans)
    assert n == 0 and float(loss.data) == 0.0


def test_text_loss_ignores_pad_and_visible_logits():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((2, 4, 6))
    ids = np.array([[2, 3, 4, 0], [5, 2, 0, 0]])
    plans = [_plan([], 1, [1, 2], 3), _plan([], 1, [0], 2)]
    ref = float(masked_text_loss(Tensor(logits), ids, plans)[0].data)
    poked = logits.copy()
    poked[0, 3] += 50  # PAD position
    poked[1, 2:] -= 50  # PAD positions
    poked[0, 0] += 7  # visible token
    poked[1, 1] += 7  # visible token
    assert float(masked_text_loss(Tensor(poked), ids, plans)[0].data) == ref


def test_total_loss_arithmetic():
    w = LossWeights()
    assert (w.w_img, w.w_txt) == (1.0, 0.5)
    img = T.Tensor(np.float64(0.8))
    txt = T.Tensor(np.float64(2.0))
    assert float((T.scale(img, w.w_img) + T.scale(txt, w.w_txt)).data) == pytest.approx(1.8)
    with pytest.raises(ConfigError):
        LossWeights(w_txt=-1)


def test_total_loss_breakdown_consistency():
    cfg = ModelConfig.from_preset("tiny", vocab_size=12)
    rng = np.random.default_rng(4)
    batch = random_batch(cfg, rng, n=3)
    pred = Tensor(rng.standard_normal((3, cfg.n_patches, cfg.patch_dim)))
    logits = Tensor(rng.standard_normal((3, int(batch.n_real.max()), cfg.vocab_size)))
    w = LossWeights(1.0, 0.5)
    br = total_loss(pred, logits, batch, w)
    assert float(br.total.data) == pytest.approx(w.w_img * br.image_mse + w.w_txt * br.text_ce, rel=1e-12)
    br0 = total_loss(pred, logits, batch, LossWeights(1.0, 0.0))
    assert float(br0.total.data) == br0.image_mse  # w_txt = 0 is the image-only objective
    assert br.img_masked == sum(len(p.image_mask) for p in batch.plans)
    assert br.txt_masked == sum(len(p.text_mask) for p in batch.plans)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_mixture_linearity(seed):
    # component losses of a concatenated batch are masked-count-weighted means of the parts
    cfg = ModelConfig.from_preset("tiny", vocab_size=10, max_text_len=8)
    rng = np.random.default_rng(seed)
    paired = random_batch(cfg, rng, n=2)
    paired = MultimodalBatch(paired.images[:1], paired.token_ids[:1], paired.text_present[:1],
                             paired.pad_mask[:1], paired.plans[:1])
    unpaired = random_batch(cfg, rng, n=1)
    both = MultimodalBatch(np.concatenate([paired.images, unpaired.images]),
                           np.concatenate([paired.token_ids, unpaired.token_ids]),
                           np.concatenate([paired.text_present, unpaired.text_present]),
                           np.concatenate([paired.pad_mask, unpaired.pad_mask]),
                           paired.plans + unpaired.plans)
    pred = rng.standard_normal((2, cfg.n_patches, cfg.patch_dim))
    lb = int(paired.n_real.max())
    logits = rng.standard_normal((2, lb, cfg.vocab_size))
    w = LossWeights()
    a = total_loss(Tensor(pred[:1]), Tensor(logits[:1]), paired, w)
    b = total_loss(Tensor(pred[1:]), None, unpaired, w)
    c = total_loss(Tensor(pred), Tensor(logits), both, w)
    expect_img = (a.image_mse * a.img_masked + b.image_mse * b.img_masked) / (a.img_masked + b.img_masked)
    assert c.image_mse == pytest.approx(expect_img, rel=1e-6)
    assert c.text_ce == pytest.approx(a.text_ce, rel=1e-6) and b.text_empty


def test_total_loss_gradient_oracle():
    cfg = ModelConfig.from_preset("tiny", vocab_size=16, enc_depth=1, dec_depth=1)
    report = check_model(cfg, tol=1e-3, seed=3)
    assert report.passed, report.failures[:3]
