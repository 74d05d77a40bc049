import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m3ae.data import (PAD, UNK, BatchConfig, Dataset, DatasetManifest, Vocabulary, build_batch, check_plan,
                       encode_text, patchify, round_half_up, sample_mask, stream, tokenize,
                       train_tokenizer, unpatchify, write_manifest, save_png)
from m3ae.errors import ConfigError, ConsistencyError, DataError
from m3ae.synthetic import SyntheticShapesSpec, generate


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    manifest = generate(SyntheticShapesSpec(n=40, seed=3), root)
    return Dataset.load(manifest)


# -- tokenizer -------------------------------------------------------------------------------
def test_tokenizer_ties_are_lexicographic():
    v = train_tokenizer(["a dog", "a cat"], 5)
    assert v.tokens == ["[PAD]", "[UNK]", "a", "cat", "dog"]
    assert [v.id(t) for t in v.tokens] == [0, 1, 2, 3, 4]


def test_tokenizer_unknown_word_maps_to_unk():
    v = train_tokenizer(["a dog", "a cat"], 5)
    assert v.id("zebra") == UNK


def test_tokenizer_deterministic_and_truncated():
    corpus = ["the red fox", "the blue fox", "a red hen"]
    assert train_tokenizer(corpus, 10).tokens == train_tokenizer(corpus, 10).tokens
    # frequencies: the 2, red 2, fox 2, then singletons a, blue, hen
    assert train_tokenizer(corpus, 5).tokens == ["[PAD]", "[UNK]", "fox", "red", "the"]


def test_tokenizer_lowercases_and_splits_punctuation():
    assert tokenize("A Dog, barking!") == ["a", "dog", ",", "barking", "!"]


def test_tokenizer_errors():
    with pytest.raises(DataError):
        train_tokenizer([], 5)
    with pytest.raises(ConfigError):
        train_tokenizer(["a"], 2)


def test_vocabulary_requires_reserved_tokens(tmp_path):
    with pytest.raises(DataError):
        Vocabulary(["a", "b"])
    v = train_tokenizer(["x y z"], 10)
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == v.tokens


def test_encode_text_examples():
    v = train_tokenizer(["a dog", "a cat"], 5)
    ids, mask = encode_text(v, "a dog", 4)
    assert ids.tolist() == [2, 4, 0, 0] and mask.tolist() == [True, True, False, False]
    ids, mask = encode_text(v, "", 4)
    assert ids.tolist() == [PAD] * 4 and not mask.any()
    ids, mask = encode_text(v, "a dog a cat a dog a cat a dog", 4)
    assert ids.tolist() == [2, 4, 2, 3] and mask.all()
    with pytest.raises(ConfigError):
        encode_text(v, "a", 0)


# -- patches -----------------------------------------------------------------------------------
def test_patchify_geometry():
    assert patchify(np.zeros((32, 32, 3)), 16).shape == (4, 768)
    assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)


def test_patchify_row_major_channel_last():
    img = np.arange(4 * 4 * 3).reshape(4, 4, 3)
    p = patchify(img, 2)
    # patch 1 is the top-right 2x2 block
    assert np.array_equal(p[1], img[0:2, 2:4].reshape(-1))
    assert np.array_equal(p[2], img[2:4, 0:2].reshape(-1))


@given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_patchify_roundtrip(g, p, seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(2, g * p, g * p, 3))
    assert np.array_equal(unpatchify(patchify(img, p), p), img)


def test_patchify_rejects_non_divisor():
    with pytest.raises(ConfigError):
        patchify(np.zeros((10, 10, 3)), 3)


# -- masking -----------------------------------------------------------------------------------
def test_sample_mask_counts():
    keep, mask = sample_mask(4, 0.75, stream(0))
    assert len(mask) == 3 and len(keep) == 1
    keep, mask = sample_mask(16, 0.0, stream(0))
    assert mask.size == 0 and keep.tolist() == list(range(16))
    for bad in (-0.1, 1.0):
        with pytest.raises(ConfigError):
            sample_mask(4, bad, stream(0))
    with pytest.raises(ConfigError):
        sample_mask(0, 0.5, stream(0))


def test_round_half_up():
    assert round_half_up(0.75 * 8) == 6
    assert round_half_up(2.5) == 3 and round_half_up(0.5) == 1
    assert round_half_up(0.75 * 196) == 147


@given(st.integers(1, 64), st.floats(0, 0.99), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=100, deadline=None)
def test_sample_mask_partitions(n, ratio, seed):
    keep, mask = sample_mask(n, ratio, stream(seed))
    assert len(mask) == round_half_up(ratio * n)
    assert np.array_equal(np.sort(np.concatenate([keep, mask])), np.arange(n))
    assert np.all(np.diff(keep) > 0) and np.all(np.diff(mask) > 0)


def test_sample_mask_uniform_frequency():
    # 100k draws, n=8, ratio 0.5: each position masked with frequency 0.5 +- 0.01
    rng = stream(7)
    counts = np.zeros(8)
    draws = 100_000
    for _ in range(draws):
        counts[sample_mask(8, 0.5, rng)[1]] += 1
    assert np.all(np.abs(counts / draws - 0.5) < 0.01)


def test_stream_is_keyed():
    a = stream(1, 2, 3).random(4)
    assert np.array_equal(a, stream(1, 2, 3).random(4))
    assert not np.array_equal(a, stream(1, 3, 2).random(4))


# -- manifest & batches -------------------------------------------------------------------------
def test_manifest_roundtrip_and_errors(tmp_path):
    img = np.zeros((8, 8, 3), np.uint8)
    save_png(tmp_path / "x.png", img)
    write_manifest(tmp_path / "m.jsonl", [{"id": "x", "image": "x.png", "caption": None}], 8,
                   [0.1, 0.2, 0.3], [1, 1, 1])
    m = DatasetManifest.load(tmp_path / "m.jsonl")
    assert m.image_size == 8 and m.paired_fraction == 0.0
    write_manifest(tmp_path / "bad.jsonl", [{"id": "y", "image": "missing.png", "caption": None}], 8,
                   [0, 0, 0], [1, 1, 1])
    with pytest.raises(DataError, match="missing.png"):
        Dataset.load(tmp_path / "bad.jsonl")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    write_manifest(tmp_path / "junk.jsonl", [{"id": "z", "image": "junk.png", "caption": None}], 8,
                   [0, 0, 0], [1, 1, 1])
    with pytest.raises(DataError, match="junk.png"):
        Dataset.load(tmp_path / "junk.jsonl")


def test_dataset_normalization_statistics(shapes):
    x = shapes.normalize(shapes.images).reshape(-1, 3)
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)
    assert np.all(np.abs(x.std(axis=0) - 1) < 0.05)


def test_denormalize_roundtrip(shapes):
    assert np.array_equal(shapes.denormalize(shapes.normalize(shapes.images)), shapes.images)


def test_build_batch_contract(shapes):
    cfg = BatchConfig(patch_size=4, max_text_len=16, r_img=0.75, r_txt=0.75)
    b = build_batch(shapes, np.arange(8), cfg, stream(0, 1))
    assert b.images.shape == (8, 64, 48)
    assert b.token_ids.max() < len(shapes.vocab)
    for plan, n_real in zip(b.plans, b.n_real):
        check_plan(plan, 64, int(n_real))
        assert len(plan.image_mask) == 48
        assert len(plan.text_mask) == round_half_up(0.75 * n_real)
        assert np.all(b.pad_mask[0][plan.text_mask]) if n_real else True
    b2 = build_batch(shapes, np.arange(8), cfg, stream(0, 1))
    assert np.array_equal(b.images, b2.images) and np.array_equal(b.token_ids, b2.token_ids)
    assert all(np.array_equal(p.image_mask, q.image_mask) for p, q in zip(b.plans, b2.plans))


def test_build_batch_eight_tokens_masks_six(tmp_path):
    img = np.zeros((8, 8, 3), np.uint8)
    save_png(tmp_path / "x.png", img)
    caption = "one two three four five six seven eight"
    train_tokenizer([caption], 20).save(tmp_path / "v.txt")
    write_manifest(tmp_path / "m.jsonl", [{"id": "x", "image": "x.png", "caption": caption}], 8,
                   [0.5] * 3, [0.2] * 3, "v.txt")
    ds = Dataset.load(tmp_path / "m.jsonl")
    b = build_batch(ds, [0], BatchConfig(4, 16, 0.75, 0.75), stream(0))
    assert len(b.plans[0].text_mask) == 6 and len(b.plans[0].text_keep) == 2
    assert b.plans[0].text_mask.max() < 8


def test_unpaired_batch_has_no_text(shapes):
    ds = shapes.with_paired_fraction(0.0, seed=0)
    b = build_batch(ds, np.arange(6), BatchConfig(4, 16), stream(0))
    assert not b.text_present.any() and not b.pad_mask.any()
    assert all(p.text_keep.size == 0 and p.text_mask.size == 0 for p in b.plans)


def test_paired_fraction_exact(shapes):
    for q in (0.0, 0.1, 0.3, 1.0):
        ds = shapes.with_paired_fraction(q, seed=1)
        assert sum(c is not None for c in ds.captions) == round_half_up(q * len(shapes))


def test_build_batch_errors(shapes):
    with pytest.raises(ConfigError):
        build_batch(shapes, [], BatchConfig(4, 16), stream(0))
    with pytest.raises(ConfigError):
        build_batch(shapes, [0], BatchConfig(5, 16), stream(0))
    with pytest.raises(ConfigError):
        build_batch(shapes, [len(shapes)], BatchConfig(4, 16), stream(0))


def test_check_plan_rejects_bad_partition(shapes):
    b = build_batch(shapes, [0], BatchConfig(4, 16), stream(0))
    with pytest.raises(ConsistencyError):
        check_plan(b.plans[0], 63, int(b.n_real[0]))


def test_augment_is_seeded(shapes):
    cfg = BatchConfig(4, 16, augment=True)
    a = build_batch(shapes, np.arange(4), cfg, stream(5))
    b = build_batch(shapes, np.arange(4), cfg, stream(5))
    c = build_batch(shapes, np.arange(4), cfg, stream(6))
    assert np.array_equal(a.images, b.images) and not np.array_equal(a.images, c.images)


# -- synthetic generator -------------------------------------------------------------------------
def test_generate_is_byte_identical(tmp_path):
    spec = SyntheticShapesSpec(n=12, seed=9, paired_fraction=0.5)
    m1 = generate(spec, tmp_path / "a")
    m2 = generate(spec, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()


def test_generate_paired_fraction_and_labels(tmp_path):
    m = generate(SyntheticShapesSpec(n=50, seed=2, paired_fraction=0.3), tmp_path)
    recs = [json.loads(line) for line in m.read_text().splitlines()]
    assert sum(r["caption"] is not None for r in recs) == 15
    assert all(0 <= r["label"] < 16 and r["label"] == 4 * r["shape"] + r["color"] for r in recs)


def test_generate_caption_matches_content(shapes):
    from m3ae.synthetic import COLORS, SHAPES

    for rec, caption in zip(shapes.manifest.records, shapes.captions):
        words = caption.split()
        assert words[1] == list(COLORS)[rec["color"]] and words[2] == SHAPES[rec["shape"]]
        x0, y0, x1, y1 = rec["bbox"]
        img = shapes.images[int(rec["id"])]
        inside = img[y0:y1, x0:x1].astype(int)
        target = np.array(COLORS[words[1]])
        assert (np.abs(inside - target).max(axis=-1) <= 15).any()  # the shape is drawn in its box


def test_noise_kind_has_no_captions(tmp_path):
    m = generate(SyntheticShapesSpec(n=5, kind="noise"), tmp_path)
    ds = Dataset.load(m)
    assert ds.vocab is None and all(c is None for c in ds.captions)
