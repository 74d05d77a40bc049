"""Dataset ingestion, tokenization, patchification, masking and batching.

On-disk layout of a dataset:

* ``<name>.jsonl``: one record per line, ``{"image": relative path, "caption": str | null}``
  plus optional label fields (``label``, ``shape``, ``color``, ``bbox``, ``id``).
* ``<name>.header.json``: ``{"image_size", "mean", "std", "vocab"}``; ``vocab`` is a
  path relative to the header, to a UTF-8 file with one token per line (line = id).
"""
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from m3ae.errors import ConfigError, ConsistencyError, DataError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "[PAD]", "[UNK]"
_WORD_RE = re.compile(r"\w+|[^\w\s]")


def stream(seed, *keys):
    """Counter-based generator keyed by ``(seed, *keys)``.

    Philox is a counter-based bit generator; every distinct key tuple yields an
    independent stream, so e.g. a batch's randomness depends only on
    ``(seed, epoch, batch_index)`` and never on which worker produced it.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


# -- text ----------------------------------------------------------------------
def tokenize(text):
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError("vocabulary must start with the PAD and UNK tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self.index.get(token, UNK)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls(lines)


def train_tokenizer(corpus, max_vocab):
    """Word-level vocabulary of the ``max_vocab - 2`` most frequent types.

    Frequency ties are broken lexicographically; ids 0 and 1 are PAD and UNK.
    """
    if max_vocab < 3:
        raise ConfigError(f"max_vocab must be at least 3, got {max_vocab}")
    counts = Counter()
    n_docs = 0
    for caption in corpus:
        n_docs += 1
        counts.update(tokenize(caption))
    if not n_docs or not counts:
        raise DataError("cannot train a tokenizer on an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + [t for t, _ in ranked[: max_vocab - 2]])


def encode_text(vocab, caption, max_len):
    """Returns ``(ids[max_len], real[max_len])``; ``real`` is True at non-PAD positions."""
    if max_len < 1:
        raise ConfigError(f"caption length cap must be >= 1, got {max_len}")
    ids = np.full(max_len, PAD, dtype=np.int64)
    words = tokenize(caption or "")[:max_len]
    ids[: len(words)] = [vocab.id(w) for w in words]
    real = np.zeros(max_len, dtype=bool)
    real[: len(words)] = True
    return ids, real


# -- images --------------------------------------------------------------------
def patchify(images, patch):
    """``[..., S, S, C] -> [..., (S/P)^2, P*P*C]``, row-major patches, channel-last."""
    images = np.asarray(images)
    s = images.shape[-2]
    if images.shape[-3] != s:
        raise ConfigError(f"images must be square, got {images.shape[-3:]}")
    if patch <= 0 or s % patch:
        raise ConfigError(f"patch size {patch} does not divide image size {s}")
    g, c = s // patch, images.shape[-1]
    lead = images.shape[:-3]
    x = images.reshape(*lead, g, patch, g, patch, c)
    x = np.moveaxis(x, -4, -3)  # [..., g, g, P, P, C]
    return np.ascontiguousarray(x).reshape(*lead, g * g, patch * patch * c)


def unpatchify(patches, patch, channels=3):
    patches = np.asarray(patches)
    n = patches.shape[-2]
    g = int(round(math.sqrt(n)))
    if g * g != n or patches.shape[-1] != patch * patch * channels:
        raise ConfigError(f"cannot unpatchify {patches.shape} with patch {patch}")
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, g, g, patch, patch, channels)
    x = np.moveaxis(x, -3, -4)  # [..., g, P, g, P, C]
    return np.ascontiguousarray(x).reshape(*lead, g * patch, g * patch, channels)


def load_image(path, size):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def save_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")


def channel_stats(images):
    """Per-channel mean and std of uint8 images in [0, 1] units."""
    x = np.asarray(images, dtype=np.float64).reshape(-1, 3) / 255.0
    return x.mean(axis=0), x.std(axis=0)


def random_resized_crop(image, rng, scale=(0.5, 1.0)):
    """Square crop covering a uniform fraction of the area, resized back bilinearly."""
    s = image.shape[0]
    side = max(1, int(round(s * math.sqrt(rng.uniform(*scale)))))
    x0 = int(rng.integers(0, s - side + 1))
    y0 = int(rng.integers(0, s - side + 1))
    im = Image.fromarray(image).resize((s, s), Image.BILINEAR, box=(x0, y0, x0 + side, y0 + side))
    return np.asarray(im, dtype=np.uint8)


# -- manifest & dataset ------------------------------------------------------------
def header_path(manifest_path):
    p = Path(manifest_path)
    return p.with_name(p.name[: -len(".jsonl")] + ".header.json" if p.name.endswith(".jsonl")
                       else p.name + ".header.json")


def write_manifest(path, records, image_size, mean, std, vocab_file=None):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    header = {"image_size": int(image_size), "mean": [float(m) for m in mean],
              "std": [float(s) for s in std], "vocab": vocab_file}
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


@dataclass
class DatasetManifest:
    path: Path
    records: list
    image_size: int
    mean: np.ndarray
    std: np.ndarray
    vocab_file: Path | None = None

    @property
    def root(self):
        return self.path.parent

    @property
    def paired_fraction(self):
        if not self.records:
            return 0.0
        return sum(r.get("caption") is not None for r in self.records) / len(self.records)

    @classmethod
    def load(cls, path):
        path = Path(path)
        hpath = header_path(path)
        try:
            header = json.loads(hpath.read_text())
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"bad manifest header {hpath}: {exc}") from exc
        records = []
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if "image" not in rec:
                raise DataError(f"{path}:{lineno}: record has no 'image' field")
            rec.setdefault("caption", None)
            records.append(rec)
        for key in ("image_size", "mean", "std"):
            if key not in header:
                raise DataError(f"{hpath}: missing '{key}'")
        vocab = header.get("vocab")
        return cls(path, records, int(header["image_size"]), np.asarray(header["mean"], np.float64),
                   np.asarray(header["std"], np.float64), hpath.parent / vocab if vocab else None)


class Dataset:
    """A manifest with all images decoded into memory (desk scale)."""

    def __init__(self, manifest, vocab=None):
        self.manifest = manifest
        if vocab is None and manifest.vocab_file is not None:
            vocab = Vocabulary.load(manifest.vocab_file)
        self.vocab = vocab
        s = manifest.image_size
        self.images = np.stack([load_image(manifest.root / r["image"], s) for r in manifest.records]) \
            if manifest.records else np.zeros((0, s, s, 3), np.uint8)
        self.captions = [r.get("caption") for r in manifest.records]
        if self.vocab is None and any(c is not None for c in self.captions):
            raise DataError(f"{manifest.path}: captions present but no vocabulary available")
        self.mean = manifest.mean.astype(np.float32)
        self.std = manifest.std.astype(np.float32)

    @classmethod
    def load(cls, path, vocab=None):
        return cls(DatasetManifest.load(path), vocab)

    def __len__(self):
        return len(self.captions)

    @property
    def image_size(self):
        return self.manifest.image_size

    @property
    def paired_fraction(self):
        return sum(c is not None for c in self.captions) / max(len(self), 1)

    def ids(self):
        return [r.get("id", str(i)) for i, r in enumerate(self.manifest.records)]

    def labels(self, key="label"):
        try:
            return np.array([r[key] for r in self.manifest.records], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{self.manifest.path}: records lack label field '{key}'") from exc

    def with_paired_fraction(self, fraction, seed):
        """Copy where only ``round(fraction * n)`` of the captioned examples keep captions.

        The kept subset is a seeded uniform choice among captioned records.
        """
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"paired fraction must lie in [0, 1], got {fraction}")
        out = object.__new__(Dataset)
        out.__dict__.update(self.__dict__)
        captioned = [i for i, c in enumerate(self.captions) if c is not None]
        n_keep = min(round_half_up(fraction * len(self)), len(captioned))
        keep = set(stream(seed, 0x9A1D).permutation(captioned)[:n_keep].tolist())
        out.captions = [c if i in keep else None for i, c in enumerate(self.captions)]
        return out

    def normalize(self, images):
        return ((np.asarray(images, np.float32) / np.float32(255.0)) - self.mean) / self.std

    def denormalize(self, x):
        """Inverse of :meth:`normalize`, rounded to uint8."""
        pix = (np.asarray(x, np.float32) * self.std + self.mean) * np.float32(255.0)
        return np.clip(np.rint(pix), 0, 255).astype(np.uint8)


# -- masking & batching --------------------------------------------------------------
@dataclass
class MaskPlan:
    image_keep: np.ndarray
    image_mask: np.ndarray
    text_keep: np.ndarray
    text_mask: np.ndarray
    r_img: float
    r_txt: float


def sample_mask(n_positions, ratio, rng):
    """Uniform random subset of ``round(ratio * n)`` positions to mask.

    Returns sorted ``(keep, mask)`` index arrays partitioning ``range(n)``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    if n_positions < 1:
        raise ConfigError(f"need at least one position to mask, got {n_positions}")
    n_mask = round_half_up(ratio * n_positions)
    perm = rng.permutation(n_positions)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


@dataclass
class BatchConfig:
    patch_size: int = 16
    max_text_len: int = 32
    r_img: float = 0.75
    r_txt: float = 0.75
    augment: bool = False
    crop_scale: tuple = (0.5, 1.0)


@dataclass
class MultimodalBatch:
    images: np.ndarray  # [B, N_img, P*P*3], normalized
    token_ids: np.ndarray  # [B, L]
    text_present: np.ndarray  # [B]
    pad_mask: np.ndarray  # [B, L], True at real tokens
    plans: list
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_real(self):
        return self.pad_mask.sum(axis=1)


def build_batch(dataset, indices, config, rng):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ConfigError("cannot build a batch with zero examples")
    if indices.min() < 0 or indices.max() >= len(dataset):
        raise ConfigError(f"batch indices out of range for {len(dataset)} examples")
    s = dataset.image_size
    if s % config.patch_size:
        raise ConfigError(f"patch size {config.patch_size} does not divide image size {s}")
    n_img = (s // config.patch_size) ** 2
    b, L = len(indices), config.max_text_len

    raw = dataset.images[indices]
    if config.augment:
        raw = np.stack([random_resized_crop(im, rng, config.crop_scale) for im in raw])
    images = patchify(dataset.normalize(raw), config.patch_size)

    token_ids = np.zeros((b, L), np.int64)
    pad_mask = np.zeros((b, L), bool)
    present = np.zeros(b, bool)
    plans = []
    empty = np.zeros(0, np.int64)
    for row, i in enumerate(indices):
        caption = dataset.captions[i]
        if caption is not None:
            present[row] = True
            token_ids[row], pad_mask[row] = encode_text(dataset.vocab, caption, L)
        img_keep, img_mask = sample_mask(n_img, config.r_img, rng)
        n_real = int(pad_mask[row].sum())
        if n_real:
            txt_keep, txt_mask = sample_mask(n_real, config.r_txt, rng)
        else:
            txt_keep, txt_mask = empty, empty
        plans.append(MaskPlan(img_keep, img_mask, txt_keep, txt_mask, config.r_img, config.r_txt))
    return MultimodalBatch(images.astype(np.float32), token_ids, present, pad_mask, plans, indices)


def check_plan(plan, n_img, n_real):
    """Raise :class:`ConsistencyError` unless ``plan`` partitions the example's positions."""
    for keep, mask, n, what in ((plan.image_keep, plan.image_mask, n_img, "image"),
                                (plan.text_keep, plan.text_mask, n_real, "text")):
        both = np.concatenate([keep, mask])
        if both.size != n or (n and not np.array_equal(np.sort(both), np.arange(n))):
            raise ConsistencyError(f"{what} plan does not partition {n} positions")
