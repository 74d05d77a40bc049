"""The multimodal masked autoencoder network.

A batch is processed as padded ``[B, T, D]`` sequences with a key-validity mask
so that examples with different numbers of visible text tokens share one set
of batched matmuls. Padded rows are zero-filled and never attended to, so they
cannot influence valid rows.

Encoder sequence order is CLS, visible image patches (ascending patch index),
visible text tokens (ascending position). The decoder sequence is CLS, all
image positions, all real text positions of the longest caption in the batch.
"""
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from m3ae import tensor as T
from m3ae.data import PAD, check_plan, stream
from m3ae.errors import ConfigError, ConsistencyError, DataError
from m3ae.tensor import Tensor

PRESETS = {
    # desk-scale model for the synthetic shapes corpus
    "tiny": dict(image_size=32, patch_size=4, enc_dim=64, enc_depth=4, enc_heads=4,
                 dec_dim=64, dec_depth=2, dec_heads=4, max_text_len=16),
    # 48px canvas with 8px patches; thin decoder keeps a 2,000-image run near four minutes
    "desk": dict(image_size=48, patch_size=8, enc_dim=64, enc_depth=4, enc_heads=4,
                 dec_dim=32, dec_depth=1, dec_heads=2, max_text_len=16),
    "S": dict(enc_dim=384, enc_depth=12, enc_heads=6),
    "B": dict(enc_dim=768, enc_depth=12, enc_heads=12),
    "L": dict(enc_dim=1024, enc_depth=24, enc_heads=16),
}


@dataclass
class ModelConfig:
    preset: str = "B"
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    vocab_size: int = 30522
    max_text_len: int = 32
    enc_dim: int = 768
    enc_depth: int = 12
    enc_heads: int = 12
    dec_dim: int = 512
    dec_depth: int = 8
    dec_heads: int = 16
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        values = {"preset": name, **PRESETS[name], **overrides}
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("embedding widths must be divisible by their head counts")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide {self.image_size}")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ConfigError("2-d sin-cos positions need widths divisible by 4")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.channels

    def param_shapes(self):
        """Ordered ``name -> shape`` for every learnable parameter."""
        D, Dd, V, L, pd = self.enc_dim, self.dec_dim, self.vocab_size, self.max_text_len, self.patch_dim
        shapes = {
            "enc.patch.w": (pd, D), "enc.patch.b": (D,),
            "enc.tok": (V, D), "enc.txt_pos": (L, D),
            "enc.type_img": (D,), "enc.type_txt": (D,), "enc.cls": (D,),
        }
        for i in range(self.enc_depth):
            shapes.update(_block_shapes(f"enc.blocks.{i}", D, self.mlp_ratio))
        shapes.update({"enc.norm.w": (D,), "enc.norm.b": (D,),
                       "dec.embed.w": (D, Dd), "dec.embed.b": (Dd,),
                       "dec.mask_token": (Dd,), "dec.cls_pos": (Dd,), "dec.txt_pos": (L, Dd),
                       "dec.type_img": (Dd,), "dec.type_txt": (Dd,)})
        for i in range(self.dec_depth):
            shapes.update(_block_shapes(f"dec.blocks.{i}", Dd, self.mlp_ratio))
        shapes.update({"dec.norm.w": (Dd,), "dec.norm.b": (Dd,),
                       "dec.img_head.w": (Dd, pd), "dec.img_head.b": (pd,),
                       "dec.txt_head.w": (Dd, V), "dec.txt_head.b": (V,)})
        return shapes

    def param_count(self, include=None):
        return sum(int(np.prod(s)) for n, s in self.param_shapes().items()
                   if include is None or include(n))


def _block_shapes(prefix, d, ratio):
    h = d * ratio
    out = {}
    for ln in ("ln1", "ln2"):
        out[f"{prefix}.{ln}.w"] = (d,)
        out[f"{prefix}.{ln}.b"] = (d,)
    for proj in ("q", "k", "v", "proj"):
        out[f"{prefix}.attn.{proj}.w"] = (d, d)
        out[f"{prefix}.attn.{proj}.b"] = (d,)
    out.update({f"{prefix}.mlp.fc1.w": (d, h), f"{prefix}.mlp.fc1.b": (h,),
                f"{prefix}.mlp.fc2.w": (h, d), f"{prefix}.mlp.fc2.b": (d,)})
    return out


def sincos_2d(dim, grid):
    """Fixed ``[grid*grid, dim]`` table: half the channels encode rows, half columns."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def enc(pos):
        angles = pos.reshape(-1, 1) * omega[None]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    return np.concatenate([enc(rows), enc(cols)], axis=1)


def trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def init_value(name, shape, seed):
    if name.endswith(".b") or name in ("dec.cls_pos",):
        return np.zeros(shape)
    if name.endswith(".w") and (".ln" in name or name.endswith("norm.w")):
        return np.ones(shape)
    return trunc_normal(stream(seed, zlib.crc32(name.encode())), shape)


class M3AE:
    """Named parameter collection plus the fixed 2-d positional tables."""

    def __init__(self, config, seed=0, dtype=np.float32, params=None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        shapes = config.param_shapes()
        if params is None:
            params = {n: init_value(n, s, seed) for n, s in shapes.items()}
        missing = set(shapes) - set(params)
        if missing:
            raise DataError(f"missing parameters: {sorted(missing)[:5]}")
        self.params = {}
        for n, s in shapes.items():
            arr = np.asarray(params[n], dtype=self.dtype)
            if arr.shape != tuple(s):
                raise DataError(f"parameter {n} has shape {arr.shape}, expected {tuple(s)}")
            self.params[n] = Tensor(arr.copy(), requires_grad=True, name=n)
        self.enc_pos = sincos_2d(config.enc_dim, config.grid).astype(self.dtype)
        self.dec_pos = sincos_2d(config.dec_dim, config.grid).astype(self.dtype)

    def __getitem__(self, name):
        return self.params[name]

    def astype(self, dtype):
        return M3AE(self.config, dtype=dtype, params={n: p.data for n, p in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def state(self):
        return {n: p.data for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self):
        return sum(p.size for p in self.params.values())


# -- building blocks ------------------------------------------------------------------
def linear(x, model, prefix):
    return T.matmul(x, model[prefix + ".w"]) + model[prefix + ".b"]


def attention(x, model, prefix, heads, key_mask, capture=None):
    b, t, d = x.shape
    dh = d // heads
    q = T.transpose(T.reshape(linear(x, model, prefix + ".q"), (b, t, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(linear(x, model, prefix + ".k"), (b, t, heads, dh)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(linear(x, model, prefix + ".v"), (b, t, heads, dh)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, k), 1.0 / np.sqrt(dh))
    probs = T.softmax(scores, key_mask=key_mask)
    if capture is not None:
        capture.append(probs.data)
    out = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return linear(out, model, prefix + ".proj")


def block(x, model, prefix, heads, key_mask, eps, capture=None):
    h = T.layer_norm(x, model[prefix + ".ln1.w"], model[prefix + ".ln1.b"], eps)
    x = x + attention(h, model, prefix + ".attn", heads, key_mask, capture)
    h = T.layer_norm(x, model[prefix + ".ln2.w"], model[prefix + ".ln2.b"], eps)
    h = linear(T.gelu(linear(h, model, prefix + ".mlp.fc1")), model, prefix + ".mlp.fc2")
    return x + h


# -- layouts --------------------------------------------------------------------------
CLS, IMAGE, TEXT, PADROW = 0, 1, 2, -1


def _pack(lists):
    width = max((len(x) for x in lists), default=0)
    idx = np.zeros((len(lists), width), np.int64)
    valid = np.zeros((len(lists), width), bool)
    for r, x in enumerate(lists):
        idx[r, : len(x)] = x
        valid[r, : len(x)] = True
    return idx, valid


@dataclass
class Layout:
    """Row bookkeeping of a padded encoder sequence.

    ``kind[b, r]`` is CLS/IMAGE/TEXT/PADROW and ``source[b, r]`` is the original
    patch index or token position of that row (0 for CLS and padding).
    """
    kind: np.ndarray
    source: np.ndarray

    @property
    def valid(self):
        return self.kind != PADROW

    def rows(self, b, kind):
        return np.flatnonzero(self.kind[b] == kind)


@dataclass
class EncodedSequence:
    hidden: Tensor
    layout: Layout
    attention: list = field(default_factory=list)


def embed_visible(model, images, token_ids, image_keep, text_keep):
    """Encoder input: ``[CLS] ++ visible patches ++ visible tokens`` per example.

    Args:
        images: ``[B, N_img, P*P*C]`` normalized patches.
        token_ids: ``[B, L]`` token ids (may be ``None`` when no example has text).
        image_keep, text_keep: per-example sequences of visible positions.
    Returns:
        ``(x [B, T, D], Layout)``.
    """
    cfg = model.config
    b = images.shape[0]
    if images.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ConsistencyError(f"images {images.shape[1:]} do not match model "
                               f"({cfg.n_patches}, {cfg.patch_dim})")
    img_idx, img_valid = _pack(image_keep)
    txt_idx, txt_valid = _pack(text_keep)
    if img_idx.size and img_idx.max() >= cfg.n_patches:
        raise ConsistencyError("image plan index beyond the patch grid")
    if txt_idx.size and txt_idx.max() >= cfg.max_text_len:
        raise ConsistencyError("text plan index beyond the caption length cap")

    parts = [T.gather_rows(T.reshape(model["enc.cls"], (1, cfg.enc_dim)), np.zeros((b, 1), np.int64))]
    if img_idx.shape[1]:
        patches = np.take_along_axis(images, img_idx[..., None], axis=1)
        patches = np.where(img_valid[..., None], patches, 0).astype(model.dtype)
        pos = np.where(img_valid[..., None], model.enc_pos[img_idx], 0).astype(model.dtype)
        x_img = linear(Tensor(patches), model, "enc.patch") + Tensor(pos) + model["enc.type_img"]
        parts.append(x_img)
    if txt_idx.shape[1]:
        ids = np.where(txt_valid, np.take_along_axis(token_ids, txt_idx, axis=1), PAD)
        x_txt = (T.gather_rows(model["enc.tok"], ids) + T.gather_rows(model["enc.txt_pos"], txt_idx)
                 + model["enc.type_txt"])
        parts.append(x_txt)
    x = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    kind = np.concatenate([np.full((b, 1), CLS), np.where(img_valid, IMAGE, PADROW),
                           np.where(txt_valid, TEXT, PADROW)], axis=1)
    source = np.concatenate([np.zeros((b, 1), np.int64), img_idx, txt_idx], axis=1)
    return x, Layout(kind.astype(np.int8), source)


def embed_batch(model, batch):
    cfg = model.config
    n_real = batch.n_real
    for plan, n in zip(batch.plans, n_real):
        check_plan(plan, cfg.n_patches, int(n))
    return embed_visible(model, batch.images, batch.token_ids,
                         [p.image_keep for p in batch.plans], [p.text_keep for p in batch.plans])


def encode(model, x, layout, capture=False):
    cfg = model.config
    attn = [] if capture else None
    key_mask = layout.valid
    for i in range(cfg.enc_depth):
        x = block(x, model, f"enc.blocks.{i}", cfg.enc_heads, key_mask, cfg.ln_eps, attn)
    x = T.layer_norm(x, model["enc.norm.w"], model["enc.norm.b"], cfg.ln_eps)
    return EncodedSequence(x, layout, attn or [])


def decoder_index(layout, n_img, n_real, n_text):
    """Gather index into ``[B*T enc rows ++ mask token]`` for each decoder row.

    Returns ``(index [B, 1 + n_img + n_text], key_mask)``.
    """
    b, t = layout.kind.shape
    mask_row = b * t
    idx = np.full((b, 1 + n_img + n_text), mask_row, np.int64)
    idx[:, 0] = np.arange(b) * t
    valid = np.zeros(idx.shape, bool)
    valid[:, : 1 + n_img] = True
    for r in range(b):
        valid[r, 1 + n_img: 1 + n_img + int(n_real[r])] = True
        for kind, offset in ((IMAGE, 1), (TEXT, 1 + n_img)):
            rows = layout.rows(r, kind)
            idx[r, offset + layout.source[r, rows]] = r * t + rows
    return idx, valid


def decode(model, enc, n_real):
    """Reconstruct every image position and every real text position.

    Returns ``(patch_pred [B, N_img, P*P*C], token_logits [B, Lb, V] or None)``
    where ``Lb = max(n_real)``.
    """
    cfg = model.config
    h = enc.hidden
    b, t, _ = h.shape
    n_img, dd = cfg.n_patches, cfg.dec_dim
    n_real = np.asarray(n_real, np.int64)
    n_text = int(n_real.max(initial=0))
    if n_text > cfg.max_text_len:
        raise ConsistencyError(f"{n_text} text positions exceed cap {cfg.max_text_len}")
    for r in range(b):
        rows = enc.layout.rows(r, TEXT)
        if rows.size and enc.layout.source[r, rows].max() >= n_real[r]:
            raise ConsistencyError("visible text position beyond the example's caption")

    y = linear(h, model, "dec.embed")
    table = T.concat([T.reshape(y, (b * t, dd)), T.reshape(model["dec.mask_token"], (1, dd))], axis=0)
    idx, key_mask = decoder_index(enc.layout, n_img, n_real, n_text)
    full = T.gather_rows(table, idx)

    pos = [T.reshape(model["dec.cls_pos"], (1, dd)), Tensor(model.dec_pos) + model["dec.type_img"]]
    if n_text:
        pos.append(T.gather_rows(model["dec.txt_pos"], np.arange(n_text)) + model["dec.type_txt"])
    full = full + T.concat(pos, axis=0)

    for i in range(cfg.dec_depth):
        full = block(full, model, f"dec.blocks.{i}", cfg.dec_heads, key_mask, cfg.ln_eps)
    full = T.layer_norm(full, model["dec.norm.w"], model["dec.norm.b"], cfg.ln_eps)
    patch_pred = linear(full[:, 1: 1 + n_img], model, "dec.img_head")
    logits = linear(full[:, 1 + n_img:], model, "dec.txt_head") if n_text else None
    return patch_pred, logits


def forward(model, batch, capture=False):
    """Full masked forward pass; returns ``(patch_pred, token_logits, EncodedSequence)``."""
    x, layout = embed_batch(model, batch)
    enc = encode(model, x, layout, capture)
    patch_pred, logits = decode(model, enc, batch.n_real)
    return patch_pred, logits, enc


def mae_forward(model, images, plans):
    """Image-only masked autoencoder pass, the reference for the unpaired case.

    Follows the classic shuffle/unshuffle formulation: visible patches are
    encoded without any padding, then mask tokens are appended and rows are
    restored to patch order with ``argsort(keep ++ mask)``. Every example must
    keep the same number of patches. Returns ``patch_pred [B, N_img, P*P*C]``.
    """
    cfg = model.config
    b, n, _ = images.shape
    keep = np.stack([np.asarray(p.image_keep, np.int64) for p in plans])
    hidden = np.stack([np.asarray(p.image_mask, np.int64) for p in plans])
    restore = np.argsort(np.concatenate([keep, hidden], axis=1), axis=1, kind="stable")
    n_keep = keep.shape[1]

    patches = np.take_along_axis(images, keep[..., None], axis=1).astype(model.dtype)
    x = linear(Tensor(patches), model, "enc.patch") + Tensor(model.enc_pos[keep]) + model["enc.type_img"]
    cls = T.gather_rows(T.reshape(model["enc.cls"], (1, cfg.enc_dim)), np.zeros((b, 1), np.int64))
    x = T.concat([cls, x], axis=1)
    all_keys = np.ones((b, 1 + n_keep), bool)
    for i in range(cfg.enc_depth):
        x = block(x, model, f"enc.blocks.{i}", cfg.enc_heads, all_keys, cfg.ln_eps)
    x = T.layer_norm(x, model["enc.norm.w"], model["enc.norm.b"], cfg.ln_eps)

    y = linear(x, model, "dec.embed")
    dd = cfg.dec_dim
    table = T.concat([T.reshape(y[:, 1:], (b * n_keep, dd)), T.reshape(model["dec.mask_token"], (1, dd))], axis=0)
    src = np.where(restore < n_keep, np.arange(b)[:, None] * n_keep + restore, b * n_keep)
    full = T.gather_rows(table, src) + Tensor(model.dec_pos) + model["dec.type_img"]
    full = T.concat([y[:, :1] + model["dec.cls_pos"], full], axis=1)
    all_keys = np.ones((b, 1 + n), bool)
    for i in range(cfg.dec_depth):
        full = block(full, model, f"dec.blocks.{i}", cfg.dec_heads, all_keys, cfg.ln_eps)
    full = T.layer_norm(full, model["dec.norm.w"], model["dec.norm.b"], cfg.ln_eps)
    return linear(full[:, 1:], model, "dec.img_head")


def extract_features(model, images, batch_size=256):
    """CLS features of unmasked, image-only encoder passes; ``images`` are patches ``[B, N, pd]``."""
    cfg = model.config
    out = []
    keep = np.arange(cfg.n_patches)
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start: start + batch_size]
            x, layout = embed_visible(model, chunk, None, [keep] * len(chunk), [[]] * len(chunk))
            out.append(encode(model, x, layout).hidden.data[:, 0])
    return np.concatenate(out) if out else np.zeros((0, cfg.enc_dim), model.dtype)


def attention_maps(model, batch, layer=-1):
    """Cross-modal attention slices of a fully visible paired batch.

    Uses the head-averaged attention of encoder ``layer``, or the average over
    every layer when ``layer == "mean"``. For each example
    returns a dict with ``rows`` (full attention rows of every text token,
    ``[n_text, T]``), ``text_to_image`` (``[n_text, g, g]``, renormalized over
    image columns) and ``image_to_text`` (``[N_img, n_text]``, renormalized over
    text columns).
    """
    cfg = model.config
    if layer != "mean" and not (isinstance(layer, (int, np.integer)) and -cfg.enc_depth <= layer < cfg.enc_depth):
        raise ConfigError(f"layer {layer!r} out of range for depth {cfg.enc_depth}")
    if not batch.text_present.all():
        raise ConfigError("attention maps need a caption for every example")
    with T.no_grad():
        x, layout = embed_batch(model, batch)
        enc = encode(model, x, layout, capture=True)
    stack = enc.attention if layer == "mean" else [enc.attention[layer]]
    probs = np.mean([a.mean(axis=1) for a in stack], axis=0)  # [B, T, T]
    out = []
    for b in range(len(batch)):
        img_rows, txt_rows = layout.rows(b, IMAGE), layout.rows(b, TEXT)
        if img_rows.size != cfg.n_patches:
            raise ConfigError("attention maps need full image visibility (r_img = 0)")
        order_i = img_rows[np.argsort(layout.source[b, img_rows])]
        order_t = txt_rows[np.argsort(layout.source[b, txt_rows])]
        rows = probs[b][order_t]
        t2i = rows[:, order_i]
        t2i = t2i / t2i.sum(axis=1, keepdims=True)
        i2t = probs[b][order_i][:, order_t]
        i2t = i2t / i2t.sum(axis=1, keepdims=True)
        out.append({"rows": rows, "text_to_image": t2i.reshape(-1, cfg.grid, cfg.grid),
                    "image_to_text": i2t, "positions": layout.source[b, order_t]})
    return out


def encoder_flops(config, n_tokens):
    """Multiply-add FLOPs (x2) of one encoder pass over ``n_tokens`` rows."""
    d, t, h = config.enc_dim, n_tokens, config.enc_dim * config.mlp_ratio
    per_block = 2 * t * d * d * 4 + 2 * t * d * h * 2 + 2 * t * t * d * 2
    return config.enc_depth * per_block


# -- checkpoints ----------------------------------------------------------------------------
MAGIC = b"M3AECKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, model, extra_arrays=None, meta=None):
    """Header JSON then raw little-endian float32 payloads in table order.

    ``extra_arrays`` (e.g. optimizer moments) are stored after the parameters
    under their own names, which should carry a namespace prefix.
    """
    arrays = {n: p.data for n, p in model.params.items()}
    for n, a in (extra_arrays or {}).items():
        if n in arrays:
            raise ValueError(f"extra array {n!r} collides with a parameter")
        arrays[n] = a
    table, offset = {}, 0
    payloads = []
    for n, a in arrays.items():
        buf = np.ascontiguousarray(a, dtype="<f4").tobytes()
        table[n] = [offset, list(np.shape(a)), "<f4"]
        offset += len(buf)
        payloads.append(buf)
    header = json.dumps({"format_version": FORMAT_VERSION, "config": asdict(model.config),
                         "table": table, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payloads:
            fh.write(buf)


def read_checkpoint(path):
    """Returns ``(config, arrays, meta)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16: 16 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 16 + hlen
    arrays = {}
    for name, (offset, shape, dtype) in header["table"].items():
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count,
                                     offset=base + offset).reshape(shape).astype(np.float32)
    return ModelConfig.from_dict(header["config"]), arrays, header.get("meta", {})


def load_checkpoint(path):
    """Returns ``(model, extra_arrays, meta)``."""
    config, arrays, meta = read_checkpoint(path)
    names = set(config.param_shapes())
    model = M3AE(config, params={n: a for n, a in arrays.items() if n in names})
    return model, {n: a for n, a in arrays.items() if n not in names}, meta
