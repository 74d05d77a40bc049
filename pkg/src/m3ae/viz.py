"""File exporters for qualitative analysis: reconstructions, attention, embeddings.

Every file is named ``{example_id}_{kind}.{ext}`` and depends only on the
model, the data and the seed, so re-exports are byte-identical.
"""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from m3ae import tensor as T
from m3ae.data import BatchConfig, build_batch, patchify, save_png, stream, tokenize, unpatchify
from m3ae.errors import ConfigError, DataError
from m3ae.model import attention_maps, extract_features, forward
from m3ae.train import dataset_patches


@dataclass
class Reconstruction:
    example_id: str
    original: np.ndarray  # uint8 [S, S, 3]
    masked_view: np.ndarray  # uint8, masked patches filled with ``fill``
    composite: np.ndarray  # uint8, prediction at masked patches, original elsewhere
    patch_mask: np.ndarray  # bool [N], True where the patch was masked
    masked_mse: float  # normalized units, over masked pixels of the exported composite
    tokens: list  # (position, true token, predicted token) for masked text positions


def _write(path, write_fn, what):
    try:
        write_fn(path)
    except OSError as exc:
        raise DataError(f"cannot write {what} {path}: {exc}") from exc
    return path


def reconstruct(model, dataset, indices, r_img=0.75, r_txt=0.75, seed=0, fill=128):
    """Masked forward passes over ``indices`` and their pixel-space composites."""
    cfg = model.config
    p = cfg.patch_size
    batch = build_batch(dataset, indices, BatchConfig(p, cfg.max_text_len, r_img, r_txt),
                        stream(seed, 0xEC0))
    with T.no_grad():
        pred, logits, _ = forward(model, batch)
    pred = pred.data
    ids = dataset.ids()
    out = []
    for row, i in enumerate(batch.indices):
        plan = batch.plans[row]
        masked = np.zeros(cfg.n_patches, bool)
        masked[plan.image_mask] = True
        orig_norm = batch.images[row]
        comp_norm = np.where(masked[:, None], pred[row], orig_norm)
        original = dataset.images[i]
        composite = dataset.denormalize(unpatchify(comp_norm, p))
        view = patchify(original, p).copy()
        view[masked] = fill
        view = unpatchify(view, p)

        a = patchify(dataset.normalize(composite), p)[masked]
        b = patchify(dataset.normalize(original), p)[masked]
        mse = float(np.mean((a - b) ** 2)) if masked.any() else 0.0

        tokens = []
        if batch.text_present[row] and logits is not None and plan.text_mask.size:
            guess = logits.data[row].argmax(axis=-1)
            vocab = dataset.vocab.tokens
            for pos in plan.text_mask:
                tokens.append((int(pos), vocab[batch.token_ids[row, pos]], vocab[guess[pos]]))
        out.append(Reconstruction(ids[i], original, view, composite, masked, mse, tokens))
    return out


def export_reconstructions(model, dataset, n, seed, out_dir, r_img=0.75, r_txt=0.75, fill=128):
    """Write a triptych (original | masked | composite) per example for the first ``n``.

    Also writes the three panels separately and, for captioned examples, a
    ``_text.txt`` sidecar listing masked positions with true and predicted tokens.
    Returns the list of reconstructions.
    """
    if not 0 < n <= len(dataset):
        raise ConfigError(f"cannot export {n} reconstructions from {len(dataset)} examples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = reconstruct(model, dataset, np.arange(n), r_img, r_txt, seed, fill)
    for rec in recs:
        panels = {"original": rec.original, "masked": rec.masked_view, "recon": rec.composite}
        for kind, img in panels.items():
            _write(out / f"{rec.example_id}_{kind}.png", lambda f, im=img: save_png(f, im), "image")
        trip = np.concatenate([rec.original, rec.masked_view, rec.composite], axis=1)
        _write(out / f"{rec.example_id}_triptych.png", lambda f: save_png(f, trip), "image")
        if rec.tokens:
            lines = ["position\ttrue\tpredicted"] + [f"{p}\t{t}\t{g}" for p, t, g in rec.tokens]
            _write(out / f"{rec.example_id}_text.txt",
                   lambda f: f.write_text("\n".join(lines) + "\n", encoding="utf-8"), "sidecar")
    return recs


def _full_batch(model, dataset, indices):
    cfg = model.config
    for i in indices:
        if dataset.captions[i] is None:
            raise ConfigError(f"example {dataset.ids()[i]} has no caption")
    return build_batch(dataset, indices, BatchConfig(cfg.patch_size, cfg.max_text_len, 0.0, 0.0),
                       stream(0, 0))


def export_attention(model, dataset, index, out_dir, tokens=None, patches=None, layer=-1):
    """Attention slices of one fully visible captioned example.

    For each selected caption position writes ``{id}_attn_tok{j}.png`` (a
    ``grid x grid`` grayscale heatmap scaled to its maximum) and
    ``{id}_attn_tok{j}.csv`` (row, col, weight). For each selected patch writes
    ``{id}_attn_patch{k}.csv`` listing the weight on every caption token.
    All weights are renormalized to sum to one. ``tokens`` defaults to every
    caption position; ``patches`` defaults to none.
    """
    if not 0 <= index < len(dataset):
        raise ConfigError(f"example index {index} out of range for {len(dataset)} examples")
    batch = _full_batch(model, dataset, [index])
    maps = attention_maps(model, batch, layer)[0]
    n_text, grid = maps["text_to_image"].shape[0], model.config.grid
    tokens = range(n_text) if tokens is None else tokens
    patches = [] if patches is None else patches
    for j in tokens:
        if not 0 <= j < n_text:
            raise ConfigError(f"token selector {j} out of range for {n_text} caption tokens")
    for k in patches:
        if not 0 <= k < grid * grid:
            raise ConfigError(f"patch selector {k} out of range for {grid * grid} patches")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eid = dataset.ids()[index]
    words = [dataset.vocab.tokens[t] for t in batch.token_ids[0, :n_text]]
    written = []
    for j in tokens:
        heat = maps["text_to_image"][j].astype(np.float64)
        heat = heat / heat.sum()
        top = heat.max()
        img = np.rint(255.0 * heat / top).astype(np.uint8) if top > 0 else np.zeros_like(heat, np.uint8)
        written.append(_write(out / f"{eid}_attn_tok{j}.png", lambda f: save_png(f, img), "heatmap"))
        rows = [[r, c, repr(float(heat[r, c]))] for r in range(grid) for c in range(grid)]
        written.append(_write(out / f"{eid}_attn_tok{j}.csv",
                              lambda f: _write_csv(f, ["row", "col", "weight"], rows), "weights"))
    for k in patches:
        w = maps["image_to_text"][k].astype(np.float64)
        w = w / w.sum()
        rows = [[j, words[j], repr(float(w[j]))] for j in range(n_text)]
        written.append(_write(out / f"{eid}_attn_patch{k}.csv",
                              lambda f: _write_csv(f, ["position", "token", "weight"], rows), "weights"))
    return written


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_embeddings(model, dataset, out_path, label_key="label"):
    """CSV with one row per example: ``id, label, f0 .. f{d-1}`` (CLS features).

    Values are written with nine significant digits, which round-trips float32.
    """
    labels = dataset.labels(label_key)
    feats = extract_features(model, dataset_patches(dataset, patch=model.config.patch_size))
    header = ["id", "label"] + [f"f{i}" for i in range(feats.shape[1])]
    rows = [[eid, int(y)] + [format(float(v), ".9g") for v in f]
            for eid, y, f in zip(dataset.ids(), labels, feats)]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write(out, lambda f: _write_csv(f, header, rows), "embeddings")
    return out


def read_embeddings(path):
    """Returns ``(ids, labels, features float32 [n, d])`` from :func:`export_embeddings` output."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "label"]:
        raise DataError(f"{path} is not an embedding dump")
    body = rows[1:]
    feats = np.array([[float(v) for v in r[2:]] for r in body], np.float32).reshape(len(body), -1)
    return [r[0] for r in body], np.array([int(r[1]) for r in body], np.int64), feats


def patch_in_box(k, grid, patch, bbox):
    """True when the center of patch ``k`` (row-major) lies inside ``bbox = [x0, y0, x1, y1)``."""
    r, c = divmod(int(k), grid)
    cx, cy = (c + 0.5) * patch, (r + 0.5) * patch
    x0, y0, x1, y1 = bbox
    return x0 <= cx < x1 and y0 <= cy < y1


def grounding_rate(model, dataset, indices, shape_words, layer=-1, batch_size=64):
    """Fraction of examples whose shape word's attention argmax lands in the shape's box.

    ``shape_words`` maps the record's ``shape`` label to its caption word.
    Examples without that word in the caption are skipped; returns
    ``(rate, n_scored)``.
    """
    cfg = model.config
    records = dataset.manifest.records
    hits = scored = 0
    indices = np.asarray(indices, np.int64)
    for s in range(0, len(indices), batch_size):
        chunk = indices[s: s + batch_size]
        maps = attention_maps(model, _full_batch(model, dataset, chunk), layer)
        for i, m in zip(chunk, maps):
            words = tokenize(dataset.captions[i])[: cfg.max_text_len]
            word = shape_words[records[i]["shape"]]
            if word not in words:
                continue
            heat = m["text_to_image"][words.index(word)].reshape(-1)
            scored += 1
            hits += patch_in_box(int(np.argmax(heat)), cfg.grid, cfg.patch_size, records[i]["bbox"])
    if not scored:
        raise DataError("no example mentions its shape word; cannot score grounding")
    return hits / scored, scored
