"""Synthetic captioned shapes: a self-contained desk-scale image-text corpus.

Each image holds one colored shape on a flat dark background. Its caption is
generated from the rendered content ("a red circle at the top left"), and the
shape's bounding box is recorded so cross-modal attention can be scored
programmatically.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from m3ae.data import channel_stats, round_half_up, save_png, stream, train_tokenizer, write_manifest

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (220, 45, 40),
    "green": (40, 190, 70),
    "blue": (50, 90, 235),
    "yellow": (235, 210, 40),
}
POSITIONS = (("top left", "top", "top right"),
             ("left", "center", "right"),
             ("bottom left", "bottom", "bottom right"))


@dataclass
class SyntheticShapesSpec:
    n: int = 2000
    canvas: int = 32
    min_size: int = 7
    max_size: int = 12
    paired_fraction: float = 1.0
    seed: int = 0
    kind: str = "shapes"  # or "noise" for out-of-distribution images
    max_vocab: int = 64
    match_area: bool = True  # scale each shape so all four cover the same pixel area


# Area of each shape relative to a square of the same nominal size.
AREA_FACTOR = {"circle": np.pi / 4, "square": 1.0, "triangle": 0.5, "cross": 5.0 / 9.0}


def shape_mask(shape, size, cx, cy, canvas):
    """Boolean ``[canvas, canvas]`` mask of a shape centered at ``(cx, cy)``."""
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    dx, dy, r = xx - cx, yy - cy, size / 2.0
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        depth = (dy + r) / (2 * r)
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * r)
    if shape == "cross":
        arm = max(r / 3.0, 1.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def position_word(cx, cy, canvas):
    third = canvas / 3.0
    return POSITIONS[min(int(cy // third), 2)][min(int(cx // third), 2)]


def render_example(rng, spec):
    s = spec.canvas
    shape_i = int(rng.integers(len(SHAPES)))
    color_i = int(rng.integers(len(COLORS)))
    size = float(rng.uniform(spec.min_size, spec.max_size))
    if spec.match_area:
        size = min(size / np.sqrt(AREA_FACTOR[SHAPES[shape_i]]), s - 2.0)
    r = size / 2.0
    cx = float(rng.uniform(r + 0.5, s - r - 0.5))
    cy = float(rng.uniform(r + 0.5, s - r - 0.5))
    bg = int(rng.integers(0, 60))
    image = np.full((s, s, 3), bg, dtype=np.int32)
    mask = shape_mask(SHAPES[shape_i], size, cx, cy, s)
    color_name = list(COLORS)[color_i]
    rgb = np.array(COLORS[color_name]) + rng.integers(-15, 16, size=3)
    image[mask] = rgb
    ys, xs = np.nonzero(mask)
    bbox = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
    caption = f"a {color_name} {SHAPES[shape_i]} at the {position_word(cx, cy, s)}"
    meta = {"label": shape_i * len(COLORS) + color_i, "shape": shape_i, "color": color_i,
            "bbox": bbox}
    return np.clip(image, 0, 255).astype(np.uint8), caption, meta


def render_noise(rng, spec):
    return rng.integers(0, 256, size=(spec.canvas, spec.canvas, 3), dtype=np.uint8)


def generate(spec, out_dir, name="data"):
    """Write images, ``<name>.jsonl``, its header and a vocabulary into ``out_dir``.

    Returns the manifest path. Output bytes are a pure function of ``spec``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, records, captions = [], [], []
    for i in range(spec.n):
        rng = stream(spec.seed, 0x5EED, i)
        rec = {"id": f"{i:05d}", "image": f"images/{i:05d}.png"}
        if spec.kind == "noise":
            img = render_noise(rng, spec)
            rec["caption"] = None
        elif spec.kind == "shapes":
            img, caption, meta = render_example(rng, spec)
            rec.update(meta)
            rec["caption"] = caption
            captions.append(caption)
        else:
            raise ValueError(f"unknown synthetic kind {spec.kind!r}")
        save_png(out / rec["image"], img)
        images.append(img)
        records.append(rec)

    if captions:
        n_keep = round_half_up(spec.paired_fraction * spec.n)
        keep = set(stream(spec.seed, 0xCA9).permutation(spec.n)[:n_keep].tolist())
        for i, rec in enumerate(records):
            if i not in keep:
                rec["caption"] = None
        vocab = train_tokenizer(captions, spec.max_vocab)
        vocab.save(out / f"{name}.vocab.txt")
        vocab_file = f"{name}.vocab.txt"
    else:
        vocab_file = None

    mean, std = channel_stats(np.stack(images)) if images else (np.zeros(3), np.ones(3))
    manifest = out / f"{name}.jsonl"
    write_manifest(manifest, records, spec.canvas, mean, std, vocab_file)
    return manifest
