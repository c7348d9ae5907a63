"""Glyph corpus generation, PGM corpora on disk, and episode sampling."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptImage,
    InsufficientClasses,
    InsufficientSamples,
    InvalidConfig,
    IOFailure,
    MissingManifest,
    SplitOverlap,
)

SPLITS = ("base", "val", "novel")
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("filename", "class_id", "class_name", "split")
FAMILIES = ("polyline", "polygon", "ring", "dots", "cross")
CROP_PAD = 4
SIBLING_JITTER = 0.3
# glyph placement: class scale range, per-image shift bound, clutter strokes
GLYPH_SCALE = (0.35, 0.5)
GLYPH_SHIFT = 0.45
CLUTTER = 4


@dataclass
class Corpus:
    """Images ``(n, ch, s, s)`` in [0, 1] with one split per class."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list
    class_splits: list
    filenames: list = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InvalidConfig("images must be (n, ch, s, s) with one label each")
        if len(self.class_names) != len(self.class_splits):
            raise InvalidConfig("class_names and class_splits differ in length")
        bad = set(self.class_splits) - set(SPLITS)
        if bad:
            raise InvalidConfig(f"unknown split(s) {sorted(bad)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def classes_in(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise InvalidConfig(f"unknown split {split!r}")
        return np.array([c for c, s in enumerate(self.class_splits) if s == split], dtype=np.int64)

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.classes_in(split)))


# --------------------------------------------------------------------------
# glyph rendering


def _segment_distance(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / max(denom, 1e-12), 0.0, 1.0)
    dx, dy = px - (ax + t * vx), py - (ay + t * vy)
    return np.sqrt(dx * dx + dy * dy)


def _class_template(family: str, rng: np.random.Generator) -> dict:
    """Geometry of one glyph class in the unit square [-1, 1]^2."""
    if family == "polyline":
        pts = rng.uniform(-0.9, 0.9, (rng.integers(3, 6), 2))
        segments = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]
        return {"segments": segments, "discs": []}
    if family == "polygon":
        k = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, k))
        radii = rng.uniform(0.45, 0.9, k)
        pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        segments = [(pts[i], pts[(i + 1) % k]) for i in range(k)]
        return {"segments": segments, "discs": []}
    if family == "ring":
        r = rng.uniform(0.35, 0.75)
        centre = rng.uniform(-0.15, 0.15, 2)
        n = 24
        t = np.linspace(0, 2 * np.pi, n + 1)
        ring = centre + r * np.stack([np.cos(t), np.sin(t)], axis=1)
        segments = [(ring[i], ring[i + 1]) for i in range(n)]
        for a in rng.uniform(0, 2 * np.pi, rng.integers(1, 4)):
            tip = centre + 0.95 * np.array([np.cos(a), np.sin(a)])
            segments.append((centre + r * np.array([np.cos(a), np.sin(a)]), tip))
        return {"segments": segments, "discs": []}
    if family == "dots":
        k = int(rng.integers(3, 6))
        centres = rng.uniform(-0.75, 0.75, (k, 2))
        radii = rng.uniform(0.12, 0.25, k)
        return {"segments": [], "discs": list(zip(centres, radii))}
    if family == "cross":
        segments = []
        for _ in range(int(rng.integers(2, 4))):
            a = rng.uniform(0, np.pi)
            off = rng.uniform(-0.3, 0.3, 2)
            half = rng.uniform(0.5, 0.9)
            d = half * np.array([np.cos(a), np.sin(a)])
            segments.append((off - d, off + d))
        return {"segments": segments, "discs": []}
    raise InvalidConfig(f"unknown glyph family {family!r}")


def _perturb(template: dict, rng: np.random.Generator, amount: float) -> dict:
    """Sibling class: jitter every control point of a parent template."""
    segments = [
        (a + rng.normal(0, amount, 2), b + rng.normal(0, amount, 2)) for a, b in template["segments"]
    ]
    discs = [
        (c + rng.normal(0, amount, 2), r * rng.uniform(0.8, 1.25)) for c, r in template["discs"]
    ]
    return {"segments": segments, "discs": discs}


def render_glyph(
    template: dict,
    side: int,
    rng: np.random.Generator,
    stroke: float,
    scale: float,
    clutter: int = CLUTTER,
    max_shift: float = GLYPH_SHIFT,
) -> np.ndarray:
    """Rasterise a template with random pose, stroke jitter, clutter strokes
    and additive noise."""
    angle = rng.uniform(-0.5, 0.5)
    shift = rng.uniform(-max_shift, max_shift, 2)
    s = scale * rng.uniform(0.8, 1.2)
    width = stroke * rng.uniform(0.8, 1.2)
    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    # inverse transform pixel centres into template space
    c, sn = np.cos(angle), np.sin(angle)
    ux, uy = gx - shift[0], gy - shift[1]
    tx = (c * ux + sn * uy) / s
    ty = (-sn * ux + c * uy) / s
    px_size = 2.0 / side / s
    dist = np.full_like(gx, np.inf)
    for a, b in template["segments"]:
        dist = np.minimum(dist, _segment_distance(tx, ty, a[0], a[1], b[0], b[1]) - width * px_size)
    for centre, radius in template["discs"]:
        dist = np.minimum(dist, np.hypot(tx - centre[0], ty - centre[1]) - radius)
    img = np.clip(0.5 - dist / px_size, 0.0, 1.0)
    pix = 2.0 / side
    for _ in range(clutter):
        a = rng.uniform(-1, 1, 2)
        b = a + rng.uniform(-0.35, 0.35, 2)
        d = _segment_distance(gx, gy, a[0], a[1], b[0], b[1]) - 0.8 * pix
        img = np.maximum(img, np.clip(0.5 - d / pix, 0.0, 1.0))
    img = img + rng.normal(0.0, 0.1, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_glyph_corpus(
    num_base: int = 20,
    num_val: int = 5,
    num_novel: int = 10,
    per_class: int = 40,
    side: int = 32,
    seed: int = 0,
) -> Corpus:
    """Synthetic grayscale corpus: each class is one parametric glyph.

    Classes of the same family are perturbations of a shared parent shape,
    so novel classes are fine-grained relatives of base classes.
    """
    if min(num_base, num_val, num_novel, per_class) < 1:
        raise InvalidConfig("class counts and per_class must be >= 1")
    if side < 16 or side % 16:
        raise InvalidConfig(f"side must be a positive multiple of 16, got {side}")
    splits = ["base"] * num_base + ["val"] * num_val + ["novel"] * num_novel
    parents = {
        fam: _class_template(fam, np.random.default_rng([seed, 10_000 + k]))
        for k, fam in enumerate(FAMILIES)
    }
    images = np.empty((len(splits) * per_class, 1, side, side))
    labels = np.repeat(np.arange(len(splits)), per_class)
    names = []
    for cid in range(len(splits)):
        crng = np.random.default_rng([seed, cid, 0])
        family = FAMILIES[cid % len(FAMILIES)]
        template = _perturb(parents[family], crng, SIBLING_JITTER)
        stroke = crng.uniform(0.6, 1.6)
        scale = crng.uniform(*GLYPH_SCALE)
        names.append(f"{family}-{cid:03d}")
        for k in range(per_class):
            srng = np.random.default_rng([seed, cid, 1, k])
            images[cid * per_class + k, 0] = render_glyph(template, side, srng, stroke, scale)
    return Corpus(images, labels, names, splits)


# --------------------------------------------------------------------------
# PGM and manifest IO


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise CorruptImage("PGM payload must be a 2-d uint8 array")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM to a ``(h, w)`` uint8 array."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptImage(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # the single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise CorruptImage(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptImage(f"{path}: malformed PGM header") from exc
    if maxval < 1 or maxval > 255:
        raise CorruptImage(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    payload = blob[pos : pos + w * h]
    if len(payload) != w * h:
        raise CorruptImage(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        pixels = np.round(pixels.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return pixels


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_corpus(corpus: Corpus, directory) -> list:
    """Write one PGM per image plus ``manifest.csv``; returns filenames."""
    if corpus.channels != 1:
        raise InvalidConfig("PGM corpora are single-channel")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        counters = {}
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        names = []
        for img, cid in zip(corpus.images, corpus.labels):
            k = counters.get(int(cid), 0)
            counters[int(cid)] = k + 1
            fname = f"c{int(cid):03d}_{k:04d}.pgm"
            write_pgm(directory / fname, quantize(img[0]))
            writer.writerow([fname, int(cid), corpus.class_names[cid], corpus.class_splits[cid]])
            names.append(fname)
        (directory / MANIFEST).write_bytes(buf.getvalue().encode("utf-8"))
    except OSError as exc:
        raise IOFailure(f"cannot write corpus to {directory}: {exc}") from exc
    return names


def load_corpus(directory) -> Corpus:
    """Read a manifest + PGM directory; class ids are re-indexed densely in
    ascending order of the manifest ids."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise MissingManifest(f"no {MANIFEST} in {directory}")
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise MissingManifest(f"{manifest}: header must be {','.join(MANIFEST_FIELDS)}")
        rows = list(reader)
    if not rows:
        raise MissingManifest(f"{manifest} lists no images")
    split_of, name_of = {}, {}
    for row in rows:
        try:
            cid = int(row["class_id"])
        except ValueError as exc:
            raise CorruptImage(f"bad class_id {row['class_id']!r}") from exc
        if row["split"] not in SPLITS:
            raise InvalidConfig(f"unknown split {row['split']!r} in manifest")
        if split_of.setdefault(cid, row["split"]) != row["split"]:
            raise SplitOverlap(f"class {cid} appears in splits {split_of[cid]} and {row['split']}")
        name_of.setdefault(cid, row["class_name"])
    dense = {cid: k for k, cid in enumerate(sorted(split_of))}
    pixels = []
    for row in rows:
        path = directory / row["filename"]
        try:
            px = read_pgm(path)
        except OSError as exc:
            raise CorruptImage(f"cannot read {path}: {exc}") from exc
        if px.shape[0] != px.shape[1]:
            raise CorruptImage(f"{path}: image is not square")
        if pixels and px.shape != pixels[0].shape:
            raise CorruptImage(f"{path}: size {px.shape} differs from {pixels[0].shape}")
        pixels.append(px)
    images = (np.stack(pixels).astype(np.float64) / 255.0)[:, None]
    labels = np.array([dense[int(r["class_id"])] for r in rows])
    ordered = sorted(split_of)
    return Corpus(
        images,
        labels,
        [name_of[c] for c in ordered],
        [split_of[c] for c in ordered],
        filenames=[r["filename"] for r in rows],
    )


# --------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """N-way K-shot task; labels are episode-local (0..N-1).

    ``support_ids``/``query_ids`` index into ``corpus.images``; ``classes[i]``
    is the global class id behind local label ``i``.
    """

    corpus: Corpus
    classes: np.ndarray
    support_ids: np.ndarray
    support_labels: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int

    @property
    def support_images(self) -> np.ndarray:
        return self.corpus.images[self.support_ids]

    @property
    def query_images(self) -> np.ndarray:
        return self.corpus.images[self.query_ids]

    @property
    def support(self) -> list:
        return list(zip(self.support_images, self.support_labels))

    @property
    def query(self) -> list:
        return list(zip(self.query_images, self.query_labels))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_episode(corpus: Corpus, split: str, way: int, shot: int, queries: int = 15, seed=0) -> Episode:
    """Draw ``way`` classes and ``shot + queries`` distinct images per class."""
    if way < 1 or shot < 1 or queries < 0:
        raise InvalidConfig("way and shot must be >= 1, queries >= 0")
    rng = _rng(seed)
    pool = corpus.classes_in(split)
    if len(pool) < way:
        raise InsufficientClasses(f"split {split!r} has {len(pool)} classes, need {way}")
    classes = rng.choice(pool, size=way, replace=False)
    sup, qry = [], []
    for cid in classes:
        members = corpus.indices_of(int(cid))
        if len(members) < shot + queries:
            raise InsufficientSamples(
                f"class {int(cid)} has {len(members)} images, need {shot + queries}"
            )
        chosen = rng.permutation(members)[: shot + queries]
        sup.append(chosen[:shot])
        qry.append(chosen[shot:])
    local = np.arange(way)
    return Episode(
        corpus=corpus,
        classes=classes,
        support_ids=np.concatenate(sup),
        support_labels=np.repeat(local, shot),
        query_ids=np.concatenate(qry) if queries else np.zeros(0, dtype=np.int64),
        query_labels=np.repeat(local, queries),
        way=way,
        shot=shot,
    )


def flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def crop(image: np.ndarray, dy: int, dx: int, pad: int = CROP_PAD) -> np.ndarray:
    """Zero-pad by ``pad`` then cut the original size at offset (dy, dx)."""
    ch, h, w = image.shape
    padded = np.zeros((ch, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    return padded[:, dy : dy + h, dx : dx + w]


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and 4-pixel padded random crop."""
    out = flip(image) if rng.random() < 0.5 else image
    dy, dx = rng.integers(0, 2 * CROP_PAD + 1, size=2)
    return crop(out, int(dy), int(dx))


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in images])
