"""Attribute schema, procedural sprite faces, label files and PPM images."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import UNLABELED
from .tensor import rng


class DataError(ValueError):
    pass


# --- schema ----------------------------------------------------------------

@dataclass(frozen=True)
class Group:
    name: str
    labels: tuple[str, ...]


@dataclass(frozen=True)
class Attribute:
    name: str
    group: int
    cls: int


@dataclass(frozen=True)
class AttributeSchema:
    groups: tuple[Group, ...]
    attributes: tuple[Attribute, ...] = field(init=False)

    def __post_init__(self):
        groups = tuple(Group(g.name, tuple(g.labels)) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise DataError("group names must be unique")
        counts: dict[str, int] = {}
        for g in groups:
            if len(g.labels) < 2 or len(set(g.labels)) != len(g.labels):
                raise DataError(f"group {g.name!r} needs two or more distinct labels")
            for label in g.labels:
                counts[label] = counts.get(label, 0) + 1
        attrs = []
        for gi, g in enumerate(groups):
            for ci, label in enumerate(g.labels):
                name = label if counts[label] == 1 else f"{g.name}_{label}"
                attrs.append(Attribute(name, gi, ci))
        object.__setattr__(self, "attributes", tuple(attrs))
        # partition check: every attribute in exactly one group
        seen = [(a.group, a.cls) for a in attrs]
        if len(set(seen)) != len(seen) or len(seen) != sum(len(g.labels) for g in groups):
            raise DataError("attributes do not partition into groups")

    @property
    def group_names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def attribute_names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def group_index(self, name: str) -> int:
        try:
            return self.group_names.index(name)
        except ValueError:
            raise DataError(f"unknown group {name!r}; groups are {', '.join(self.group_names)}") from None

    def attribute_index(self, name: str) -> int:
        """Index of an attribute given as ``name``, ``group:label`` or ``group=label``."""
        text = name.strip()
        for sep in (":", "="):
            if sep in text:
                group, label = (s.strip() for s in text.split(sep, 1))
                gi = self.group_index(group)
                if label in self.groups[gi].labels:
                    return self.attribute_of(gi, self.groups[gi].labels.index(label))
        if text in self.attribute_names:
            return self.attribute_names.index(text)
        raise DataError(f"unknown attribute {name!r}; valid choices: {', '.join(self.attribute_names)}")

    def attribute_of(self, group: int, cls: int) -> int:
        return sum(len(g.labels) for g in self.groups[:group]) + cls

    def positives(self, labels: np.ndarray, attribute: int) -> np.ndarray:
        a = self.attributes[attribute]
        return np.nonzero(np.asarray(labels)[:, a.group] == a.cls)[0]

    def attribute_sets(self, labels: np.ndarray) -> list[list[int]]:
        """Per-image attribute index lists (the sets C_i); unlabeled groups contribute nothing."""
        out = []
        for row in np.asarray(labels):
            out.append([self.attribute_of(g, int(c)) for g, c in enumerate(row) if c != UNLABELED])
        return out

    def to_json(self) -> str:
        doc = {"groups": [{"name": g.name, "labels": list(g.labels)} for g in self.groups]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AttributeSchema":
        doc = json.loads(text)
        return cls(tuple(Group(g["name"], tuple(g["labels"])) for g in doc["groups"]))


def default_schema() -> AttributeSchema:
    return AttributeSchema((
        Group("hair_color", ("black", "blond", "brown")),
        Group("skin_tone", ("light", "dark")),
        Group("eyewear", ("none", "glasses")),
        Group("expression", ("neutral", "smiling")),
        Group("face_shape", ("round", "oval")),
        Group("accessory", ("none", "hat")),
    ))


# sampling ratios per group, skewed like real attribute data
DEFAULT_RATIOS = {
    "hair_color": (0.4, 0.3, 0.3),
    "skin_tone": (0.6, 0.4),
    "eyewear": (0.7, 0.3),
    "expression": (0.5, 0.5),
    "face_shape": (0.5, 0.5),
    "accessory": (0.7, 0.3),
}


# --- datasets --------------------------------------------------------------

@dataclass
class LabeledImage:
    image: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    schema: AttributeSchema
    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray  # (N, G), UNLABELED for missing
    split: str = "train"
    names: list[str] | None = None
    true_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise DataError("dataset needs a non-empty (N, C, H, W) image array")
        if self.labels.shape != (self.images.shape[0], len(self.schema.groups)):
            raise DataError("labels must have one row per image and one column per group")
        for g, grp in enumerate(self.schema.groups):
            col = self.labels[:, g]
            if np.any((col < UNLABELED) | (col >= len(grp.labels))):
                raise DataError(f"labels out of range for group {grp.name!r}")
        if self.names is None:
            self.names = [f"img{i:05d}.ppm" for i in range(len(self))]

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], self.labels[i])

    def subset(self, indices, split=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.schema,
            self.images[idx],
            self.labels[idx],
            split or self.split,
            [self.names[i] for i in idx],
            None if self.true_labels is None else self.true_labels[idx],
        )


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render_face(labels, size: int, geometry, noise) -> np.ndarray:
    """Draw one sprite face.

    ``labels`` holds one class per default-schema group (hair, skin, eyewear,
    expression, face shape, accessory).  ``geometry`` is
    (dx, dy, scale, brightness) and ``noise`` a (3, size, size) background
    noise field; both are drawn by the caller so a face can be re-rendered
    with different labels and identical jitter.
    """
    if size < 16:
        raise DataError("image_size must be at least 16 to render facial features")
    hair, skin, eyewear, expression, shape, accessory = (int(v) for v in labels)
    dx, dy, scale, brightness = geometry
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.empty((3, size, size))
    bg = np.array([0.35, 0.45, 0.55])
    img[:] = bg[:, None, None] + noise

    def paint(mask, color, alpha=1.0):
        for c in range(3):
            img[c][mask] = (1 - alpha) * img[c][mask] + alpha * color[c]

    cx, cy = 0.5 + dx, 0.55 + dy
    rx, ry = (0.26, 0.27) if shape == 0 else (0.20, 0.31)
    rx, ry = rx * scale, ry * scale
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    paint(face, [(0.96, 0.82, 0.70), (0.45, 0.30, 0.20)][skin])

    hair_region = (((xx - cx) / (rx * 1.15)) ** 2 + ((yy - cy + 0.02) / (ry * 1.12)) ** 2 <= 1.0) & (yy < cy - 0.3 * ry)
    paint(hair_region, [(0.08, 0.07, 0.07), (0.95, 0.85, 0.40), (0.50, 0.30, 0.12)][hair])

    ey = cy - 0.1 * ry
    ex = 0.42 * rx
    eye_r = 0.045 * scale
    for sx in (-1, 1):
        paint(_disk(yy, xx, ey, cx + sx * ex, eye_r), (0.1, 0.1, 0.15))

    my = cy + 0.5 * ry
    half = 0.5 * rx
    t = (xx - cx) / half
    bend = 0.45 * ry if expression == 1 else 0.0
    thick = 0.045 if expression == 1 else 0.025
    curve = my - bend / 2 + bend * (1 - t**2)
    mouth = (np.abs(t) <= 1) & (np.abs(yy - curve) <= thick * scale)
    paint(mouth, (0.65, 0.10, 0.12))

    if eyewear == 1:
        lens_r = 0.1 * scale
        for sx in (-1, 1):
            ring_c = cx + sx * ex
            dist = np.sqrt((yy - ey) ** 2 + (xx - ring_c) ** 2)
            paint(dist <= lens_r, (0.0, 0.0, 0.0), alpha=0.45)
            paint((dist <= lens_r) & (dist >= lens_r - 0.035 * scale), (0.05, 0.05, 0.05))
        bridge = (np.abs(yy - ey) <= 0.02 * scale) & (np.abs(xx - cx) <= ex - lens_r + 0.01)
        paint(bridge, (0.05, 0.05, 0.05))

    if accessory == 1:
        crown = (np.abs(xx - cx) <= 0.8 * rx) & (yy >= cy - 1.45 * ry) & (yy <= cy - 0.75 * ry)
        brim = (np.abs(xx - cx) <= 1.25 * rx) & (yy > cy - 0.9 * ry) & (yy <= cy - 0.72 * ry)
        paint(crown | brim, (0.15, 0.25, 0.75))

    return np.clip(img * brightness, 0.0, 1.0)


def generate_synthetic_dataset(
    n: int,
    seed: int = 0,
    schema: AttributeSchema | None = None,
    image_size: int = 32,
    ratios: dict | None = None,
    unlabeled_rate: float = 0.1,
    split: str = "train",
) -> Dataset:
    """Procedural sprite faces with labels; a pure function of its arguments.

    Per image the generator draws, in order: one class per group from
    ``ratios``, a hide-label flag per group (probability ``unlabeled_rate``),
    position/scale/brightness jitter and background noise.  Hidden labels
    are still rendered; only the stored label becomes ``UNLABELED``.
    """
    schema = schema or default_schema()
    if n < 1:
        raise DataError("n must be >= 1")
    if image_size < 16:
        raise DataError("image_size must be at least 16 to render facial features")
    if schema.group_names != default_schema().group_names:
        raise DataError("the sprite renderer draws the default schema's groups only")
    ratios = {**DEFAULT_RATIOS, **(ratios or {})}
    probs = [np.asarray(ratios[g.name], dtype=np.float64) for g in schema.groups]
    for g, p in zip(schema.groups, probs):
        if p.shape != (len(g.labels),) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise DataError(f"ratios for {g.name!r} must be {len(g.labels)} probabilities summing to 1")
    cum = [np.cumsum(p) for p in probs]
    gen = rng(seed)
    G = len(schema.groups)
    images = np.empty((n, 3, image_size, image_size))
    true = np.empty((n, G), dtype=np.int64)
    shown = np.empty((n, G), dtype=np.int64)
    for i in range(n):
        u = gen.random(G)
        row = np.array([min(int(np.searchsorted(c, v, side="right")), len(c) - 1) for c, v in zip(cum, u)])
        hide = gen.random(G) < unlabeled_rate
        j = gen.uniform(-1.0, 1.0, 4)
        geometry = (0.04 * j[0], 0.04 * j[1], 1.0 + 0.1 * j[2], 1.0 + 0.12 * j[3])
        noise = gen.normal(0.0, 0.05, (3, image_size, image_size))
        images[i] = render_face(row, image_size, geometry, noise)
        true[i] = row
        shown[i] = np.where(hide, UNLABELED, row)
    return Dataset(schema, images, shown, split, true_labels=true)


def compute_mean_image(dataset: Dataset) -> np.ndarray:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    total = np.zeros(dataset.images.shape[1:])
    for img in dataset.images:
        total += img
    # the true mean lies in [min, max]; clamping removes rounding drift and
    # makes a stack of identical images average to exactly that image
    return np.clip(total / len(dataset), dataset.images.min(axis=0), dataset.images.max(axis=0))


@dataclass
class PositiveSet:
    attribute: int
    indices: np.ndarray
    available: int
    shortfall: bool

    @property
    def empty(self) -> bool:
        return self.indices.size == 0


def select_positive_sets(dataset: Dataset, schema: AttributeSchema, m: int, seed: int = 0) -> list[PositiveSet]:
    """One uniformly sampled set of at most ``m`` positives per attribute.

    Attributes are visited in schema order with a single seeded generator;
    an image positive for several attributes may appear in several sets.
    """
    if m < 2:
        raise DataError("m must be >= 2")
    gen = rng(seed)
    out = []
    for a in range(len(schema.attributes)):
        pos = schema.positives(dataset.labels, a)
        take = min(m, pos.size)
        chosen = np.sort(gen.choice(pos, size=take, replace=False)) if take else np.empty(0, dtype=np.int64)
        out.append(PositiveSet(a, chosen.astype(np.int64), int(pos.size), pos.size < m))
    return out


# --- labels CSV ------------------------------------------------------------

def write_labels_csv(path, names, labels, schema: AttributeSchema) -> None:
    Path(path).write_text(labels_csv_text(names, labels, schema), encoding="utf-8")


def labels_csv_text(names, labels, schema: AttributeSchema) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["filename"] + schema.group_names)
    for name, row in zip(names, np.asarray(labels)):
        w.writerow([name] + ["" if c == UNLABELED else schema.groups[g].labels[c] for g, c in enumerate(row)])
    return buf.getvalue()


def load_labels_csv(path, schema: AttributeSchema) -> tuple[list[str], np.ndarray]:
    """Read ``filename,<group>,...`` rows; blank cells become ``UNLABELED``.

    Groups absent from the header are treated as unlabeled for every row.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"labels file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty labels file")
    header = [h.strip() for h in rows[0]]
    cols = [schema.group_index(h) for h in header[1:]]
    if len(set(cols)) != len(cols):
        raise DataError(f"{path}: duplicate group column")
    names, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        out = [UNLABELED] * len(schema.groups)
        for cell, g, col_name in zip(row[1:], cols, header[1:]):
            cell = cell.strip()
            if not cell:
                continue
            grp = schema.groups[g]
            if cell not in grp.labels:
                raise DataError(
                    f"{path}: row {r}, column {col_name!r}: unknown value {cell!r} (expected one of {', '.join(grp.labels)})"
                )
            out[g] = grp.labels.index(cell)
        names.append(row[0].strip())
        labels.append(out)
    return names, np.asarray(labels, dtype=np.int64).reshape(-1, len(schema.groups))


# --- PPM -------------------------------------------------------------------

def encode_ppm(image) -> bytes:
    """Binary P6, maxval 255; each value v maps to floor(255*v + 0.5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a (3, H, W) image, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise DataError("image values must lie in [0, 1]")
    q = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("malformed PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError("malformed PPM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DataError("unsupported PPM dimensions or maxval")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise DataError("truncated PPM pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float64) / maxval


# --- dataset directories ---------------------------------------------------

def write_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(dataset.names, dataset.images):
        (out / name).write_bytes(encode_ppm(img))
    write_labels_csv(out / "labels.csv", dataset.names, dataset.labels, dataset.schema)
    (out / "schema.json").write_text(dataset.schema.to_json(), encoding="utf-8")


def load_dataset(path, split: str = "train") -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    schema_file = root / "schema.json"
    schema = AttributeSchema.from_json(schema_file.read_text(encoding="utf-8")) if schema_file.exists() else default_schema()
    names, labels = load_labels_csv(root / "labels.csv", schema)
    if not names:
        raise DataError(f"{root}: labels file lists no images")
    images = []
    for name in names:
        f = root / name
        if not f.is_file():
            raise DataError(f"{root}: missing image {name}")
        images.append(decode_ppm(f.read_bytes()))
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"{root}: images have differing shapes {sorted(shapes)}")
    return Dataset(schema, np.stack(images), labels, split, names)


def list_ppms(path) -> list[str]:
    return sorted(f for f in os.listdir(path) if f.endswith(".ppm"))
