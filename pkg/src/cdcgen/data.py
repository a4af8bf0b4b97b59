"""Datasets: IDX ingestion, balanced resampling, resizing, synthetic pinwheel domains."""

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

SOURCE = "source"
TARGET = "target"

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class LabelAccessError(PermissionError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Samples of one domain; ``labels`` is None for unlabeled target data."""

    samples: np.ndarray
    labels: np.ndarray = None
    domain_tag: str = SOURCE
    name: str = ""
    n_classes: int = 0

    def __post_init__(self):
        if self.domain_tag not in (SOURCE, TARGET):
            raise ValueError(f"domain_tag must be {SOURCE!r} or {TARGET!r}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if len(labels) != len(self.samples):
                raise ValueError(f"{len(self.samples)} samples but {len(labels)} labels")
            if self.n_classes and np.any((labels < 0) | (labels >= self.n_classes)):
                raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.samples)

    @property
    def is_image(self):
        return self.samples.ndim == 4

    def sample_shape(self):
        return tuple(self.samples.shape[1:])

    def unlabeled(self):
        return replace(self, labels=None)

    def subset(self, idx):
        return replace(self, samples=self.samples[idx],
                       labels=None if self.labels is None else self.labels[idx])


@dataclass(frozen=True)
class EvalSidecar:
    """Hidden target labels, readable only by evaluation code."""

    labels: np.ndarray = field(repr=False)
    name: str = ""

    def reveal(self, purpose):
        if purpose != "eval":
            raise LabelAccessError("target labels are only available for evaluation")
        return self.labels


def require_unlabeled_target(ds):
    """Guard used by training entry points: target data must carry no labels."""
    if ds.domain_tag == TARGET and ds.labels is not None:
        raise LabelAccessError(f"target dataset {ds.name!r} carries labels; strip them before training")
    return ds


# --- IDX -------------------------------------------------------------------

def parse_idx(raw):
    """Parse IDX bytes into an array.  Raises IDXError naming the byte offset."""
    if len(raw) < 4:
        raise IDXError("truncated header", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in IDX_TYPES or ndim == 0:
        raise IDXError(f"bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError("truncated dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_TYPES[dtype_code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < need:
        raise IDXError(f"truncated payload: expected {need} bytes", len(raw))
    if len(raw) - header > need:
        raise IDXError("trailing bytes after payload", header + need)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def encode_idx(array):
    array = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.astype(IDX_TYPES[code], copy=False).tobytes()


def read_idx(path):
    return parse_idx(Path(path).read_bytes())


def write_idx(path, array):
    Path(path).write_bytes(encode_idx(array))


def load_idx(images_path, labels_path=None, domain_tag=SOURCE, name=None, n_classes=10):
    """Load an IDX image file (rank 3, u8) and optional IDX label file."""
    raw = Path(images_path).read_bytes()
    images = parse_idx(raw)
    if raw[2] != 0x08 or images.ndim != 3:
        raise IDXError(f"expected u8 rank-3 images (magic 0x{IMAGES_MAGIC:08x})", 0)
    labels = None
    if labels_path is not None:
        labels = read_labels(labels_path)
        if len(labels) != len(images):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(np.asarray(images, dtype=np.uint8)[:, None], labels, domain_tag,
                   name or Path(images_path).name, n_classes)


def read_labels(path):
    raw = Path(path).read_bytes()
    labels = parse_idx(raw)
    if raw[2] != 0x08 or labels.ndim != 1:
        raise IDXError(f"expected u8 rank-1 labels (magic 0x{LABELS_MAGIC:08x})", 0)
    return labels.astype(np.int64)


# --- MNIST-style balanced protocol -------------------------------------------

def _per_class_pick(labels, per_class, n_classes, rng, split):
    picks = []
    for k in range(n_classes):
        idx = np.flatnonzero(labels == k)
        if len(idx) < per_class:
            raise ValueError(f"class {k} has {len(idx)} {split} samples, fewer than {per_class}")
        picks.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    return np.concatenate(picks)


def balanced_resample(train, test, per_class_train=542, per_class_test=147, seed=0):
    """Draw a fixed count per class from the train and test splits respectively."""
    if train.labels is None or test.labels is None:
        raise ValueError("balanced resampling needs labels on both splits")
    k = train.n_classes or int(train.labels.max()) + 1
    rng = np.random.default_rng(seed)
    tr = _per_class_pick(train.labels, per_class_train, k, rng, "train")
    te = _per_class_pick(test.labels, per_class_test, k, rng, "test")
    return train.subset(tr), test.subset(te)


def resize_bilinear(images, height, width):
    """Bilinear resize with corner-aligned sampling over the last two axes.

    Output pixel (i, j) samples the input at ``(i * (H - 1) / (height - 1),
    j * (W - 1) / (width - 1))``, so the four corners map onto each other.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.size == 0 or images.shape[-1] == 0 or images.shape[-2] == 0 or height <= 0 or width <= 0:
        raise ValueError("resize_bilinear needs non-empty input and output sizes")
    h, w = images.shape[-2:]

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, height)
    c0, c1, fc = axis_weights(w, width)
    top = images[..., r0, :] * (1 - fr)[:, None] + images[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def to_pixels(images):
    """Rescale any grayscale range onto [0, 255] integers."""
    images = np.asarray(images, dtype=np.float64)
    lo, hi = images.min(), images.max()
    if hi == lo:
        return np.zeros(images.shape, dtype=np.uint8)
    return np.round((images - lo) / (hi - lo) * 255.0).astype(np.uint8)


# --- synthetic 2-D domains -------------------------------------------------

@dataclass(frozen=True)
class PinwheelSpec:
    classes: int = 3
    n_per_class: int = 1000
    rotation: float = np.pi / 2
    scale: float = 0.7
    seed: int = 0
    radial_std: float = 0.3
    tangential_std: float = 0.05
    rate: float = 0.25
    arm_span: float = np.pi
    radius: float = 2.0


def pinwheel(classes, n_per_class, rng, radial_std=0.3, tangential_std=0.05, rate=0.25,
             arm_span=np.pi, radius=2.0):
    """K spiral arms; arm k starts at angle ``arm_span * k / K``.

    ``arm_span = 2 pi`` gives the classic evenly spaced pinwheel, which is
    invariant under rotation by 2 pi / K; a smaller span leaves a wide empty
    sector so that every arm is identifiable from the point cloud alone.
    """
    base = arm_span * np.arange(classes) / classes
    labels = np.repeat(np.arange(classes), n_per_class)
    feats = rng.standard_normal((classes * n_per_class, 2)) * [radial_std, tangential_std]
    feats[:, 0] += 1.0
    angle = base[labels] + rate * np.exp(feats[:, 0])
    c, s = np.cos(angle), np.sin(angle)
    pts = np.stack([feats[:, 0] * c - feats[:, 1] * s, feats[:, 0] * s + feats[:, 1] * c], axis=1)
    return radius * pts, labels


def rotate_scale(points, theta, sigma):
    c, s = np.cos(theta), np.sin(theta)
    return sigma * points @ np.array([[c, s], [-s, c]])


def make_pinwheel_pair(classes=3, n_per_class=1000, rotation=np.pi / 2, scale=0.7, seed=0, **shape):
    """Labeled source pinwheel and an unlabeled rotated/scaled target.

    The target is the source point cloud rotated counter-clockwise by
    ``rotation`` and scaled by ``scale``.  Training never sees the pairing:
    batches of the two domains are drawn by independent streams.  Returns
    (source, target, sidecar) with the target's labels only in the sidecar.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if scale == 0:
        raise ValueError("scale 0 collapses the target domain")
    rng = np.random.default_rng(seed)
    xs, ys = pinwheel(classes, n_per_class, rng, **shape)
    xt, yt = rotate_scale(xs, rotation, scale), ys.copy()
    source = Dataset(xs, ys, SOURCE, "pinwheel-source", classes)
    target = Dataset(xt, None, TARGET, "pinwheel-target", classes)
    return source, target, EvalSidecar(yt, "pinwheel-target")


# --- export ----------------------------------------------------------------

def write_points_csv(path, points, labels=None):
    points = np.asarray(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [f"x{i}" for i in range(points.shape[1])] if points.shape[1] != 2 else ["x", "y"]
        w.writerow(cols + (["class"] if labels is not None else []))
        for i, row in enumerate(points):
            vals = [repr(float(v)) for v in row]
            w.writerow(vals + ([int(labels[i])] if labels is not None else []))


def read_points_csv(path):
    """Returns (points, labels or None)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    has_class = header[-1] == "class"
    body = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(header)))
    if has_class:
        return body[:, :-1], body[:, -1].astype(np.int64)
    return body, None


def write_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "class"])
        for i, k in enumerate(labels):
            w.writerow([i, int(k)])


def read_labels_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "class"]:
        raise ValueError(f"{path}: expected header index,class")
    return np.array([int(r[1]) for r in rows[1:]], dtype=np.int64)


def write_pgm(path, image):
    """8-bit binary portable graymap (P5)."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.clip(image, 0, 255).astype(np.uint8).tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def load_digits_domain(size=16, domain_tag=SOURCE, transform=None):
    """scikit-learn's bundled 8x8 digits, upscaled to ``size`` and mapped to [0, 255].

    ``transform`` optionally maps the (N, H, W) float images before
    quantization (e.g. a transpose to create a second domain).
    """
    d = load_digits()
    imgs = resize_bilinear(d.images, size, size)
    if transform is not None:
        imgs = transform(imgs)
    pixels = to_pixels(imgs)[:, None]
    return Dataset(pixels, d.target.astype(np.int64), domain_tag, f"digits{size}", 10)
