"""Multi-view datasets: binary format, synthetic generation, view sampling.

The on-disk MVDS layout is a fixed little-endian header followed by one
record per image:

    magic "MVDS" | version u32 | num_classes u32 | channels u32
    | height u32 | width u32 | num_images u64
    records: class_id u32, then channels*height*width f32 pixels row-major

Synthetic datasets render each image as a transformed view of its class
prototype (rotation by a multiple of 90 degrees, crop-and-resize jitter,
additive noise), so images within a class are recognizably the same
"scene" from different viewpoints. Generation is bit-reproducible from
the spec's seed.

Training samples draw n distinct same-class images uniformly without
replacement; evaluation enumerates all image combinations per class
(optionally capped). Classes with fewer images than the view count are
excluded, not errors.
"""

from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .seeding import substream

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MVDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


@dataclass
class MultiViewDataset:
    num_classes: int
    images: np.ndarray  # N x C x H x W, float32
    labels: np.ndarray  # N, uint32

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images {self.images.shape} and labels {self.labels.shape} do not align"
            )
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise ValueError("label exceeds num_classes")

    @property
    def num_images(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def view(self, image_index: int) -> np.ndarray:
        """One image as float64, ready for the encoder."""
        return self.images[image_index].astype(np.float64)

    def subset(self, indices) -> "MultiViewDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return MultiViewDataset(self.num_classes, self.images[indices], self.labels[indices])

    # -- binary IO -----------------------------------------------------------

    def save(self, path) -> None:
        c, h, w = self.image_shape
        try:
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(
                    DATASET_MAGIC, DATASET_VERSION, self.num_classes,
                    c, h, w, self.num_images,
                ))
                for label, image in zip(self.labels, self.images):
                    fh.write(struct.pack("<I", int(label)))
                    fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
        except OSError as exc:
            raise OSError(f"failed to write dataset {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "MultiViewDataset":
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise OSError(f"failed to read dataset {path}: {exc}") from exc
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated dataset header")
        magic, version, num_classes, c, h, w, n = _HEADER.unpack_from(raw)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not a multi-view dataset (bad magic)")
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        if min(num_classes, c, h, w) < 1:
            raise ValueError(f"{path}: non-positive dimensions in header")
        pixels = c * h * w
        record = 4 + 4 * pixels
        expected = _HEADER.size + n * record
        if len(raw) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
        labels = np.empty(n, dtype=np.uint32)
        images = np.empty((n, c, h, w), dtype=np.float32)
        offset = _HEADER.size
        for i in range(n):
            (labels[i],) = struct.unpack_from("<I", raw, offset)
            offset += 4
            images[i] = np.frombuffer(raw, dtype="<f4", count=pixels, offset=offset).reshape(c, h, w)
            offset += 4 * pixels
        if not np.all(np.isfinite(images)):
            raise ValueError(f"{path}: dataset contains non-finite pixels")
        return cls(num_classes, images, labels)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    images_per_class: int | tuple[int, ...] = 6
    size: int = 16
    channels: int = 1
    rotate: bool = False
    jitter: int = 2
    noise_std: float = 0.05
    ambiguous_fraction: float = 0.17
    ambiguous_alpha: float = 1.0
    seed: int = 0

    def counts(self) -> list[int]:
        if isinstance(self.images_per_class, int):
            return [self.images_per_class] * self.num_classes
        counts = list(self.images_per_class)
        if len(counts) != self.num_classes:
            raise ValueError(
                f"{len(counts)} per-class counts for {self.num_classes} classes"
            )
        return counts


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resize with corner alignment; pure numpy."""
    c, h, w = image.shape
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = np.empty((c, out_h, out_w))
    for ch in range(c):
        plane = image[ch]
        top = plane[np.ix_(y0, x0)] * (1 - fx) + plane[np.ix_(y0, x1)] * fx
        bot = plane[np.ix_(y1, x0)] * (1 - fx) + plane[np.ix_(y1, x1)] * fx
        out[ch] = top * (1 - fy) + bot * fy
    return out


def _render_view(proto: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    img = proto
    if spec.rotate:
        img = np.rot90(img, k=int(rng.integers(4)), axes=(1, 2))
    if spec.jitter > 0:
        c, h, w = img.shape
        dh = int(rng.integers(0, spec.jitter + 1))
        dw = int(rng.integers(0, spec.jitter + 1))
        top = int(rng.integers(0, dh + 1))
        left = int(rng.integers(0, dw + 1))
        img = img[:, top:h - (dh - top), left:w - (dw - left)]
        if (dh, dw) != (0, 0):
            img = _resize_bilinear(img, h, w)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize(spec: SyntheticSpec) -> MultiViewDataset:
    """Render the synthetic dataset in memory, bit-reproducible per seed.

    A configurable fraction of each class's views is blended toward a
    different class's prototype. Those ambiguous views look confusingly
    like the wrong class on their own, while the remaining views of the
    sample still identify the true class; that is the regime in which
    uncertainty-weighted fusion and full-view distillation earn their
    keep.
    """
    if spec.num_classes < 1 or spec.size < 1 or spec.channels < 1:
        raise ValueError("synthetic spec dimensions must be positive")
    if not (0.0 <= spec.ambiguous_fraction <= 1.0):
        raise ValueError("ambiguous_fraction must lie in [0, 1]")
    rng = substream(spec.seed, "data")
    protos = []
    for _ in range(spec.num_classes):
        low = rng.uniform(0.0, 1.0, size=(spec.channels, 4, 4))
        proto = _resize_bilinear(low, spec.size, spec.size)
        span = proto.max() - proto.min()
        if span > 0:
            proto = (proto - proto.min()) / span
        protos.append(proto)

    images, labels = [], []
    for class_id, count in enumerate(spec.counts()):
        n_ambiguous = int(round(count * spec.ambiguous_fraction))
        for j in range(count):
            base = protos[class_id]
            if j < n_ambiguous and spec.num_classes > 1:
                other = int(rng.integers(spec.num_classes - 1))
                other += other >= class_id
                a = spec.ambiguous_alpha
                base = (1.0 - a) * base + a * protos[other]
            images.append(_render_view(base, spec, rng).astype(np.float32))
            labels.append(class_id)
    return MultiViewDataset(
        spec.num_classes,
        np.stack(images) if images else np.zeros((0, spec.channels, spec.size, spec.size), np.float32),
        np.asarray(labels, dtype=np.uint32),
    )


def generate_synthetic(spec: SyntheticSpec, path) -> MultiViewDataset:
    """Render and write an MVDS file; returns the in-memory dataset."""
    ds = synthesize(spec)
    ds.save(path)
    return ds


# ---------------------------------------------------------------------------
# sampling protocol
# ---------------------------------------------------------------------------


def eligible_classes(dataset: MultiViewDataset, n: int) -> list[int]:
    """Classes holding at least n images; smaller classes are skipped."""
    sizes = dataset.class_sizes()
    eligible = [c for c in range(dataset.num_classes) if sizes[c] >= n]
    excluded = [c for c in range(dataset.num_classes) if 0 < sizes[c] < n]
    if excluded:
        log.info("excluding %d classes with fewer than %d images: %s",
                 len(excluded), n, excluded)
    return eligible


def sample_training_views(
    dataset: MultiViewDataset, class_id: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n distinct image indices of one class, uniform without replacement."""
    pool = dataset.indices_of(class_id)
    if pool.size < n:
        raise ValueError(
            f"class {class_id} has {pool.size} images, fewer than {n} views"
        )
    return rng.choice(pool, size=n, replace=False)


def enumerate_eval_combinations(
    dataset: MultiViewDataset, class_id: int, n: int, cap: int | None = None
) -> list[tuple[int, ...]]:
    """All size-n image combinations of a class, lexicographic, capped."""
    pool = [int(i) for i in dataset.indices_of(class_id)]
    if len(pool) < n:
        return []
    combos = itertools.combinations(pool, n)
    if cap is not None:
        return list(itertools.islice(combos, cap))
    return list(combos)


def split_train_val(
    dataset: MultiViewDataset, fraction: float = 0.1
) -> tuple[MultiViewDataset, MultiViewDataset]:
    """Deterministic class-stratified split; the per-class tail goes to val.

    Each class contributes floor(fraction * m) validation images, so tiny
    classes contribute none and toy datasets may produce an empty
    validation side.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValueError(f"val fraction must be in [0, 1), got {fraction}")
    train_idx, val_idx = [], []
    for c in range(dataset.num_classes):
        idx = dataset.indices_of(c)
        n_val = int(len(idx) * fraction)
        cut = len(idx) - n_val
        train_idx.extend(idx[:cut])
        val_idx.extend(idx[cut:])
    return dataset.subset(train_idx), dataset.subset(val_idx)
