"""Dataset ingestion, compression, feature extraction, and qubit encoding.

Raw inputs are IDX image/label files (raw or gzip-compressed). Images are
compressed 28 -> 8 by separable bilinear resampling and scaled to [0, 1],
or reduced to the top-8 principal components of the training split.
Each feature x in [0, 1] is encoded into the qubit amplitudes
(sin(pi x / 2), cos(pi x / 2)); the matching pure-state density matrix has
rho00 = lambda0, rho11 = lambda1 and off-diagonals sqrt(lambda0 lambda1).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CACHE_MAGIC = b"DTNML1"


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass
class RawDataset:
    """Paired images and labels from one IDX split."""

    images: np.ndarray  # (n, rows, cols) uint8
    labels: np.ndarray  # (n,) uint8
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images vs {len(self.labels)} labels")


@dataclass
class EncodedDataset:
    """Feature vectors in [0, 1] with binary labels, ready for the network."""

    features: np.ndarray  # (n, m) float64
    labels: np.ndarray  # (n,) uint8, values in {0, 1}
    split: str = "train"

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count, path):
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"{path}: expected {count} more bytes, got {len(buf)}")
    return buf


def load_idx(path):
    """Read one IDX file (raw or gzipped); returns an images array
    (n, rows, cols) or a labels array (n,) depending on the magic."""
    with _open_maybe_gzip(path) as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, path))[0]
        if magic == IDX_IMAGES_MAGIC:
            n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, path))
            data = _read_exact(fh, n * rows * cols, path)
            return np.frombuffer(data, dtype=np.uint8).reshape(n, rows, cols)
        if magic == IDX_LABELS_MAGIC:
            n = struct.unpack(">I", _read_exact(fh, 4, path))[0]
            data = _read_exact(fh, n, path)
            return np.frombuffer(data, dtype=np.uint8)
        raise BadMagicError(f"{path}: magic 0x{magic:08x} is not an IDX image/label file")


def load_idx_pair(image_path, label_path, split="train") -> RawDataset:
    images = load_idx(image_path)
    labels = load_idx(label_path)
    if images.ndim != 3:
        raise BadMagicError(f"{image_path} is not an image file")
    if labels.ndim != 1:
        raise BadMagicError(f"{label_path} is not a label file")
    return RawDataset(images=images, labels=labels, split=split)


def _bilinear_matrix(src: int, dst: int):
    """(dst, src) separable bilinear resampling weights with half-pixel
    centered sample positions."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    mat = np.zeros((dst, src))
    mat[np.arange(dst), lo] += 1.0 - frac
    mat[np.arange(dst), hi] += frac
    return mat


def compress_image(img, target: int = 8):
    """Resample one grayscale byte grid to target x target by bilinear
    interpolation and rescale to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    r = _bilinear_matrix(img.shape[0], target)
    c = _bilinear_matrix(img.shape[1], target)
    return (r @ img @ c.T) / 255.0


def compress_images(images, target: int = 8):
    """Vectorized :func:`compress_image` over a stack of images; returns
    flattened (n, target*target) row-major feature vectors."""
    images = np.asarray(images, dtype=np.float64)
    r = _bilinear_matrix(images.shape[1], target)
    c = _bilinear_matrix(images.shape[2], target)
    out = np.einsum("ai,nij,bj->nab", r, images, c, optimize=True) / 255.0
    return out.reshape(len(images), target * target)


@dataclass
class PcaModel:
    """Top-k principal components fitted on the training split, with the
    training-set extrema used to rescale projections into [0, 1]."""

    mean: np.ndarray
    components: np.ndarray  # (k, d)
    explained_variance: np.ndarray
    lo: np.ndarray = field(default=None)
    hi: np.ndarray = field(default=None)

    def project(self, flat):
        proj = (flat - self.mean) @ self.components.T
        scaled = (proj - self.lo) / (self.hi - self.lo)
        return np.clip(scaled, 0.0, 1.0)


def fit_pca(train_flat, k: int = 8) -> PcaModel:
    """Fit the top-k principal components on flattened training images.

    Component signs are fixed (largest-magnitude coordinate positive) so
    the projection is deterministic across BLAS builds.
    """
    train_flat = np.asarray(train_flat, dtype=np.float64)
    n = len(train_flat)
    if n <= k:
        raise DataError(f"need more than {k} samples to fit {k} components, got {n}")
    mean = train_flat.mean(axis=0)
    centered = train_flat - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k]
    flips = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps = comps * flips[:, None]
    model = PcaModel(mean=mean, components=comps,
                     explained_variance=(svals[:k] ** 2) / (n - 1))
    proj = centered @ comps.T
    model.lo = proj.min(axis=0)
    model.hi = proj.max(axis=0)
    if np.any(model.hi - model.lo <= 0):
        raise DataError("degenerate principal component with zero spread")
    return model


def pca_features(train_images, other_images=(), k: int = 8):
    """Project image stacks onto the top-k training principal components,
    min-max rescaled to [0, 1] by the training extrema (validation/test
    projections are clamped). Returns (train_features, [other_features...])."""
    train_flat = np.asarray(train_images, dtype=np.float64).reshape(len(train_images), -1)
    model = fit_pca(train_flat, k=k)
    train_feats = model.project(train_flat)
    others = [model.project(np.asarray(im, dtype=np.float64).reshape(len(im), -1))
              for im in other_images]
    return train_feats, others, model


@dataclass(frozen=True)
class ClassGrouping:
    """Total mapping from original labels 0-9 to a binary class."""

    name: str
    mapping: tuple

    def __post_init__(self):
        if len(self.mapping) != 10 or not set(self.mapping) == {0, 1}:
            raise ValueError("grouping must map all ten labels onto both classes")

    def apply(self, labels):
        return np.asarray(self.mapping, dtype=np.uint8)[np.asarray(labels)]


EVEN_ODD = ClassGrouping("even-odd", (0, 1, 0, 1, 0, 1, 0, 1, 0, 1))
FASHION_GROUPING = ClassGrouping("fashion-02369", (0, 1, 0, 0, 1, 1, 0, 1, 1, 0))

GROUPINGS = {g.name: g for g in (EVEN_ODD, FASHION_GROUPING)}


def group_labels(labels, grouping: ClassGrouping):
    """Deterministic relabeling of 0-9 labels into {0, 1}."""
    return grouping.apply(labels)


def encode_feature(x: float):
    """Qubit amplitudes (sin(pi x / 2), cos(pi x / 2)) for a feature in [0, 1].

    Unit norm with non-negative entries, so amplitudes and probabilities
    determine each other one-to-one.
    """
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"feature {x} outside [0, 1]")
    return np.array([np.sin(np.pi * x / 2.0), np.cos(np.pi * x / 2.0)])


def feature_density(x: float):
    """Rank-one single-qubit density matrix of the encoded feature."""
    amps = encode_feature(x)
    return np.outer(amps, amps).astype(complex)


def feature_densities(xs):
    """Batched :func:`feature_density`: (n,) features -> (n, 2, 2) states."""
    xs = np.asarray(xs, dtype=np.float64)
    s = np.sin(np.pi * xs / 2.0)
    c = np.cos(np.pi * xs / 2.0)
    out = np.empty(xs.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = s * s
    out[..., 0, 1] = s * c
    out[..., 1, 0] = s * c
    out[..., 1, 1] = c * c
    return out


def feature_diagonals(xs):
    """Diagonals (lambda0, lambda1) of the encoded qubits, the parent
    variables of the fully-dephased network."""
    xs = np.asarray(xs, dtype=np.float64)
    s2 = np.sin(np.pi * xs / 2.0) ** 2
    out = np.empty(xs.shape + (2,))
    out[..., 0] = s2
    out[..., 1] = 1.0 - s2
    return out


@dataclass
class EncodedSample:
    """One sample: features, their per-feature qubit states, and the label."""

    features: np.ndarray
    label: int

    @property
    def qubits(self):
        return feature_densities(self.features)


def save_cache(path, dataset: EncodedDataset) -> None:
    """Write the flat binary cache: magic, m (uint32 LE), count (uint64 LE),
    row-major float64 features, then uint8 labels."""
    feats = np.ascontiguousarray(dataset.features, dtype="<f8")
    labels = np.ascontiguousarray(dataset.labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQ", feats.shape[1], feats.shape[0]))
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())


def load_cache(path, split="train") -> EncodedDataset:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CACHE_MAGIC), path)
        if magic != CACHE_MAGIC:
            raise BadMagicError(f"{path}: not a dtnml dataset cache")
        m, n = struct.unpack("<IQ", _read_exact(fh, 12, path))
        feats = np.frombuffer(_read_exact(fh, 8 * m * n, path), dtype="<f8")
        labels = np.frombuffer(_read_exact(fh, n, path), dtype=np.uint8)
    return EncodedDataset(features=feats.reshape(n, m).copy(),
                          labels=labels.copy(), split=split)


@dataclass
class SplitSpec:
    """Sizes of the train/validation slices taken from the shuffled
    training file; test always uses the full test file (after any label
    filtering)."""

    train: int
    validation: int
    filter_labels: tuple = ()

    def __post_init__(self):
        if self.train <= 0 or self.validation < 0:
            raise ValueError("split sizes must be positive")


FULL_SPLIT = SplitSpec(train=50040, validation=9960)
THREE_VS_FIVE_SPLIT = SplitSpec(train=5000, validation=2000, filter_labels=(3, 5))


def prepare_splits(train_raw: RawDataset, test_raw: RawDataset,
                   grouping: ClassGrouping | None, spec: SplitSpec,
                   seed: int = 0, features: str = "pixels64",
                   subsample: int | None = None):
    """Build the three encoded splits from raw IDX data.

    The training file is shuffled with the given seed, then sliced into
    the first ``spec.train`` samples for training and the next
    ``spec.validation`` for validation. With ``filter_labels`` set (the
    3-vs-5 task), both files are filtered first and the lower original
    label becomes class 0. ``subsample`` truncates the train slice after
    shuffling (used by desk-scale sweeps).
    """
    train_images, train_labels = train_raw.images, train_raw.labels
    test_images, test_labels = test_raw.images, test_raw.labels

    if spec.filter_labels:
        keep = np.isin(train_labels, spec.filter_labels)
        train_images, train_labels = train_images[keep], train_labels[keep]
        keep = np.isin(test_labels, spec.filter_labels)
        test_images, test_labels = test_images[keep], test_labels[keep]
        lut = np.zeros(10, dtype=np.uint8)
        for cls, lab in enumerate(sorted(spec.filter_labels)):
            lut[lab] = cls
        train_binary = lut[train_labels]
        test_binary = lut[test_labels]
    else:
        if grouping is None:
            raise ValueError("a class grouping is required without label filtering")
        train_binary = group_labels(train_labels, grouping)
        test_binary = group_labels(test_labels, grouping)

    needed = spec.train + spec.validation
    if needed > len(train_images):
        raise CountMismatchError(
            f"split needs {needed} training-file samples, file has {len(train_images)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_images))
    train_idx = order[:spec.train]
    val_idx = order[spec.train:needed]
    if subsample is not None:
        train_idx = train_idx[:subsample]

    if features == "pixels64":
        tr = compress_images(train_images[train_idx])
        va = compress_images(train_images[val_idx])
        te = compress_images(test_images)
    elif features == "pca8":
        tr, (va, te), _ = pca_features(train_images[train_idx],
                                       (train_images[val_idx], test_images))
    else:
        raise ValueError(f"unknown feature extraction '{features}'")

    return (EncodedDataset(tr, train_binary[train_idx].astype(np.uint8), "train"),
            EncodedDataset(va, train_binary[val_idx].astype(np.uint8), "validation"),
            EncodedDataset(te, test_binary.astype(np.uint8), "test"))
