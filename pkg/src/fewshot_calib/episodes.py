"""Episodic few-shot data: datasets, synthetic generators, episode sampling, IDX I/O."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, EpisodeSamplingError, IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# strayed support points are drawn at this multiple of the class spread
STRAY_FACTOR = 3.0


@dataclass(frozen=True)
class LabeledExample:
    input: np.ndarray
    label: int


@dataclass
class LabeledDataset:
    """A flat labeled dataset: ``inputs`` is (N, D), ``labels`` is (N,).

    ``true_means`` holds the population mean of each class in input space
    when the data came from a generator that knows it (synthetic data only).
    """

    inputs: np.ndarray
    labels: np.ndarray
    true_means: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ConfigurationError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigurationError(
                f"label count {self.labels.shape[0]} != input count {self.inputs.shape[0]}"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ConfigurationError("labels must be non-negative")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __iter__(self) -> Iterator[LabeledExample]:
        for x, y in zip(self.inputs, self.labels):
            yield LabeledExample(x, int(y))

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, class_labels: Sequence[int], relabel: bool = True) -> "LabeledDataset":
        """Keep only the given classes; optionally relabel them to 0..k-1 in the given order."""
        class_labels = [int(c) for c in class_labels]
        mask = np.isin(self.labels, class_labels)
        labels = self.labels[mask]
        means = None
        if relabel:
            lookup = {c: i for i, c in enumerate(class_labels)}
            labels = np.array([lookup[int(c)] for c in labels], dtype=np.int64)
            if self.true_means is not None:
                means = self.true_means[class_labels]
        elif self.true_means is not None:
            means = self.true_means
        return LabeledDataset(self.inputs[mask], labels, means)


@dataclass
class Episode:
    """One C-way task. Labels inside the episode are relabeled to ``0..C-1``.

    ``classes[c]`` is the dataset label of episode class ``c``; the index arrays
    point back into the source dataset so episodes can be fingerprinted.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    num_ways: int
    shots_per_class: tuple[int, ...]
    classes: tuple[int, ...] = ()
    support_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    query_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    true_means: np.ndarray | None = None

    def __post_init__(self):
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)
        if len(self.shots_per_class) != self.num_ways:
            raise EpisodeSamplingError("shots_per_class must have one entry per way")
        if self.support_x.shape[0] != sum(self.shots_per_class):
            raise EpisodeSamplingError("support size does not equal the sum of shots")
        counts = np.bincount(self.support_y, minlength=self.num_ways)
        if counts.shape[0] != self.num_ways:
            raise EpisodeSamplingError("support label out of range")
        for c in range(self.num_ways):
            if counts[c] < 1:
                raise EpisodeSamplingError(f"class {c} has no support example", c)
        if self.query_y.size and (self.query_y.min() < 0 or self.query_y.max() >= self.num_ways):
            raise EpisodeSamplingError("query label out of range")
        if np.intersect1d(self.support_index, self.query_index).size:
            raise EpisodeSamplingError("support and query overlap")

    @property
    def n_support(self) -> int:
        return self.support_x.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_x.shape[0]

    @property
    def support(self) -> list[LabeledExample]:
        return [LabeledExample(x, int(y)) for x, y in zip(self.support_x, self.support_y)]

    @property
    def query(self) -> list[LabeledExample]:
        return [LabeledExample(x, int(y)) for x, y in zip(self.query_x, self.query_y)]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.classes, dtype=np.int64).tobytes())
        h.update(np.asarray(self.shots_per_class, dtype=np.int64).tobytes())
        h.update(np.asarray(self.support_index, dtype=np.int64).tobytes())
        h.update(np.asarray(self.query_index, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DomainShift:
    """Affine map ``x -> matrix @ x + offset`` applied to novel-class inputs."""

    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ np.asarray(self.matrix).T + np.asarray(self.offset)

    @classmethod
    def identity(cls, dim: int) -> "DomainShift":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def random(cls, dim: int, seed: int, offset_norm: float, anisotropy: float = 1.0) -> "DomainShift":
        """Random rotation, per-axis stretch in ``[1/anisotropy, anisotropy]`` and an offset of given norm."""
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        stretch = np.exp(rng.uniform(-np.log(anisotropy), np.log(anisotropy), dim))
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        return cls(q @ np.diag(stretch), offset_norm * direction)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    dim: int
    num_base_classes: int
    num_novel_classes: int
    cluster_spread: float
    domain_shift: DomainShift | None = None
    contamination_rate: float = 0.0
    # class means ~ N(0, mean_scale^2 I)
    mean_scale: float = 1.0

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigurationError(f"dim must be >= 1, got {self.dim}")
        if self.num_base_classes < 0 or self.num_novel_classes < 0:
            raise ConfigurationError("class counts must be non-negative")
        if not self.cluster_spread > 0:
            raise ConfigurationError(f"cluster_spread must be positive, got {self.cluster_spread}")
        if not 0 <= self.contamination_rate < 0.5:
            raise ConfigurationError(
                f"contamination_rate must lie in [0, 0.5), got {self.contamination_rate}"
            )
        if not self.mean_scale > 0:
            raise ConfigurationError("mean_scale must be positive")
        if self.domain_shift is not None:
            m = np.asarray(self.domain_shift.matrix, dtype=np.float64)
            if m.shape != (self.dim, self.dim) or np.asarray(self.domain_shift.offset).shape != (self.dim,):
                raise ConfigurationError("domain_shift shape does not match dim")
            if np.linalg.matrix_rank(m) < self.dim:
                raise ConfigurationError("domain_shift matrix is singular")


def _gaussian_classes(means, samples_per_class, spread, contamination, rng):
    num_classes, dim = means.shape
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    scale = np.full(labels.shape[0], spread)
    if contamination > 0:
        strayed = rng.random(labels.shape[0]) < contamination
        scale[strayed] *= STRAY_FACTOR
    noise = rng.standard_normal((labels.shape[0], dim))
    return means[labels] + scale[:, None] * noise, labels


def generate_base_dataset(spec: SyntheticDomainSpec, samples_per_class: int, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters for the base classes; no domain shift."""
    spec.validate()
    if samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be >= 1")
    rng = np.random.default_rng([seed, 0])
    means = rng.normal(0.0, spec.mean_scale, (spec.num_base_classes, spec.dim))
    x, y = _gaussian_classes(means, samples_per_class, spec.cluster_spread, 0.0, rng)
    return LabeledDataset(x, y, means)


def generate_novel_dataset(spec: SyntheticDomainSpec, samples_per_class: int, seed: int) -> LabeledDataset:
    """Novel classes drawn like the base ones, then pushed through the domain shift.

    Each example is a strayed point (spread multiplied by 3) with probability
    ``contamination_rate``. Strays share the class mean, so ``true_means``
    stays exact: it is the shifted class centre.
    """
    spec.validate()
    if samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be >= 1")
    rng = np.random.default_rng([seed, 1])
    means = rng.normal(0.0, spec.mean_scale, (spec.num_novel_classes, spec.dim))
    x, y = _gaussian_classes(means, samples_per_class, spec.cluster_spread, spec.contamination_rate, rng)
    if spec.domain_shift is not None:
        x = spec.domain_shift.apply(x)
        means = spec.domain_shift.apply(means)
    return LabeledDataset(x, y, means)


def sample_episode(
    dataset: LabeledDataset,
    num_ways: int,
    shots: int | tuple[int, int],
    query_per_class: int,
    seed: int,
) -> Episode:
    """Draw a C-way episode. ``shots`` is a fixed count or an inclusive ``(lo, hi)`` range."""
    if num_ways < 1:
        raise ConfigurationError("num_ways must be >= 1")
    if query_per_class < 0:
        raise ConfigurationError("query_per_class must be >= 0")
    if isinstance(shots, (tuple, list)):
        lo, hi = int(shots[0]), int(shots[1])
    else:
        lo = hi = int(shots)
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"invalid shot specification {shots!r}")

    available = dataset.classes
    if available.size < num_ways:
        raise EpisodeSamplingError(
            f"dataset has {available.size} classes, episode needs {num_ways}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(available, size=num_ways, replace=False)
    shot_counts = rng.integers(lo, hi + 1, size=num_ways)

    s_idx, q_idx, s_lab, q_lab = [], [], [], []
    for c, (label, k) in enumerate(zip(chosen, shot_counts)):
        pool = np.flatnonzero(dataset.labels == label)
        need = int(k) + query_per_class
        if pool.size < need:
            raise EpisodeSamplingError(
                f"class {int(label)} has {pool.size} examples, episode needs {need}", int(label)
            )
        picked = rng.permutation(pool)[:need]
        s_idx.append(picked[:k])
        q_idx.append(picked[k:])
        s_lab.append(np.full(k, c))
        q_lab.append(np.full(query_per_class, c))

    support_index = np.concatenate(s_idx)
    query_index = np.concatenate(q_idx)
    means = None
    if dataset.true_means is not None:
        means = dataset.true_means[chosen]
    return Episode(
        support_x=dataset.inputs[support_index],
        support_y=np.concatenate(s_lab),
        query_x=dataset.inputs[query_index],
        query_y=np.concatenate(q_lab),
        num_ways=num_ways,
        shots_per_class=tuple(int(k) for k in shot_counts),
        classes=tuple(int(c) for c in chosen),
        support_index=support_index,
        query_index=query_index,
        true_means=means,
    )


# ---------------------------------------------------------------------------
# IDX binary files


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, what: str, path: str):
    if len(raw) < 8:
        raise IdxFormatError(f"truncated {what} header", len(raw), path)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxFormatError(
            f"expected {what} magic 0x{expected_magic:08x}, found 0x{magic:08x}", 0, path
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated {what} header", len(raw), path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(
            f"truncated {what} payload: expected {size} bytes, found {len(raw) - header}",
            len(raw),
            path,
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data


def load_idx_dataset(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped). Pixels are scaled to [0, 1]."""
    img_dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, "image", str(images_path))
    lab_dims, labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, "label", str(labels_path))
    if img_dims[0] != lab_dims[0]:
        raise IdxFormatError(
            f"image count {img_dims[0]} != label count {lab_dims[0]}", 4, str(labels_path)
        )
    n = img_dims[0]
    x = pixels.reshape(n, -1).astype(np.float64) / 255.0
    return LabeledDataset(x, labels.astype(np.int64))


def save_idx_dataset(dataset: LabeledDataset, images_path, labels_path, image_shape: tuple[int, int]) -> None:
    """Write a dataset with inputs in [0, 1] as an IDX pair (pixels rounded to bytes)."""
    n = len(dataset)
    if int(np.prod(image_shape)) != dataset.dim:
        raise ConfigurationError("image_shape does not match input dimension")
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, *image_shape))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# delimited text: one example per line, label first


def save_delimited(dataset: LabeledDataset, path, delimiter: str = ",") -> None:
    with open(path, "w") as f:
        for x, y in zip(dataset.inputs, dataset.labels):
            f.write(delimiter.join([str(int(y))] + [repr(float(v)) for v in x]) + "\n")


def load_delimited(path, delimiter: str = ",") -> LabeledDataset:
    rows = []
    labels = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(delimiter)
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
    if len({len(r) for r in rows}) > 1:
        raise ConfigurationError(f"{path}: inconsistent input dimension")
    return LabeledDataset(np.array(rows, dtype=np.float64).reshape(len(rows), -1), np.array(labels))
