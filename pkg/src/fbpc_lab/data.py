"""Desk-scale datasets and input corruptions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn import datasets as skd

from fbpc_lab.arrays import load_arrays, save_arrays
from fbpc_lab.errors import ConfigurationError, UnsupportedError, ValidationError
from fbpc_lab.models import Batch

SYNTHETIC_KINDS = ("two_moons", "gaussian_blobs", "rings")
CORRUPTIONS = ("gaussian_noise", "blur", "contrast")
DEFAULT_IMAGE_NOISE = 0.6

# frequency vectors of the per-class image templates; no two are negatives of
# each other, so the templates are orthogonal on the pixel grid
_FREQS = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2), (2, 1), (1, 2), (2, -1), (1, -2)]

_NOISE_SIGMA = (0.1, 0.2, 0.3, 0.4, 0.5)
_BLUR_SIGMA = (0.5, 0.8, 1.1, 1.5, 2.0)
_CONTRAST_LOSS = (0.2, 0.35, 0.5, 0.65, 0.8)


@dataclass(frozen=True)
class Dataset:
    train: Batch
    test: Batch
    num_classes: int
    name: str

    def __post_init__(self):
        counts = np.bincount(np.asarray(self.train.labels), minlength=self.num_classes)
        if len(counts) != self.num_classes or (counts == 0).any():
            raise ValidationError(f"training labels of {self.name!r} do not cover all {self.num_classes} classes")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.inputs.shape[1:])


def _split(x, y, n_train, name, num_classes) -> Dataset:
    return Dataset(
        Batch(x[:n_train], y[:n_train]),
        Batch(x[n_train:], y[n_train:]),
        num_classes,
        name,
    )


def make_synthetic(kind: str, n_train: int, n_test: int, noise: float, seed: int, num_classes: int = 3) -> Dataset:
    """Two-dimensional toy classification data. ``num_classes`` only applies to blobs."""
    if n_train <= 0 or n_test <= 0:
        raise ConfigurationError("n_train and n_test must be positive")
    if noise < 0:
        raise ConfigurationError("noise must be non-negative")
    n = n_train + n_test
    if kind == "two_moons":
        x, y = skd.make_moons(n, noise=noise, random_state=seed)
        d = 2
    elif kind == "rings":
        x, y = skd.make_circles(n, noise=noise, factor=0.5, random_state=seed)
        d = 2
    elif kind == "gaussian_blobs":
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        centers = 2.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        x, y = skd.make_blobs(n, centers=centers, cluster_std=noise, random_state=seed)
        d = num_classes
    else:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    return _split(x.astype(np.float64), y.astype(np.int32), n_train, kind, d)


def image_templates(side: int, num_classes: int) -> np.ndarray:
    """Per-class sinusoidal textures in [0, 1], shape ``[num_classes, side, side]``."""
    if num_classes > len(_FREQS):
        raise ConfigurationError(f"at most {len(_FREQS)} image classes are available")
    i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    out = []
    for fx, fy in _FREQS[:num_classes]:
        out.append(0.5 + 0.5 * np.sin(2 * np.pi * (fx * i + fy * j) / side + np.pi / 4))
    return np.stack(out)


def make_image_toy(
    side: int,
    num_classes: int,
    n_per_class: int,
    seed: int,
    noise: float = DEFAULT_IMAGE_NOISE,
    n_test_per_class: int | None = None,
) -> Dataset:
    """Single-channel textured images.

    Each example is its class template with a random contrast in [0.4, 1] plus
    pixel noise, clipped to [0, 1].
    """
    if not 8 <= side <= 32:
        raise ConfigurationError("side must lie in [8, 32]")
    if n_per_class <= 0:
        raise ConfigurationError("n_per_class must be positive")
    n_test_per_class = n_per_class if n_test_per_class is None else n_test_per_class
    rng = np.random.default_rng(seed)
    templates = image_templates(side, num_classes)

    def draw(per_class):
        y = np.repeat(np.arange(num_classes), per_class)
        amp = rng.uniform(0.4, 1.0, size=(len(y), 1, 1))
        x = 0.5 + amp * (templates[y] - 0.5) + noise * rng.standard_normal((len(y), side, side))
        perm = rng.permutation(len(y))
        return np.clip(x, 0.0, 1.0)[perm, None], y[perm].astype(np.int32)

    xtr, ytr = draw(n_per_class)
    xte, yte = draw(n_test_per_class) if n_test_per_class > 0 else (xtr[:0], ytr[:0])
    return Dataset(Batch(xtr, ytr), Batch(xte, yte), num_classes, f"image_toy{side}")


def corrupt(batch: Batch, kind: str, severity: int, seed: int, intensity: float = 1.0) -> Batch:
    """Corrupted copy of ``batch``; labels and shapes are unchanged.

    ``intensity`` rescales every severity level (0 gives the identity).
    """
    if kind not in CORRUPTIONS:
        raise ConfigurationError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ConfigurationError("severity must be an integer in 1..5")
    x = np.asarray(batch.inputs, dtype=np.float64)
    is_image = x.ndim == 4
    level = severity - 1
    if kind == "gaussian_noise":
        xi = np.random.default_rng(seed).standard_normal(x.shape)
        out = x + intensity * _NOISE_SIGMA[level] * xi
        if is_image:
            out = np.clip(out, 0.0, 1.0)
    elif kind == "blur":
        if not is_image:
            raise UnsupportedError("blur needs image-shaped inputs")
        s = intensity * _BLUR_SIGMA[level]
        out = ndimage.gaussian_filter(x, sigma=(0, 0, s, s), mode="reflect")
    else:
        axes = tuple(range(1, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        out = mean + (1.0 - intensity * _CONTRAST_LOSS[level]) * (x - mean)
    return Batch(out, batch.labels)


def save_dataset(path, ds: Dataset) -> None:
    save_arrays(
        path,
        {
            "train_inputs": np.asarray(ds.train.inputs),
            "train_labels": np.asarray(ds.train.labels),
            "test_inputs": np.asarray(ds.test.inputs),
            "test_labels": np.asarray(ds.test.labels),
        },
        {"kind": "dataset", "name": ds.name, "num_classes": ds.num_classes},
    )


def load_dataset(path) -> Dataset:
    """Load a dataset written by :func:`save_dataset` (or any tool using the same container)."""
    arrays, meta = load_arrays(path)
    missing = {"train_inputs", "train_labels", "test_inputs", "test_labels"} - set(arrays)
    if missing:
        raise ValidationError(f"{path}: missing arrays {sorted(missing)}")
    num_classes = int(meta.get("num_classes", int(arrays["train_labels"].max()) + 1))
    return Dataset(
        Batch(arrays["train_inputs"], arrays["train_labels"]),
        Batch(arrays["test_inputs"], arrays["test_labels"]),
        num_classes,
        meta.get("name", "external"),
    )
