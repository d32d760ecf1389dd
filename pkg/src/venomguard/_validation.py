"""Input validation helpers and the package exception types."""

import numpy as np


class ConfigurationError(ValueError):
    """Invalid configuration or argument value."""


class ShapeError(ValueError):
    """Array shapes do not agree."""


class TrainingAbort(RuntimeError):
    """A loss became non-finite during training."""


class ContractViolation(RuntimeError):
    """A guaranteed post-condition (e.g. the perturbation budget) failed."""


def check_image(img, *, channels=None, name="image"):
    """Validate a single H x W x C image in [0, 1] and return it as float32."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be H x W x C, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 8 or w < 8:
        raise ShapeError(f"{name} must be at least 8 x 8, got {h} x {w}")
    if c not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {c}")
    if channels is not None and c != channels:
        raise ShapeError(f"{name} must have {channels} channels, got {c}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(X, *, channels=None, name="X"):
    """Validate a batch of images shaped N x H x W x C.

    A single H x W x C image is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be N x H x W x C, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ConfigurationError(f"{name} is empty")
    check_image(arr[0], channels=channels, name=name)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_labels(y, *, n_samples=None, n_attributes=None, name="y"):
    """Validate binary attribute labels shaped N x K."""
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be N x K, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")
    if n_samples is not None and arr.shape[0] != n_samples:
        raise ShapeError(f"{name} has {arr.shape[0]} rows, expected {n_samples}")
    if n_attributes is not None and arr.shape[1] != n_attributes:
        raise ShapeError(f"{name} has {arr.shape[1]} attributes, expected {n_attributes}")
    return arr


def check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
