"""scikit-learn style wrappers around the training and forging routines.

Images are N x H x W x C float arrays in [0, 1]; labels are N x K binary.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import training
from ._validation import ShapeError, check_images, check_labels
from .dataio import ATTRIBUTES, FaceArrays
from .evaluation import _run_editor, _run_translator


def _arrays(X, labels=None, landmarks=None, masks=None):
    X = check_images(X)
    n = len(X)
    if labels is None:
        labels = np.zeros((n, len(ATTRIBUTES)), dtype=np.float32)
    labels = check_labels(labels, n_samples=n, n_attributes=len(ATTRIBUTES))
    if landmarks is None:
        landmarks = np.zeros(X.shape[:3] + (1,), dtype=np.float32)
    landmarks = check_images(landmarks)
    if masks is None:
        masks = np.ones(X.shape[:3] + (1,), dtype=np.float32)
    masks = np.asarray(masks, dtype=np.float32)
    if len(landmarks) != n or len(masks) != n:
        raise ShapeError("landmarks and masks need one entry per image")
    return FaceArrays(images=X, labels=labels, landmarks=landmarks, masks=masks,
                      keypoints=np.zeros((n, 8, 2), dtype=np.float32), indices=np.arange(n))


class _Defense(BaseEstimator, TransformerMixin):
    _task = None

    def __init__(self, epsilon=0.05, maxiter=3000, batch_size=8, surrogate_arch=None,
                 generator_arch="UNet128", enhancement=True, alternating=True, unroll_steps=1,
                 probe_every=1, seed=0):
        self.epsilon = epsilon
        self.maxiter = maxiter
        self.batch_size = batch_size
        self.surrogate_arch = surrogate_arch
        self.generator_arch = generator_arch
        self.enhancement = enhancement
        self.alternating = alternating
        self.unroll_steps = unroll_steps
        self.probe_every = probe_every
        self.seed = seed

    def _config(self):
        return training.TrainConfig(
            task=self._task, maxiter=self.maxiter, batch_size=self.batch_size, epsilon=self.epsilon,
            surrogate_arch=self.surrogate_arch, generator_arch=self.generator_arch,
            enhancement=self.enhancement, alternating=self.alternating, unroll_steps=self.unroll_steps,
            probe_every=self.probe_every, seed=self.seed)

    def _fit(self, data):
        self.config_ = self._config()
        self.generator_, self.state_, self.history_ = training.run_two_stage(self.config_, data)
        self.maxdist_ = self.state_.maxdist
        return self

    def transform(self, X, epsilon=None):
        """Poison images with the best generator found during ``fit``."""
        check_is_fitted(self, "generator_")
        eps = self.epsilon if epsilon is None else epsilon
        X = check_images(X)
        if eps == 0:
            return X.copy()
        return training.poison_images(self.generator_, X, eps)


class EditingDefense(_Defense):
    """Learns a perturbation generator that spoils attribute editors."""

    _task = "attribute_editing"

    def fit(self, X, y):
        return self._fit(_arrays(X, labels=y))


class ReenactmentDefense(_Defense):
    """Learns a perturbation generator that spoils landmark-driven reenactment."""

    _task = "reenactment"

    def __init__(self, epsilon=0.02, maxiter=3000, batch_size=8, surrogate_arch=None,
                 generator_arch="UNet128", enhancement=False, alternating=True, unroll_steps=1,
                 probe_every=1, seed=0):
        super().__init__(epsilon=epsilon, maxiter=maxiter, batch_size=batch_size,
                         surrogate_arch=surrogate_arch, generator_arch=generator_arch,
                         enhancement=enhancement, alternating=alternating, unroll_steps=unroll_steps,
                         probe_every=probe_every, seed=seed)

    def fit(self, X, y=None, *, landmarks, masks=None):
        return self._fit(_arrays(X, landmarks=landmarks, masks=masks))


class AttributeEditor(BaseEstimator):
    """A forger's StarGAN-style attribute editor."""

    def __init__(self, arch="Res6", attributes=ATTRIBUTES, iterations=1000, batch_size=8, seed=100):
        self.arch = arch
        self.attributes = attributes
        self.iterations = iterations
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        self.model_ = training.train_target_model(
            self.arch, _arrays(X, labels=y), attributes=tuple(self.attributes),
            iterations=self.iterations, batch_size=self.batch_size, seed=self.seed)
        return self

    def predict(self, X, target_labels):
        """Edit ``X`` towards ``target_labels`` (one column per configured attribute)."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        c = check_labels(target_labels, n_samples=len(X), n_attributes=len(self.attributes))
        return _run_editor(self.model_, X, c)


class LandmarkTranslator(BaseEstimator):
    """A forger's landmark-to-frame reenactment model."""

    def __init__(self, arch="UNet256", iterations=1000, batch_size=8, seed=100):
        self.arch = arch
        self.iterations = iterations
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, Z, X):
        self.model_ = training.train_target_model(
            self.arch, _arrays(X, landmarks=Z), task="reenactment",
            iterations=self.iterations, batch_size=self.batch_size, seed=self.seed)
        return self

    def predict(self, Z):
        check_is_fitted(self, "model_")
        return _run_translator(self.model_, check_images(Z))


__all__ = ["EditingDefense", "ReenactmentDefense", "AttributeEditor", "LandmarkTranslator"]
