import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from venomguard import AttributeEditor, EditingDefense, LandmarkTranslator, ReenactmentDefense
from venomguard._validation import ShapeError
from venomguard.dataio import SynthFaceSpec, generate_dataset, generate_speaker_sequence, stack_samples

SPEC = SynthFaceSpec(seed=4, resolution=16)


@pytest.fixture(scope="module")
def faces():
    return stack_samples(generate_dataset(SPEC, 12))


def test_params_and_clone():
    est = EditingDefense(epsilon=0.03, maxiter=7)
    params = est.get_params()
    assert params["epsilon"] == 0.03 and params["maxiter"] == 7 and params["surrogate_arch"] is None
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert ReenactmentDefense().get_params()["epsilon"] == 0.02
    assert ReenactmentDefense().get_params()["enhancement"] is False
    assert clone(AttributeEditor(arch="CNet")).arch == "CNet"


def test_editing_defense_fit_transform(faces):
    est = EditingDefense(maxiter=2, batch_size=4, seed=1)
    with pytest.raises(NotFittedError):
        est.transform(faces.images)
    xp = est.fit(faces.images, faces.labels).transform(faces.images)
    assert xp.shape == faces.images.shape and xp.dtype == np.float32
    assert np.abs(xp.astype(np.float64) - faces.images).max() <= 0.05
    assert len(est.history_) == 2 and est.maxdist_ == max(h["distance"] for h in est.history_)
    assert np.array_equal(est.transform(faces.images, epsilon=0), faces.images)
    again = EditingDefense(maxiter=2, batch_size=4, seed=1).fit_transform(faces.images, faces.labels)
    assert np.array_equal(again, xp)


def test_input_validation(faces):
    est = EditingDefense(maxiter=1)
    with pytest.raises(ShapeError):
        est.fit(faces.images[:, :, :, 0], faces.labels)
    with pytest.raises(ShapeError):
        est.fit(faces.images, faces.labels[:3])


def test_reenactment_defense():
    seq = stack_samples(generate_speaker_sequence(SPEC, 12))
    est = ReenactmentDefense(maxiter=1, batch_size=4, seed=2)
    xp = est.fit(seq.images, landmarks=seq.landmarks, masks=seq.masks).transform(seq.images)
    assert np.abs(xp.astype(np.float64) - seq.images).max() <= 0.02


def test_forger_estimators(faces):
    ed = AttributeEditor(arch="CNet", attributes=("blond_hair", "black_hair", "pale_skin"), iterations=2,
                         batch_size=4).fit(faces.images, faces.labels)
    out = ed.predict(faces.images[:3], faces.labels[:3, [0, 1, 4]])
    assert out.shape == (3, 16, 16, 3) and 0 <= out.min() and out.max() <= 1
    with pytest.raises(ShapeError):
        ed.predict(faces.images[:3], faces.labels[:3])
    tr = LandmarkTranslator(arch="CNet", iterations=2, batch_size=4).fit(faces.landmarks, faces.images)
    assert tr.predict(faces.landmarks[:2]).shape == (2, 16, 16, 3)
