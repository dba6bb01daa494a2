import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import MICRO_FIELD
from tnrf.correspondence import grid_points, instance_density_fn
from tnrf.dataset import generate_synthetic_family, toy_chair_spec
from tnrf.estimator import TemplateNeRF
from tnrf.exceptions import ValidationError
from tnrf.trainer import TrainConfig


@pytest.fixture(scope="module")
def family():
    objects, _ = generate_synthetic_family(toy_chair_spec(instance_count=2, views_per_instance=2, image_size=8))
    return objects


def config_dict():
    return dict(samples_per_ray=8, batch_objects=1, rays_per_view=16, precision=64, seed=2, **MICRO_FIELD)


@pytest.fixture(scope="module")
def fitted(family):
    est = TemplateNeRF(config=config_dict(), steps=3, grid_resolution=12).fit(family)
    # three steps leave density far below the default level, so take one inside its range
    vals = instance_density_fn(est.state_.model, est.latents(0).shape_code)(grid_points(12))
    return est.set_params(level=float(np.quantile(vals, 0.7)))


def test_get_params_and_clone():
    est = TemplateNeRF(config=config_dict(), steps=3)
    assert est.get_params()["steps"] == 3
    assert clone(est).get_params()["config"] == est.config


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        TemplateNeRF().transform(np.zeros((1, 3)))


def test_fit_history_and_transform(fitted):
    assert len(fitted.history_) == 3 and fitted.n_objects_ == 2
    pts = np.random.default_rng(0).uniform(-1, 1, (5, 3))
    assert fitted.transform(pts, instance=1).shape == (5, 3)
    with pytest.raises(ValidationError):
        fitted.transform(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        fitted.latents(5)


def test_predict_self_is_identity(fitted):
    mesh = fitted.mesh(0)
    assert not mesh.is_empty
    assert np.array_equal(fitted.predict(mesh.vertices, 0, 0), mesh.vertices)


def test_save_and_reload(fitted, tmp_path, family):
    fitted.save(tmp_path / "ckpt")
    back = TemplateNeRF.from_checkpoint(tmp_path / "ckpt", grid_resolution=12)
    pts = np.random.default_rng(1).uniform(-1, 1, (4, 3))
    assert np.array_equal(back.transform(pts, 0), fitted.transform(pts, 0))
    image, depth, opacity = back.render(0, family[0].views[0])
    assert image.shape == (8, 8, 3) and depth.shape == opacity.shape == (8, 8)


def test_fit_accepts_train_config(family):
    est = TemplateNeRF(config=TrainConfig(**config_dict()), steps=1).fit(family)
    assert est.state_.step == 1


def test_fit_rejects_empty():
    with pytest.raises(ValidationError):
        TemplateNeRF(config=config_dict(), steps=1).fit([])
