"""Tests for the scikit-learn style estimator facade."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bipartite_gan import BipartiteGAN
from bipartite_gan.scenes import render_dataset_array


def tiny_estimator(**overrides):
    params = dict(
        resolution=16, channels=(16, 8, 8), k=2, latent_dim=4, heads=1,
        mapping_depth=1, batch_size=2, r1_interval=2, total_steps=2, seed=11,
    )
    params.update(overrides)
    return BipartiteGAN(**params)


@pytest.fixture(scope="module")
def images():
    return render_dataset_array(70, 5, 16)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = tiny_estimator()
        params = est.get_params()
        assert params["k"] == 2 and params["attention_variant"] == "duplex"
        assert BipartiteGAN(**params).get_params() == params

    def test_clone_and_set_params(self):
        est = tiny_estimator()
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        est.set_params(k=3, total_steps=1)
        assert est.k == 3 and est.total_steps == 1

    def test_unfitted_sample_raises(self):
        with pytest.raises(NotFittedError):
            tiny_estimator().sample(2)

    def test_invalid_architecture_surfaces_at_fit(self, images):
        est = tiny_estimator(channels=(16, 8))  # 16 px needs 3 levels
        with pytest.raises(ValueError, match="channel schedule"):
            est.fit(images)

    def test_bad_image_shape_rejected(self):
        with pytest.raises(ValueError, match="expected images"):
            tiny_estimator().fit(np.zeros((4, 3, 8, 8), dtype=np.float32))


class TestFitSampleScore:
    def test_fit_sample_flow(self, images):
        est = tiny_estimator().fit(images)
        assert len(est.history_) == 2
        assert est.state_.step == 2
        samples = est.sample(3)
        assert samples.shape == (3, 3, 16, 16)
        assert np.isfinite(samples).all() and np.abs(samples).max() <= 1.0

    def test_fit_is_deterministic(self, images):
        a = tiny_estimator().fit(images).sample(2)
        b = tiny_estimator().fit(images).sample(2)
        assert np.array_equal(a, b)

    def test_sample_seed_controls_draws(self, images):
        est = tiny_estimator().fit(images)
        assert np.array_equal(est.sample(2, seed=4), est.sample(2, seed=4))
        assert not np.array_equal(est.sample(2, seed=4), est.sample(2, seed=5))

    def test_score_is_negative_distance(self, images):
        est = tiny_estimator().fit(images)
        score = est.score(images)
        assert np.isfinite(score) and score <= 0.0
