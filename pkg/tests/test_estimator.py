import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mmga.data import Dataset, synth_generate, to_float_image
from mmga.estimator import MmgaEmbedder, check_image_batch
from mmga.pnm import read_pnm


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("est_corpus")
    return synth_generate(num_ids=4, per_id=5, out_dir=str(out), seed=21)


@pytest.fixture(scope="module")
def fitted(corpus):
    est = MmgaEmbedder(epochs=1, seed=2, p=4, k=2)
    return est.fit(corpus)


class TestValidation:
    def test_channels_last_uint8(self):
        X = np.zeros((2, 10, 6, 3), dtype=np.uint8)
        out = check_image_batch(X)
        assert out.shape == (2, 3, 10, 6) and out.dtype == np.float32

    def test_channels_first_float(self):
        X = np.random.default_rng(0).uniform(size=(2, 3, 10, 6)).astype(np.float32)
        np.testing.assert_array_equal(check_image_batch(X), X)

    def test_single_image_promoted(self):
        X = np.zeros((10, 6, 3), dtype=np.uint8)
        assert check_image_batch(X).shape == (1, 3, 10, 6)

    def test_rejects_out_of_range_floats(self):
        with pytest.raises(ValueError, match="0, 1"):
            check_image_batch(np.full((1, 3, 4, 4), 2.0, dtype=np.float32))

    def test_rejects_channels_last_floats(self):
        with pytest.raises(ValueError, match="uint8"):
            check_image_batch(np.zeros((1, 4, 4, 3), dtype=np.float32))

    def test_rejects_unknown_layout(self):
        with pytest.raises(ValueError, match="channel axis"):
            check_image_batch(np.zeros((1, 5, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="image batch"):
            check_image_batch(np.zeros((4, 4), dtype=np.float32))


class TestSklearnSurface:
    def test_get_set_params_and_clone(self):
        est = MmgaEmbedder(epochs=3, lr_other=0.9)
        params = est.get_params()
        assert params["epochs"] == 3 and params["lr_other"] == 0.9
        est.set_params(variant="baseline")
        assert est.variant == "baseline"
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_unfitted_transform_raises(self):
        with pytest.raises(NotFittedError):
            MmgaEmbedder().transform(np.zeros((1, 8, 4, 3), dtype=np.uint8))

    def test_bad_preset(self, corpus):
        with pytest.raises(ValueError, match="preset"):
            MmgaEmbedder(preset="huge", epochs=0).fit(corpus)


class TestFittedBehavior:
    def test_fit_sets_learned_attributes(self, fitted):
        assert fitted.embedding_dim_ == fitted.model_.config.d_all
        assert len(fitted.train_records_) == 1
        np.testing.assert_array_equal(fitted.classes_, np.arange(4))

    def test_transform_unit_rows(self, corpus, fitted):
        ds = Dataset(corpus)
        X = np.stack([ds.image(s) for s in ds.query])
        emb = fitted.transform(X)
        assert emb.shape == (len(ds.query), fitted.embedding_dim_)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)

    def test_layouts_agree(self, corpus, fitted):
        ds = Dataset(corpus)
        raw = np.stack([ds.image(s) for s in ds.query[:2]])
        floats = np.stack([to_float_image(img) for img in raw])
        np.testing.assert_allclose(
            fitted.transform(raw), fitted.transform(floats), atol=1e-6
        )

    def test_predict_range(self, corpus, fitted):
        img = read_pnm(Dataset(corpus).train[0].image)
        pred = fitted.predict(img[None])
        assert pred.shape == (1,)
        assert 0 <= pred[0] < 4

    def test_identical_fits_are_deterministic(self, corpus):
        ds = Dataset(corpus)
        X = np.stack([ds.image(s) for s in ds.query])
        a = MmgaEmbedder(epochs=1, seed=2, p=4, k=2).fit(ds).transform(X)
        b = MmgaEmbedder(epochs=1, seed=2, p=4, k=2).fit(Dataset(corpus)).transform(X)
        np.testing.assert_array_equal(a, b)
