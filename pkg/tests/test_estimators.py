import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from multissl.errors import ContractError
from multissl.estimators import (LinearProbeClassifier, MultiModalEncoder,
                                 check_modality_arrays)


def make_xy(n=96, seed=0, n_classes=3):
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(n_classes, 6))
    y = rng.integers(0, n_classes, size=n)
    z = latent[y] + 0.3 * rng.normal(size=(n, 6))
    maps = {m: rng.normal(size=(6, d))
            for m, d in (("video", 14), ("text", 10), ("audio", 12))}
    X = {m: (z @ w).astype(np.float32) for m, w in maps.items()}
    return X, y


class TestValidationHelpers:
    def test_accepts_valid_dict(self):
        X, _ = make_xy(8)
        out = check_modality_arrays(X)
        assert set(out) == {"video", "text", "audio"}
        assert all(a.dtype == np.float32 for a in out.values())

    def test_rejects_non_dict(self):
        with pytest.raises(ContractError):
            check_modality_arrays(np.zeros((3, 2)))

    def test_rejects_unknown_modality(self):
        with pytest.raises(ContractError, match="depth"):
            check_modality_arrays({"depth": np.zeros((2, 2))})

    def test_rejects_row_mismatch(self):
        with pytest.raises(ContractError):
            check_modality_arrays({"video": np.zeros((2, 3)),
                                   "text": np.zeros((3, 3))})

    def test_rejects_missing_required(self):
        with pytest.raises(ContractError, match="audio"):
            check_modality_arrays({"video": np.zeros((2, 3))},
                                  required=("video", "audio"))

    def test_rejects_non_finite(self):
        with pytest.raises(ContractError):
            check_modality_arrays({"video": np.array([[np.inf, 0.0]])})

    def test_rejects_wrong_rank(self):
        with pytest.raises(ContractError):
            check_modality_arrays({"video": np.zeros(4)})


class TestMultiModalEncoder:
    def test_sklearn_params_roundtrip(self):
        enc = MultiModalEncoder(method="MultiCont", epochs=2, seed=7)
        params = enc.get_params()
        assert params["method"] == "MultiCont" and params["seed"] == 7
        other = clone(enc).set_params(epochs=3)
        assert other.get_params()["epochs"] == 3

    def test_fit_transform_shapes(self):
        X, _ = make_xy(64)
        enc = MultiModalEncoder(method="MultiCont", epochs=2, batch_size=16,
                                lr=1e-3, representation_dim=8, projection_dim=4,
                                cluster_dim=4, seed=0)
        out = enc.fit(X).transform(X)
        assert out.shape == (64, 24)           # concat of three 8-dim heads
        assert hasattr(enc, "loss_log_") and enc.loss_log_

    def test_transform_before_fit_raises(self):
        X, _ = make_xy(8)
        with pytest.raises(NotFittedError):
            MultiModalEncoder().transform(X)

    def test_instance_cont_needs_only_video(self):
        X, _ = make_xy(32)
        enc = MultiModalEncoder(method="InstanceCont", epochs=1, batch_size=8,
                                lr=1e-3, representation_dim=8, projection_dim=4,
                                cluster_dim=4, fusion="vision_only", seed=0)
        out = enc.fit({"video": X["video"]}).transform({"video": X["video"]})
        assert out.shape == (32, 8)

    def test_fit_deterministic(self):
        X, _ = make_xy(48)
        kwargs = dict(method="MultiCont", epochs=2, batch_size=16, lr=1e-3,
                      representation_dim=8, projection_dim=4, cluster_dim=4, seed=5)
        a = MultiModalEncoder(**kwargs).fit(X).transform(X)
        b = MultiModalEncoder(**kwargs).fit(X).transform(X)
        assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def fitted_encoder():
    X, _ = make_xy(96)
    return MultiModalEncoder(method="MultiCont", epochs=3, batch_size=16,
                             lr=2e-3, representation_dim=8, projection_dim=4,
                             cluster_dim=4, seed=0).fit(X)


class TestLinearProbeClassifier:
    def test_fit_predict_single_label(self, fitted_encoder):
        X, y = make_xy(96)
        clf = LinearProbeClassifier(encoder=fitted_encoder, epochs=10, lr=0.05,
                                    seed=0)
        clf.fit(X, y)
        preds = clf.predict(X)
        assert preds.shape == y.shape
        assert set(preds) <= set(y)
        assert clf.score(X, y) > 1.0 / 3.0     # better than chance on train data

    def test_predict_proba_normalized(self, fitted_encoder):
        X, y = make_xy(48, seed=1)
        clf = LinearProbeClassifier(encoder=fitted_encoder, epochs=3, seed=0)
        clf.fit(X, y)
        proba = clf.predict_proba(X)
        assert proba.shape == (48, len(np.unique(y)))
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-5)

    def test_multilabel_predict_binary(self, fitted_encoder):
        X, y = make_xy(48, seed=2)
        y2 = np.zeros((48, 3), dtype=np.int64)
        y2[np.arange(48), y] = 1
        clf = LinearProbeClassifier(encoder=fitted_encoder, epochs=3, seed=0)
        clf.fit(X, y2)
        preds = clf.predict(X)
        assert preds.shape == (48, 3)
        assert set(np.unique(preds)) <= {0, 1}

    def test_label_values_roundtrip(self, fitted_encoder):
        X, y = make_xy(48, seed=3)
        shifted = y + 10          # arbitrary label values
        clf = LinearProbeClassifier(encoder=fitted_encoder, epochs=2, seed=0)
        clf.fit(X, shifted)
        assert set(clf.predict(X)) <= {10, 11, 12}

    def test_unfitted_encoder_rejected(self):
        X, y = make_xy(16)
        clf = LinearProbeClassifier(encoder=MultiModalEncoder())
        with pytest.raises(NotFittedError):
            clf.fit(X, y)

    def test_bad_encoder_rejected(self):
        X, y = make_xy(16)
        with pytest.raises(ContractError):
            LinearProbeClassifier(encoder=42).fit(X, y)

    def test_checkpoint_path_source(self, fitted_encoder, tmp_path):
        from multissl.training import save_checkpoint
        path = tmp_path / "enc.ckpt"
        save_checkpoint(fitted_encoder.checkpoint_, path)
        X, y = make_xy(32, seed=4)
        clf = LinearProbeClassifier(encoder=str(path), epochs=2, seed=0)
        clf.fit(X, y)
        assert clf.predict(X).shape == y.shape

    def test_sklearn_clone(self, fitted_encoder):
        clf = LinearProbeClassifier(encoder=fitted_encoder, epochs=4)
        assert clone(clf).get_params()["epochs"] == 4
