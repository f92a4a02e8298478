import csv

import numpy as np
import pytest

import feature_classifier as fc
from autodiff_tensor import DimensionError
from style_gan3d import Discriminator, ModelConfig


def test_pooling_schedule_full_scale():
    stages = fc.pooling_schedule(ModelConfig(output_size=64))
    assert [(s.layer, s.channels, s.map_size, s.kernel, s.stride) for s in stages] == [
        (2, 128, 16, 8, 4), (3, 256, 8, 4, 2), (4, 512, 4, 2, 1)]
    assert [s.pooled_size for s in stages] == [3, 3, 3]
    assert fc.feature_length(ModelConfig(output_size=64)) == 24192


def test_feature_length_at_16():
    assert fc.feature_length(ModelConfig(output_size=16, channel_divisor=4)) == 1504


@pytest.mark.parametrize("size", [16, 32, 64])
def test_extracted_length_matches_schedule(size, rng):
    cfg = ModelConfig(latent_dim=8, mapping_layers=1, output_size=size, channel_divisor=64)
    d = Discriminator(cfg, seed=2)
    grid = (rng.random((size, size, size)) > 0.5).astype(np.float32)
    feats = fc.extract_features(d, [grid])
    assert feats.values.shape == (1, fc.feature_length(cfg))
    assert feats.values.dtype == np.float64


def test_zero_critic_gives_zero_features(tiny_config, rng):
    d = Discriminator(tiny_config)
    for p in d.parameters():
        p.data[...] = 0.0
    feats = fc.extract_features(d, [rng.random((16, 16, 16)).astype(np.float32) for _ in range(2)])
    assert np.all(feats.values == 0.0)


def test_features_are_per_sample(tiny_config, rng):
    d = Discriminator(tiny_config, seed=4)
    grids = [(rng.random((16, 16, 16)) > 0.5).astype(np.float32) for _ in range(3)]
    together = fc.extract_features(d, grids).values
    alone = fc.extract_features(d, grids[1:2]).values
    np.testing.assert_allclose(together[1], alone[0], rtol=1e-5, atol=1e-7)
    chunked = fc.extract_features(d, grids, chunk=1).values
    np.testing.assert_allclose(together, chunked, rtol=1e-5, atol=1e-7)


def test_extract_rejects_wrong_size(tiny_config):
    with pytest.raises(DimensionError):
        fc.extract_features(Discriminator(tiny_config), [np.zeros((8, 8, 8))])


def test_features_csv(tmp_path):
    path = tmp_path / "f.csv"
    fc.write_features_csv(path, np.array([[0.5, 1.0], [2.0, -1.0]]), ["a", "b"])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["label", "f0", "f1"]
    assert rows[2] == ["b", "2.0", "-1.0"]


# ========== SVM ==========
def test_svm_separates_two_points():
    model = fc.svm_train(np.array([[-1.0], [1.0]]), np.array([0, 1]), C=10.0, epochs=100)
    np.testing.assert_array_equal(fc.svm_predict(model, np.array([[-1.0], [1.0]])), [0, 1])


def test_svm_separates_clusters(rng):
    x = np.concatenate([rng.normal(-3, 1, size=(30, 5)), rng.normal(3, 1, size=(30, 5))])
    y = np.array(["pore"] * 30 + ["grain"] * 30)
    model = fc.svm_train(x, y, C=1.0, epochs=30)
    assert fc.accuracy(fc.svm_predict(model, x), y) == 1.0


def test_svm_three_classes_with_standardization(rng):
    centers = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
    x = np.concatenate([c + rng.normal(0, 1, size=(20, 2)) for c in centers])
    x[:, 1] *= 1000.0
    y = np.repeat([0, 1, 2], 20)
    model = fc.svm_train(x, y, epochs=40, standardize=True)
    assert model.mean is not None
    assert fc.accuracy(fc.svm_predict(model, x), y) >= 0.95


def test_svm_single_class():
    with pytest.raises(fc.SingleClassError):
        fc.svm_train(np.zeros((3, 2)), np.array([1, 1, 1]))


def test_svm_rejects_mismatched_labels():
    with pytest.raises(DimensionError):
        fc.svm_train(np.zeros((3, 2)), np.array([0, 1]))


def test_svm_is_deterministic(rng):
    x, y = rng.normal(size=(20, 4)), np.repeat([0, 1], 10)
    a = fc.svm_train(x, y, seed=3)
    b = fc.svm_train(x, y, seed=3)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.bias, b.bias)


@pytest.mark.parametrize("standardize", [False, True])
@pytest.mark.parametrize("labels", [[0] * 7 + [1] * 3, [1] * 7 + [0] * 3])
def test_svm_on_identical_features_predicts_the_majority(labels, standardize):
    x = np.ones((10, 3))
    model = fc.svm_train(x, np.array(labels), epochs=20, standardize=standardize)
    assert fc.accuracy(fc.svm_predict(model, x), labels) == pytest.approx(0.7)


def test_predict_ties_go_to_lowest_class():
    model = fc.LinearModel(classes=np.array([4, 7]), weights=np.zeros((2, 3)), bias=np.zeros(2))
    np.testing.assert_array_equal(fc.svm_predict(model, np.ones((2, 3))), [4, 4])


def test_accuracy():
    assert fc.accuracy([1, 2, 3, 4], [1, 2, 0, 0]) == 0.5
    assert fc.accuracy([], []) == 0.0


# ========== NEAREST NEIGHBOUR ==========
def test_nearest_neighbor_finds_member():
    corpus = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    assert fc.nearest_neighbor(np.array([3.0, 4.0]), corpus) == (1, 0.0)
    idx, dist = fc.nearest_neighbor(np.array([[0.0, 0.0], [0.0, 5.0]]), corpus)
    np.testing.assert_array_equal(idx, [0, 1])
    np.testing.assert_allclose(dist, [0.0, 3.0])


def test_nearest_neighbor_tie_goes_to_lowest_index():
    corpus = np.array([[1.0], [-1.0], [1.0]])
    assert fc.nearest_neighbor(np.array([0.0]), corpus) == (0, 1.0)


def test_nearest_neighbor_errors():
    with pytest.raises(fc.EmptyCorpusError):
        fc.nearest_neighbor(np.zeros(2), np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        fc.nearest_neighbor(np.zeros(3), np.zeros((4, 2)))
