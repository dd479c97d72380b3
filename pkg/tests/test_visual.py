import logging

import numpy as np
import pytest
import torch

from ipdgi.visual import (ClusterModel, FeatureExtractor, extract_features, fit_clusters,
                          load_clusters, most_popular_item, pretrain_extractor,
                          save_clusters, select_reference, to_batch_tensor)

from conftest import make_catalog


def test_to_batch_tensor_shapes():
    one = np.zeros((8, 8, 3), dtype=np.float32)
    batch = np.zeros((5, 8, 8, 3), dtype=np.float32)
    assert tuple(to_batch_tensor(one).shape) == (1, 3, 8, 8)
    assert tuple(to_batch_tensor(batch).shape) == (5, 3, 8, 8)
    with pytest.raises(ValueError):
        to_batch_tensor(np.zeros((8, 8), dtype=np.float32))


def test_extractor_shapes_and_batch_consistency():
    torch.manual_seed(0)
    net = FeatureExtractor(feature_dim=16, width=8)
    net.eval()
    imgs = np.random.default_rng(0).random((7, 32, 32, 3)).astype(np.float32)
    feats = extract_features(net, imgs, batch_size=3)
    assert feats.shape == (7, 16)
    single = np.stack([extract_features(net, imgs[i]) [0] for i in range(7)])
    np.testing.assert_allclose(feats, single, rtol=0, atol=1e-5)
    pen = extract_features(net, imgs, penultimate=True)
    assert pen.shape == (7, net.penultimate_dim)


def test_extract_features_restores_training_mode():
    net = FeatureExtractor(feature_dim=8, width=8)
    net.train()
    imgs = np.zeros((2, 16, 16, 3), dtype=np.float32)
    extract_features(net, imgs)
    assert net.training


def test_pretrain_extractor_is_deterministic_and_frozen():
    imgs = np.random.default_rng(3).random((12, 16, 16, 3)).astype(np.float32)
    a = pretrain_extractor(imgs, feature_dim=8, width=8, epochs=2, seed=5)
    b = pretrain_extractor(imgs, feature_dim=8, width=8, epochs=2, seed=5)
    fa = extract_features(a, imgs)
    fb = extract_features(b, imgs)
    np.testing.assert_array_equal(fa, fb)
    assert not a.training
    assert all(not p.requires_grad for p in a.parameters())


def _planted_blobs(rng, n_per=20, spread=0.05):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    feats, labels = [], []
    for ci, c in enumerate(centers):
        feats.append(c + rng.normal(scale=spread, size=(n_per, 2)))
        labels += [ci] * n_per
    return np.concatenate(feats), np.array(labels)


def test_kmeans_recovers_planted_blobs():
    rng = np.random.default_rng(0)
    feats, labels = _planted_blobs(rng)
    model = fit_clusters(feats, k=3, seed=1)
    got = np.array([model.assignment[i] for i in range(len(feats))])
    # same partition up to label permutation
    for ci in range(3):
        assert len(set(got[labels == ci])) == 1
    assert len(set(got[labels == 0]) | set(got[labels == 1]) | set(got[labels == 2])) == 3


def test_kmeans_k_equals_n_gives_zero_inertia():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(6, 3))
    model = fit_clusters(feats, k=6, seed=0)
    assert model.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(model.assignment.values()) == list(range(6))


def test_kmeans_inertia_never_increases():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(80, 4))
    model = fit_clusters(feats, k=5, seed=3)
    hist = model.inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
    assert model.inertia == pytest.approx(hist[-1])


def test_kmeans_validation():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        fit_clusters(rng.normal(size=(5, 2)), k=1, seed=0)
    with pytest.raises(ValueError):
        fit_clusters(rng.normal(size=(3, 2)), k=4, seed=0)


def test_kmeans_deterministic_and_item_ids():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(30, 3))
    ids = [f"i{k:02d}" for k in range(30)]
    a = fit_clusters(feats, k=4, seed=9, item_ids=ids)
    b = fit_clusters(feats, k=4, seed=9, item_ids=ids)
    assert a.assignment == b.assignment
    assert set(a.assignment) == set(ids)


def test_clusters_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(20, 3))
    model = fit_clusters(feats, k=3, seed=2)
    save_clusters(model, str(tmp_path / "c"))
    loaded = load_clusters(str(tmp_path / "c"))
    assert loaded.assignment == model.assignment
    np.testing.assert_allclose(loaded.centroids, model.centroids)
    assert loaded.k == model.k and loaded.seed == model.seed


def test_most_popular_item_and_ties(catalog):
    # fixture popularities: i00..i07 -> 2,2,3,4,4,4,3,2; tie at 4 -> lowest id
    assert catalog.popularity["i03"] == 4 and catalog.popularity["i04"] == 4
    assert most_popular_item(catalog) == "i03"
    assert most_popular_item(catalog, exclude=("i03",)) == "i04"
    with pytest.raises(ValueError):
        most_popular_item(catalog, exclude=catalog.items)


def test_select_reference_uses_cluster_popularity(catalog):
    assignment = {i: (0 if i in ("i00", "i02", "i04") else 1) for i in catalog.items}
    model = ClusterModel(k=2, centroids=np.zeros((2, 2)), assignment=assignment, seed=0)
    # cluster 0 popularities: i00=2, i02=3, i04=4
    assert select_reference("i02", model, catalog) == "i04"
    assert select_reference("i04", model, catalog) == "i02"  # target excluded
    # cluster 1 popularities: i01=2, i03=4, i05=4, i06=3, i07=2
    assert select_reference("i01", model, catalog) == "i03"
    assert select_reference("i03", model, catalog) == "i05"


def test_select_reference_singleton_falls_back_global(catalog, caplog):
    assignment = {i: 0 for i in catalog.items}
    assignment["i05"] = 1  # singleton cluster
    model = ClusterModel(k=2, centroids=np.zeros((2, 2)), assignment=assignment, seed=0)
    with caplog.at_level(logging.WARNING, logger="ipdgi.visual"):
        ref = select_reference("i05", model, catalog)
    assert ref == "i03"  # global most popular
    assert any("alone in cluster" in r.message for r in caplog.records)
