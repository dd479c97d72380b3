import collections
import itertools

import numpy as np
import pytest
from scipy import stats

from ipdgi.data import (Catalog, DataError, Interaction, k_core_filter, load_catalog,
                        load_split, make_split, sample_triplets, save_split,
                        select_targets)

from conftest import grid_images, make_catalog, write_corpus_files


def _catalog_from_pairs(pairs, side=4):
    users = tuple(sorted({u for u, _ in pairs}))
    items = tuple(sorted({i for _, i in pairs}))
    inters = tuple(Interaction(u, i, 100 + k, 5.0) for k, (u, i) in enumerate(pairs))
    return Catalog(users, items, inters, grid_images(items, side))


def _brute_force_kcore(pairs, core):
    pairs = set(pairs)
    while True:
        uc = collections.Counter(u for u, _ in pairs)
        ic = collections.Counter(i for _, i in pairs)
        keep = {(u, i) for u, i in pairs if uc[u] >= core and ic[i] >= core}
        if keep == pairs:
            return pairs
        pairs = keep


def test_k_core_matches_brute_force():
    rng = np.random.default_rng(42)
    users = [f"u{k}" for k in range(30)]
    items = [f"i{k}" for k in range(20)]
    pairs = [(u, i) for u, i in itertools.product(users, items) if rng.random() < 0.25]
    catalog = _catalog_from_pairs(pairs)
    filtered = k_core_filter(catalog, 4)
    got = {(x.user_id, x.item_id) for x in filtered.interactions}
    assert got == _brute_force_kcore(pairs, 4)
    # survivors all meet the degree bound
    uc = collections.Counter(x.user_id for x in filtered.interactions)
    ic = collections.Counter(x.item_id for x in filtered.interactions)
    assert all(c >= 4 for c in uc.values()) and all(c >= 4 for c in ic.values())
    # dropped items lose their images too
    assert set(filtered.images) == set(filtered.items)


def test_k_core_is_order_independent():
    rng = np.random.default_rng(7)
    users = [f"u{k}" for k in range(15)]
    items = [f"i{k}" for k in range(12)]
    pairs = [(u, i) for u, i in itertools.product(users, items) if rng.random() < 0.3]
    catalog = _catalog_from_pairs(pairs)
    shuffled = Catalog(catalog.users, catalog.items,
                       tuple(reversed(catalog.interactions)), catalog.images)
    a = k_core_filter(catalog, 3)
    b = k_core_filter(shuffled, 3)
    assert {(x.user_id, x.item_id) for x in a.interactions} == \
           {(x.user_id, x.item_id) for x in b.interactions}


def test_k_core_empty_result_raises():
    catalog = _catalog_from_pairs([("u0", "i0"), ("u1", "i1")])
    with pytest.raises(DataError):
        k_core_filter(catalog, 5)


def test_split_orders_by_time_then_id():
    pairs = [("u0", "i3"), ("u0", "i0"), ("u0", "i2"), ("u0", "i1")]
    items = tuple(sorted({i for _, i in pairs}))
    inters = (
        Interaction("u0", "i3", 0, 5.0),
        Interaction("u0", "i0", 1, 5.0),
        # timestamp tie between i1 and i2: larger id becomes the test item
        Interaction("u0", "i2", 5, 5.0),
        Interaction("u0", "i1", 5, 5.0),
    )
    catalog = Catalog(("u0",), items, inters, grid_images(items))
    split = make_split(catalog)
    assert split.train["u0"] == ["i3", "i0"]
    assert split.valid["u0"] == "i1"
    assert split.test["u0"] == "i2"


def test_split_requires_three_interactions():
    items = ("i0", "i1")
    inters = (Interaction("u0", "i0", 0, 5.0), Interaction("u0", "i1", 1, 5.0))
    catalog = Catalog(("u0",), items, inters, grid_images(items))
    with pytest.raises(DataError):
        make_split(catalog)


def test_split_round_trip(tmp_path, catalog):
    split = make_split(catalog, seed=9)
    path = tmp_path / "split.json"
    save_split(split, path)
    loaded = load_split(path)
    assert loaded == split


def test_triplets_shape_and_exclusions(catalog, split):
    batch = sample_triplets(split, catalog, rng_seed=0, negatives_per_pos=4)
    n_pos = sum(len(v) for v in split.train.values())
    assert len(batch) == 4 * n_pos
    inv_items = {v: k for k, v in catalog.item_index.items()}
    inv_users = {v: k for k, v in catalog.user_index.items()}
    for u, p, n in batch.triples():
        user, pos, neg = inv_users[u], inv_items[p], inv_items[n]
        assert pos in split.train[user]
        assert neg not in split.train[user]
        assert neg != split.valid[user]


def test_triplets_deterministic(catalog, split):
    a = sample_triplets(split, catalog, rng_seed=123)
    b = sample_triplets(split, catalog, rng_seed=123)
    c = sample_triplets(split, catalog, rng_seed=124)
    assert np.array_equal(a.neg, b.neg)
    assert not np.array_equal(a.neg, c.neg)


def test_triplets_negative_pool_uniform():
    # one user, three eligible negatives (the held-out test item is eligible)
    items = tuple(f"i{k}" for k in range(6))
    inters = tuple(Interaction("u0", f"i{k}", k, 5.0) for k in range(4))
    catalog = Catalog(("u0",), items, inters, grid_images(items))
    split = make_split(catalog)
    assert split.test["u0"] == "i3"
    counts = collections.Counter()
    inv = {v: k for k, v in catalog.item_index.items()}
    for seed in range(200):
        batch = sample_triplets(split, catalog, rng_seed=seed)
        counts.update(inv[n] for n in batch.neg.tolist())
    assert set(counts) == {"i3", "i4", "i5"}
    total = sum(counts.values())
    chi2 = sum((c - total / 3) ** 2 / (total / 3) for c in counts.values())
    assert chi2 < stats.chi2.ppf(0.999, df=2)


def test_select_targets_strict_threshold():
    pairs = [("u0", "i0"), ("u1", "i0"), ("u0", "i1"), ("u0", "i2"), ("u1", "i2")]
    catalog = _catalog_from_pairs(pairs)
    assert select_targets(catalog, 2) == ["i1"]          # pop 1 < 2; pop 2 excluded
    assert select_targets(catalog, 3) == ["i0", "i1", "i2"]
    with pytest.raises(DataError):
        select_targets(catalog, 1)                       # nothing below 1
    with pytest.raises(DataError):
        select_targets(catalog, 0)


def test_load_catalog_round_trip(tmp_path):
    catalog = make_catalog(side=8)
    csv_path, img_dir = write_corpus_files(tmp_path, catalog)
    loaded = load_catalog(csv_path, img_dir, image_side=8)
    assert loaded.users == catalog.users
    assert loaded.items == catalog.items
    assert loaded.popularity == catalog.popularity
    for item in catalog.items:
        np.testing.assert_array_equal(loaded.images[item], catalog.images[item])


def test_load_catalog_dedupes_keeping_latest(tmp_path):
    items = ("i0", "i1", "i2")
    img_dir = tmp_path / "img"
    img_dir.mkdir()
    from PIL import Image
    for i in items:
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(img_dir / f"{i}.png")
    csv = tmp_path / "x.csv"
    csv.write_text("user,item,rating,timestamp\n"
                   "u0,i0,3.0,50\nu0,i0,5.0,90\nu0,i1,4.0,10\nu0,i2,4.0,20\n")
    catalog = load_catalog(str(csv), str(img_dir), image_side=4)
    assert len(catalog.interactions) == 3
    kept = {x.item_id: x for x in catalog.interactions}
    assert kept["i0"].timestamp == 90 and kept["i0"].raw_rating == 5.0


def test_load_catalog_missing_image(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("user,item,rating,timestamp\nu0,i0,5.0,1\n")
    (tmp_path / "img").mkdir()
    with pytest.raises(DataError, match="missing image"):
        load_catalog(str(csv), str(tmp_path / "img"), image_side=4)


def test_load_catalog_bad_rows(tmp_path):
    (tmp_path / "img").mkdir()
    bad = tmp_path / "bad.csv"
    bad.write_text("user,item,rating,timestamp\nu0,i0,5.0\n")
    with pytest.raises(DataError, match="expected 4 columns"):
        load_catalog(str(bad), str(tmp_path / "img"), image_side=4)
    empty = tmp_path / "empty.csv"
    empty.write_text("user,item,rating,timestamp\n")
    with pytest.raises(DataError, match="no interactions"):
        load_catalog(str(empty), str(tmp_path / "img"), image_side=4)


def test_substituted_catalog(catalog):
    new_img = np.zeros(catalog.image_shape, dtype=np.float32)
    sub = catalog.substituted({"i00": new_img})
    assert np.array_equal(sub.images["i00"], new_img)
    assert np.array_equal(catalog.images["i00"], catalog.images["i00"])  # original untouched
    assert sub.popularity == catalog.popularity
    with pytest.raises(DataError):
        catalog.substituted({"nope": new_img})
