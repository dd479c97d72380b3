import numpy as np
import pytest
import torch
from torch import nn

from ipdgi.data import Catalog, Interaction, make_split


def grid_images(item_ids, side=8, seed=0):
    """Random images whose float values sit exactly on the 8-bit grid."""
    rng = np.random.default_rng(seed)
    return {i: (rng.integers(0, 256, size=(side, side, 3)) / 255.0).astype(np.float32)
            for i in item_ids}


def make_catalog(n_users=6, n_items=8, per_user=4, side=8, seed=0):
    """Small deterministic catalog: user k consumes items k..k+per_user-1 (mod n)."""
    users = tuple(f"u{k:02d}" for k in range(n_users))
    items = tuple(f"i{k:02d}" for k in range(n_items))
    interactions = []
    for uk, user in enumerate(users):
        for j in range(per_user):
            item = items[(uk + j) % n_items]
            interactions.append(Interaction(user, item, 100 + j, 5.0))
    return Catalog(users, items, tuple(interactions), grid_images(items, side, seed))


@pytest.fixture
def catalog():
    return make_catalog()


@pytest.fixture
def split(catalog):
    return make_split(catalog, seed=0)


class LinearExtractor(nn.Module):
    """Ψ(x) = W·flatten(x): closed-form reference for perturbation tests."""

    def __init__(self, side=8, channels=3, feature_dim=16, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(feature_dim, side * side * channels, generator=g) * 0.1
        self.register_buffer("weight", w)
        self.feature_dim = feature_dim
        self.penultimate_dim = feature_dim

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight.T

    def penultimate(self, x):
        return self.forward(x)


def write_corpus_files(tmp_path, catalog):
    """CSV + PNG directory capturing `catalog` for load_catalog round trips."""
    from PIL import Image

    csv_path = tmp_path / "interactions.csv"
    with open(csv_path, "w") as fh:
        fh.write("user,item,rating,timestamp\n")
        for it in catalog.interactions:
            fh.write(f"{it.user_id},{it.item_id},{it.raw_rating},{it.timestamp}\n")
    img_dir = tmp_path / "images"
    img_dir.mkdir(exist_ok=True)
    for item_id, img in catalog.images.items():
        arr = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / f"{item_id}.png")
    return str(csv_path), str(img_dir)
