"""Procedural desk-scale corpus: shape/color item images with a tunable link
between an item's visual vividness and its popularity, and between user
preferences and visual concept classes."""

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import Catalog, DataError, Interaction, k_core_filter

log = logging.getLogger(__name__)

PALETTE = np.array([
    [0.95, 0.15, 0.15],  # red
    [0.15, 0.30, 0.95],  # blue
    [0.10, 0.80, 0.20],  # green
    [0.95, 0.85, 0.10],  # yellow
    [0.90, 0.15, 0.85],  # magenta
    [0.10, 0.85, 0.90],  # cyan
    [0.95, 0.55, 0.10],  # orange
    [0.55, 0.20, 0.85],  # purple
], dtype=np.float64)


@dataclass
class SyntheticCorpusSpec:
    n_users: int = 500
    n_items: int = 200
    image_side: int = 32
    n_concepts: int = 8
    coupling: float = 0.8
    seed: int = 0
    zipf_exponent: float = 1.3
    min_interactions: int = 13
    max_interactions: int = 18
    texture: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.texture < 0:
            raise ValueError("texture must be >= 0")
        if self.n_concepts < 2:
            raise ValueError("need at least 2 concepts")
        if self.n_concepts > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} concepts supported")
        if self.n_items < 2 * self.n_concepts:
            raise ValueError("need at least 2 items per concept")
        if not 3 <= self.min_interactions <= self.max_interactions:
            raise ValueError("interactions per user must satisfy 3 <= min <= max")


def _render_item(side, concept, quality, rng, texture=0.05):
    """One item image: a concept-colored shape whose vividness and size grow
    with the item's visual quality, plus a per-item high-frequency texture
    field that is part of the item's identity (product photos are not flat
    color patches, and a denoiser must learn to preserve such detail)."""
    img = np.clip(0.84 + rng.normal(0.0, 0.02, size=(side, side, 1)), 0.0, 1.0)
    img = np.repeat(img, 3, axis=2)

    v = 0.25 + 0.75 * quality
    color = v * PALETTE[concept] + (1.0 - v) * 0.55
    r = side * (0.15 + 0.10 * quality) * (1.0 + rng.uniform(-0.05, 0.05))
    # each concept parks its shape at a fixed angular position: layout is part
    # of concept identity, and relocating image mass is expensive for a
    # norm-bounded pixel perturbation
    theta = 2.0 * math.pi * concept / 8.0
    cx = side / 2 + 0.18 * side * math.cos(theta) + rng.uniform(-0.04, 0.04) * side
    cy = side / 2 + 0.18 * side * math.sin(theta) + rng.uniform(-0.04, 0.04) * side

    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    shape = concept % 4
    if shape == 0:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    elif shape == 1:
        mask = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r * 0.85
    elif shape == 2:
        mask = (yy >= cy - r) & (yy <= cy + r * 0.8) & (np.abs(xx - cx) <= 0.6 * (yy - (cy - r)))
    else:
        mask = np.abs(xx - cx) + np.abs(yy - cy) <= r * 1.2

    img[mask] = color
    noise = rng.normal(0.0, 0.01, size=img.shape)
    if texture > 0:
        noise = noise + rng.normal(0.0, texture, size=img.shape)
    img = np.clip(img + noise, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def render_family(n, side, seed, texture=0.05, n_concepts=8):
    """Sample ``n`` fresh images from the same renderer family with random
    concept/quality draws. Used to pretrain the diffusion model on a corpus
    larger than the catalog itself, the desk-scale stand-in for a denoiser
    pretrained on a large image collection from the same domain: trained on
    hundreds of exemplars it memorizes them and snaps reconstructions onto
    the nearest one, whereas trained on the family it learns to preserve
    per-image identity it cannot predict."""
    rng = np.random.default_rng(seed)
    return np.stack([
        _render_item(side, int(rng.integers(n_concepts)), float(rng.random()),
                     rng, texture)
        for _ in range(n)
    ])


def generate_synthetic_corpus(spec, check_core=10):
    """Render item images and sample interactions.

    Each item gets a visual-quality rank and an independent arbitrary rank, both
    Zipf-weighted; popularity follows the visual ranks to the extent of
    spec.coupling (log-linear blend). Users prefer one concept class with the
    same coupling. coupling=0 therefore makes interactions independent of the
    images; coupling=1 confines each user to one concept with popularity fully
    visual. Raises on specs that cannot survive k-core filtering.
    """
    if spec.max_interactions < check_core:
        raise ValueError(
            f"infeasible spec: at most {spec.max_interactions} interactions per user "
            f"cannot survive {check_core}-core filtering")
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    n, c_count = spec.n_items, spec.n_concepts
    item_ids = [f"i{k:04d}" for k in range(n)]
    concepts = np.array([k % c_count for k in range(n)])

    quality = np.zeros(n)
    w_vis = np.zeros(n)
    w_rand = np.zeros(n)
    for c in range(c_count):
        members = np.flatnonzero(concepts == c)
        m = members.size
        rank_vis = rng.permutation(m)
        rank_rand = rng.permutation(m)
        quality[members] = 1.0 - rank_vis / max(m - 1, 1)
        w_vis[members] = (rank_vis + 1.0) ** (-spec.zipf_exponent)
        w_rand[members] = (rank_rand + 1.0) ** (-spec.zipf_exponent)
    base = w_vis ** spec.coupling * w_rand ** (1.0 - spec.coupling)

    images = {}
    for k, item in enumerate(item_ids):
        item_rng = np.random.default_rng([spec.seed, 1, k])
        images[item] = _render_item(spec.image_side, int(concepts[k]), float(quality[k]),
                                    item_rng, texture=spec.texture)

    interactions = []
    user_ids = [f"u{k:04d}" for k in range(spec.n_users)]
    for uk, user in enumerate(user_ids):
        u_rng = np.random.default_rng([spec.seed, 2, uk])
        c_u = uk % c_count
        concept_factor = np.where(concepts == c_u, spec.coupling, 0.0) + (1.0 - spec.coupling) / c_count
        p = base * concept_factor
        p = p / p.sum()
        n_u = int(u_rng.integers(spec.min_interactions, spec.max_interactions + 1))
        n_u = min(n_u, int(np.count_nonzero(p)))
        chosen = u_rng.choice(n, size=n_u, replace=False, p=p)
        stamps = u_rng.integers(1_600_000_000, 1_700_000_000, size=n_u)
        for idx, ts in zip(chosen, stamps):
            interactions.append(Interaction(user, item_ids[int(idx)], int(ts), 5.0))

    catalog = Catalog(tuple(user_ids), tuple(item_ids), tuple(interactions), images)
    if check_core:
        try:
            filtered = k_core_filter(catalog, check_core)
        except DataError as exc:
            raise ValueError(f"infeasible spec: {exc}") from exc
        log.info("synthetic corpus: %d users, %d items, %d interactions "
                 "(%d/%d/%d after %d-core)", catalog.n_users, catalog.n_items,
                 len(catalog.interactions), filtered.n_users, filtered.n_items,
                 len(filtered.interactions), check_core)
    return catalog


def save_corpus(catalog, out_dir):
    """Write the corpus in the on-disk layout the loaders expect."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "interactions.csv")
    with open(csv_path, "w") as fh:
        fh.write("user,item,rating,timestamp\n")
        for inter in catalog.interactions:
            fh.write(f"{inter.user_id},{inter.item_id},{inter.raw_rating},{inter.timestamp}\n")
    for item, img in catalog.images.items():
        arr = np.round(np.asarray(img) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(img_dir, f"{item}.png"))
    return csv_path, img_dir
