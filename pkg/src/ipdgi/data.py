"""Interaction/image ingestion, k-core filtering, leave-one-out splits and negative sampling."""

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
TIE_RULE = "item_id_asc"


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    raw_rating: float
    label: int = 1


@dataclass
class Catalog:
    """Deduplicated implicit-feedback interactions plus one image per item.

    Treated as immutable after construction; safe to share across consumers.
    """

    users: tuple
    items: tuple
    interactions: tuple
    images: dict
    popularity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.popularity:
            pop = {i: 0 for i in self.items}
            for inter in self.interactions:
                pop[inter.item_id] += 1
            self.popularity = pop

    @cached_property
    def user_index(self):
        return {u: k for k, u in enumerate(self.users)}

    @cached_property
    def item_index(self):
        return {i: k for k, i in enumerate(self.items)}

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def image_shape(self):
        return next(iter(self.images.values())).shape

    def image_array(self):
        """All item images stacked in catalog item order, (n_items, H, W, C)."""
        return np.stack([self.images[i] for i in self.items])

    def substituted(self, replacements):
        """Copy of this catalog with some item images replaced."""
        images = dict(self.images)
        for item_id, img in replacements.items():
            if item_id not in images:
                raise DataError(f"unknown item '{item_id}' in image substitution")
            images[item_id] = img
        return Catalog(self.users, self.items, self.interactions, images, self.popularity)


@dataclass
class Split:
    """Per-user leave-one-out partition: last item is test, second-to-last is valid."""

    train: dict
    valid: dict
    test: dict
    seed: int = 0
    tie_rule: str = TIE_RULE


@dataclass
class TripletBatch:
    """(user, positive, negative) index triples for pairwise ranking training."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)

    def slice(self, lo, hi):
        return TripletBatch(self.users[lo:hi], self.pos[lo:hi], self.neg[lo:hi])

    def triples(self):
        return list(zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist()))


def _decode_image(path, image_side):
    img = Image.open(path).convert("RGB")
    if img.size != (image_side, image_side):
        img = img.resize((image_side, image_side), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def find_image_path(image_dir, item_id):
    for ext in IMAGE_EXTENSIONS:
        p = Path(image_dir) / f"{item_id}{ext}"
        if p.exists():
            return p
    return None


def load_catalog(interaction_file, image_dir, image_side=64):
    """Read an interaction CSV plus an image directory into a Catalog.

    The CSV has a one-line header and columns (user, item, rating, timestamp).
    Duplicate (user, item) pairs keep the latest timestamp. Images are decoded,
    resized to ``image_side`` and scaled to [0, 1].
    """
    latest = {}
    with open(interaction_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{interaction_file}: empty interaction file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{interaction_file}:{lineno}: expected 4 columns, got {len(row)}")
            user, item, rating, ts = row
            try:
                inter = Interaction(user, item, int(ts), float(rating))
            except ValueError as exc:
                raise DataError(f"{interaction_file}:{lineno}: {exc}") from None
            key = (user, item)
            if key not in latest or inter.timestamp >= latest[key].timestamp:
                latest[key] = inter

    interactions = tuple(latest.values())
    if not interactions:
        raise DataError(f"{interaction_file}: no interactions")
    users = tuple(sorted({i.user_id for i in interactions}))
    items = tuple(sorted({i.item_id for i in interactions}))

    images = {}
    for item_id in items:
        path = find_image_path(image_dir, item_id)
        if path is None:
            raise DataError(f"missing image for item '{item_id}' in {image_dir}")
        images[item_id] = _decode_image(path, image_side)

    return Catalog(users, items, interactions, images)


def k_core_filter(catalog, core):
    """Iteratively drop users/items with fewer than ``core`` interactions until fixpoint."""
    if core < 1:
        raise DataError(f"core must be >= 1, got {core}")
    interactions = list(catalog.interactions)
    while True:
        user_counts, item_counts = {}, {}
        for inter in interactions:
            user_counts[inter.user_id] = user_counts.get(inter.user_id, 0) + 1
            item_counts[inter.item_id] = item_counts.get(inter.item_id, 0) + 1
        bad_users = {u for u, c in user_counts.items() if c < core}
        bad_items = {i for i, c in item_counts.items() if c < core}
        if not bad_users and not bad_items:
            break
        interactions = [
            x for x in interactions
            if x.user_id not in bad_users and x.item_id not in bad_items
        ]
        if not interactions:
            raise DataError("dataset eliminated by filtering")

    users = tuple(sorted({i.user_id for i in interactions}))
    items = tuple(sorted({i.item_id for i in interactions}))
    images = {i: catalog.images[i] for i in items if i in catalog.images}
    return Catalog(users, items, tuple(interactions), images)


def make_split(catalog, seed=0):
    """Leave-one-out split: per user the last item (by timestamp) is test,
    the second-to-last is valid, the rest train. Timestamp ties break by
    item id ascending, so the larger id lands later in the sequence.
    """
    by_user = {u: [] for u in catalog.users}
    for inter in catalog.interactions:
        by_user[inter.user_id].append(inter)

    train, valid, test = {}, {}, {}
    for user, inters in by_user.items():
        if len(inters) < 3:
            raise DataError(f"user '{user}' has {len(inters)} interactions, need >= 3 to split")
        ordered = sorted(inters, key=lambda x: (x.timestamp, x.item_id))
        items = [x.item_id for x in ordered]
        train[user] = items[:-2]
        valid[user] = items[-2]
        test[user] = items[-1]
    return Split(train, valid, test, seed=seed)


def save_split(split, path):
    doc = {
        "train": split.train,
        "valid": split.valid,
        "test": split.test,
        "seed": split.seed,
        "tie_rule": split.tie_rule,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_split(path):
    with open(path) as fh:
        doc = json.load(fh)
    return Split(doc["train"], doc["valid"], doc["test"], doc["seed"], doc["tie_rule"])


def sample_triplets(split, catalog, rng_seed, negatives_per_pos=4):
    """One epoch of (u, i, j) triples: every training positive once, each paired
    with ``negatives_per_pos`` negatives drawn uniformly from the items the user
    has not interacted with (training items and the validation item excluded).
    """
    rng = np.random.default_rng(rng_seed)
    n_items = catalog.n_items
    item_idx = catalog.item_index
    user_idx = catalog.user_index

    users_out, pos_out, neg_out = [], [], []
    for user in catalog.users:
        positives = split.train.get(user, [])
        if not positives:
            continue
        excluded = {item_idx[i] for i in positives}
        excluded.add(item_idx[split.valid[user]])
        pool = np.array([i for i in range(n_items) if i not in excluded], dtype=np.int64)
        if pool.size == 0:
            log.warning("user '%s' has no candidate negatives; skipping", user)
            continue
        pos = np.array([item_idx[i] for i in positives], dtype=np.int64)
        reps = np.repeat(pos, negatives_per_pos)
        negs = rng.choice(pool, size=reps.size, replace=True)
        users_out.append(np.full(reps.size, user_idx[user], dtype=np.int64))
        pos_out.append(reps)
        neg_out.append(negs)

    if not users_out:
        return TripletBatch(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))
    return TripletBatch(np.concatenate(users_out), np.concatenate(pos_out), np.concatenate(neg_out))


def select_targets(catalog, threshold):
    """Items with fewer than ``threshold`` interactions, sorted by id."""
    if threshold < 1:
        raise DataError(f"threshold must be >= 1, got {threshold}")
    targets = sorted(i for i in catalog.items if catalog.popularity[i] < threshold)
    if not targets:
        raise DataError(f"no unpopular items below {threshold} interactions")
    return targets


def convert_amazon_ratings(src, dst):
    """Convert a headerless Amazon ratings export (user,item,rating,timestamp)
    to the framework's headered CSV format."""
    with open(src, newline="") as fin, open(dst, "w", newline="") as fout:
        writer = csv.writer(fout)
        writer.writerow(["user", "item", "rating", "timestamp"])
        for row in csv.reader(fin):
            if row:
                writer.writerow(row[:4])
    return dst
