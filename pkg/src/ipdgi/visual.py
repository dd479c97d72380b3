"""Visual feature extraction, k-means clustering and reference-image selection."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)


class FeatureExtractor(nn.Module):
    """Small convolutional encoder mapping images to a fixed-size feature vector.

    The conv trunk pools onto a coarse 3x3 grid rather than a single cell, so
    the features stay sensitive to where image content sits; a global average
    would let a bounded pixel perturbation anywhere imitate content anywhere
    else, which makes feature-matching attacks unrealistically easy.
    """

    def __init__(self, feature_dim=128, width=32, in_channels=3):
        super().__init__()
        chans = [width, width * 2, width * 4, width * 4]
        layers = []
        prev = in_channels
        for ch in chans:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(8, ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.encoder = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d((3, 3))
        self.penultimate_dim = min(256, chans[-1] * 9)
        self.neck = nn.Linear(chans[-1] * 9, self.penultimate_dim)
        self.head = nn.Linear(self.penultimate_dim, feature_dim)
        self.feature_dim = feature_dim

    def penultimate(self, x):
        """Pre-head features, used for image-quality (FID) evaluation."""
        h = self.pool(self.encoder(x)).flatten(1)
        return torch.relu(self.neck(h))

    def forward(self, x):
        return self.head(self.penultimate(x))


def to_batch_tensor(images, dtype=torch.float32):
    """Stack HWC [0,1] images (numpy or torch, single or batch) into an NCHW tensor."""
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4:
        raise ValueError(f"expected 3D or 4D image array, got shape {tuple(images.shape)}")
    return images.permute(0, 3, 1, 2).contiguous().to(dtype)


def extract_features(extractor, images, batch_size=256, penultimate=False):
    """Feature matrix (n, d) for a batch of HWC images; rows match input order."""
    batch = to_batch_tensor(images, dtype=next(extractor.parameters()).dtype)
    shapes = {tuple(batch.shape[1:])}
    if len(shapes) != 1:
        raise ValueError("images in a batch must share one shape")
    was_training = extractor.training
    extractor.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, batch.shape[0], batch_size):
            chunk = batch[lo:lo + batch_size]
            out = extractor.penultimate(chunk) if penultimate else extractor(chunk)
            outs.append(out.cpu())
    if was_training:
        extractor.train()
    return torch.cat(outs).numpy()


class _ReconDecoder(nn.Module):
    """Mirror decoder used only while pretraining the extractor on reconstruction."""

    def __init__(self, feature_dim, image_side, width=32):
        super().__init__()
        self.base = 4
        n_up = int(np.log2(image_side / self.base))
        if self.base * 2 ** n_up != image_side:
            raise ValueError(f"image side {image_side} must be 4 * 2^k")
        ch = width * 4
        self.fc = nn.Linear(feature_dim, ch * self.base * self.base)
        ups = []
        for _ in range(n_up):
            ups += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, max(ch // 2, width), 3, padding=1),
                nn.GroupNorm(8, max(ch // 2, width)),
                nn.ReLU(inplace=True),
            ]
            ch = max(ch // 2, width)
        self.ups = nn.Sequential(*ups)
        self.out = nn.Conv2d(ch, 3, 3, padding=1)
        self.ch0 = width * 4

    def forward(self, z):
        h = self.fc(z).view(z.shape[0], self.ch0, self.base, self.base)
        return torch.sigmoid(self.out(self.ups(h)))


def pretrain_extractor(images, feature_dim=128, width=32, epochs=30, lr=1e-3,
                       batch_size=64, seed=0, noise_aug=0.0):
    """Train the extractor once on an image-reconstruction proxy, then freeze it.

    With ``noise_aug`` > 0 the proxy becomes a denoising autoencoder: Gaussian
    noise of that std is added to the input while the target stays clean, so
    the learned features respond to image structure rather than pixel-level
    speckle. Returns the extractor in eval mode with gradients disabled;
    recommenders that consume pre-extracted features share this frozen network.
    """
    torch.manual_seed(seed)
    x = to_batch_tensor(np.asarray(images, dtype=np.float32))
    side = x.shape[-1]
    extractor = FeatureExtractor(feature_dim=feature_dim, width=width)
    decoder = _ReconDecoder(feature_dim, side, width=width)
    opt = torch.optim.Adam(list(extractor.parameters()) + list(decoder.parameters()), lr=lr)
    n = x.shape[0]
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for lo in range(0, n, batch_size):
            batch = x[perm[lo:lo + batch_size]]
            inp = batch
            if noise_aug > 0:
                jitter = torch.randn(batch.shape, generator=gen) * noise_aug
                inp = torch.clamp(batch + jitter, 0.0, 1.0)
            recon = decoder(extractor(inp))
            loss = torch.mean((recon - batch) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * batch.shape[0]
        if epoch == 0 or (epoch + 1) % 10 == 0:
            log.info("extractor pretrain epoch %d/%d recon mse %.5f", epoch + 1, epochs, total / n)
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignment: dict
    seed: int = 0
    inertia: float = 0.0
    inertia_history: list = field(default_factory=list)

    def cluster_of(self, item_id):
        return self.assignment[item_id]

    def members(self, cluster):
        return sorted(i for i, c in self.assignment.items() if c == cluster)


def _plus_plus_init(features, k, rng):
    n = features.shape[0]
    centers = [features[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((features[:, None, :] - np.stack(centers)[None, :, :]) ** 2).sum(-1), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(features[rng.integers(n)])
            continue
        centers.append(features[rng.choice(n, p=d2 / total)])
    return np.stack(centers)


def fit_clusters(features, k, seed, item_ids=None, max_iter=300):
    """Lloyd k-means with k-means++ seeding; ties go to the lowest centroid index.

    Empty clusters are re-seeded to the point farthest from its assigned centroid,
    so no cluster is empty after fitting.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if item_ids is None:
        item_ids = [str(i) for i in range(n)]
    elif len(item_ids) != n:
        raise ValueError("item_ids length must match feature rows")

    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(features, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        new_labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), new_labels]
        for c in range(k):
            if not np.any(new_labels == c):
                far = int(np.argmax(point_d2))
                centroids[c] = features[far]
                new_labels[far] = c
                point_d2[far] = 0.0
        history.append(float(point_d2.sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            centroids[c] = features[mask].mean(axis=0)

    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    assignment = {item_ids[i]: int(labels[i]) for i in range(n)}
    return ClusterModel(k, centroids, assignment, seed=seed, inertia=inertia,
                        inertia_history=history)


def save_clusters(model, prefix):
    np.save(f"{prefix}.npy", model.centroids)
    with open(f"{prefix}.json", "w") as fh:
        json.dump(
            {"k": model.k, "seed": model.seed, "inertia": model.inertia,
             "assignment": model.assignment, "centroids_file": f"{prefix}.npy"},
            fh, indent=1, sort_keys=True)


def load_clusters(prefix):
    with open(f"{prefix}.json") as fh:
        doc = json.load(fh)
    centroids = np.load(doc["centroids_file"])
    return ClusterModel(doc["k"], centroids, doc["assignment"], seed=doc["seed"],
                        inertia=doc["inertia"])


def most_popular_item(catalog, exclude=()):
    """Globally most interacted item; popularity ties go to the lowest item id."""
    candidates = [i for i in catalog.items if i not in exclude]
    if not candidates:
        raise ValueError("no candidate items")
    return min(candidates, key=lambda i: (-catalog.popularity[i], i))


def select_reference(target, clusters, catalog):
    """Most popular item sharing the target's cluster (excluding the target).

    Falls back to the globally most popular item, with a warning, when the
    target is the only member of its cluster.
    """
    cluster = clusters.cluster_of(target)
    members = [i for i in clusters.members(cluster) if i != target]
    if not members:
        ref = most_popular_item(catalog, exclude=(target,))
        log.warning("target '%s' is alone in cluster %d; using global most-popular '%s'",
                    target, cluster, ref)
        return ref
    return min(members, key=lambda i: (-catalog.popularity[i], i))
