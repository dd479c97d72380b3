"""Visually-aware BPR recommenders: VBPR, DVBPR and adversarially-robust AMR."""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import sample_triplets
from .visual import FeatureExtractor, to_batch_tensor

log = logging.getLogger(__name__)

MODEL_KINDS = ("vbpr", "dvbpr", "amr")

# full-scale reference budgets are 2000/50/2000; scaled an order of magnitude
# down for small corpora (still configurable per run)
DEFAULT_EPOCHS = {"vbpr": 200, "dvbpr": 20, "amr": 200}


def bpr_loss(pos_scores, neg_scores):
    """Mean -ln sigmoid(pos - neg), written as softplus(neg - pos) for stability."""
    return F.softplus(neg_scores - pos_scores).mean()


class VBPR(nn.Module):
    """Matrix factorization with a learned linear projection of frozen visual features.

    score(u, i) = chi + eta_u + eta_i + lam_u . lam_i + phi_u . (E f_i) + eta_v . f_i
    """

    kind = "vbpr"

    def __init__(self, n_users, n_items, features, d_latent=100, d_visual=100):
        super().__init__()
        features = torch.as_tensor(np.asarray(features), dtype=torch.float32)
        if features.shape[0] != n_items:
            raise ValueError(f"features rows {features.shape[0]} != n_items {n_items}")
        self.n_users, self.n_items = n_users, n_items
        self.d_latent, self.d_visual = d_latent, d_visual
        self.feat_dim = features.shape[1]
        self.register_buffer("features", features)
        self.chi = nn.Parameter(torch.zeros(()))
        self.eta_u = nn.Parameter(0.01 * torch.randn(n_users))
        self.eta_i = nn.Parameter(0.01 * torch.randn(n_items))
        self.lam_u = nn.Parameter(0.01 * torch.randn(n_users, d_latent))
        self.lam_i = nn.Parameter(0.01 * torch.randn(n_items, d_latent))
        self.phi_u = nn.Parameter(0.01 * torch.randn(n_users, d_visual))
        self.E = nn.Parameter(0.01 * torch.randn(d_visual, self.feat_dim))
        self.eta_v = nn.Parameter(0.01 * torch.randn(self.feat_dim))

    def item_features(self, items):
        return self.features[items]

    def score(self, users, items):
        f = self.item_features(items)
        return (self.chi + self.eta_u[users] + self.eta_i[items]
                + (self.lam_u[users] * self.lam_i[items]).sum(-1)
                + (self.phi_u[users] * (f @ self.E.T)).sum(-1)
                + f @ self.eta_v)

    def pair_scores(self, users, pos, neg):
        return self.score(users, pos), self.score(users, neg)

    def score_all(self, features=None):
        """Dense (n_users, n_items) score matrix; optionally override item features."""
        f = self.features if features is None else torch.as_tensor(
            np.asarray(features), dtype=self.features.dtype, device=self.features.device)
        with torch.no_grad():
            s = (self.chi + self.eta_u[:, None] + self.eta_i[None, :]
                 + self.lam_u @ self.lam_i.T
                 + self.phi_u @ (f @ self.E.T).T
                 + (f @ self.eta_v)[None, :])
        return s.cpu().numpy()

    def config(self):
        return {"kind": self.kind, "n_users": self.n_users, "n_items": self.n_items,
                "feat_dim": self.feat_dim, "d_latent": self.d_latent, "d_visual": self.d_visual}


class AMR(VBPR):
    """VBPR trained against an adversary that perturbs item features in an L2 ball.

    The perturbation `delta` lives in a buffer; scoring with use_delta=True adds it
    to the frozen features. With adversary weight 0 training reduces to VBPR.
    """

    kind = "amr"

    def __init__(self, n_users, n_items, features, d_latent=100, d_visual=100):
        super().__init__(n_users, n_items, features, d_latent, d_visual)
        self.register_buffer("delta", torch.zeros_like(self.features))

    def perturbed_scores(self, users, pos, neg):
        fp = self.features[pos] + self.delta[pos]
        fn = self.features[neg] + self.delta[neg]
        sp = (self.chi + self.eta_u[users] + self.eta_i[pos]
              + (self.lam_u[users] * self.lam_i[pos]).sum(-1)
              + (self.phi_u[users] * (fp @ self.E.T)).sum(-1) + fp @ self.eta_v)
        sn = (self.chi + self.eta_u[users] + self.eta_i[neg]
              + (self.lam_u[users] * self.lam_i[neg]).sum(-1)
              + (self.phi_u[users] * (fn @ self.E.T)).sum(-1) + fn @ self.eta_v)
        return sp, sn


def amr_adversary_step(model, users, pos, neg, upsilon, ascent_lr=1.0):
    """One gradient-ascent step on the BPR loss w.r.t. the feature perturbation.

    After the ascent each item's perturbation row is projected back onto the
    L2 ball of radius upsilon; model parameters are untouched. Returns the
    adversarial loss before the step.
    """
    if not isinstance(model, AMR):
        raise TypeError("amr_adversary_step needs an AMR model")
    model.delta.requires_grad_(True)
    sp, sn = model.perturbed_scores(users, pos, neg)
    loss = bpr_loss(sp, sn)
    (grad,) = torch.autograd.grad(loss, model.delta)
    model.delta.requires_grad_(False)
    with torch.no_grad():
        model.delta += ascent_lr * grad
        norms = model.delta.norm(dim=1, keepdim=True).clamp_min(1e-12)
        model.delta *= (upsilon / norms).clamp(max=1.0)
    return float(loss.item())


class DVBPR(nn.Module):
    """End-to-end model: score(u, i) = phi_u . Psi(X_i) with Psi trained jointly."""

    kind = "dvbpr"

    def __init__(self, n_users, n_items, images, d_visual=100, cnn_width=16):
        super().__init__()
        images = to_batch_tensor(np.asarray(images, dtype=np.float32))
        if images.shape[0] != n_items:
            raise ValueError(f"images count {images.shape[0]} != n_items {n_items}")
        self.n_users, self.n_items = n_users, n_items
        self.d_visual = d_visual
        self.cnn_width = cnn_width
        self.register_buffer("images", images)
        self.phi_u = nn.Parameter(0.01 * torch.randn(n_users, d_visual))
        self.cnn = FeatureExtractor(feature_dim=d_visual, width=cnn_width)

    def item_embedding(self, items):
        return self.cnn(self.images[items])

    def score(self, users, items):
        return (self.phi_u[users] * self.item_embedding(items)).sum(-1)

    def pair_scores(self, users, pos, neg):
        both = torch.cat([pos, neg])
        uniq, inverse = torch.unique(both, return_inverse=True)
        emb = self.cnn(self.images[uniq])[inverse]
        e_pos, e_neg = emb[: pos.shape[0]], emb[pos.shape[0]:]
        return (self.phi_u[users] * e_pos).sum(-1), (self.phi_u[users] * e_neg).sum(-1)

    def all_item_embeddings(self, images=None, batch_size=256):
        imgs = self.images if images is None else to_batch_tensor(
            np.asarray(images, dtype=np.float32)).to(self.images.device)
        outs = []
        with torch.no_grad():
            for lo in range(0, imgs.shape[0], batch_size):
                outs.append(self.cnn(imgs[lo:lo + batch_size]))
        return torch.cat(outs)

    def score_all(self, images=None):
        emb = self.all_item_embeddings(images=images)
        with torch.no_grad():
            s = self.phi_u @ emb.T
        return s.cpu().numpy()

    def config(self):
        return {"kind": self.kind, "n_users": self.n_users, "n_items": self.n_items,
                "d_visual": self.d_visual, "cnn_width": self.cnn_width,
                "image_shape": list(self.images.shape[1:])}


def build_model(kind, n_users, n_items, features=None, images=None,
                d_latent=100, d_visual=100, cnn_width=16, seed=0):
    torch.manual_seed(seed)
    if kind == "vbpr":
        return VBPR(n_users, n_items, features, d_latent, d_visual)
    if kind == "amr":
        return AMR(n_users, n_items, features, d_latent, d_visual)
    if kind == "dvbpr":
        return DVBPR(n_users, n_items, images, d_visual, cnn_width)
    raise ValueError(f"unknown model kind '{kind}' (expected one of {MODEL_KINDS})")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-4   # quadratic penalty on all parameters, via the optimizer
    batch_size: int = 1024
    negatives_per_pos: int = 4
    phi_adv: float = 1.0         # adversary weight; AMR only (0 disables the adversary)
    upsilon: float = 1.0         # adversary L2 budget per item; AMR only
    ascent_lr: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = float("inf")


def _validation_triples(split, catalog, seed):
    """Fixed (user, valid-item, sampled-negative) triples for epoch-to-epoch comparison."""
    rng = np.random.default_rng(seed)
    all_items = np.array([catalog.item_index[i] for i in catalog.items])
    users, pos, neg = [], [], []
    for u in catalog.users:
        v = split.valid.get(u)
        if v is None:
            continue
        seen = {catalog.item_index[i] for i in split.train.get(u, [])}
        seen.add(catalog.item_index[v])
        pool = np.array([i for i in all_items if i not in seen])
        if pool.size == 0:
            continue
        users.append(catalog.user_index[u])
        pos.append(catalog.item_index[v])
        neg.append(int(rng.choice(pool)))
    return (torch.as_tensor(users, dtype=torch.long),
            torch.as_tensor(pos, dtype=torch.long),
            torch.as_tensor(neg, dtype=torch.long))


def validation_stats(model, vtriples):
    users, pos, neg = vtriples
    was_training = model.training
    model.eval()
    with torch.no_grad():
        sp, sn = model.pair_scores(users, pos, neg)
        loss = float(bpr_loss(sp, sn).item())
        auc = float((sp > sn).to(torch.float64).mean().item())
    if was_training:
        model.train()
    return loss, auc


def bpr_step(model, opt, users, pos, neg, phi_adv=0.0):
    """One BPR minibatch update; returns the pre-step loss.

    For AMR with phi_adv > 0 the loss adds phi_adv times the BPR loss under the
    current feature perturbation (the adversary itself moves in amr_adversary_step).
    """
    sp, sn = model.pair_scores(users, pos, neg)
    loss = bpr_loss(sp, sn)
    if phi_adv > 0:
        if not isinstance(model, AMR):
            raise TypeError("phi_adv > 0 requires an AMR model")
        ap, an = model.perturbed_scores(users, pos, neg)
        loss = loss + phi_adv * bpr_loss(ap, an)
    if not torch.isfinite(loss):
        raise RuntimeError(f"{model.kind} BPR loss diverged (non-finite); "
                           f"batch of {users.shape[0]} triples")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.item())


def train_model(model, split, catalog, cfg, seed=0):
    """BPR training with per-epoch triplet resampling and best-validation restore.

    AMR models with cfg.phi_adv > 0 run one adversary ascent/projection step per
    minibatch before the model update; with phi_adv == 0 the adversary is skipped
    entirely and the trajectory matches VBPR's exactly.
    """
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    vtriples = _validation_triples(split, catalog, seed=seed + 999_983)
    result = TrainResult()
    best_state = None
    shuffle_rng = np.random.default_rng(seed + 77_617)
    adversarial = isinstance(model, AMR) and cfg.phi_adv > 0

    for epoch in range(cfg.epochs):
        batch = sample_triplets(split, catalog, rng_seed=seed * 100_003 + epoch,
                                negatives_per_pos=cfg.negatives_per_pos)
        order = shuffle_rng.permutation(len(batch))
        users = torch.as_tensor(batch.users[order], dtype=torch.long)
        pos = torch.as_tensor(batch.pos[order], dtype=torch.long)
        neg = torch.as_tensor(batch.neg[order], dtype=torch.long)

        model.train()
        total, count = 0.0, 0
        for lo in range(0, len(batch), cfg.batch_size):
            u, i, j = users[lo:lo + cfg.batch_size], pos[lo:lo + cfg.batch_size], neg[lo:lo + cfg.batch_size]
            if adversarial:
                amr_adversary_step(model, u, i, j, upsilon=cfg.upsilon, ascent_lr=cfg.ascent_lr)
            loss = bpr_step(model, opt, u, i, j, phi_adv=cfg.phi_adv if adversarial else 0.0)
            total += loss * u.shape[0]
            count += u.shape[0]

        valid_loss, valid_auc = validation_stats(model, vtriples)
        result.history.append({"epoch": epoch, "train_loss": total / max(count, 1),
                               "valid_loss": valid_loss, "valid_auc": valid_auc})
        if valid_loss < result.best_valid_loss:
            result.best_valid_loss = valid_loss
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if epoch == 0 or (epoch + 1) % 10 == 0:
            log.info("%s epoch %d/%d train %.4f valid %.4f auc %.3f", model.kind,
                     epoch + 1, cfg.epochs, total / max(count, 1), valid_loss, valid_auc)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def rank_items(model, user, catalog, exclude=()):
    """All items for one user, best first; exclusions removed, ties to lower id."""
    uidx = catalog.user_index[user]
    scores = model.score_all()[uidx]
    keep = [(i, idx) for i, idx in catalog.item_index.items() if i not in set(exclude)]
    keep.sort(key=lambda pair: (-scores[pair[1]], pair[0]))
    return [i for i, _ in keep]


def rank_matrix(scores, catalog, split):
    """1-based rank of every item for every user, from a dense score matrix.

    Items a user already interacted with (train or validation) are pushed to the
    bottom of their list; score ties resolve in favour of the lower item id.
    """
    scores = np.asarray(scores, dtype=np.float64).copy()
    n_users, n_items = scores.shape
    if n_users != catalog.n_users or n_items != catalog.n_items:
        raise ValueError("score matrix shape does not match catalog")
    for u, uidx in catalog.user_index.items():
        seen = [catalog.item_index[i] for i in split.train.get(u, [])]
        v = split.valid.get(u)
        if v is not None:
            seen.append(catalog.item_index[v])
        scores[uidx, seen] = -np.inf

    # stable argsort on (-score, item index): lower index wins ties
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(n_users)[:, None]
    ranks[rows, order] = np.arange(1, n_items + 1)[None, :]
    return ranks


def rank_targets(scores, catalog, split, targets):
    """Per-target arrays of each user's 1-based rank for that item."""
    ranks = rank_matrix(scores, catalog, split)
    return {t: ranks[:, catalog.item_index[t]].copy() for t in targets}


def test_item_ranks(scores, catalog, split):
    """Rank of each user's held-out test item (overall recommendation quality)."""
    ranks = rank_matrix(scores, catalog, split)
    out = np.empty(catalog.n_users, dtype=np.int64)
    for u, uidx in catalog.user_index.items():
        out[uidx] = ranks[uidx, catalog.item_index[split.test[u]]]
    return out


def save_checkpoint(model, prefix, extra=None):
    blob = f"{prefix}.pt"
    torch.save({"state_dict": model.state_dict(), "config": model.config()}, blob)
    digest = hashlib.sha256(open(blob, "rb").read()).hexdigest()
    manifest = {"blob": blob, "sha256": digest, **model.config()}
    if extra:
        manifest.update(extra)
    with open(f"{prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
    return manifest


def load_checkpoint(prefix):
    with open(f"{prefix}.json") as fh:
        manifest = json.load(fh)
    payload = torch.load(manifest["blob"], weights_only=True)
    cfg = payload["config"]
    state = payload["state_dict"]
    kind = cfg["kind"]
    if kind in ("vbpr", "amr"):
        model = build_model(kind, cfg["n_users"], cfg["n_items"],
                            features=state["features"].numpy(),
                            d_latent=cfg["d_latent"], d_visual=cfg["d_visual"])
    elif kind == "dvbpr":
        imgs = state["images"].permute(0, 2, 3, 1).numpy()
        model = build_model(kind, cfg["n_users"], cfg["n_items"], images=imgs,
                            d_visual=cfg["d_visual"], cnn_width=cfg["cnn_width"])
    else:
        raise ValueError(f"unknown checkpoint kind '{kind}'")
    model.load_state_dict(state)
    model.eval()
    return model, manifest
