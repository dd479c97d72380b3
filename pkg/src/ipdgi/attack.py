"""Item-promotion attacks: guided-diffusion image forging (IPDGI) and the AIP baseline."""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from PIL import Image

from .diffusion import forward_sample, guided_reverse_step
from .visual import most_popular_item, select_reference, to_batch_tensor

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    eps_max: float = 16.0     # L-inf budget in 1/255 pixel units
    epochs: int = 30          # perturbation optimization epochs (e)
    steps: int = 15           # truncated diffusion steps (T)
    xi: float = 15.0          # guidance scale
    lr: float = 0.01
    seed: int = 0
    no_clustering: bool = False
    no_perturbation: bool = False

    def __post_init__(self):
        if not 0 < self.eps_max <= 255:
            raise ValueError("eps_max must be in (0, 255]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.xi < 0:
            raise ValueError("guidance scale must be >= 0")


@dataclass
class AdversarialResult:
    target_item: str
    reference_item: str
    adversarial_image: np.ndarray
    feature_distance_trace: list = field(default_factory=list)
    attack_kind: str = "IPDGI"
    config: dict = field(default_factory=dict)
    seed: int = 0


def item_seed(base_seed, item_id, stream=""):
    """Stable per-item seed so each target owns its random stream."""
    digest = hashlib.sha256(f"{base_seed}:{item_id}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def quantize8(img):
    """Round to the 8-bit grid a platform upload would impose."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def fuse_noise(eps, delta):
    if eps.shape != delta.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(delta.shape)}")
    return eps + delta


def _per_item_randn(shape, seeds):
    outs = [torch.randn(shape[1:], generator=torch.Generator().manual_seed(s)) for s in seeds]
    return torch.stack(outs)


def generate_perturbation_batch(x0s, refs, extractor, eps_max, epochs, seeds,
                                lr=0.01, init="gauss"):
    """Optimize per-image perturbations pulling Psi(x0+eps) toward Psi(x_ref).

    Each epoch takes one adaptive-gradient step on the summed per-image feature
    L2 distances, then projects eps onto the L-inf ball of radius eps_max/255.
    Items are independent (elementwise optimizer state), so the batch result
    equals per-item runs. Returns (eps tensor NCHW, per-item distance traces);
    trace[i][k] is item i's feature distance at the start of epoch k.
    """
    x = to_batch_tensor(np.asarray(x0s, dtype=np.float32))
    r = to_batch_tensor(np.asarray(refs, dtype=np.float32))
    if x.shape != r.shape:
        raise ValueError("target and reference image shapes differ")
    bound = eps_max / 255.0
    if init == "gauss":
        eps = _per_item_randn(x.shape, seeds)
    elif init == "zeros":
        eps = torch.zeros_like(x)
    else:
        raise ValueError(f"unknown init '{init}'")
    eps.requires_grad_(True)
    opt = torch.optim.Adam([eps], lr=lr)
    with torch.no_grad():
        ref_feats = extractor(r)
    traces = [[] for _ in range(x.shape[0])]
    for _ in range(epochs):
        dist = torch.linalg.vector_norm(extractor(x + eps) - ref_feats, dim=1)
        for i, d in enumerate(dist.detach().tolist()):
            traces[i].append(d)
        loss = dist.sum()
        opt.zero_grad()
        loss.backward()
        if eps.grad is None:
            raise RuntimeError("feature extractor is not differentiable w.r.t. its input")
        opt.step()
        with torch.no_grad():
            eps.clamp_(-bound, bound)
    return eps.detach(), traces


def generate_perturbation(x0, x_ref, extractor, eps_max, epochs, seed, lr=0.01):
    eps, traces = generate_perturbation_batch(
        np.asarray(x0)[None], np.asarray(x_ref)[None], extractor, eps_max, epochs,
        [seed], lr=lr)
    return eps[0], traces[0]


def _select_references(targets, catalog, clusters, no_clustering):
    refs = {}
    for t in targets:
        if no_clustering:
            refs[t] = most_popular_item(catalog, exclude=(t,))
        else:
            refs[t] = select_reference(t, clusters, catalog)
    return refs


def ipdgi_attack_batch(targets, catalog, clusters, extractor, net, sched, cfg):
    """Run the full guided-diffusion attack for a list of target items.

    Per target: pick the cluster reference, optimize the feature-aligning
    perturbation, fuse it with Gaussian noise, partially noise the original for
    cfg.steps forward steps, then denoise back with similarity guidance toward
    the original. Deterministic per (cfg.seed, item id).
    """
    if cfg.steps > sched.t_max:
        raise ValueError(f"attack steps {cfg.steps} exceed schedule length {sched.t_max}")
    refs = _select_references(targets, catalog, clusters, cfg.no_clustering)
    x0s = np.stack([catalog.images[t] for t in targets])
    ref_imgs = np.stack([catalog.images[refs[t]] for t in targets])
    x = to_batch_tensor(x0s)

    if cfg.no_perturbation:
        eps = torch.zeros_like(x)
        traces = [[] for _ in targets]
    else:
        eps, traces = generate_perturbation_batch(
            x0s, ref_imgs, extractor, cfg.eps_max, cfg.epochs,
            [item_seed(cfg.seed, t, "eps") for t in targets], lr=cfg.lr)

    delta = _per_item_randn(x.shape, [item_seed(cfg.seed, t, "delta") for t in targets])
    zeta = fuse_noise(eps, delta)
    x_t = forward_sample(x, cfg.steps, zeta, sched)
    for t_step in range(cfg.steps, 0, -1):
        noise = _per_item_randn(x.shape, [item_seed(cfg.seed, t, f"rev{t_step}") for t in targets])
        x_t = _guided_step_with_noise(net, x_t, t_step, x, cfg.xi, sched, noise)

    out = torch.clamp(x_t, 0.0, 1.0).permute(0, 2, 3, 1).numpy()
    results = []
    snapshot = asdict(cfg)
    for i, t in enumerate(targets):
        trace = traces[i]
        if trace and trace[-1] > trace[0]:
            log.warning("perturbation distance did not converge for '%s' (%.4f -> %.4f)",
                        t, trace[0], trace[-1])
        results.append(AdversarialResult(
            target_item=t, reference_item=refs[t], adversarial_image=quantize8(out[i]),
            feature_distance_trace=trace, attack_kind="IPDGI", config=snapshot,
            seed=item_seed(cfg.seed, t, "eps")))
    return results


def _guided_step_with_noise(net, x_t, t, x0, xi, sched, noise):
    """guided_reverse_step with externally supplied per-item noise (batch path)."""
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    with torch.no_grad():
        eps_hat = net(x_t, t)
        mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
        mean = mean + xi * beta * 2.0 * (x0 - x_t)
        if t > 1:
            return mean + math.sqrt(beta) * noise
        return mean


def ipdgi_attack(target, catalog, clusters, extractor, net, sched, cfg):
    return ipdgi_attack_batch([target], catalog, clusters, extractor, net, sched, cfg)[0]


def aip_attack_batch(targets, catalog, extractor, eps_max=32.0, epochs=500, lr=0.01, seed=0):
    """Direct image perturbation toward the globally most popular item, no diffusion.

    The published budget (5000 epochs at lr 0.001) is scaled to an equivalent
    smaller run; both knobs stay configurable.
    """
    ref = most_popular_item(catalog, exclude=tuple(targets))
    x0s = np.stack([catalog.images[t] for t in targets])
    ref_imgs = np.stack([catalog.images[ref]] * len(targets))
    eps, traces = generate_perturbation_batch(
        x0s, ref_imgs, extractor, eps_max, epochs,
        [item_seed(seed, t, "aip") for t in targets], lr=lr, init="zeros")
    adv = torch.clamp(to_batch_tensor(x0s) + eps, 0.0, 1.0).permute(0, 2, 3, 1).numpy()
    cfg = {"eps_max": eps_max, "epochs": epochs, "lr": lr, "seed": seed}
    return [AdversarialResult(target_item=t, reference_item=ref,
                              adversarial_image=quantize8(adv[i]),
                              feature_distance_trace=traces[i], attack_kind="AIP",
                              config=cfg, seed=item_seed(seed, t, "aip"))
            for i, t in enumerate(targets)]


def aip_attack(target, catalog, extractor, eps_max=32.0, epochs=500, lr=0.01, seed=0):
    return aip_attack_batch([target], catalog, extractor, eps_max, epochs, lr, seed)[0]


def write_attack_outputs(results, run_dir, attack_name):
    """PNG per adversarial image plus a manifest with per-item config and traces."""
    out_dir = os.path.join(run_dir, "adv", attack_name)
    os.makedirs(out_dir, exist_ok=True)
    items = {}
    for res in sorted(results, key=lambda r: r.target_item):
        fname = os.path.join(out_dir, f"{res.target_item}.png")
        arr = np.round(res.adversarial_image * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(fname)
        items[res.target_item] = {
            "reference_item": res.reference_item,
            "seed": res.seed,
            "feature_distance_trace": res.feature_distance_trace,
            "file": fname,
        }
    manifest = {"attack": attack_name,
                "kind": results[0].attack_kind if results else "none",
                "config": results[0].config if results else {},
                "items": items}
    path = os.path.join(out_dir, "attack_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_attack_images(run_dir, attack_name):
    """Read back the written adversarial set as {item_id: float image}."""
    out_dir = os.path.join(run_dir, "adv", attack_name)
    with open(os.path.join(out_dir, "attack_manifest.json")) as fh:
        manifest = json.load(fh)
    images = {}
    for item, rec in manifest["items"].items():
        arr = np.asarray(Image.open(rec["file"]).convert("RGB"), dtype=np.float32) / 255.0
        images[item] = arr
    return images, manifest
