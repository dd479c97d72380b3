"""DDPM core: noise schedule, forward sampling, denoiser training, (guided) reverse steps."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .visual import to_batch_tensor

log = logging.getLogger(__name__)


class NoiseSchedule:
    """Linear-beta DDPM schedule; step t runs 1..t_max, arrays are 0-indexed at t-1.

    Reverse variance is fixed to beta_t.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigma2 = betas
        self.t_max = betas.size

    def _check(self, t):
        if not 1 <= t <= self.t_max:
            raise ValueError(f"step t={t} outside [1, {self.t_max}]")
        return int(t)

    def beta(self, t):
        return float(self.betas[self._check(t) - 1])

    def alpha(self, t):
        return float(self.alphas[self._check(t) - 1])

    def alpha_bar(self, t):
        return float(self.alpha_bars[self._check(t) - 1])

    def __len__(self):
        return self.t_max


def build_schedule(t_max, kind="linear", beta_start=1e-4, beta_end=0.02):
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind '{kind}'")
    return NoiseSchedule(np.linspace(beta_start, beta_end, t_max))


def forward_sample(x0, t, noise, sched):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    ab = sched.alpha_bar(t)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def timestep_embedding(t, dim):
    """Transformer-style sinusoidal embedding of integer steps; t is a 1D tensor."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNetwork(nn.Module):
    """Small residual U-Net predicting the injected noise z from (x_t, t).

    The final convolution is zero-initialized, so a fresh network predicts 0 and
    the simplified loss starts at E||z||^2 = 1 per element.
    """

    def __init__(self, channels=3, width=32, temb_dim=128, t_max=1000):
        super().__init__()
        w = width
        self.t_max = t_max
        self.temb = nn.Sequential(nn.Linear(temb_dim // 2, temb_dim), nn.SiLU(),
                                  nn.Linear(temb_dim, temb_dim))
        self.temb_in = temb_dim // 2
        self.in_conv = nn.Conv2d(channels, w, 3, padding=1)
        self.enc1 = _ResBlock(w, w, temb_dim)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(2 * w, 2 * w, temb_dim)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid = _ResBlock(2 * w, 2 * w, temb_dim)
        self.up2 = nn.ConvTranspose2d(2 * w, 2 * w, 2, stride=2)
        self.dec2 = _ResBlock(4 * w, 2 * w, temb_dim)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _ResBlock(2 * w, w, temb_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out_conv = nn.Conv2d(w, channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x, t):
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
        emb = self.temb(timestep_embedding(t, self.temb_in))
        h1 = self.enc1(self.in_conv(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid(self.down2(h2), emb)
        u2 = self.dec2(torch.cat([self.up2(h3), h2], dim=1), emb)
        u1 = self.dec1(torch.cat([self.up1(u2), h1], dim=1), emb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(u1)))


@dataclass
class DiffusionTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-4
    width: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def _batch_forward(x0, t_idx, noise, sched):
    ab = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype)[t_idx - 1]
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def train_denoiser(images, sched, cfg=None, seed=0):
    """Train the noise predictor on clean images with uniformly sampled steps.

    Returns (net, history) where history records the untrained probe loss and
    per-epoch training means. Aborts on divergence (non-finite loss).
    """
    cfg = cfg or DiffusionTrainConfig()
    x = to_batch_tensor(np.asarray(images, dtype=np.float32))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training corpus")
    torch.manual_seed(seed)
    net = DenoiserNetwork(channels=x.shape[1], width=cfg.width, t_max=sched.t_max)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed + 1)

    def probe_loss():
        g = torch.Generator().manual_seed(seed + 2)
        t_idx = torch.randint(1, sched.t_max + 1, (n,), generator=g)
        noise = torch.randn(x.shape, generator=g)
        with torch.no_grad():
            x_t = _batch_forward(x, t_idx, noise, sched)
            return float(torch.mean((net(x_t, t_idx) - noise) ** 2).item())

    history = {"initial_loss": probe_loss(), "epoch_losses": []}
    net.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch = x[idx]
            t_idx = torch.randint(1, sched.t_max + 1, (batch.shape[0],), generator=gen)
            noise = torch.randn(batch.shape, generator=gen)
            x_t = _batch_forward(batch, t_idx, noise, sched)
            loss = torch.mean((net(x_t, t_idx) - noise) ** 2)
            if not torch.isfinite(loss):
                raise RuntimeError(f"denoiser training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item()) * batch.shape[0]
            seen += batch.shape[0]
        history["epoch_losses"].append(total / seen)
        if epoch == 0 or (epoch + 1) % 5 == 0:
            log.info("denoiser epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, total / seen)
    history["final_loss"] = probe_loss()
    net.eval()
    return net, history


def reverse_step(net, x_t, t, sched, generator=None, add_noise=True):
    """One ancestral reverse step x_t -> x_{t-1}; no noise is added at t=1."""
    t = sched._check(t)
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    with torch.no_grad():
        eps = net(x_t, t)
        mean = (x_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1 and add_noise:
            z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
            return mean + math.sqrt(beta) * z
        return mean


def guided_reverse_step(net, x_adv_t, t, x0, xi, sched, generator=None, add_noise=True):
    """Reverse step whose mean is shifted by xi * sigma_t^2 * grad of image similarity.

    The guidance gradient is g = -d/dx ||x0 - x||^2 = 2 (x0 - x), evaluated at the
    current sample, pulling the trajectory toward the original image. xi = 0
    reproduces reverse_step on the same random stream.
    """
    if x0.shape != x_adv_t.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != x_adv shape {tuple(x_adv_t.shape)}")
    if xi < 0:
        raise ValueError("guidance scale must be >= 0")
    t = sched._check(t)
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    with torch.no_grad():
        eps = net(x_adv_t, t)
        mean = (x_adv_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        mean = mean + xi * beta * 2.0 * (x0 - x_adv_t)
        if t > 1 and add_noise:
            z = torch.randn(x_adv_t.shape, generator=generator, dtype=x_adv_t.dtype)
            return mean + math.sqrt(beta) * z
        return mean


def denoise_from(net, x_t, t_start, sched, x0=None, xi=0.0, generator=None):
    """Run the reverse chain from step t_start down to 1; guided when x0 is given."""
    x = x_t
    for t in range(int(t_start), 0, -1):
        if x0 is None:
            x = reverse_step(net, x, t, sched, generator)
        else:
            x = guided_reverse_step(net, x, t, x0, xi, sched, generator)
    return x


def save_denoiser(net, sched, prefix, extra=None):
    blob = f"{prefix}.pt"
    torch.save({"state_dict": net.state_dict(),
                "config": {"t_max": sched.t_max, "beta_start": float(sched.betas[0]),
                           "beta_end": float(sched.betas[-1]),
                           "width": net.in_conv.out_channels,
                           "channels": net.in_conv.in_channels}}, blob)
    digest = hashlib.sha256(open(blob, "rb").read()).hexdigest()
    manifest = {"blob": blob, "sha256": digest, "t_max": sched.t_max,
                "beta_range": [float(sched.betas[0]), float(sched.betas[-1])]}
    if extra:
        manifest.update(extra)
    with open(f"{prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
    return manifest


def load_denoiser(prefix):
    with open(f"{prefix}.json") as fh:
        manifest = json.load(fh)
    payload = torch.load(manifest["blob"], weights_only=True)
    cfg = payload["config"]
    net = DenoiserNetwork(channels=cfg["channels"], width=cfg["width"], t_max=cfg["t_max"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    sched = build_schedule(cfg["t_max"], beta_start=cfg["beta_start"], beta_end=cfg["beta_end"])
    return net, sched, manifest
