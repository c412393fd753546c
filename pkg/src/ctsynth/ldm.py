"""Generative core: slice VAE, cosine-schedule DDPM over stacked latents
with per-slice location features, and masked (RePaint-style) inference.

The denoiser is a 1D U-Net over the stack axis: rows are slice positions,
channels are latent dimensions plus location-feature channels, with a
sinusoidal timestep embedding added in every block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import netcore


# ---------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] == 1, strictly decreasing
    betas: np.ndarray      # length T+1, betas[0] == 0 (unused sentinel)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas


def cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine cumulative schedule with small-t offset; betas derived
    from alpha_bar ratios and clipped at 0.999."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if offset <= 0:
        raise ValueError("offset must be positive")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + offset) / (1.0 + offset)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    if not np.all(np.diff(alpha_bar) < 0):
        raise FloatingPointError("alpha_bar not strictly decreasing")
    return NoiseSchedule(T, alpha_bar, betas)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray,
                    sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not (0 <= t <= sched.T):
        raise ValueError(f"step {t} outside [0, {sched.T}]")
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bar[t]
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


# --------------------------------------------------------------------- VAE

def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, per sample."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


class Vae(nn.Module):
    def __init__(self, latent_dim: int = 128, grid: tuple[int, int] = (64, 64)):
        super().__init__()
        if grid[0] % 8 or grid[1] % 8:
            raise ValueError("slice grid must be divisible by 8")
        self.latent_dim = latent_dim
        self.grid = grid
        self.flat = 64 * (grid[0] // 8) * (grid[1] // 8)
        self.enc = nn.Sequential(
            nn.Conv2d(1, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.to_stats = nn.Linear(self.flat, 2 * latent_dim)
        self.from_latent = nn.Linear(latent_dim, self.flat)
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(32, 1, 4, stride=2, padding=1),
        )

    def encode_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.enc(x).flatten(1)
        stats = self.to_stats(h)
        mu, logvar = stats.chunk(2, dim=-1)
        return mu, logvar

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.from_latent(z))
        h = h.view(-1, 64, self.grid[0] // 8, self.grid[1] // 8)
        return self.dec(h).clamp(-1.0, 1.0)


@dataclass
class VaeModel:
    net: Vae
    latent_dim: int
    grid: tuple[int, int]

    def save(self, path) -> None:
        netcore.save_module(self.net, path)

    @classmethod
    def load(cls, path, latent_dim: int, grid: tuple[int, int]) -> "VaeModel":
        net = Vae(latent_dim, grid)
        netcore.load_module(net, path)
        net.eval()
        return cls(net, latent_dim, grid)


@dataclass
class VaeTrainConfig:
    latent_dim: int = 128
    epochs: int = 90
    batch: int = 32
    lr: float = 1e-3
    beta_kl: float = 1e-3  # weight on per-dimension mean KL
    seed: int = 0


def train_vae(slices: np.ndarray, config: VaeTrainConfig = VaeTrainConfig()
              ) -> tuple[VaeModel, list[float]]:
    """Reconstruction MSE plus beta-weighted KL on (N, ny, nx) slices."""
    if slices.ndim != 3:
        raise ValueError("slices must be (N, ny, nx)")
    grid = slices.shape[1:]
    net = Vae(config.latent_dim, grid)
    netcore.init_weights(net, config.seed)
    opt = netcore.make_adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    gen = netcore.make_generator(config.seed + 1)

    n = slices.shape[0]
    history = []
    for epoch in range(config.epochs):
        # step decay sharpens reconstructions once the coarse fit is in place
        if epoch in (int(config.epochs * 0.6), int(config.epochs * 0.85)):
            for group in opt.param_groups:
                group["lr"] /= 5.0
        perm = rng.permutation(n)
        epoch_loss, steps = 0.0, 0
        for lo in range(0, n, config.batch):
            batch = slices[perm[lo:lo + config.batch]]
            x = torch.from_numpy(batch.astype(np.float32)).unsqueeze(1)
            mu, logvar = net.encode_stats(x)
            eps = torch.randn(mu.shape, generator=gen)
            z = mu + torch.exp(0.5 * logvar) * eps
            recon = net.decode_latent(z)
            rec_loss = F.mse_loss(recon, x)
            kl = kl_divergence(mu, logvar).mean() / config.latent_dim
            loss = rec_loss + config.beta_kl * kl
            if not torch.isfinite(loss):
                raise FloatingPointError("VAE training diverged (non-finite loss)")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            steps += 1
        history.append(epoch_loss / steps)
    net.eval()
    return VaeModel(net, config.latent_dim, grid), history


def encode(m: VaeModel, slice2d: np.ndarray, mode: str = "mean",
           rng: torch.Generator | None = None) -> np.ndarray:
    return encode_batch(m, slice2d[None], mode, rng)[0]


def encode_batch(m: VaeModel, slices: np.ndarray, mode: str = "mean",
                 rng: torch.Generator | None = None) -> np.ndarray:
    if slices.shape[1:] != m.grid:
        raise ValueError(f"slice grid {slices.shape[1:]} != configured {m.grid}")
    x = torch.from_numpy(np.ascontiguousarray(slices, dtype=np.float32)).unsqueeze(1)
    with torch.no_grad():
        mu, logvar = m.net.encode_stats(x)
        if mode == "mean":
            z = mu
        elif mode == "sample":
            eps = torch.randn(mu.shape, generator=rng)
            z = mu + torch.exp(0.5 * logvar) * eps
        else:
            raise ValueError(f"unknown encode mode {mode!r}")
    out = z.numpy()
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite latent")
    return out


def decode(m: VaeModel, z: np.ndarray) -> np.ndarray:
    return decode_batch(m, z[None])[0]


def decode_batch(m: VaeModel, z: np.ndarray) -> np.ndarray:
    if z.shape[-1] != m.latent_dim:
        raise ValueError(f"latent width {z.shape[-1]} != configured {m.latent_dim}")
    zt = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))
    with torch.no_grad():
        x = m.net.decode_latent(zt)
    return x.squeeze(1).numpy()


# ------------------------------------------------------------------- DDPM

def _interp_rows(n_total: int, known: list[int], values: np.ndarray) -> np.ndarray:
    """Per-channel linear interpolation of (len(known), c) row vectors onto
    all n_total rows, constant beyond the first/last known row."""
    grid = np.arange(n_total, dtype=np.float64)
    idx = np.asarray(known, dtype=np.float64)
    out = np.empty((n_total, values.shape[1]), dtype=np.float32)
    for c in range(values.shape[1]):
        out[:, c] = np.interp(grid, idx, values[:, c])
    return out


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResBlock1d(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv1d(ch_in, ch_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv1d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv1d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class StackDenoiser(nn.Module):
    """1D U-Net over the slice-stack axis; predicts the injected noise.

    Per-row conditioning is `latent_dim + feature_width` wide: the known
    rows' (normalized) latents interpolated across the stack, concatenated
    with the per-row location features. The latent part is what carries
    subject identity (ring geometry) to rows far from any known slice."""

    def __init__(self, latent_dim: int = 128, feature_width: int = 16,
                 levels: int = 2, base: int = 96, time_dim: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_width = feature_width
        self.cond_width = latent_dim + feature_width
        self.levels = levels
        widths = [base * min(2 ** i, 4) for i in range(levels + 1)]
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(),
                                      nn.Linear(time_dim, time_dim))
        self.time_dim = time_dim
        self.stem = nn.Conv1d(latent_dim + self.cond_width, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(levels):
            self.down_blocks.append(ResBlock1d(widths[i], widths[i], time_dim))
            self.downs.append(nn.Conv1d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.mid = ResBlock1d(widths[-1], widths[-1], time_dim)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(levels)):
            self.ups.append(nn.ConvTranspose1d(widths[i + 1], widths[i], 4, stride=2, padding=1))
            self.up_blocks.append(ResBlock1d(widths[i] * 2, widths[i], time_dim))
        self.out_norm = nn.GroupNorm(8, widths[0])
        self.out = nn.Conv1d(widths[0], latent_dim, 3, padding=1)
        # direct input->output path: lets the net express eps ~ z_t (the
        # high-noise regime) even when the trunk width is below latent_dim
        self.in_skip = nn.Conv1d(latent_dim + self.cond_width, latent_dim, 1)
        self.reset_residual()

    def reset_residual(self) -> None:
        """Start at eps_hat = z_t: identity on the z channels of in_skip,
        zero final conv. Adam at the training lr takes thousands of steps
        to grow unit-magnitude weights, so starting there matters."""
        with torch.no_grad():
            self.in_skip.weight.zero_()
            self.in_skip.bias.zero_()
            for i in range(self.latent_dim):
                self.in_skip.weight[i, i, 0] = 1.0
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, z: torch.Tensor, f: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        # z: (B, N, d), f: (B, N, d + fw) conditioning, t: (B,)
        if f.shape[-1] != self.cond_width:
            raise ValueError(f"conditioning width {f.shape[-1]} != {self.cond_width}")
        if z.shape[1] % (2 ** self.levels):
            raise ValueError(f"stack length {z.shape[1]} not divisible by {2 ** self.levels}")
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim).to(z.dtype))
        x_in = torch.cat([z, f], dim=-1).transpose(1, 2)
        x = self.stem(x_in)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            x = block(x, temb)
            skips.append(x)
            x = down(x)
        x = self.mid(x, temb)
        for up, block in zip(self.ups, self.up_blocks):
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1), temb)
        x = self.out(F.silu(self.out_norm(x))) + self.in_skip(x_in)
        return x.transpose(1, 2)


@dataclass
class DdpmModel:
    net: StackDenoiser
    latent_dim: int
    feature_width: int
    latent_scale: float = 1.0

    def save(self, path) -> None:
        state = {k: v for k, v in self.net.state_dict().items()}
        state["latent_scale"] = torch.tensor([self.latent_scale])
        netcore.save_checkpoint(state, path)

    @classmethod
    def load(cls, path, latent_dim: int, feature_width: int,
             levels: int = 2, base: int = 96) -> "DdpmModel":
        state = netcore.load_checkpoint(path)
        scale = float(state.pop("latent_scale")[0])
        time_dim = state["time_mlp.0.weight"].shape[0]
        net = StackDenoiser(latent_dim, feature_width, levels, base, time_dim)
        net.load_state_dict(state)
        net.eval()
        return cls(net, latent_dim, feature_width, scale)


@dataclass
class DdpmTrainConfig:
    epochs: int = 250
    batch: int = 16
    lr: float = 2e-4
    levels: int = 2
    base: int = 96
    max_cond: int = 4  # conditioning rows simulated per training example
    seed: int = 0


def train_ddpm(stacks: np.ndarray, features: np.ndarray, sched: NoiseSchedule,
               config: DdpmTrainConfig = DdpmTrainConfig()
               ) -> tuple[DdpmModel, list[float]]:
    """Noise-prediction training over (M, n_total, d) latent stacks.

    `features` holds the per-slice location feature for every row; each
    training example draws a random conditioning subset (always including
    row 0, 1..max_cond rows) and builds the same conditioning the sampler
    sees: the subset's clean latents and features linearly interpolated
    across the remaining rows. A small fraction of examples gets all-zero
    location features so the features-off ablation stays in-distribution.
    """
    if stacks.ndim != 3 or features.shape[:2] != stacks.shape[:2]:
        raise ValueError("stacks (M,N,d) and features (M,N,fw) misaligned")
    m_count, n_total, d = stacks.shape
    fw = features.shape[2]
    scale = float(np.std(stacks)) or 1.0
    data = torch.from_numpy((stacks / scale).astype(np.float32))
    feats = torch.from_numpy(features.astype(np.float32))

    net = StackDenoiser(d, fw, config.levels, config.base)
    netcore.init_weights(net, config.seed)
    net.reset_residual()
    opt = netcore.make_adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    gen = netcore.make_generator(config.seed + 1)

    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(m_count)
        epoch_loss, steps = 0.0, 0
        for lo in range(0, m_count, config.batch):
            idx = perm[lo:lo + config.batch]
            z0 = data[idx]
            cond = np.empty((len(idx), n_total, d + fw), dtype=np.float32)
            # random conditioning subset per example
            for bi in range(len(idx)):
                k = int(rng.integers(1, config.max_cond + 1))
                keep = sorted({0, *rng.choice(n_total, size=k - 1, replace=False).tolist()}) \
                    if k > 1 else [0]
                cond[bi, :, :d] = _interp_rows(n_total, keep, z0[bi].numpy()[keep])
                if rng.random() < 0.1:
                    cond[bi, :, d:] = 0.0
                else:
                    cond[bi, :, d:] = _interp_rows(n_total, keep,
                                                   feats[idx[bi]].numpy()[keep])
            f = torch.from_numpy(cond)
            t = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(idx)))
            eps = torch.randn(z0.shape, generator=gen)
            ab = torch.from_numpy(sched.alpha_bar[t.numpy()]).float()[:, None, None]
            z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
            pred = net(z_t, f, t)
            loss = F.mse_loss(pred, eps)
            if not torch.isfinite(loss):
                raise FloatingPointError("DDPM training diverged (non-finite loss)")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            steps += 1
        history.append(epoch_loss / steps)
    net.eval()
    return DdpmModel(net, d, fw, scale), history


def predict_noise(m: DdpmModel, z_t: np.ndarray, f: np.ndarray, t: int) -> np.ndarray:
    zt = torch.from_numpy(np.ascontiguousarray(z_t, dtype=np.float32))[None]
    ft = torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32))[None]
    with torch.no_grad():
        eps = m.net(zt, ft, torch.tensor([t]))
    return eps[0].numpy()


# bound on the implied clean sample during reverse steps; normalized latents
# stay well inside it, and without the clamp the near-1 betas at the end of
# the cosine schedule amplify prediction error by 1/sqrt(1-beta) per step
X0_CLAMP = 6.0


def denoise_step(m: DdpmModel, z_t: np.ndarray, f: np.ndarray, t: int,
                 sched: NoiseSchedule, rng: torch.Generator,
                 eps_override: np.ndarray | None = None) -> np.ndarray:
    """Posterior-mean reverse step with the implied z0 clamped to
    [-X0_CLAMP, X0_CLAMP]; sigma noise is omitted at t == 1.

    eps_override substitutes the denoiser output (used by tests with a
    known-noise oracle)."""
    if not (1 <= t <= sched.T):
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    eps = eps_override if eps_override is not None else predict_noise(m, z_t, f, t)
    beta = sched.betas[t]
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    z0 = (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    z0 = np.clip(z0, -X0_CLAMP, X0_CLAMP)
    mean = (np.sqrt(ab_prev) * beta * z0
            + np.sqrt(1.0 - beta) * (1.0 - ab_prev) * z_t) / (1.0 - ab_t)
    if t > 1:
        sigma = np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t))
        xi = torch.randn(z_t.shape, generator=rng).numpy()
        mean = mean + sigma * xi
    return mean.astype(np.float32)


def repaint_inpaint(m: DdpmModel, z_known: np.ndarray, mask: np.ndarray,
                    f: np.ndarray, sched: NoiseSchedule, rng: torch.Generator,
                    resample_r: int = 1, hook=None) -> np.ndarray:
    """Full reverse pass with known rows pinned to their correctly noised
    values at every step; final output rows at mask==1 equal z_known exactly.

    hook(t, z_after_overwrite, noised_known) is called once per kept step.
    """
    n_total, d = z_known.shape
    if mask.shape != (n_total,):
        raise ValueError(f"mask shape {mask.shape} != ({n_total},)")
    if resample_r < 1:
        raise ValueError("resample_r must be >= 1")
    rows = mask.astype(bool)
    zk = (z_known / m.latent_scale).astype(np.float32)
    known = np.flatnonzero(rows).tolist()
    z_lin = _interp_rows(n_total, known, zk[known]) if known \
        else np.zeros((n_total, d), dtype=np.float32)
    cond = np.concatenate([z_lin, f], axis=-1)
    z = torch.randn((n_total, d), generator=rng).numpy().astype(np.float32)
    for t in range(sched.T, 0, -1):
        reps = resample_r if t > 1 else 1
        for r_i in range(reps):
            z = denoise_step(m, z, cond, t, sched, rng)
            eps_k = torch.randn((n_total, d), generator=rng).numpy().astype(np.float32)
            noised_known = forward_diffuse(zk, t - 1, eps_k, sched)
            z[rows] = noised_known[rows]
            last = (r_i == reps - 1)
            if last and hook is not None:
                hook(t, z.copy(), noised_known)
            if not last and t > 1:
                # jump back: one forward step t-1 -> t
                xi = torch.randn((n_total, d), generator=rng).numpy()
                z = (np.sqrt(1.0 - sched.betas[t]) * z
                     + np.sqrt(sched.betas[t]) * xi).astype(np.float32)
    out = (z * m.latent_scale).astype(np.float32)
    out[rows] = z_known[rows]
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite sample")
    return out
