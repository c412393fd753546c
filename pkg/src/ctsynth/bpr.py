"""Body-part regression: per-slice score, reference atlas, physical
localization by score matching, slice-plan construction, and the
per-slice feature vector fed to the denoiser.

Training is self-supervised on slice pairs from one volume: a hinge
ordering term plus a squared distance term with a learnable scale, which
pushes scores toward an affine function of axial position.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import netcore


class SliceScorer(nn.Module):
    def __init__(self, feature_width: int = 16):
        super().__init__()
        self.feature_width = feature_width
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.feat = nn.Linear(32, feature_width)
        self.head = nn.Linear(feature_width, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv(x).mean(dim=(2, 3))
        f = torch.nn.functional.silu(self.feat(h))
        s = self.head(f).squeeze(-1)
        return s, f


@dataclass
class BprModel:
    net: SliceScorer
    grid: tuple[int, int]  # (ny, nx)
    feature_width: int = 16

    def save(self, path) -> None:
        netcore.save_module(self.net, path)

    @classmethod
    def load(cls, path, grid: tuple[int, int], feature_width: int = 16) -> "BprModel":
        net = SliceScorer(feature_width)
        netcore.load_module(net, path)
        net.eval()
        return cls(net, grid, feature_width)


def _as_batch(m: BprModel, slices: np.ndarray) -> torch.Tensor:
    if slices.ndim == 2:
        slices = slices[None]
    if slices.shape[-2:] != m.grid:
        raise ValueError(f"slice grid {slices.shape[-2:]} != configured {m.grid}")
    return torch.from_numpy(np.ascontiguousarray(slices, dtype=np.float32)).unsqueeze(1)


def score_slice(m: BprModel, slice2d: np.ndarray) -> float:
    with torch.no_grad():
        s, _ = m.net(_as_batch(m, slice2d))
    val = float(s[0])
    if not np.isfinite(val):
        raise FloatingPointError("non-finite score")
    return val


def score_volume(m: BprModel, voxels: np.ndarray) -> np.ndarray:
    """Scores for every slice of a (nz, ny, nx) normalized volume."""
    with torch.no_grad():
        s, _ = m.net(_as_batch(m, voxels))
    return s.numpy()


def slice_feature(m: BprModel, slice2d: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        _, f = m.net(_as_batch(m, slice2d))
    return f[0].numpy()


def ordering_margin(s_i, s_j, i: int, j: int):
    """Ordering term of the pair loss; antisymmetric under swapping the pair."""
    return (s_j - s_i) * float(np.sign(j - i))


@dataclass
class BprTrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 150
    batch: int = 24
    lr: float = 1e-3
    margin: float = 0.1
    dist_weight: float = 1.0
    feature_width: int = 16
    seed: int = 0


def train_bpr(volumes: list[np.ndarray], config: BprTrainConfig = BprTrainConfig()
              ) -> tuple[BprModel, list[float]]:
    """Self-supervised training on random slice pairs from single volumes."""
    if not volumes or any(v.shape[0] < 2 for v in volumes):
        raise ValueError("need >= 2 slices per training volume")
    grid = volumes[0].shape[1:]
    net = SliceScorer(config.feature_width)
    netcore.init_weights(net, config.seed)
    c = nn.Parameter(torch.tensor(0.01))
    opt = netcore.make_adam(list(net.parameters()) + [c], lr=config.lr)
    rng = np.random.default_rng(config.seed)

    history = []
    for _ in range(config.epochs):
        epoch_loss = 0.0
        for _ in range(config.steps_per_epoch):
            vols = rng.integers(0, len(volumes), size=config.batch)
            ii, jj, xi, xj = [], [], [], []
            for v in vols:
                nz = volumes[v].shape[0]
                i, j = rng.choice(nz, size=2, replace=False)
                ii.append(i); jj.append(j)
                xi.append(volumes[v][i]); xj.append(volumes[v][j])
            xi_t = torch.from_numpy(np.stack(xi).astype(np.float32)).unsqueeze(1)
            xj_t = torch.from_numpy(np.stack(xj).astype(np.float32)).unsqueeze(1)
            si, _ = net(xi_t)
            sj, _ = net(xj_t)
            dj = torch.tensor(np.array(jj) - np.array(ii), dtype=torch.float32)
            sign = torch.sign(dj)
            hinge = torch.relu(config.margin - (sj - si) * sign).mean()
            dist = ((sj - si) - c * dj).pow(2).mean()
            loss = hinge + config.dist_weight * dist
            if not torch.isfinite(loss):
                raise FloatingPointError("BPR training diverged (non-finite loss)")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        history.append(epoch_loss / config.steps_per_epoch)
    net.eval()
    return BprModel(net, grid, config.feature_width), history


@dataclass
class ReferenceAtlas:
    positions_mm: np.ndarray  # strictly increasing
    scores: np.ndarray

    def __post_init__(self):
        if len(self.positions_mm) != len(self.scores) or len(self.positions_mm) == 0:
            raise ValueError("atlas must have one score per position")
        if not np.all(np.diff(self.positions_mm) > 0):
            raise ValueError("atlas positions must be strictly increasing")

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["position_mm", "score"])
            for p, s in zip(self.positions_mm, self.scores):
                w.writerow([repr(float(p)), repr(float(s))])

    @classmethod
    def load(cls, path) -> "ReferenceAtlas":
        pos, sc = [], []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                pos.append(float(row["position_mm"]))
                sc.append(float(row["score"]))
        return cls(np.array(pos), np.array(sc))


def build_reference_atlas(m: BprModel, reference) -> ReferenceAtlas:
    """Score every slice of the reference volume; positions are index * sz."""
    scores = score_volume(m, reference.voxels)
    positions = np.arange(reference.nz, dtype=np.float64) * reference.sz
    return ReferenceAtlas(positions, scores.astype(np.float64))


def localize(atlas: ReferenceAtlas, s: float) -> float:
    """Position of the atlas entry with the closest score; ties go to the
    more superior (smaller) position."""
    idx = int(np.argmin(np.abs(atlas.scores - s)))
    return float(atlas.positions_mm[idx])


@dataclass
class SlicePlan:
    n_total: int
    cond: list[tuple[int, int]]   # (stack index, input order) sorted by stack index
    n_between: list[int]          # per adjacent conditioning pair
    mask: np.ndarray = field(default=None)  # uint8, length n_total

    def __post_init__(self):
        if self.mask is None:
            m = np.zeros(self.n_total, dtype=np.uint8)
            for idx, _ in self.cond:
                m[idx] = 1
            self.mask = m


def plan_slices(positions_mm: list[float], n_total: int, sz: float) -> SlicePlan:
    """Convert physical slice positions to stack indices. The superior
    (smallest-position) slice becomes stack index 0; round half-up."""
    if not positions_mm:
        raise ValueError("need at least one slice position")
    order = np.argsort(positions_mm, kind="stable")
    pos = np.asarray(positions_mm, dtype=np.float64)[order]
    idx = np.floor((pos - pos[0]) / sz + 0.5).astype(int)
    if np.any(idx >= n_total):
        raise ValueError(f"slices too far apart for n_total={n_total}")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("slices collide after rounding to stack indices")
    cond = [(int(i), int(o)) for i, o in zip(idx, order)]
    n_between = [int(idx[k + 1] - idx[k] - 1) for k in range(len(idx) - 1)]
    return SlicePlan(n_total, cond, n_between)


def interpolate_rows(n_total: int, known: list[int], values: np.ndarray) -> np.ndarray:
    """Linear interpolation of per-row vectors between known rows, held
    constant beyond the first/last known row. Empty `known` gives zeros."""
    out = np.zeros((n_total, values.shape[1] if len(known) else 0), dtype=np.float32)
    if not known:
        return out
    order = np.argsort(known)
    idx = np.asarray(known, dtype=np.float64)[order]
    grid = np.arange(n_total, dtype=np.float64)
    for c in range(values.shape[1]):
        out[:, c] = np.interp(grid, idx, values[order, c])
    return out


def bpr_features(m: BprModel, plan: SlicePlan, cond_slices: list[np.ndarray],
                 mode: str = "all_conditioning") -> np.ndarray:
    """Feature matrix (n_total, width): the scorer's penultimate vector at
    conditioning stack indices, linearly interpolated across the rows in
    between and held constant beyond the ends, so every row carries a
    location/appearance hint (the stack-axis analogue of interpolating
    scores between acquired slices)."""
    if len(cond_slices) != len(plan.cond):
        raise ValueError(f"{len(cond_slices)} slices for {len(plan.cond)} plan entries")
    if mode not in ("all_conditioning", "top_only"):
        raise ValueError(f"unknown feature mode {mode!r}")
    known, vals = [], []
    for (stack_idx, input_order) in plan.cond:
        if mode == "top_only" and stack_idx != 0:
            continue
        known.append(stack_idx)
        vals.append(slice_feature(m, cond_slices[input_order]))
    if not known:
        return np.zeros((plan.n_total, m.feature_width), dtype=np.float32)
    return interpolate_rows(plan.n_total, known, np.stack(vals))
