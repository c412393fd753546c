"""End-to-end orchestration: from K acquired slices to a synthesized
N_total-slice volume, plus the evaluation protocol used by the tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bpr as bpr_mod
from . import ldm
from . import netcore
from .config import default_config, parse_config, write_config
from .volumeio import LabelVolume, NormVolume, Volume, clip_normalize


@dataclass
class ModelBundle:
    vae: ldm.VaeModel
    ddpm: ldm.DdpmModel
    bpr: bpr_mod.BprModel
    atlas: bpr_mod.ReferenceAtlas
    sched: ldm.NoiseSchedule
    config: dict

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.vae.save(out / "vae.netc")
        self.ddpm.save(out / "ddpm.netc")
        self.bpr.save(out / "bpr.netc")
        self.atlas.save(out / "atlas.csv")
        write_config(self.config, out / "ldm.tomlike")

    @classmethod
    def load(cls, model_dir) -> "ModelBundle":
        d = Path(model_dir)
        cfg = parse_config(d / "ldm.tomlike") if (d / "ldm.tomlike").exists() \
            else default_config()
        grid = (cfg["run"]["grid_y"], cfg["run"]["grid_x"])
        vae = ldm.VaeModel.load(d / "vae.netc", cfg["vae"]["latent_dim"], grid)
        ddpm = ldm.DdpmModel.load(d / "ddpm.netc", cfg["vae"]["latent_dim"],
                                  cfg["ddpm"]["bpr_feature_width"],
                                  cfg["ddpm"]["unet_levels"], cfg["ddpm"]["unet_base"])
        bpr_model = bpr_mod.BprModel.load(d / "bpr.netc", grid,
                                          cfg["ddpm"]["bpr_feature_width"])
        atlas = bpr_mod.ReferenceAtlas.load(d / "atlas.csv")
        sched = ldm.cosine_schedule(cfg["schedule"]["steps"], cfg["schedule"]["offset"])
        return cls(vae, ddpm, bpr_model, atlas, sched, cfg)

    @property
    def sz(self) -> float:
        return self.config["run"]["spacing_z"]


@dataclass
class SynthesisResult:
    volume: NormVolume
    plan: bpr_mod.SlicePlan
    seed: int
    provenance: list[str]          # acquired | interpolated | extrapolated, per row
    positions_mm: dict[int, float]  # stack index -> source position (acquired rows)
    latents: np.ndarray            # (n_total, d) final latent stack


def _clamped_plan(positions: list[float], n_total: int, sz: float) -> bpr_mod.SlicePlan:
    """Like plan_slices but clamps overflowing indices and nudges collisions;
    used when positions come from (noisy) score-matching localization."""
    order = np.argsort(positions, kind="stable")
    pos = np.asarray(positions, dtype=np.float64)[order]
    idx = np.floor((pos - pos[0]) / sz + 0.5).astype(int)
    idx = np.clip(idx, 0, n_total - 1)
    for k in range(1, len(idx)):
        if idx[k] <= idx[k - 1]:
            idx[k] = idx[k - 1] + 1
    if np.any(idx >= n_total):
        # push the tail back down while keeping indices distinct
        idx[-1] = n_total - 1
        for k in range(len(idx) - 2, -1, -1):
            if idx[k] >= idx[k + 1]:
                idx[k] = idx[k + 1] - 1
    if idx[0] < 0:
        raise ValueError(f"more conditioning slices than n_total={n_total}")
    cond = [(int(i), int(o)) for i, o in zip(idx, order)]
    n_between = [int(idx[k + 1] - idx[k] - 1) for k in range(len(idx) - 1)]
    return bpr_mod.SlicePlan(n_total, cond, n_between)


def synthesize_volume(bundle: ModelBundle, slices: list[np.ndarray], n_total: int,
                      seed: int, positions_mm: list[float] | None = None,
                      use_bpr_features: bool = True, clamp_plan: bool = False,
                      resample_r: int | None = None) -> SynthesisResult:
    """Score, localize, plan, encode, inpaint, decode."""
    if not 1 <= len(slices) <= n_total:
        raise ValueError(f"need 1..{n_total} conditioning slices, got {len(slices)}")
    if positions_mm is None:
        scores = [bpr_mod.score_slice(bundle.bpr, s) for s in slices]
        positions_mm = [bpr_mod.localize(bundle.atlas, s) for s in scores]
    elif len(positions_mm) != len(slices):
        raise ValueError("positions and slices count mismatch")

    sz = bundle.sz
    if clamp_plan:
        plan = _clamped_plan(positions_mm, n_total, sz)
    else:
        plan = bpr_mod.plan_slices(positions_mm, n_total, sz)

    d = bundle.vae.latent_dim
    z_known = np.zeros((n_total, d), dtype=np.float32)
    cond_latents = ldm.encode_batch(bundle.vae, np.stack(slices), mode="mean")
    for (stack_idx, input_order) in plan.cond:
        z_known[stack_idx] = cond_latents[input_order]

    if use_bpr_features:
        feats = bpr_mod.bpr_features(bundle.bpr, plan, slices,
                                     bundle.config["run"]["bpr_features"])
    else:
        feats = np.zeros((n_total, bundle.ddpm.feature_width), dtype=np.float32)

    rng = netcore.make_generator(seed)
    r = resample_r if resample_r is not None else bundle.config["ddpm"]["resample_r"]
    z_hat = ldm.repaint_inpaint(bundle.ddpm, z_known, plan.mask, feats,
                                bundle.sched, rng, resample_r=r)
    decoded = ldm.decode_batch(bundle.vae, z_hat)

    cond_indices = sorted(i for i, _ in plan.cond)
    last_cond = cond_indices[-1]
    provenance = []
    for i in range(n_total):
        if plan.mask[i]:
            provenance.append("acquired")
        elif i < last_cond:
            provenance.append("interpolated")
        else:
            provenance.append("extrapolated")
    positions = {int(i): float(positions_mm[o]) for i, o in plan.cond}
    volume = NormVolume(decoded.astype(np.float32),
                        bundle.config["run"]["spacing_x"],
                        bundle.config["run"]["spacing_y"], sz)
    return SynthesisResult(volume, plan, seed, provenance, positions, z_hat)


def save_plan(result: SynthesisResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "provenance", "source_position_mm"])
        for i, prov in enumerate(result.provenance):
            pos = result.positions_mm.get(i, "")
            w.writerow([i, prov, pos])


def conditioning_indices(k: int, n_total: int) -> list[int]:
    """k=1: top; k=2: top+bottom; k>=3: evenly spaced including both ends."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return [0]
    return sorted({int(round(x)) for x in np.linspace(0, n_total - 1, k)})


@dataclass
class EvalCase:
    result: SynthesisResult
    gt_labels: LabelVolume  # ground-truth slab, n_total slices
    slab_start: int
    cond_indices: list[int]
    k: int
    use_bpr: bool
    seed: int
    cond_slices: list[np.ndarray] | None = None  # observed (normalized) inputs


def evaluate_synthesis(bundle: ModelBundle, volume: Volume, labels: LabelVolume,
                       k: int, use_bpr: bool, seed: int) -> EvalCase:
    """Center-slab protocol: synthesize from k slices of the center n_total
    slices and pair the result with the ground-truth label slab."""
    n_total = bundle.config["ddpm"]["n_total"]
    if volume.nz < n_total:
        raise ValueError(f"volume too short: nz={volume.nz} < n_total={n_total}")
    nv = clip_normalize(volume)
    start = (volume.nz - n_total) // 2
    cond_idx = conditioning_indices(k, n_total)
    slices = [nv.voxels[start + i] for i in cond_idx]
    if use_bpr:
        result = synthesize_volume(bundle, slices, n_total, seed,
                                   positions_mm=None, use_bpr_features=True,
                                   clamp_plan=True)
    else:
        positions = [i * bundle.sz for i in cond_idx]
        result = synthesize_volume(bundle, slices, n_total, seed,
                                   positions_mm=positions, use_bpr_features=False)
    gt = LabelVolume(labels.voxels[start:start + n_total].copy(),
                     labels.sx, labels.sy, labels.sz)
    return EvalCase(result, gt, start, cond_idx, k, use_bpr, seed, slices)
