"""Stage training entry points shared by the CLI and the test suite.

Stage order: VAE first, then BPR, then the DDPM in the VAE's latent space
(which also consumes per-slice BPR features)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import bpr as bpr_mod
from . import ldm
from .config import write_config
from .phantom import read_cohort_manifest
from .volumeio import clip_normalize, read_volume


class MissingStageError(ValueError):
    pass


def _write_loss_csv(history: list[float], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i, repr(loss)])


def load_train_volumes(data_dir) -> list[np.ndarray]:
    """Normalized (nz, ny, nx) arrays for every training subject."""
    vols = []
    for row in read_cohort_manifest(data_dir):
        if row["split"] != "train":
            continue
        v = read_volume(Path(data_dir) / f"subject_{row['id']:03d}_hu.ctv")
        vols.append(clip_normalize(v).voxels)
    if not vols:
        raise ValueError(f"no training subjects in {data_dir}")
    return vols


def train_stage_vae(data_dir, cfg: dict, out_dir) -> ldm.VaeModel:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vols = load_train_volumes(data_dir)
    slices = np.concatenate(vols, axis=0)
    vcfg = ldm.VaeTrainConfig(latent_dim=cfg["vae"]["latent_dim"],
                              epochs=cfg["vae"]["epochs"],
                              batch=cfg["vae"]["batch"],
                              lr=cfg["vae"]["lr"],
                              beta_kl=cfg["vae"]["beta_kl"],
                              seed=cfg["vae"]["seed"])
    model, history = ldm.train_vae(slices, vcfg)
    model.save(out / "vae.netc")
    _write_loss_csv(history, out / "vae_loss.csv")
    return model


def train_stage_bpr(data_dir, cfg: dict, out_dir) -> bpr_mod.BprModel:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vols = load_train_volumes(data_dir)
    bcfg = bpr_mod.BprTrainConfig(epochs=cfg["bpr"]["epochs"],
                                  steps_per_epoch=cfg["bpr"]["steps_per_epoch"],
                                  batch=cfg["bpr"]["batch"],
                                  lr=cfg["bpr"]["lr"],
                                  margin=cfg["bpr"]["margin"],
                                  dist_weight=cfg["bpr"]["dist_weight"],
                                  feature_width=cfg["ddpm"]["bpr_feature_width"],
                                  seed=cfg["bpr"]["seed"])
    model, history = bpr_mod.train_bpr(vols, bcfg)
    model.save(out / "bpr.netc")
    _write_loss_csv(history, out / "bpr_loss.csv")
    reference = clip_normalize(read_volume(Path(data_dir) / "reference_hu.ctv"))
    atlas = bpr_mod.build_reference_atlas(model, reference)
    atlas.save(out / "atlas.csv")
    return model


def build_latent_stacks(vols: list[np.ndarray], vae: ldm.VaeModel,
                        scorer: bpr_mod.BprModel, n_total: int,
                        segments_per_volume: int, seed: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Encode whole volumes once, then cut consecutive-slice windows."""
    rng = np.random.default_rng(seed)
    stacks, feats = [], []
    for vol in vols:
        nz = vol.shape[0]
        if nz < n_total:
            raise ValueError(f"volume too short for n_total={n_total}")
        latents = ldm.encode_batch(vae, vol, mode="mean")
        with_feat = np.stack([bpr_mod.slice_feature(scorer, vol[i]) for i in range(nz)])
        starts = rng.integers(0, nz - n_total + 1, size=segments_per_volume)
        for s in starts:
            stacks.append(latents[s:s + n_total])
            feats.append(with_feat[s:s + n_total])
    return np.stack(stacks), np.stack(feats)


def train_stage_ldm(data_dir, cfg: dict, out_dir) -> ldm.DdpmModel:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = (cfg["run"]["grid_y"], cfg["run"]["grid_x"])
    if not (out / "vae.netc").exists():
        raise MissingStageError("ldm stage requires a VAE checkpoint; run --stage vae first")
    if not (out / "bpr.netc").exists():
        raise MissingStageError("ldm stage requires a BPR checkpoint; run --stage bpr first")
    vae = ldm.VaeModel.load(out / "vae.netc", cfg["vae"]["latent_dim"], grid)
    scorer = bpr_mod.BprModel.load(out / "bpr.netc", grid,
                                   cfg["ddpm"]["bpr_feature_width"])
    vols = load_train_volumes(data_dir)
    sched = ldm.cosine_schedule(cfg["schedule"]["steps"], cfg["schedule"]["offset"])
    stacks, feats = build_latent_stacks(vols, vae, scorer,
                                        cfg["ddpm"]["n_total"],
                                        cfg["run"]["segments_per_volume"],
                                        cfg["ddpm"]["seed"])
    dcfg = ldm.DdpmTrainConfig(epochs=cfg["ddpm"]["epochs"],
                               batch=cfg["ddpm"]["batch"],
                               lr=cfg["ddpm"]["lr"],
                               levels=cfg["ddpm"]["unet_levels"],
                               base=cfg["ddpm"]["unet_base"],
                               max_cond=cfg["ddpm"]["max_cond"],
                               seed=cfg["ddpm"]["seed"])
    model, history = ldm.train_ddpm(stacks, feats, sched, dcfg)
    model.save(out / "ddpm.netc")
    _write_loss_csv(history, out / "ddpm_loss.csv")
    write_config(cfg, out / "ldm.tomlike")
    return model
