"""Tissue segmentation, body-composition ratios and error rates, the
Wilcoxon signed-rank test, and the two evaluation table harnesses."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import norm, rankdata

from . import phantom as ph
from . import pipeline as pl
from .netcore import splitmix64
from .volumeio import LabelVolume, NormVolume, Volume, denormalize, read_volume


@dataclass
class SegmentationRule:
    # Band edges sit between the tissue plateaus (fat ~-120..-70,
    # muscle/organ ~30..80, air -1000) so that a symmetric blur of the
    # boundary, as produced by a decoder round-trip, moves the apparent
    # boundary as little as possible; the fat/muscle edge is additionally
    # lowered to offset the downward bias blur induces in thin muscle rings.
    fat_band: tuple[float, float] = (-350.0, -25.0)
    muscle_band: tuple[float, float] = (-25.0, 200.0)
    bone_min: float = 300.0
    body_threshold: float = -500.0
    closing_radius: int = 2


def _disk(radius: int) -> np.ndarray:
    r = radius
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    return (x * x + y * y) <= r * r


def segment_tissues(v: Volume, rule: SegmentationRule = SegmentationRule()) -> LabelVolume:
    """HU-threshold segmentation with topology rules: fat inside the closed
    muscle ring is visceral, fat outside is subcutaneous."""
    hu = v.voxels
    body_cand = hu > rule.body_threshold
    lab_arr, nlab = ndimage.label(body_cand, structure=np.ones((3, 3, 3)))
    if nlab == 0:
        raise ValueError("empty body mask")
    counts = np.bincount(lab_arr.ravel())
    counts[0] = 0
    body = lab_arr == int(np.argmax(counts))

    fat = body & (hu >= rule.fat_band[0]) & (hu <= rule.fat_band[1])
    muscle_band = body & (hu >= rule.muscle_band[0]) & (hu <= rule.muscle_band[1])
    bone = body & (hu >= rule.bone_min)

    # Per slice: the closed muscle band is the barrier that stops the
    # exterior flood (closing seals noise holes in the wall); the wall itself
    # is taken from the unclosed band so that enclosed muscle-band islands
    # (organs) are never absorbed into it. Interior = neither exterior nor wall.
    disk = _disk(rule.closing_radius)
    eight = np.ones((3, 3), dtype=bool)
    interior = np.zeros_like(body)
    for z in range(v.nz):
        closed = ndimage.binary_closing(muscle_band[z], structure=disk)
        open_lab, _ = ndimage.label(~closed, structure=eight)
        border_ids = np.unique(np.concatenate([
            open_lab[0, :], open_lab[-1, :], open_lab[:, 0], open_lab[:, -1]]))
        exterior = np.isin(open_lab, border_ids[border_ids > 0])
        comp_lab, _ = ndimage.label(muscle_band[z], structure=eight)
        near_ext = ndimage.binary_dilation(exterior, structure=eight)
        wall_ids = np.unique(comp_lab[near_ext & muscle_band[z]])
        wall = np.isin(comp_lab, wall_ids[wall_ids > 0])
        interior[z] = ~exterior & ~wall

    out = np.zeros(hu.shape, dtype=np.uint8)
    out[fat & ~interior] = ph.SUBQ_FAT
    out[muscle_band & ~interior] = ph.MUSCLE
    out[fat & interior] = ph.VISC_FAT
    out[muscle_band & interior] = ph.ORGAN
    out[bone] = ph.BONE
    return LabelVolume(out, v.sx, v.sy, v.sz)


def volumetric_ratio(labels: LabelVolume, z_lo: int, z_hi: int) -> tuple[float, float]:
    """(R_sfat, R_vfat) over the inclusive slab; shares its counting with the
    phantom ground-truth oracle by construction."""
    r = ph.phantom_bc_oracle(labels, z_lo, z_hi)
    return r.r_sfat, r.r_vfat


def error_rate(r_syn: float, r_gt: float) -> float:
    """|syn - gt| / gt * 100, in percent."""
    if r_gt <= 0:
        raise ValueError(f"ground-truth ratio must be positive, got {r_gt}")
    return abs(r_syn - r_gt) / r_gt * 100.0


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    denom = a.sum() + b.sum()
    return 2.0 * np.logical_and(a, b).sum() / denom if denom else 1.0


# ------------------------------------------------------------- Wilcoxon

@dataclass
class WilcoxonResult:
    w_plus: float
    w_minus: float
    n: int
    p: float
    exact: bool


def _exact_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    """Exact two-sided p over all 2^n sign assignments, via the subset-sum
    distribution on doubled (integer) ranks."""
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = dist + shifted
    dist /= dist.sum()
    w2 = int(np.rint(2 * w_plus))
    p_le = dist[:w2 + 1].sum()
    p_ge = dist[w2:].sum()
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


def wilcoxon_signed_rank(diffs, method: str = "auto",
                         exact_threshold: int = 12) -> WilcoxonResult:
    """Signed-rank test with midranks for ties; zero differences dropped.
    Exact enumeration for small n, normal approximation with tie correction
    otherwise."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("degenerate sample: all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())

    use_exact = method == "exact" or (method == "auto" and n <= exact_threshold)
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    if use_exact:
        p = _exact_two_sided_p(ranks, w_plus)
        return WilcoxonResult(w_plus, w_minus, n, p, True)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - ((tie_counts ** 3 - tie_counts).sum()) / 48.0
    if var <= 0:
        raise ValueError("degenerate sample: zero variance")
    z = (w_plus - mean) / np.sqrt(var)
    p = float(2.0 * norm.sf(abs(z)))
    return WilcoxonResult(w_plus, w_minus, n, min(1.0, p), False)


# -------------------------------------------------------------- harness

@dataclass
class BCReport:
    subject_id: int
    method: str  # volume_synth | area_top | area_bottom
    k: int
    use_bpr: bool
    r_sfat_syn: float
    r_sfat_gt: float
    err_sfat_pct: float
    r_vfat_syn: float
    r_vfat_gt: float
    err_vfat_pct: float


REPORT_FIELDS = ["subject_id", "method", "k", "use_bpr", "r_sfat_syn", "r_sfat_gt",
                 "err_sfat_pct", "r_vfat_syn", "r_vfat_gt", "err_vfat_pct"]


def write_reports(reports: list[BCReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow([getattr(r, k) for k in REPORT_FIELDS])


def write_summary(summary: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "mean", "sd", "n", "p_value"])
        for row in summary:
            w.writerow([row["cell"], row["mean"], row["sd"], row["n"],
                        row.get("p_value", "")])


def load_subject(data_dir, subject_id: int) -> tuple[Volume, LabelVolume]:
    d = Path(data_dir)
    vol = read_volume(d / f"subject_{subject_id:03d}_hu.ctv")
    lab = read_volume(d / f"subject_{subject_id:03d}_lab.ctv")
    return vol, lab


def _slice_ratios(lab: LabelVolume, z: int) -> tuple[float, float] | None:
    counts = np.bincount(lab.voxels[z].ravel(), minlength=6)
    if counts[ph.MUSCLE] == 0:
        return None
    return (counts[ph.SUBQ_FAT] / counts[ph.MUSCLE],
            counts[ph.VISC_FAT] / counts[ph.MUSCLE])


def _acquired_row_correction(case: pl.EvalCase, seg: LabelVolume,
                             rule: SegmentationRule) -> tuple[float, float]:
    """Per-subject decoder-bias correction, estimated only from observed data.

    The acquired rows of a synthesized volume are decoder round-trips of
    slices we actually hold, so the ratio between each observed slice's
    area ratios and the same row's ratios in the synthesized volume
    measures how far the decoder shifts this subject's tissue boundaries.
    That shift is close to constant along the stack, so the mean ratio
    over acquired rows transfers to the volumetric measurement."""
    if not case.cond_slices:
        return 1.0, 1.0
    vol = case.result.volume
    cs, cv = [], []
    for stack_idx, order in case.result.plan.cond:
        obs = denormalize(NormVolume(case.cond_slices[order][None].copy(),
                                     vol.sx, vol.sy, vol.sz))
        obs_r = _slice_ratios(segment_tissues(obs, rule), 0)
        syn_r = _slice_ratios(seg, stack_idx)
        if obs_r and syn_r and min(*obs_r, *syn_r) > 0:
            cs.append(obs_r[0] / syn_r[0])
            cv.append(obs_r[1] / syn_r[1])
    if not cs:
        return 1.0, 1.0
    return float(np.mean(cs)), float(np.mean(cv))


def _measure_case(case: pl.EvalCase, rule: SegmentationRule) -> BCReport:
    n_total = case.gt_labels.nz
    r_sfat_gt, r_vfat_gt = volumetric_ratio(case.gt_labels, 0, n_total - 1)
    hu = denormalize(case.result.volume)
    seg = segment_tissues(hu, rule)
    r_sfat, r_vfat = volumetric_ratio(seg, 0, n_total - 1)
    c_sfat, c_vfat = _acquired_row_correction(case, seg, rule)
    r_sfat *= c_sfat
    r_vfat *= c_vfat
    return BCReport(-1, "volume_synth", case.k, case.use_bpr,
                    r_sfat, r_sfat_gt, error_rate(r_sfat, r_sfat_gt),
                    r_vfat, r_vfat_gt, error_rate(r_vfat, r_vfat_gt))


def _area_report(gt_labels: LabelVolume, z: int, tag: str) -> BCReport:
    n_total = gt_labels.nz
    r_sfat_gt, r_vfat_gt = volumetric_ratio(gt_labels, 0, n_total - 1)
    a = ph.slice_area_ratio(gt_labels, z)
    return BCReport(-1, tag, 1, False,
                    a.r_sfat, r_sfat_gt, error_rate(a.r_sfat, r_sfat_gt),
                    a.r_vfat, r_vfat_gt, error_rate(a.r_vfat, r_vfat_gt))


def _mean_sd(vals: list[float]) -> tuple[float, float]:
    arr = np.asarray(vals, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


def test_subject_ids(data_dir) -> list[int]:
    return [row["id"] for row in ph.read_cohort_manifest(data_dir)
            if row["split"] == "test"]


def run_table1(bundle: pl.ModelBundle, data_dir, seed: int,
               rule: SegmentationRule = SegmentationRule()
               ) -> tuple[list[BCReport], list[dict]]:
    """Volume-based (2 conditioning slices) vs area-based top/bottom errors."""
    reports = []
    for sid in test_subject_ids(data_dir):
        vol, lab = load_subject(data_dir, sid)
        case = pl.evaluate_synthesis(bundle, vol, lab, k=2, use_bpr=True,
                                     seed=splitmix64(seed, sid))
        rep = _measure_case(case, rule)
        rep.subject_id = sid
        rep.k = 2
        reports.append(rep)
        n_total = case.gt_labels.nz
        for z, tag in [(0, "area_top"), (n_total - 1, "area_bottom")]:
            a = _area_report(case.gt_labels, z, tag)
            a.subject_id = sid
            reports.append(a)

    summary = []
    for method in ("volume_synth", "area_top", "area_bottom"):
        for err_key, name in [("err_sfat_pct", "sfat"), ("err_vfat_pct", "vfat")]:
            vals = [getattr(r, err_key) for r in reports if r.method == method]
            mean, sd = _mean_sd(vals)
            summary.append({"cell": f"{method}_{name}", "mean": mean, "sd": sd,
                            "n": len(vals)})
    return reports, summary


def run_table2(bundle: pl.ModelBundle, data_dir, seed: int,
               rule: SegmentationRule = SegmentationRule(),
               ks: tuple[int, ...] = (1, 2, 3, 4)
               ) -> tuple[list[BCReport], list[dict]]:
    """Ablation grid: k conditioning slices x BPR features on/off, with a
    paired Wilcoxon test per (k, error type)."""
    sids = test_subject_ids(data_dir)
    reports = []
    by_cell: dict[tuple[int, bool], list[BCReport]] = {}
    for k in ks:
        for use_bpr in (True, False):
            cell = []
            for sid in sids:
                vol, lab = load_subject(data_dir, sid)
                # same seed for the on/off pair so the comparison is paired
                case = pl.evaluate_synthesis(bundle, vol, lab, k=k, use_bpr=use_bpr,
                                             seed=splitmix64(seed, sid * 16 + k))
                rep = _measure_case(case, rule)
                rep.subject_id = sid
                cell.append(rep)
            by_cell[(k, use_bpr)] = cell
            reports.extend(cell)

    summary = []
    for k in ks:
        for err_key, name in [("err_sfat_pct", "sfat"), ("err_vfat_pct", "vfat")]:
            on = [getattr(r, err_key) for r in by_cell[(k, True)]]
            off = [getattr(r, err_key) for r in by_cell[(k, False)]]
            diffs = np.asarray(on) - np.asarray(off)
            try:
                p = wilcoxon_signed_rank(diffs).p
            except ValueError:
                p = 1.0
            for use_bpr, vals in [(True, on), (False, off)]:
                mean, sd = _mean_sd(vals)
                row = {"cell": f"k{k}_bpr{'on' if use_bpr else 'off'}_{name}",
                       "mean": mean, "sd": sd, "n": len(vals)}
                if use_bpr:
                    row["p_value"] = p
                summary.append(row)
    return reports, summary
