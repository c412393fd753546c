"""Command-line entry point: phantom generation, stage training, synthesis,
evaluation, and the conditioning-slice ablation.

Exit codes: 0 success, 2 config error, 3 data error, 4 trend violation
under --strict.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bodycomp, pipeline, train
from .config import ConfigError, default_config, parse_config
from .netcore import CheckpointError
from .phantom import MUSCLE, SUBQ_FAT, VISC_FAT, generate_cohort
from .volumeio import (VolumeFormatError, denormalize, read_volume,
                       write_volume)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STRICT = 4


def write_ppm(path, rgb: np.ndarray) -> None:
    """P6 binary PPM."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.astype(np.uint8).tobytes())


def _tile_rgb(hu: np.ndarray, labels: np.ndarray) -> np.ndarray:
    gray = np.clip((hu + 1024.0) / 4096.0 * 255.0, 0, 255)
    rgb = np.stack([gray] * 3, axis=-1)
    overlay = {SUBQ_FAT: (255, 0, 0), MUSCLE: (0, 255, 0), VISC_FAT: (255, 255, 0)}
    for label, color in overlay.items():
        m = labels == label
        for c in range(3):
            rgb[..., c][m] = 0.5 * rgb[..., c][m] + 0.5 * color[c]
    return rgb.astype(np.uint8)


def montage(hu_vol: np.ndarray, label_vol: np.ndarray, every: int = 8) -> np.ndarray:
    tiles = [_tile_rgb(hu_vol[z], label_vol[z]) for z in range(0, hu_vol.shape[0], every)]
    return np.concatenate(tiles, axis=1)


def _load_config(args) -> dict:
    cfg = parse_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    return cfg


def cmd_gen_phantoms(args) -> int:
    if args.count <= 0:
        raise ConfigError("count must be positive")
    try:
        grid = tuple(int(x) for x in args.grid.split(","))
        if len(grid) != 3:
            raise ValueError
    except ValueError:
        raise ConfigError(f"invalid grid {args.grid!r}; expected X,Y,Z") from None
    rows = generate_cohort(args.out, args.count, grid, seed=args.seed)
    print(f"wrote {len(rows)} phantoms to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    stage_fn = {"vae": train.train_stage_vae, "bpr": train.train_stage_bpr,
                "ldm": train.train_stage_ldm}[args.stage]
    stage_fn(args.data, cfg, args.out)
    print(f"stage {args.stage} complete; checkpoints in {args.out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    bundle = pipeline.ModelBundle.load(args.models)
    slices = []
    for path in args.slices.split(","):
        v = read_volume(path)
        if v.nz != 1:
            raise VolumeFormatError(f"{path} is not a single-slice volume")
        from .volumeio import Volume, clip_normalize
        if isinstance(v, Volume):
            v = clip_normalize(v)
        slices.append(np.asarray(v.voxels[0], dtype=np.float32))
    result = pipeline.synthesize_volume(bundle, slices, args.n_total, args.seed)
    write_volume(denormalize(result.volume), args.out)
    pipeline.save_plan(result, Path(args.out).with_suffix(".plan.csv"))
    print(f"synthesized {args.n_total} slices to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = pipeline.ModelBundle.load(args.models)
    reports, summary = bodycomp.run_table1(bundle, args.test, args.seed)
    bodycomp.write_reports(reports, args.report)
    summary_path = Path(args.report).with_suffix(".summary.csv")
    bodycomp.write_summary(summary, summary_path)
    means = {row["cell"]: row["mean"] for row in summary}
    print(f"volume-based Err(R_sfat): {means['volume_synth_sfat']:.1f}% "
          f"vs top-slice {means['area_top_sfat']:.1f}%")
    if args.montage:
        sid = bodycomp.test_subject_ids(args.test)[0]
        vol, lab = bodycomp.load_subject(args.test, sid)
        case = pipeline.evaluate_synthesis(bundle, vol, lab, k=2, use_bpr=True,
                                           seed=args.seed)
        hu = denormalize(case.result.volume)
        seg = bodycomp.segment_tissues(hu)
        write_ppm(args.montage, montage(hu.voxels, seg.voxels))
    if args.strict and means["volume_synth_sfat"] >= means["area_top_sfat"]:
        print("strict check failed: volume-based error not below top-slice error",
              file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


def cmd_ablate(args) -> int:
    bundle = pipeline.ModelBundle.load(args.models)
    reports, summary = bodycomp.run_table2(bundle, args.test, args.seed)
    bodycomp.write_reports(reports, args.report)
    bodycomp.write_summary(summary, Path(args.report).with_suffix(".summary.csv"))
    on_means = [row["mean"] for row in summary
                if row["cell"].endswith("_sfat") and "_bpron_" in row["cell"]]
    print("Err(R_sfat) with location features, k=1..4: "
          + ", ".join(f"{m:.1f}%" for m in on_means))
    if args.strict and any(b > a + 1e-9 for a, b in zip(on_means, on_means[1:])):
        print("strict check failed: error not non-increasing in k", file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ctsynth",
        description="Slice-to-volume CT synthesis and body-composition evaluation "
                    "on synthetic abdominal phantoms.")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("CTSYNTH_THREADS", "0")),
                   help="torch CPU threads (0 = library default; env CTSYNTH_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="generate a phantom cohort")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--grid", default="64,64,96", help="X,Y,Z voxel counts")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_phantoms)

    t = sub.add_parser("train", help="train one stage (vae, bpr, then ldm)")
    t.add_argument("--stage", choices=["vae", "bpr", "ldm"], required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("synthesize", help="synthesize a volume from slice files")
    s.add_argument("--models", required=True)
    s.add_argument("--slices", required=True, help="comma-separated CTV1 slice files")
    s.add_argument("--n-total", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synthesize)

    e = sub.add_parser("evaluate", help="volume-based vs area-based comparison")
    e.add_argument("--models", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)
    e.add_argument("--montage", default=None, help="optional PPM montage path")
    e.add_argument("--strict", action="store_true")
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", help="conditioning-count x feature ablation")
    a.add_argument("--models", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", required=True)
    a.add_argument("--strict", action="store_true")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        import torch
        torch.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, CheckpointError, train.MissingStageError,
            FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
