"""Config file handling: sections of `key = value` lines, `#` comments.

Flags on the CLI override file values; unknown sections or keys are
rejected against the schema below.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


SCHEMA: dict[str, dict[str, type]] = {
    "vae": {"latent_dim": int, "lr": float, "epochs": int, "batch": int,
            "beta_kl": float, "seed": int},
    "ddpm": {"lr": float, "epochs": int, "batch": int, "unet_levels": int,
             "unet_base": int, "bpr_feature_width": int, "n_total": int,
             "resample_r": int, "max_cond": int, "seed": int},
    "schedule": {"steps": int, "offset": float},
    "bpr": {"lr": float, "epochs": int, "steps_per_epoch": int, "batch": int,
            "margin": float, "dist_weight": float, "seed": int},
    "run": {"seed": int, "grid_x": int, "grid_y": int, "grid_z": int,
            "spacing_x": float, "spacing_y": float, "spacing_z": float,
            "segments_per_volume": int, "bpr_features": str},
}

DEFAULTS: dict[str, dict] = {
    "vae": {"latent_dim": 128, "lr": 1e-3, "epochs": 60, "batch": 32,
            "beta_kl": 3e-5, "seed": 0},
    "ddpm": {"lr": 2e-4, "epochs": 170, "batch": 16, "unet_levels": 2,
             "unet_base": 96, "bpr_feature_width": 16, "n_total": 64,
             "resample_r": 1, "max_cond": 4, "seed": 0},
    "schedule": {"steps": 200, "offset": 0.008},
    "bpr": {"lr": 1e-3, "epochs": 120, "steps_per_epoch": 150, "batch": 24,
            "margin": 0.1, "dist_weight": 1.0, "seed": 0},
    "run": {"seed": 7, "grid_x": 64, "grid_y": 64, "grid_z": 96,
            "spacing_x": 6.0, "spacing_y": 6.0, "spacing_z": 3.0,
            "segments_per_volume": 24, "bpr_features": "all_conditioning"},
}


def default_config() -> dict[str, dict]:
    return {sec: dict(vals) for sec, vals in DEFAULTS.items()}


def parse_config(path) -> dict[str, dict]:
    """Parse a tomlike file and merge it over the defaults."""
    cfg = default_config()
    section = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any section")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
        typ = SCHEMA[section][key]
        try:
            cfg[section][key] = _bool(value) if typ is bool else typ(value)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {e}") from None
    return cfg


def write_config(cfg: dict[str, dict], path) -> None:
    lines = []
    for sec in SCHEMA:
        if sec not in cfg:
            continue
        lines.append(f"[{sec}]")
        for key, value in cfg[sec].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")
