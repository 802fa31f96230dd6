"""Run configuration: flat key-value schema, named profiles, precedence.

Resolution order is defaults <- profile <- config file <- environment
(NERFCORR_<KEY>) <- command-line overrides; later wins. Unknown keys and
type violations are rejected with the offending key path. The resolved
config is echoed into every run directory and re-parses to itself.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "NERFCORR_"

# key -> (type, default). Booleans accept true/false/1/0.
SCHEMA = {
    "profile": (str, "toy-desk"),
    "seed": (int, 0),
    "workers": (int, 1),
    # sampling and regularization (profile table columns)
    "ray_steps": (int, 24),
    "depth_mask": (float, 1.08),
    "sampling_ratio": (float, 0.2),
    "batch_size": (int, 131072),
    "lambda_cycle": (float, 1.0),
    "lambda_cycle2": (float, 0.1),
    "lambda_smooth": (float, 1e-4),
    "epsilon_smooth": (float, 0.05),
    # distillation
    "lr": (float, 5e-5),
    "decay_every": (int, 5000),
    "decay_gamma": (float, 0.5),
    "total_iters": (int, 80000),
    "n_source": (int, 10),
    "n_target": (int, 10),
    "probe_res": (int, 64),
    "cam_radius": (float, 2.0),
    "cam_elev_deg": (float, 25.0),
    "fov_deg": (float, 50.0),
    "checkpoint_every": (int, 1000),
    "curriculum_steps": (int, 0),  # 0 = continuous ramp
    "alpha_max": (float, 0.6),
    "layer_set": (str, "0,1,2,3,4"),
    "deformation_hidden": (int, 64),
    "condition_on_blended_latent": (bool, False),
    "jacobian_full_map": (bool, False),
    # generator / toy category
    "d_z": (int, 256),
    "gen_depth": (int, 9),
    "gen_width": (int, 256),
    "gen_first_layer_scale": (float, 25.0),
    "template_samples": (int, 4096),
    "n_instances": (int, 64),
    "fit_steps": (int, 9000),
    "fit_batch": (int, 3072),
    "fit_lr": (float, 1.5e-3),
    # rendering / evaluation
    "image_res": (int, 256),
    "eval_pairs": (int, 20),
    "eval_points": (int, 256),
    "eval_instances": (int, 6),
    "seg_samples": (int, 96),
    "ablate_iters": (int, 400),
    # inversion
    "inv_iters": (int, 500),
    "inv_lr": (float, 2e-2),
    "inv_lambda_feat": (float, 0.1),
    "inv_lambda_reg": (float, 0.1),
    "inv_anchors": (int, 24),
    "inv_stop_tol": (float, 1e-4),
}

PROFILES = {
    # face-category reference row
    "paper-celeba": {
        "ray_steps": 24,
        "depth_mask": 1.08,
        "sampling_ratio": 0.2,
        "batch_size": 131072,
        "lambda_cycle": 0.1,
        "lambda_smooth": 0.1,
        "probe_res": 128,
        "image_res": 256,
    },
    # vehicle-category reference row
    "paper-carla": {
        "ray_steps": 48,
        "depth_mask": 1.2,
        "sampling_ratio": 0.05,
        "batch_size": 65536,
        "lambda_cycle": 0.05,
        "lambda_smooth": 0.01,
        "probe_res": 128,
        "image_res": 256,
    },
    # cat-category reference row
    "paper-cats": {
        "ray_steps": 36,
        "depth_mask": 1.08,
        "sampling_ratio": 0.1,
        "batch_size": 49152,
        "lambda_cycle": 0.1,
        "lambda_smooth": 0.1,
        "probe_res": 128,
        "image_res": 256,
    },
    # desk-scale synthetic category; small enough for CPU verification runs
    "toy-desk": {
        "ray_steps": 12,
        "depth_mask": 2.5,
        "sampling_ratio": 0.25,
        "batch_size": 6144,
        "lambda_cycle": 1.0,
        "lambda_cycle2": 0.1,
        "lambda_smooth": 0.05,
        "lr": 5e-4,
        "decay_every": 1000,
        "total_iters": 2000,
        "n_source": 6,
        "n_target": 6,
        "probe_res": 64,
        "d_z": 16,
        "gen_depth": 6,
        "gen_width": 48,
        "image_res": 64,
        "layer_set": "0,1,2,3,4",
    },
}


class RunConfig(dict):
    """Resolved configuration; attribute access for convenience."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError as e:
            raise AttributeError(key) from e


def _coerce(key: str, raw, kind):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    s = str(raw).strip()
    try:
        if kind is bool:
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError(s)
        if kind is int:
            return int(s)
        if kind is float:
            return float(s)
        return s
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {kind.__name__}", key=key)


def _apply(cfg: RunConfig, updates: dict, origin: str) -> None:
    for key, raw in updates.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}' (from {origin})", key=key)
        cfg[key] = _coerce(key, raw, SCHEMA[key][0])


def read_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    updates = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        updates[key.strip()] = value.strip()
    return updates


def parse_config(
    path=None,
    overrides: dict | None = None,
    profile: str | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Resolve a run configuration (defaults <- profile <- file <- env <- overrides)."""
    cfg = RunConfig({k: v for k, (_, v) in SCHEMA.items()})
    file_updates = read_config_file(path) if path else {}
    chosen = profile or file_updates.get("profile") or (overrides or {}).get("profile") or cfg["profile"]
    if chosen not in PROFILES:
        raise ConfigError(f"unknown profile '{chosen}'", key="profile")
    cfg["profile"] = chosen
    _apply(cfg, PROFILES[chosen], f"profile {chosen}")
    _apply(cfg, file_updates, str(path))
    env = os.environ if env is None else env
    env_updates = {
        k[len(ENV_PREFIX) :].lower(): v for k, v in env.items() if k.startswith(ENV_PREFIX)
    }
    _apply(cfg, env_updates, "environment")
    _apply(cfg, overrides or {}, "command line")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    positive = ("lr", "decay_gamma", "fit_lr", "inv_lr", "cam_radius")
    for key in positive:
        if cfg[key] <= 0:
            raise ConfigError(f"config key '{key}' must be positive", key=key)
    if not (0.0 < cfg["sampling_ratio"] <= 1.0):
        raise ConfigError("sampling_ratio must lie in (0, 1]", key="sampling_ratio")
    if cfg["n_source"] < 1 or cfg["n_target"] < 1:
        raise ConfigError("batch counts must be >= 1", key="n_source")
    try:
        layer_set(cfg)
    except ValueError:
        raise ConfigError("layer_set must be comma-separated integers", key="layer_set")


def layer_set(cfg: RunConfig) -> tuple:
    return tuple(int(t) for t in str(cfg["layer_set"]).split(",") if t.strip())


def echo_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved config as a re-parseable key=value file."""
    lines = [f"{k}={format_value(cfg[k])}" for k in SCHEMA]
    Path(path).write_text("\n".join(lines) + "\n")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
