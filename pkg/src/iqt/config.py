"""Run configuration: defaults, schema validation, per-stage seeds and subject splits."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import List, Sequence, Tuple

import jsonschema

from .errors import ConfigError
from .metrics import SsimParams
from .patches import PatchSpec
from .phantom import PhantomConfig
from .simulator import FIXED_SNR, PAPER_SNR_COV, PAPER_SNR_MEAN, SimConfig, SnrPrior
from .unet import NetworkSpec, TrainConfig

STAGES = ("phantom", "simulate", "patchify", "train", "infer", "evaluate", "compare")

DEFAULT_CONFIG = {
    "seed": 0,
    "phantom": {
        "n_subjects": 30,
        "dims": [64, 64, 64],
        "spacing_mm": 0.7,
        "wm_intensity": 0.82,
        "gm_intensity": 0.64,
        "boundary_softness_mm": 0.35,
        "lesion_count": 0,
        "split": [12, 3, 15],
    },
    "sim": {
        "k": 4,
        "sigma_x": 0.05,
        "sigma_y": 0.01,
        "fwhm_mode": "spacing",
        "fwhm_ratio": 0.75,
        "truncation": 3.0,
        "mode": "sampled",
        "eval_mode": "fixed",
        "fixed_snr": list(FIXED_SNR),
        "prior_mean": list(PAPER_SNR_MEAN),
        "prior_cov": [list(r) for r in PAPER_SNR_COV],
        "n_aug": 1,
    },
    "patches": {
        "background_threshold": 0.8,
        "background_epsilon": 1e-6,
        "subsample": 1.0,
    },
    "net": {"base_filters": 16, "levels": 5, "bb_shrink": 2, "rc_depth": 3},
    "train": {"batch_size": 32, "max_epochs": 50, "patience": 5, "lr0": 1e-3, "decay": 1e-6, "dtype": "float32"},
    "eval": {
        "methods": ["spline", "network"],
        "peak": "reference_max",
        "ssim_window_sigma": 1.5,
        "ssim_window_taps": 11,
        "ssim_k1": 0.01,
        "ssim_k2": 0.03,
        "export_pgm": False,
        "compare": ["network", "spline"],
    },
    "paths": {"work_dir": "iqt_run"},
}


def load_schema(name: str) -> dict:
    text = resources.files("iqt").joinpath("schemas", name).read_text()
    return json.loads(text)


def validate_json(doc, schema_name: str, error=ConfigError) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise error(f"{schema_name}: {where}: {exc.message}") from None


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(user: dict) -> dict:
    """Validate a user document and fill in defaults."""
    if not isinstance(user, dict):
        raise ConfigError("configuration must be a JSON object")
    validate_json(user, "config.schema.json")
    cfg = _merge(DEFAULT_CONFIG, user)
    validate_json(cfg, "config.schema.json")
    # build every section once so inconsistencies surface before any work starts
    phantom_config(cfg)
    sim_config(cfg)
    snr_prior(cfg)
    patch_spec(cfg)
    network_spec(cfg)
    train_config(cfg, 0)
    ssim_params(cfg)
    split_counts(cfg["phantom"]["n_subjects"], cfg["phantom"]["split"])
    return cfg


def load_config(path) -> dict:
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return resolve_config(user)


def stage_seed(global_seed: int, stage: str) -> int:
    """64-bit seed for ``stage``: first 8 bytes (little endian) of BLAKE2b("<seed>:<stage>")."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    digest = hashlib.blake2b(f"{int(global_seed)}:{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def split_counts(n: int, proportions: Sequence[int] = (12, 3, 15)) -> Tuple[int, int, int]:
    """(train, val, eval) subject counts.

    Each share is ``floor(n * p / sum(p))``; the remainder goes to train.
    A split left empty then borrows one subject from the currently
    largest split (ties go to the larger proportion), as long as the
    donor keeps at least one. With the default 12:3:15 this gives
    12/3/15 for 30 subjects and 3/1/2 for 6.
    """
    if n < 1 or len(proportions) != 3 or min(proportions) < 1:
        raise ConfigError(f"cannot split {n} subjects with proportions {list(proportions)}")
    total = sum(proportions)
    counts = [n * p // total for p in proportions]
    counts[0] += n - sum(counts)
    for i in range(3):
        if counts[i]:
            continue
        donor = max(range(3), key=lambda j: (counts[j], proportions[j]))
        if counts[donor] < 2:
            raise ConfigError(f"cannot form three nonempty splits from {n} subjects with proportions {list(proportions)}")
        counts[donor] -= 1
        counts[i] = 1
    return tuple(counts)


def split_labels(n: int, proportions: Sequence[int] = (12, 3, 15)) -> List[str]:
    tr, va, ev = split_counts(n, proportions)
    return ["train"] * tr + ["val"] * va + ["eval"] * ev


# --- section builders ------------------------------------------------------------


def phantom_config(cfg: dict) -> PhantomConfig:
    p = cfg["phantom"]
    pc = PhantomConfig(
        dims=tuple(p["dims"]),
        spacing_mm=p["spacing_mm"],
        wm_intensity=p["wm_intensity"],
        gm_intensity=p["gm_intensity"],
        boundary_softness_mm=p["boundary_softness_mm"],
        lesion_count=p["lesion_count"],
    )
    pc.validate()
    return pc


def sim_config(cfg: dict) -> SimConfig:
    s = cfg["sim"]
    return SimConfig(
        k=s["k"], sigma_x=s["sigma_x"], sigma_y=s["sigma_y"], fwhm_mode=s["fwhm_mode"],
        fwhm_ratio=s["fwhm_ratio"], truncation=s["truncation"],
    )


def snr_prior(cfg: dict) -> SnrPrior:
    s = cfg["sim"]
    prior = SnrPrior(tuple(s["prior_mean"]), tuple(tuple(r) for r in s["prior_cov"]))
    prior.factor()
    return prior


def patch_spec(cfg: dict) -> PatchSpec:
    p = cfg["patches"]
    return PatchSpec(
        k=cfg["sim"]["k"],
        low_size=tuple(p["low_size"]) if "low_size" in p else None,
        strides=tuple(p["strides"]) if "strides" in p else None,
        background_threshold=p["background_threshold"],
        background_epsilon=p["background_epsilon"],
    )


def network_spec(cfg: dict) -> NetworkSpec:
    n = cfg["net"]
    spec = NetworkSpec(k=cfg["sim"]["k"], base_filters=n["base_filters"], levels=n["levels"],
                       bb_shrink=n["bb_shrink"], rc_depth=n["rc_depth"])
    spec.check_input(patch_spec(cfg).low_size)
    return spec


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(batch_size=t["batch_size"], max_epochs=t["max_epochs"], patience=t["patience"],
                       lr0=t["lr0"], decay=t["decay"], seed=seed, dtype=t["dtype"])


def ssim_params(cfg: dict) -> SsimParams:
    e = cfg["eval"]
    return SsimParams(window_sigma=e["ssim_window_sigma"], window_taps=e["ssim_window_taps"],
                      k1=e["ssim_k1"], k2=e["ssim_k2"])
