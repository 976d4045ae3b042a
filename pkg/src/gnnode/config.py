"""Configuration layering, named random substreams, run manifests.

A run's configuration is the packaged defaults deep-merged with an optional
user JSON file and CLI overrides (in that order). Every stochastic stage
derives its generator from the root seed plus a stage name, so changing one
stage's draws cannot shift any other stage.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from importlib import resources

import numpy as np

from .errors import ConfigError

ENV_DATA_ROOT = "GNNODE_DATA_ROOT"


def default_config():
    with resources.files("gnnode.configs").joinpath("default.json").open() as fh:
        return json.load(fh)


def _deep_merge(base, extra):
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    """defaults <- file <- overrides; unknown top-level keys are rejected."""
    cfg = default_config()
    known = set(cfg.keys())
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(user) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _deep_merge(cfg, user)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def substream(seed, *tags):
    """Independent generator for a named stage under a root seed."""
    entropy = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def data_root(cli_value=None):
    """Dataset root: CLI flag wins, then the environment, then cwd."""
    if cli_value:
        return cli_value
    return os.environ.get(ENV_DATA_ROOT, ".")


def write_manifest(out_dir, name, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return path
