"""Trajectory container and the on-disk CSV/manifest formats.

One trajectory = one run: a time column, 18 temperature channels (17 plant
volumes plus the loop-3 inlet TF31), heater power, and the three loop mass
flows. Column order is fixed; readers reject anything else. All temperatures
are Kelvin, flows kg/s, power W, time seconds.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TIME_COLUMN = "t_s"
TEMP_CHANNELS = [
    "T_Havg", "T_ch", "TF12", "TF13", "TF14", "TF15", "TF11",
    "HX1_L1", "HX1_L2", "TF22", "TF23", "TF24", "TF25", "TF21",
    "HX2_L2", "HX2_L3", "TF31", "TF32",
]
CONTROL_COLUMNS = ["P_W", "FM1", "FM2", "FM3"]
COLUMNS = [TIME_COLUMN] + TEMP_CHANNELS + CONTROL_COLUMNS

_TEMP_POS = {name: i for i, name in enumerate(TEMP_CHANNELS)}


@dataclass
class Trajectory:
    """Uniform container for simulated and experimental runs."""

    t: np.ndarray            # (T,)
    temps: np.ndarray        # (T, 18) in TEMP_CHANNELS order
    power: np.ndarray        # (T,)
    flows: np.ndarray        # (T, 3) loop 1..3
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.temps = np.asarray(self.temps, dtype=np.float64)
        self.power = np.asarray(self.power, dtype=np.float64)
        self.flows = np.asarray(self.flows, dtype=np.float64)
        n = self.t.shape[0]
        if self.temps.shape != (n, len(TEMP_CHANNELS)):
            raise ConfigError(
                f"temps shape {self.temps.shape} != ({n}, {len(TEMP_CHANNELS)})")
        if self.power.shape != (n,) or self.flows.shape != (n, 3):
            raise ConfigError("power/flows shapes inconsistent with time axis")
        if n >= 2 and np.any(np.diff(self.t) <= 0):
            raise ConfigError("time column must be strictly increasing")

    def __len__(self):
        return self.t.shape[0]

    @property
    def dt(self):
        return np.diff(self.t)

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0])

    def channel(self, name):
        return self.temps[:, _TEMP_POS[name]]

    @property
    def inlet(self):
        return self.channel("TF31")

    def plant_temps(self, graph):
        """(T, n_plant) selection in the graph's plant-node order."""
        cols = [_TEMP_POS[name] for name in graph.plant_names]
        return self.temps[:, cols].copy()

    def set_plant_temps(self, graph, values):
        cols = [_TEMP_POS[name] for name in graph.plant_names]
        self.temps[:, cols] = values

    def copy(self):
        return Trajectory(self.t.copy(), self.temps.copy(), self.power.copy(),
                          self.flows.copy(), dict(self.meta))

    def to_matrix(self):
        return np.column_stack([self.t, self.temps, self.power, self.flows])


def write_trajectory_csv(path, traj):
    mat = traj.to_matrix()
    header = ",".join(COLUMNS)
    np.savetxt(path, mat, delimiter=",", header=header, comments="",
               fmt="%.6f")


def read_trajectory_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    names = [c.strip() for c in header.split(",")]
    if names != COLUMNS:
        raise ConfigError(f"{path}: unexpected column layout {names[:4]}...")
    mat = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64)
    mat = np.atleast_2d(mat)
    nt = len(TEMP_CHANNELS)
    return Trajectory(
        t=mat[:, 0], temps=mat[:, 1:1 + nt], power=mat[:, 1 + nt],
        flows=mat[:, 2 + nt:5 + nt], meta={"path": str(path)})


def write_dataset(out_dir, trajectories, manifest_extra=None):
    """Write runs as run_0000.csv... plus a manifest.json index."""
    os.makedirs(out_dir, exist_ok=True)
    runs = []
    for k, traj in enumerate(trajectories):
        fname = f"run_{k:04d}.csv"
        write_trajectory_csv(os.path.join(out_dir, fname), traj)
        entry = {"file": fname}
        entry.update({k2: v for k2, v in traj.meta.items()
                      if isinstance(v, (str, int, float, bool, list, dict))})
        runs.append(entry)
    manifest = {"runs": runs}
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(data_dir):
    """Read a dataset directory in manifest order (sorted glob fallback)."""
    manifest_path = os.path.join(data_dir, "manifest.json")
    trajs = []
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        for entry in manifest["runs"]:
            traj = read_trajectory_csv(os.path.join(data_dir, entry["file"]))
            traj.meta.update(entry)
            trajs.append(traj)
    else:
        files = sorted(f for f in os.listdir(data_dir) if f.endswith(".csv"))
        if not files:
            raise ConfigError(f"no trajectories found under {data_dir}")
        trajs = [read_trajectory_csv(os.path.join(data_dir, f))
                 for f in files]
    return trajs
