"""Signal preparation: normalization statistics, frame assembly, smoothing.

Plant temperatures are standardized per node; heater power and loop flows
are min-max scaled to declared facility ranges; the loop-3 inlet and the
ambient boundary are standardized with statistics pooled over all plant
temperatures (they are temperatures, not independent channels). The
per-node rate scale sigma_i = std(dT_i/dt) computed on raw training data is
what the decoder multiplies back and what the training loss divides by.

Statistics must be fitted on training data only; callers pass the split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

STD_FLOOR = 1e-6


@dataclass
class NormStats:
    temp_mean: np.ndarray      # (n_plant,)
    temp_std: np.ndarray       # (n_plant,)
    rate_std: np.ndarray       # (n_plant,) sigma_i of dT/dt
    pooled_mean: float         # pooled plant-temperature stats
    pooled_std: float
    power_range: tuple = (0.0, 16000.0)
    flow_range: tuple = (0.01, 0.15)

    def norm_power(self, p):
        lo, hi = self.power_range
        return (np.asarray(p, dtype=np.float64) - lo) / (hi - lo)

    def norm_flows(self, f):
        lo, hi = self.flow_range
        return (np.asarray(f, dtype=np.float64) - lo) / (hi - lo)

    def norm_pooled_temp(self, t):
        return (np.asarray(t, dtype=np.float64) - self.pooled_mean) \
            / self.pooled_std

    def as_dict(self):
        return {"temp_mean": self.temp_mean.tolist(),
                "temp_std": self.temp_std.tolist(),
                "rate_std": self.rate_std.tolist(),
                "pooled_mean": self.pooled_mean,
                "pooled_std": self.pooled_std,
                "power_range": list(self.power_range),
                "flow_range": list(self.flow_range)}

    @classmethod
    def from_dict(cls, d):
        return cls(temp_mean=np.array(d["temp_mean"], dtype=np.float64),
                   temp_std=np.array(d["temp_std"], dtype=np.float64),
                   rate_std=np.array(d["rate_std"], dtype=np.float64),
                   pooled_mean=float(d["pooled_mean"]),
                   pooled_std=float(d["pooled_std"]),
                   power_range=tuple(d["power_range"]),
                   flow_range=tuple(d["flow_range"]))


def fit_norm_stats(trajectories, graph, power_range=(0.0, 16000.0),
                   flow_range=(0.01, 0.15)):
    """Population statistics over all frames of the given trajectories."""
    if not trajectories:
        raise ConfigError("cannot fit normalization stats on zero runs")
    temps = np.concatenate([tr.plant_temps(graph) for tr in trajectories])
    rates = np.concatenate([
        np.diff(tr.plant_temps(graph), axis=0) / tr.dt[:, None]
        for tr in trajectories if len(tr) >= 2])
    temp_std = np.maximum(temps.std(axis=0), STD_FLOOR)
    rate_std = np.maximum(rates.std(axis=0), STD_FLOOR)
    return NormStats(
        temp_mean=temps.mean(axis=0), temp_std=temp_std, rate_std=rate_std,
        pooled_mean=float(temps.mean()),
        pooled_std=float(max(temps.std(), STD_FLOOR)),
        power_range=tuple(power_range), flow_range=tuple(flow_range))


@dataclass
class FrameFeatures:
    """Model-facing features for a batch of B windows at one time step.

    Plant rows are window-major: row w*n_plant + i is node i of window w.
    Only the plant block is differentiable; controls are inputs, never
    gradient targets.
    """
    plant: "ad.Tensor"         # (B*n_plant, 3): T_norm, mask, rate_norm
    actuator: np.ndarray       # (B*2, 2): [value_norm, is_power]
    ambient: np.ndarray        # (B, 1)
    controls: np.ndarray       # (B, 5): P, T_inlet (norm), phi_1..3
    flows_norm: np.ndarray     # (B, 3)
    batch: int


def assemble_frame(graph, stats, T_now, power, inlet, flows,
                   T_prev=None, dt_prev=None):
    """Build per-node features for one step across B windows.

    ``T_now``/``T_prev`` are (B, n_plant) tensors (or arrays) of raw Kelvin
    temperatures with uninstrumented entries already imputed. ``dt_prev`` is
    the (B,) interval behind each window; when absent the rate channel is
    zero (cold start at the first frame).
    """
    T_now = ad.as_tensor(T_now)
    if T_now.ndim != 2 or T_now.shape[1] != graph.n_plant:
        raise ShapeError(f"T_now must be (B, {graph.n_plant}), "
                         f"got {T_now.shape}")
    b = T_now.shape[0]
    n = graph.n_plant
    inv_std = 1.0 / stats.temp_std

    t_norm = ad.mul(ad.add(T_now, -stats.temp_mean), inv_std)
    if T_prev is not None:
        if dt_prev is None:
            raise ConfigError("dt_prev is required when T_prev is given")
        dt_prev = np.asarray(dt_prev, dtype=np.float64).reshape(b)
        if np.any(dt_prev <= 0):
            raise ConfigError("dt_prev must be positive")
        scale = np.outer(1.0 / dt_prev, 1.0 / stats.rate_std)
        vel = ad.mul(ad.sub(T_now, ad.as_tensor(T_prev)), scale)
    else:
        vel = ad.constant(np.zeros((b, n)))

    mask_col = np.tile(graph.mask, b)[:, None]
    plant = ad.concat([ad.reshape(t_norm, (b * n, 1)),
                       ad.constant(mask_col),
                       ad.reshape(vel, (b * n, 1))], axis=1)

    power = np.asarray(power, dtype=np.float64).reshape(b)
    inlet = np.asarray(inlet, dtype=np.float64).reshape(b)
    flows = np.asarray(flows, dtype=np.float64).reshape(b, 3)
    p_norm = stats.norm_power(power)
    t31 = stats.norm_pooled_temp(inlet)
    phi = stats.norm_flows(flows)

    actuator = np.empty((b * 2, 2))
    actuator[0::2, 0] = p_norm
    actuator[0::2, 1] = 1.0
    actuator[1::2, 0] = t31
    actuator[1::2, 1] = 0.0
    ambient = np.full((b, 1),
                      stats.norm_pooled_temp(graph.ambient_temperature_k))
    controls = np.column_stack([p_norm, t31, phi])
    return FrameFeatures(plant=plant, actuator=actuator, ambient=ambient,
                         controls=controls, flows_norm=phi, batch=b)


def _savgol_weights(offsets, polyorder):
    v = np.vander(np.asarray(offsets, dtype=np.float64), polyorder + 1,
                  increasing=True)
    # row of the hat matrix evaluating the fitted polynomial at offset 0
    g = np.linalg.solve(v.T @ v, v.T)
    return g[0]


def savgol_smooth(series, window=7, polyorder=2):
    """Savitzky-Golay smoothing with truncated one-sided endpoint windows.

    Interior points use the full centered window; within half a window of
    either boundary the window is clipped to the available samples and the
    polynomial refitted there (no reflection or extrapolation), so early
    transients are not smeared by padding artifacts.
    """
    y = np.asarray(series, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    n = y.shape[0]
    if window % 2 != 1 or window < 3:
        raise ConfigError("window must be an odd integer >= 3")
    if polyorder >= window:
        raise ConfigError("polyorder must be smaller than window")
    if n < window:
        raise ShapeError(f"series length {n} shorter than window {window}")
    half = window // 2
    out = np.empty_like(y)
    w_full = _savgol_weights(np.arange(-half, half + 1), polyorder)
    interior = np.arange(half, n - half)
    # sliding dot product over the full-window region
    windows = np.lib.stride_tricks.sliding_window_view(y, window, axis=0)
    out[interior] = np.einsum("icw,w->ic", windows, w_full)
    for i in range(half):
        w = _savgol_weights(np.arange(-i, half + 1), polyorder)
        out[i] = w @ y[:i + half + 1]
        w = _savgol_weights(np.arange(-half, i + 1), polyorder)
        out[n - 1 - i] = w @ y[n - 1 - i - half:]
    return out[:, 0] if squeeze else out


def smooth_trajectory(traj, window=7, polyorder=2):
    """Smooth temperature channels only; controls and flows stay raw."""
    out = traj.copy()
    out.temps = savgol_smooth(out.temps, window=window, polyorder=polyorder)
    out.meta["smoothed"] = {"window": window, "polyorder": polyorder}
    return out
