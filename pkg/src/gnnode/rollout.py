"""Autoregressive forecasting, ensemble bands, horizon metrics, benchmarks.

A rollout is seeded from the first two recorded frames. Uninstrumented
ground-truth columns are zeroed and rebuilt by the fitted imputer before
the model ever sees them, so forecasts depend only on instrumented
channels and controls. The forecast origin is the second frame; horizon
metrics are measured relative to it, with horizon 0 scoring the imputed
seed itself. After the seed, predictions are fed back raw (no
re-imputation at inference).

Ensembles draw one systematic perturbation per member: a constant bias per
temperature sensor (instrumented channels and the loop-3 inlet) and one
multiplicative factor per flow meter and for heater power, all proportional
to the uncertainty scale with member draws fixed by (seed, "ensemble", m).
Percentile bands are taken across members at each time/node.
"""

from __future__ import annotations

import multiprocessing
import time
from dataclasses import dataclass

import numpy as np

from .config import substream
from .errors import ConfigError
from .model import GraphIndex, predict_step
from .preprocessing import assemble_frame
from .tgmi import impute


def _seed_frames(tgmi, graph, temps_pair, power, inlet, flows):
    """Mask and impute the two seed frames for a batch of runs."""
    masked = temps_pair * graph.mask[None, None, :]
    out = np.empty_like(masked)
    for j in range(2):
        out[:, j] = impute(tgmi, graph, masked[:, j], power[:, j],
                           inlet[:, j], flows[:, j])
    return out


def rollout_arrays(params, graph, stats, tgmi, t, temps, power, inlet,
                   flows, gidx=None):
    """Forecast a batch of runs sharing one time grid.

    ``temps`` is (B, T, n) ground truth used only for the two seed frames
    (uninstrumented columns are discarded). Returns (B, T, n) with rows
    0..1 holding the imputed seeds and rows >= 2 the forecast.
    """
    t = np.asarray(t, dtype=np.float64)
    temps = np.asarray(temps, dtype=np.float64)
    if temps.ndim != 3 or temps.shape[2] != graph.n_plant:
        raise ConfigError(f"temps must be (B, T, {graph.n_plant})")
    b, n_steps, n = temps.shape
    if n_steps < 3:
        raise ConfigError("rollout needs at least 3 frames (2 seeds + 1)")
    if gidx is None:
        gidx = GraphIndex(graph)

    seeds = _seed_frames(tgmi, graph, temps[:, :2], power[:, :2],
                         inlet[:, :2], flows[:, :2])
    preds = np.empty_like(temps)
    preds[:, 0] = seeds[:, 0]
    preds[:, 1] = seeds[:, 1]
    t_prev, t_in = seeds[:, 0], seeds[:, 1]
    for i in range(1, n_steps - 1):
        feats = assemble_frame(graph, stats, t_in, power[:, i], inlet[:, i],
                               flows[:, i], T_prev=t_prev,
                               dt_prev=np.full(b, t[i] - t[i - 1]))
        t_hat, _ = predict_step(params, gidx, stats, feats, t_in,
                                np.full(b, t[i + 1] - t[i]))
        preds[:, i + 1] = t_hat.data
        t_prev, t_in = t_in, t_hat.data
    return preds


def rollout_runs(params, graph, stats, tgmi, runs, gidx=None):
    """Forecast a list of runs, batching those that share a time grid."""
    if gidx is None:
        gidx = GraphIndex(graph)
    groups = {}
    for i, r in enumerate(runs):
        groups.setdefault(tuple(np.round(r.t, 9)), []).append(i)
    out = [None] * len(runs)
    for key, idxs in groups.items():
        t = runs[idxs[0]].t
        temps = np.stack([runs[i].temps for i in idxs])
        power = np.stack([runs[i].power for i in idxs])
        inlet = np.stack([runs[i].inlet for i in idxs])
        flows = np.stack([runs[i].flows for i in idxs])
        preds = rollout_arrays(params, graph, stats, tgmi, t, temps, power,
                               inlet, flows, gidx=gidx)
        for j, i in enumerate(idxs):
            out[i] = preds[j]
    return out


def horizon_metrics(preds, runs, graph, horizons=(0, 10, 30, 60, 120, 180,
                                                  300), origin_row=1):
    """MAE vs ground truth at fixed horizons from the forecast origin.

    Returns {"horizons", "observed", "missing", "per_node"}; group values
    are horizon -> MAE averaged over runs and the group's nodes.
    """
    horizons = [float(h) for h in horizons]
    names = graph.plant_names
    obs = graph.instrumented_idx
    mis = graph.uninstrumented_idx
    per_h_err = {h: [] for h in horizons}
    for p, r in zip(preds, runs):
        t0 = r.t[origin_row]
        for h in horizons:
            idx = int(np.argmin(np.abs(r.t - (t0 + h))))
            if abs(r.t[idx] - (t0 + h)) > 0.5 * max(np.median(np.diff(r.t)),
                                                    1e-9) + 1e-9:
                continue
            per_h_err[h].append(np.abs(p[idx] - r.temps[idx]))
    result = {"horizons": horizons, "observed": {}, "missing": {},
              "per_node": {nm: {} for nm in names}}
    for h in horizons:
        if not per_h_err[h]:
            raise ConfigError(f"no run covers the {h} s horizon")
        err = np.stack(per_h_err[h])          # (runs, n)
        node_mae = err.mean(axis=0)
        result["observed"][h] = float(node_mae[obs].mean())
        result["missing"][h] = float(node_mae[mis].mean())
        for i, nm in enumerate(names):
            result["per_node"][nm][h] = float(node_mae[i])
    return result


def overall_mae(preds, runs, graph, group="observed", origin_row=1):
    """Mean absolute error over all forecast steps after the origin.

    ``group`` selects instrumented ("observed"), uninstrumented ("missing")
    or all plant nodes.
    """
    sel = {"observed": graph.instrumented_idx,
           "missing": graph.uninstrumented_idx,
           "all": np.arange(graph.n_plant)}[group]
    errs = []
    for p, r in zip(preds, runs):
        errs.append(np.abs(p[origin_row + 1:, :][:, sel]
                           - r.temps[origin_row + 1:, :][:, sel]).ravel())
    return float(np.concatenate(errs).mean())


@dataclass(frozen=True)
class UncertaintySpec:
    temp_bias_k: float = 1.0     # +- bound of constant sensor bias
    flow_rel: float = 0.05       # +- relative flow-meter error
    power_rel: float = 0.05      # +- relative heater-power error
    scale: float = 1.0           # global multiplier; 0 collapses bands

    def scaled(self, factor):
        return UncertaintySpec(self.temp_bias_k, self.flow_rel,
                               self.power_rel, self.scale * factor)


def _perturb_member(run_arrays, graph, spec, rng):
    """One member's perturbed copies of (temps, power, inlet, flows)."""
    t, temps, power, inlet, flows = run_arrays
    s = spec.scale
    n_obs = len(graph.instrumented_idx)
    bias_obs = rng.uniform(-1.0, 1.0, n_obs) * spec.temp_bias_k * s
    bias_inlet = rng.uniform(-1.0, 1.0) * spec.temp_bias_k * s
    f_flow = 1.0 + rng.uniform(-1.0, 1.0, 3) * spec.flow_rel * s
    f_pow = 1.0 + rng.uniform(-1.0, 1.0) * spec.power_rel * s
    temps_m = temps.copy()
    temps_m[:, graph.instrumented_idx] += bias_obs[None, :]
    return (temps_m, power * f_pow, inlet + bias_inlet, flows * f_flow[None])


@dataclass
class EnsembleResult:
    t: np.ndarray                # (T,)
    percentiles: np.ndarray      # (3, T, n) for the 5/50/95 levels
    levels: tuple
    members: int
    seed: int

    @property
    def band_width(self):
        return self.percentiles[-1] - self.percentiles[0]


_POOL_STATE = {}


def _member_batch(args):
    lo, hi = args
    st = _POOL_STATE
    preds = []
    for m in range(lo, hi):
        rng = substream(st["seed"], "ensemble", m)
        temps_m, power_m, inlet_m, flows_m = _perturb_member(
            st["arrays"], st["graph"], st["spec"], rng)
        p = rollout_arrays(st["params"], st["graph"], st["stats"],
                           st["tgmi"], st["arrays"][0], temps_m[None],
                           power_m[None], inlet_m[None], flows_m[None],
                           gidx=st["gidx"])
        preds.append(p[0])
    return np.stack(preds)


def ensemble_rollout(params, graph, stats, tgmi, run, members, spec, seed,
                     levels=(5.0, 50.0, 95.0), threads=1, member_chunk=None):
    """M-member perturbed rollout summarized by percentile bands.

    ``member_chunk`` > 1 batches that many members through one forward pass
    (fast path for UQ). ``threads`` > 1 splits members across forked worker
    processes instead; chunking is then per worker.
    """
    if members < 1:
        raise ConfigError("ensemble needs at least one member")
    arrays = (run.t, run.temps, run.power, run.inlet, run.flows)
    gidx = GraphIndex(graph)
    state = {"params": params, "graph": graph, "stats": stats, "tgmi": tgmi,
             "spec": spec, "seed": int(seed), "arrays": arrays, "gidx": gidx}

    if threads > 1:
        bounds = np.linspace(0, members, threads + 1).astype(int)
        jobs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])
                if b > a]
        global _POOL_STATE
        _POOL_STATE = state
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=threads) as pool:
            parts = pool.map(_member_batch, jobs)
        preds = np.concatenate(parts)
    elif member_chunk and member_chunk > 1:
        preds_list = []
        for lo in range(0, members, member_chunk):
            hi = min(lo + member_chunk, members)
            pert = [_perturb_member(arrays, graph, spec,
                                    substream(seed, "ensemble", m))
                    for m in range(lo, hi)]
            temps = np.stack([p[0] for p in pert])
            power = np.stack([p[1] for p in pert])
            inlet = np.stack([p[2] for p in pert])
            flows = np.stack([p[3] for p in pert])
            preds_list.append(rollout_arrays(
                params, graph, stats, tgmi, run.t, temps, power, inlet,
                flows, gidx=gidx))
        preds = np.concatenate(preds_list)
    else:
        _POOL_STATE.clear()
        _POOL_STATE.update(state)
        preds = _member_batch((0, members))
    pct = np.percentile(preds, levels, axis=0)
    return EnsembleResult(t=run.t.copy(), percentiles=pct,
                          levels=tuple(levels), members=members,
                          seed=int(seed))


def benchmark(params, graph, stats, tgmi, run, members_list=(1, 2, 4),
              threads_list=(1,), spec=None, seed=0):
    """Wall-clock speedup table over (threads, members) combinations.

    Members run strictly sequentially within a thread, so per-member cost
    is not amortized by batching and the speedup column is monotone in M.
    Speedup = forecast span / wall time.
    """
    spec = spec or UncertaintySpec()
    span = float(run.t[-1] - run.t[1])
    rows = []
    for threads in threads_list:
        for members in members_list:
            t0 = time.perf_counter()
            ensemble_rollout(params, graph, stats, tgmi, run, members, spec,
                             seed, threads=threads)
            wall = time.perf_counter() - t0
            rows.append({"threads": int(threads), "members": int(members),
                         "wall_s": wall, "forecast_span_s": span,
                         "speedup": span / wall})
    return rows


def plot_bands(result, truth_run, graph, path, nodes=None):
    """Write an SVG of percentile bands vs ground truth (needs matplotlib)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    nodes = nodes or [graph.plant_names[i]
                      for i in (list(graph.uninstrumented_idx[:2])
                                + list(graph.instrumented_idx[:2]))]
    fig, axes = plt.subplots(len(nodes), 1, figsize=(7, 2.2 * len(nodes)),
                             sharex=True)
    axes = np.atleast_1d(axes)
    pos = {nm: i for i, nm in enumerate(graph.plant_names)}
    for ax, nm in zip(axes, nodes):
        i = pos[nm]
        lo, mid, hi = (result.percentiles[k, :, i] for k in range(3))
        ax.fill_between(result.t, lo, hi, alpha=0.3, label="5-95%")
        ax.plot(result.t, mid, lw=1.0, label="median")
        ax.plot(truth_run.t, truth_run.temps[:, i], "k--", lw=0.8,
                label="truth")
        ax.set_ylabel(f"{nm} [K]")
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
