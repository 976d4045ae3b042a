"""Topology-guided measurement imputation for uninstrumented volumes.

Each uninstrumented plant node gets an ordinary-least-squares model over its
1-hop instrumented neighbors (instrumented plant channels plus the measured
loop-3 inlet where adjacent) and, optionally, a global context vector built
from heater power and the three loop flows with full quadratic expansion
(4 linear + 4 squares + 6 pairwise products). All regressors are
standardized before the solve; the normal equations carry a small ridge
jitter for rank safety. Imputation therefore reads only measured channels -
never other uninstrumented nodes - which keeps it usable as a cold-start
initializer and as the in-training re-imputer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NotFittedStateError

CONTEXT_DIM = 14  # P, f1, f2, f3, their squares, and pairwise products


def context_features(power, flows):
    """Quadratic global-context expansion; accepts scalars or (T,) arrays."""
    p = np.asarray(power, dtype=np.float64)
    f = np.asarray(flows, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(1, 3) if p.ndim == 0 else f.reshape(-1, 3)
    p = np.atleast_1d(p)
    base = np.column_stack([p, f])                      # (T, 4)
    cols = [base]
    cols.append(base ** 2)                              # squares
    pairs = []
    for i in range(4):
        for j in range(i + 1, 4):
            pairs.append(base[:, i] * base[:, j])       # 6 products
    cols.append(np.column_stack(pairs))
    out = np.concatenate(cols, axis=1)
    assert out.shape[1] == CONTEXT_DIM
    return out


@dataclass
class TgmiModel:
    node_names: list
    regressors: dict                 # node -> list of channel names
    use_context: bool
    coef: dict = field(default_factory=dict)        # standardized-space
    intercept: dict = field(default_factory=dict)
    reg_mean: dict = field(default_factory=dict)
    reg_std: dict = field(default_factory=dict)
    ctx_mean: np.ndarray = None
    ctx_std: np.ndarray = None
    report: dict = field(default_factory=dict)

    @property
    def fitted(self):
        return bool(self.coef)

    def as_dict(self):
        return {
            "node_names": list(self.node_names),
            "regressors": {k: list(v) for k, v in self.regressors.items()},
            "use_context": self.use_context,
            "coef": {k: v.tolist() for k, v in self.coef.items()},
            "intercept": dict(self.intercept),
            "reg_mean": {k: v.tolist() for k, v in self.reg_mean.items()},
            "reg_std": {k: v.tolist() for k, v in self.reg_std.items()},
            "ctx_mean": None if self.ctx_mean is None else self.ctx_mean.tolist(),
            "ctx_std": None if self.ctx_std is None else self.ctx_std.tolist(),
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d):
        m = cls(node_names=list(d["node_names"]),
                regressors={k: list(v) for k, v in d["regressors"].items()},
                use_context=bool(d["use_context"]))
        m.coef = {k: np.array(v) for k, v in d["coef"].items()}
        m.intercept = {k: float(v) for k, v in d["intercept"].items()}
        m.reg_mean = {k: np.array(v) for k, v in d["reg_mean"].items()}
        m.reg_std = {k: np.array(v) for k, v in d["reg_std"].items()}
        m.ctx_mean = None if d["ctx_mean"] is None else np.array(d["ctx_mean"])
        m.ctx_std = None if d["ctx_std"] is None else np.array(d["ctx_std"])
        m.report = d.get("report", {})
        return m


def _channel_values(traj, graph, name):
    if name == graph.inlet_actuator.name:
        return traj.inlet
    return traj.plant_temps(graph)[:, graph.plant_names.index(name)]


def _stack_frames(trajectories, graph):
    temps = np.concatenate([tr.plant_temps(graph) for tr in trajectories])
    inlet = np.concatenate([tr.inlet for tr in trajectories])
    power = np.concatenate([tr.power for tr in trajectories])
    flows = np.concatenate([tr.flows for tr in trajectories])
    return temps, inlet, power, flows


def fit_tgmi(graph, trajectories, use_context=True, ridge=1e-8,
             holdout_fraction=0.15):
    """Fit per-node imputation models; returns a fitted TgmiModel.

    The last ``holdout_fraction`` of the runs (by list order) is kept out of
    the solve and used only for the per-node generalization report.
    """
    if not trajectories:
        raise ConfigError("tgmi fit requires at least one trajectory")
    n_hold = int(round(holdout_fraction * len(trajectories)))
    n_hold = min(max(n_hold, 1 if len(trajectories) > 1 else 0),
                 len(trajectories) - 1)
    train = trajectories[:len(trajectories) - n_hold]
    hold = trajectories[len(trajectories) - n_hold:]

    names = [graph.plant_names[i] for i in graph.uninstrumented_idx]
    regressors = {}
    for name in names:
        srcs = [graph.nodes[j].name
                for j in graph.instrumented_neighbors(name)]
        if not srcs:
            raise ConfigError(f"node {name!r} has no instrumented neighbors")
        regressors[name] = srcs

    model = TgmiModel(node_names=names, regressors=regressors,
                      use_context=use_context)

    temps_tr, inlet_tr, power_tr, flows_tr = _stack_frames(train, graph)
    ctx_tr = context_features(power_tr, flows_tr)
    if use_context:
        model.ctx_mean = ctx_tr.mean(axis=0)
        model.ctx_std = np.maximum(ctx_tr.std(axis=0), 1e-9)

    def regs_matrix(trajs):
        cols = {}
        for name in names:
            cols[name] = np.column_stack([
                np.concatenate([_channel_values(tr, graph, s) for tr in trajs])
                for s in regressors[name]])
        return cols

    regs_train = regs_matrix(train)
    plant_tr = temps_tr

    for name in names:
        node_pos = graph.plant_names.index(name)
        y = plant_tr[:, node_pos]
        X = regs_train[name]
        m = X.mean(axis=0)
        s = np.maximum(X.std(axis=0), 1e-9)
        Z = (X - m) / s
        if use_context:
            Zc = (ctx_tr - model.ctx_mean) / model.ctx_std
            Z = np.column_stack([Z, Zc])
        A = np.column_stack([Z, np.ones(len(Z))])
        ata = A.T @ A + ridge * np.eye(A.shape[1])
        w = np.linalg.solve(ata, A.T @ y)
        model.reg_mean[name] = m
        model.reg_std[name] = s
        model.coef[name] = w[:-1]
        model.intercept[name] = float(w[-1])

    model.report = {
        "train": _evaluate(model, graph, train),
        "holdout": _evaluate(model, graph, hold) if hold else {},
        "n_train_runs": len(train), "n_holdout_runs": len(hold),
    }
    return model


def predict_node(model, name, X_regs, ctx):
    z = (X_regs - model.reg_mean[name]) / model.reg_std[name]
    if model.use_context:
        zc = (ctx - model.ctx_mean) / model.ctx_std
        z = np.column_stack([z, zc])
    return z @ model.coef[name] + model.intercept[name]


def impute(model, graph, plant_temps, power, inlet, flows):
    """Replace uninstrumented entries of raw plant temperatures.

    ``plant_temps`` is (n_plant,) or (T, n_plant); only instrumented entries
    are read. Returns a filled copy.
    """
    if not model.fitted:
        raise NotFittedStateError("tgmi model is not fitted")
    temps = np.asarray(plant_temps, dtype=np.float64)
    single = temps.ndim == 1
    temps = np.atleast_2d(temps).copy()
    if temps.shape[1] != graph.n_plant:
        raise ConfigError(f"expected {graph.n_plant} plant columns, "
                          f"got {temps.shape[1]}")
    inlet = np.broadcast_to(np.asarray(inlet, dtype=np.float64),
                            (temps.shape[0],))
    ctx = context_features(power, np.broadcast_to(
        np.asarray(flows, dtype=np.float64).reshape(-1, 3),
        (temps.shape[0], 3)))
    name_pos = {n: i for i, n in enumerate(graph.plant_names)}
    for name in model.node_names:
        cols = []
        for s in model.regressors[name]:
            if s == graph.inlet_actuator.name:
                cols.append(inlet)
            else:
                cols.append(temps[:, name_pos[s]])
        X = np.column_stack(cols)
        temps[:, name_pos[name]] = predict_node(model, name, X, ctx)
    return temps[0] if single else temps


def linear_maps(model, graph):
    """Raw-space affine form of the imputer for the differentiable path.

    Returns (Wp, w_inlet, ctx_fn) with
      imputed = plant_temps @ Wp.T + w_inlet * T_inlet + ctx_fn(P, flows)
    where Wp has zero columns at uninstrumented indices (locality) and
    ctx_fn folds the context contribution plus intercept into a constant.
    """
    if not model.fitted:
        raise NotFittedStateError("tgmi model is not fitted")
    n = graph.n_plant
    k = len(model.node_names)
    name_pos = {nm: i for i, nm in enumerate(graph.plant_names)}
    Wp = np.zeros((k, n))
    w_inlet = np.zeros(k)
    bias = np.zeros(k)
    ctx_w = np.zeros((k, CONTEXT_DIM))
    for r, name in enumerate(model.node_names):
        w = model.coef[name]
        m, s = model.reg_mean[name], model.reg_std[name]
        nreg = len(model.regressors[name])
        for j, src in enumerate(model.regressors[name]):
            raw_w = w[j] / s[j]
            if src == graph.inlet_actuator.name:
                w_inlet[r] += raw_w
            else:
                Wp[r, name_pos[src]] += raw_w
            bias[r] -= raw_w * m[j]
        bias[r] += model.intercept[name]
        if model.use_context:
            wc = w[nreg:]
            ctx_w[r] = wc / model.ctx_std
            bias[r] -= float(np.sum(wc * model.ctx_mean / model.ctx_std))

    def ctx_fn(power, flows):
        c = context_features(power, flows)
        return c @ ctx_w.T + bias

    return Wp, w_inlet, ctx_fn


def _evaluate(model, graph, trajectories):
    """Per-node R^2 and MAE of the imputer against ground truth."""
    if not trajectories:
        return {}
    temps, inlet, power, flows = _stack_frames(trajectories, graph)
    filled = impute(model, graph, temps, power, inlet, flows)
    out = {}
    for name in model.node_names:
        i = graph.plant_names.index(name)
        y, yhat = temps[:, i], filled[:, i]
        ss_res = float(np.sum((y - yhat) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        out[name] = {
            "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"),
            "mae": float(np.mean(np.abs(y - yhat))),
        }
    return out


def comparison_report(graph, trajectories, ridge=1e-8, holdout_fraction=0.15):
    """Fit with and without global context; per-node holdout comparison."""
    plain = fit_tgmi(graph, trajectories, use_context=False, ridge=ridge,
                     holdout_fraction=holdout_fraction)
    ctx = fit_tgmi(graph, trajectories, use_context=True, ridge=ridge,
                   holdout_fraction=holdout_fraction)
    split = "holdout" if ctx.report.get("holdout") else "train"
    rows = []
    for name in ctx.node_names:
        a = plain.report[split][name]
        b = ctx.report[split][name]
        rows.append({
            "node": name,
            "r2_no_context": a["r2"], "mae_no_context": a["mae"],
            "r2_context": b["r2"], "mae_context": b["mae"],
            "delta_mae": b["mae"] - a["mae"],
        })
    return ctx, rows
