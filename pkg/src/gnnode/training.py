"""Curriculum training with scheduled sampling and rate-space supervision.

Windows of K consecutive steps are rolled out from two seed frames. The
prediction horizon K follows a doubling curriculum (1 during warm-up, then
x2 every fixed number of epochs up to K_max). At every non-final step of a
window each window independently either feeds back the model prediction or
the measured frame (teacher forcing) with probability p_TF; p_TF decays
linearly from p_base_start to p_base_end over training and receives a
transient bump at every horizon increase that relaxes linearly back over
``tf_bump_decay_epochs``.

Model inputs never contain ground truth at uninstrumented nodes: every
input frame (seeds, teacher-forced frames, and fed-back predictions alike)
passes through the fitted imputer's raw-space affine projection, which
rebuilds uninstrumented entries from instrumented ones plus controls. The
projection participates in the autodiff graph, so gradients flow through
the instrumented entries of fed-back predictions.

The loss supervises normalized temperature rates (dT/dt)/sigma_i, masked to
all plant nodes (dense, simulation ground truth) or instrumented nodes only
(sparse, experimental regime), and averages over steps, windows and counted
nodes.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NonFiniteError
from .model import GraphIndex, ModelHyper, ModelParams, predict_step
from .optim import Adam, clip_global_norm, cosine_factor
from .preprocessing import assemble_frame, fit_norm_stats, smooth_trajectory
from .tgmi import fit_tgmi, linear_maps


@dataclass
class TrainConfig:
    epochs: int = 130
    batch_size: int = 8
    micro_batch: int = 4          # tape-memory cap; 0 disables splitting
    batches_per_epoch: int = 20
    lr: float = 1e-3
    grad_clip: float = 1.0
    k_start: int = 1
    k_max: int = 64
    warmup_epochs: int = 10
    k_double_every: int = 20
    p_base_start: float = 0.3
    p_base_end: float = 0.0
    tf_bump: float = 0.15
    tf_bump_decay_epochs: int = 10
    mode: str = "dense"           # dense | sparse supervision
    use_cosine: bool = True
    val_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class FinetuneConfig:
    epochs: int = 24
    batch_size: int = 8
    micro_batch: int = 4
    batches_per_epoch: int = 15
    k: int = 32
    p_tf: float = 0.0
    lr_gnn: float = 5e-5
    lr_actuator: float = 1e-4
    lr_head: float = 5e-4
    grad_clip: float = 1.0
    use_cosine: bool = True
    val_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# -- curriculum / scheduled-sampling schedules ------------------------------

def horizon_at(epoch, cfg):
    """Window length K for a 1-based epoch index."""
    if epoch <= cfg.warmup_epochs:
        return cfg.k_start
    doublings = 1 + (epoch - cfg.warmup_epochs - 1) // cfg.k_double_every
    return min(cfg.k_start * (2 ** doublings), cfg.k_max)


def k_increase_epochs(cfg):
    """Epochs at which the horizon strictly increases."""
    out = []
    for e in range(2, cfg.epochs + 1):
        if horizon_at(e, cfg) > horizon_at(e - 1, cfg):
            out.append(e)
    return out


def teacher_prob(epoch, cfg):
    """Scheduled-sampling probability at a 1-based epoch."""
    if cfg.epochs > 1:
        frac = (epoch - 1) / (cfg.epochs - 1)
    else:
        frac = 0.0
    base = cfg.p_base_start + (cfg.p_base_end - cfg.p_base_start) * frac
    bump = 0.0
    trigger = None
    for e in k_increase_epochs(cfg):
        if e <= epoch:
            trigger = e
    if trigger is not None:
        age = epoch - trigger
        if age < cfg.tf_bump_decay_epochs:
            bump = cfg.tf_bump * (1.0 - age / cfg.tf_bump_decay_epochs)
    return float(np.clip(base + bump, 0.0, 1.0))


# -- run arrays and window sampling -----------------------------------------

@dataclass
class RunArrays:
    """Per-run arrays in model layout.

    ``input_temps`` feeds the model (seed and teacher-forced frames);
    ``temps`` supplies supervision targets. They are the same array unless
    a caller deliberately separates them (e.g. information-flow tests).
    """
    t: np.ndarray
    temps: np.ndarray
    power: np.ndarray
    inlet: np.ndarray
    flows: np.ndarray
    input_temps: np.ndarray = None

    def __post_init__(self):
        if self.input_temps is None:
            self.input_temps = self.temps

    @classmethod
    def from_trajectory(cls, traj, graph):
        return cls(t=traj.t.copy(), temps=traj.plant_temps(graph),
                   power=traj.power.copy(), inlet=traj.inlet.copy(),
                   flows=traj.flows.copy())


def sample_windows(rng, runs, k, b):
    """Draw B (run, start) windows; start s needs frames s-1 .. s+K."""
    eligible = [i for i, r in enumerate(runs) if len(r.t) >= k + 2]
    if not eligible:
        raise ConfigError(f"no run is long enough for K={k} windows")
    runs_idx = rng.choice(np.array(eligible), size=b)
    starts = np.empty(b, dtype=np.intp)
    for j, ri in enumerate(runs_idx):
        starts[j] = rng.integers(1, len(runs[ri].t) - k)
    return list(zip(runs_idx.tolist(), starts.tolist()))


def gather_batch(runs, windows, k):
    """Stack window slices into batch arrays.

    frames/ctrl arrays hold K+1 rows per window covering time indices
    s-1 .. s+K-1; dt_all holds the K+1 intervals of t[s-1 .. s+K]; the j-th
    prediction step integrates over dt_all[:, j+1] and its rate target is
    the measured rate over that interval.
    """
    b = len(windows)
    frames, tgt_rate, dt_all, power, inlet, flows = [], [], [], [], [], []
    for ri, s in windows:
        r = runs[ri]
        sl_in = slice(s - 1, s + k)        # K+1 input frames
        frames.append(r.input_temps[sl_in])
        power.append(r.power[sl_in])
        inlet.append(r.inlet[sl_in])
        flows.append(r.flows[sl_in])
        dts = np.diff(r.t[s - 1:s + k + 1])
        dt_all.append(dts)
        tgt_rate.append(np.diff(r.temps[s:s + k + 1], axis=0)
                        / dts[1:, None])
    return {"frames": np.stack(frames), "targets": np.stack(tgt_rate),
            "dt_all": np.stack(dt_all), "power": np.stack(power),
            "inlet": np.stack(inlet), "flows": np.stack(flows)}


# -- differentiable imputer projection ---------------------------------------

def projection_maps(tgmi_model, graph):
    """(M_T, additive) such that imputed = frames @ M_T + additive(ctrls).

    Instrumented rows of M are identity; uninstrumented rows carry the
    imputer's raw-space weights (zero at uninstrumented columns), so the
    projection both sanitizes uninstrumented inputs and stays linear for
    gradient flow through instrumented entries.
    """
    wp, w_inlet, ctx_fn = linear_maps(tgmi_model, graph)
    n = graph.n_plant
    rows = np.array([graph.plant_names.index(nm)
                     for nm in tgmi_model.node_names], dtype=np.intp)
    m = np.eye(n)
    m[rows, :] = wp
    m_t = np.ascontiguousarray(m.T)

    def additive(power, inlet, flows):
        c = np.zeros((len(power), n))
        c[:, rows] = w_inlet[None, :] * inlet[:, None] + ctx_fn(power, flows)
        return c

    return m_t, additive


# -- loss ---------------------------------------------------------------------

def rate_loss(rate_hats, rate_targets_norm, mask_vec, batch_total=None):
    """Masked mean squared error over normalized rates.

    ``rate_hats`` is a list of K (B, n) tensors; targets are constant
    arrays. Normalization is 1 / (K * B_total * sum(mask)), so chunked
    windows with ``batch_total`` set to the full batch size sum to the
    whole-batch loss exactly.
    """
    k = len(rate_hats)
    b = rate_hats[0].shape[0]
    mask_vec = np.asarray(mask_vec, dtype=np.float64)
    denom = k * (batch_total if batch_total else b) * float(mask_vec.sum())
    total = None
    for rh, rt in zip(rate_hats, rate_targets_norm):
        d = ad.sub(rh, rt)
        sq = ad.mul(ad.mul(d, d), mask_vec[None, :])
        total = sq if total is None else ad.add(total, sq)
    return ad.mul(ad.sum_(total), 1.0 / denom)


# -- windowed forward ---------------------------------------------------------

def window_forward(params, gidx, graph, stats, proj, batch, p_tf, rng,
                   mode="dense", batch_total=None):
    """Roll a batch of K-step windows; returns the masked window loss.

    Teacher forcing is drawn per window per non-final step. Every input
    frame passes through the imputer projection; fed-back predictions keep
    their gradient path through instrumented entries.
    """
    m_t, additive = proj
    frames, dt_all = batch["frames"], batch["dt_all"]
    power, inlet, flows = batch["power"], batch["inlet"], batch["flows"]
    b, k_plus_1, n = frames.shape
    k = k_plus_1 - 1
    mask_vec = np.ones(n) if mode == "dense" else graph.mask
    if mode not in ("dense", "sparse"):
        raise ConfigError(f"unknown supervision mode: {mode!r}")

    adds = [additive(power[:, j], inlet[:, j], flows[:, j])
            for j in range(k + 1)]
    t_prev = ad.constant(frames[:, 0] @ m_t + adds[0])
    t_in = ad.constant(frames[:, 1] @ m_t + adds[1])
    draws = rng.random((b, max(k - 1, 1))) < p_tf

    rate_hats, rate_targets = [], []
    for j in range(k):
        feats = assemble_frame(graph, stats, t_in, power[:, j + 1],
                               inlet[:, j + 1], flows[:, j + 1],
                               T_prev=t_prev, dt_prev=dt_all[:, j])
        t_hat, rate = predict_step(params, gidx, stats, feats, t_in,
                                   dt_all[:, j + 1])
        rate_hats.append(rate)
        rate_targets.append(batch["targets"][:, j] / stats.rate_std[None, :])
        if j < k - 1:
            tf_col = draws[:, j].astype(np.float64)[:, None]
            forced = np.where(tf_col > 0, frames[:, j + 2], 0.0) * tf_col
            mixed = ad.add(ad.mul(t_hat, 1.0 - tf_col), forced)
            t_prev = t_in
            t_in = ad.add(ad.matmul(mixed, m_t), adds[j + 2])
    return rate_loss(rate_hats, rate_targets, mask_vec,
                     batch_total=batch_total)


def _chunked(seq, size):
    if size <= 0 or size >= len(seq):
        yield seq
        return
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _train_batches(params, gidx, graph, stats, proj, runs, optimizer,
                   n_batches, batch_size, micro, k, p_tf, rng, mode,
                   grad_clip, lr_scale):
    """One epoch of optimizer steps; returns (mean loss, skipped count)."""
    losses, skipped = [], 0
    scale = lr_scale
    order = optimizer.params
    for _ in range(n_batches):
        windows = sample_windows(rng, runs, k, batch_size)
        acc = {}
        loss_val = 0.0
        try:
            for chunk in _chunked(windows, micro):
                batch = gather_batch(runs, chunk, k)
                with ad.Tape() as tape:
                    params.watch(tape)
                    loss = window_forward(params, gidx, graph, stats, proj,
                                          batch, p_tf, rng, mode=mode,
                                          batch_total=batch_size)
                    grads = tape.backward(loss)
                loss_val += loss.item()
                for t in order:
                    g = grads.of(t)
                    if g is None:
                        continue
                    if id(t) in acc:
                        acc[id(t)] += g
                    else:
                        acc[id(t)] = g
        except NonFiniteError:
            skipped += 1
            scale *= 0.5
            continue
        if not np.isfinite(loss_val):
            skipped += 1
            scale *= 0.5
            continue
        grad_list = [acc.get(id(t), np.zeros_like(t.data)) for t in order]
        try:
            grad_list, _ = clip_global_norm(grad_list, grad_clip)
        except NonFiniteError:
            skipped += 1
            scale *= 0.5
            continue
        optimizer.step(grad_list, lr_scale=scale)
        params.apply_constraints()
        losses.append(loss_val)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return mean_loss, skipped


def evaluate_runs(params, graph, stats, tgmi, runs, horizons=None):
    """Autoregressive held-out metrics; deferred import avoids a cycle.

    When ``horizons`` is None the standard set is clipped to the shortest
    run's forecast span.
    """
    from .rollout import horizon_metrics, rollout_runs
    if horizons is None:
        span = min(float(r.t[-1] - r.t[1]) for r in runs)
        horizons = [h for h in (0, 10, 30, 60, 120, 180, 300) if h <= span]
    preds = rollout_runs(params, graph, stats, tgmi, runs)
    return horizon_metrics(preds, runs, graph, horizons=horizons)


def _val_score(metrics):
    h = max(metrics["horizons"])
    return 0.5 * (metrics["observed"][h] + metrics["missing"][h])


def pretrain(graph, train_runs, val_runs, hyper, cfg, rng, out_dir=None,
             log=None):
    """Fit stats + imputer on training runs, then run the curriculum.

    Returns (params, stats, tgmi, history). Tracks the best validation
    score and restores that parameter state at the end. ``*_runs`` are
    RunArrays (use RunArrays.from_trajectory).
    """
    say = log or (lambda msg: None)
    stats = fit_norm_stats_runs(train_runs, graph)
    tgmi = fit_tgmi_runs(graph, train_runs)
    proj = projection_maps(tgmi, graph)
    gidx = GraphIndex(graph)
    params = ModelParams.init(graph, hyper, rng)
    groups = {name: (tensors, cfg.lr)
              for name, tensors in params.groups().items()}
    optimizer = Adam(groups, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    history = []
    best = {"score": np.inf, "state": None, "epoch": 0}
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        k = horizon_at(epoch, cfg)
        p_tf = teacher_prob(epoch, cfg)
        lr_scale = cosine_factor(epoch, cfg.epochs) if cfg.use_cosine else 1.0
        loss, skipped = _train_batches(
            params, gidx, graph, stats, proj, train_runs, optimizer,
            cfg.batches_per_epoch, cfg.batch_size, cfg.micro_batch, k, p_tf,
            rng, cfg.mode, cfg.grad_clip, lr_scale)
        entry = {"epoch": epoch, "k": k, "p_tf": round(p_tf, 6),
                 "loss": loss, "lr_scale": lr_scale, "skipped": skipped,
                 "wall_s": round(time.perf_counter() - t_start, 2)}
        if val_runs and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            metrics = evaluate_runs(params, graph, stats, tgmi, val_runs)
            entry["val"] = {"observed": metrics["observed"],
                            "missing": metrics["missing"]}
            score = _val_score(metrics)
            entry["val_score"] = score
            if score < best["score"]:
                best = {"score": score, "state": params.state_arrays(),
                        "epoch": epoch}
                if out_dir:
                    _save(out_dir, "best.ckpt", params, graph, stats, tgmi,
                          {"epoch": epoch, "val_score": score})
        say(f"epoch {epoch:3d} K={k:3d} p_tf={p_tf:.3f} "
            f"loss={loss:.5f} skipped={skipped}"
            + (f" val_score={entry.get('val_score'):.3f}"
               if "val_score" in entry else ""))
        history.append(entry)
    if best["state"] is not None:
        params.load_state(best["state"])
    if out_dir:
        _save(out_dir, "last.ckpt", params, graph, stats, tgmi,
              {"epochs": cfg.epochs, "best_epoch": best["epoch"]})
        with open(os.path.join(out_dir, "history.json"), "w") as fh:
            json.dump(history, fh, indent=1)
    return params, stats, tgmi, history


def finetune(params, graph, stats, tgmi, train_runs, val_runs, cfg, rng,
             out_dir=None, log=None):
    """Adapt a pretrained model on experimental-regime runs.

    Sparse supervision only (uninstrumented channels are unmeasured in this
    regime). Parameter groups use discriminative learning rates annealed by
    a shared cosine factor, preserving their ratios.
    """
    say = log or (lambda msg: None)
    proj = projection_maps(tgmi, graph)
    gidx = GraphIndex(graph)
    group_lrs = {"gnn": cfg.lr_gnn, "actuator": cfg.lr_actuator,
                 "head": cfg.lr_head}
    groups = {name: (tensors, group_lrs[name])
              for name, tensors in params.groups().items()}
    optimizer = Adam(groups, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    history = []
    best = {"score": np.inf, "state": None, "epoch": 0}
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr_scale = cosine_factor(epoch, cfg.epochs) if cfg.use_cosine else 1.0
        loss, skipped = _train_batches(
            params, gidx, graph, stats, proj, train_runs, optimizer,
            cfg.batches_per_epoch, cfg.batch_size, cfg.micro_batch, cfg.k,
            cfg.p_tf, rng, "sparse", cfg.grad_clip, lr_scale)
        entry = {"epoch": epoch, "k": cfg.k, "loss": loss,
                 "lr_scale": lr_scale, "skipped": skipped,
                 "wall_s": round(time.perf_counter() - t_start, 2)}
        if val_runs and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            metrics = evaluate_runs(params, graph, stats, tgmi, val_runs)
            entry["val"] = {"observed": metrics["observed"],
                            "missing": metrics["missing"]}
            score = metrics["observed"][max(metrics["horizons"])]
            entry["val_score"] = score
            if score < best["score"]:
                best = {"score": score, "state": params.state_arrays(),
                        "epoch": epoch}
                if out_dir:
                    _save(out_dir, "finetuned_best.ckpt", params, graph,
                          stats, tgmi, {"epoch": epoch, "val_score": score})
        say(f"finetune epoch {epoch:3d} loss={loss:.5f} skipped={skipped}"
            + (f" val_score={entry.get('val_score'):.3f}"
               if "val_score" in entry else ""))
        history.append(entry)
    if best["state"] is not None:
        params.load_state(best["state"])
    if out_dir:
        _save(out_dir, "finetuned.ckpt", params, graph, stats, tgmi,
              {"epochs": cfg.epochs, "best_epoch": best["epoch"]})
        with open(os.path.join(out_dir, "finetune_history.json"), "w") as fh:
            json.dump(history, fh, indent=1)
    return params, history


def prepare_experimental_runs(trajs, graph, window=7, polyorder=2):
    """Smooth measured temperatures, then convert to RunArrays."""
    out = []
    for tr in trajs:
        sm = smooth_trajectory(tr, window=window, polyorder=polyorder)
        out.append(RunArrays.from_trajectory(sm, graph))
    return out


def fit_norm_stats_runs(runs, graph, **kw):
    """fit_norm_stats over RunArrays (adapter for array-based pipelines)."""
    trajs = [_ArraysAsTraj(r) for r in runs]
    return fit_norm_stats(trajs, graph, **kw)


def fit_tgmi_runs(graph, runs, **kw):
    return fit_tgmi(graph, [_ArraysAsTraj(r) for r in runs], **kw)


class _ArraysAsTraj:
    """Duck-typed stand-in exposing the trajectory API over RunArrays."""

    def __init__(self, run):
        self._run = run
        self.t = run.t
        self.power = run.power
        self.inlet = run.inlet
        self.flows = run.flows

    def __len__(self):
        return len(self.t)

    @property
    def dt(self):
        return np.diff(self.t)

    def plant_temps(self, graph):
        return self._run.temps


def _save(out_dir, name, params, graph, stats, tgmi, meta):
    from .checkpoint import save_checkpoint
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, name), params, graph,
                    stats=stats, tgmi=tgmi, meta=meta)
