"""Estimator facades with the fit/transform/predict parameter idiom.

These wrap the functional pipeline (imputer fitting, curriculum training,
autoregressive rollout) behind scikit-learn's estimator conventions:
constructor args are hyperparameters only, fitted state lives in
trailing-underscore attributes, and ``get_params``/``set_params``/cloning
work out of the box. X is a list of Trajectory runs rather than a feature
matrix; that is the natural sample unit here.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import Trajectory
from .errors import ConfigError
from .graph import canonical_graph, ensure_valid
from .model import ModelHyper
from .preprocessing import savgol_smooth, smooth_trajectory
from .tgmi import fit_tgmi, impute
from .validation import (check_array, check_choice, check_fraction,
                         check_is_fitted, check_positive,
                         check_trajectories)


class SavitzkyGolaySmoother(BaseEstimator, TransformerMixin):
    """Polynomial least-squares smoothing of temperature channels.

    Stateless; ``fit`` only validates parameters. ``transform`` accepts a
    2-D array (rows = time) or a list of Trajectory runs, in which case only
    temperature channels are smoothed.
    """

    def __init__(self, window=7, polyorder=2):
        self.window = window
        self.polyorder = polyorder

    def fit(self, X=None, y=None):
        window = int(check_positive("window", self.window, kind=int))
        if window % 2 != 1 or window < 3:
            raise ConfigError(f"window must be an odd integer >= 3, "
                              f"got {self.window!r}")
        if int(self.polyorder) >= window:
            raise ConfigError("polyorder must be smaller than window")
        self.n_features_in_ = None
        return self

    def transform(self, X):
        self.fit()
        is_runs = isinstance(X, Trajectory) or (
            isinstance(X, (list, tuple)) and X
            and isinstance(X[0], Trajectory))
        if is_runs:
            runs = check_trajectories(X)
            return [smooth_trajectory(r, window=int(self.window),
                                      polyorder=int(self.polyorder))
                    for r in runs]
        arr = check_array("X", X)
        return savgol_smooth(arr, window=int(self.window),
                             polyorder=int(self.polyorder))


class TgmiImputer(BaseEstimator, TransformerMixin):
    """Per-node linear imputation of uninstrumented plant temperatures.

    Fit on training runs; ``transform`` fills the uninstrumented channels of
    new runs from instrumented neighbors and the control context.
    """

    def __init__(self, use_context=True, ridge=1e-8, holdout_fraction=0.15,
                 graph=None):
        self.use_context = use_context
        self.ridge = ridge
        self.holdout_fraction = holdout_fraction
        self.graph = graph

    def fit(self, X, y=None):
        check_positive("ridge", self.ridge, strict=False)
        check_fraction("holdout_fraction", self.holdout_fraction)
        runs = check_trajectories(X, min_runs=1)
        self.graph_ = self.graph if self.graph is not None \
            else canonical_graph()
        ensure_valid(self.graph_)
        self.model_ = fit_tgmi(self.graph_, runs,
                               use_context=bool(self.use_context),
                               ridge=float(self.ridge),
                               holdout_fraction=float(self.holdout_fraction))
        self.report_ = self.model_.report
        return self

    def transform(self, X):
        check_is_fitted(self, ["model_", "graph_"])
        runs = check_trajectories(X)
        out = []
        for r in runs:
            filled = r.copy()
            temps = impute(self.model_, self.graph_,
                           r.plant_temps(self.graph_), r.power, r.inlet,
                           r.flows)
            filled.set_plant_temps(self.graph_, temps)
            filled.meta["imputed"] = True
            out.append(filled)
        return out


class GnnOdeSurrogate(BaseEstimator):
    """Graph neural-ODE surrogate trained with the horizon curriculum.

    ``fit`` generates nothing: it trains on the supplied runs (list of
    Trajectory). ``predict`` runs the fully autoregressive forecast seeded
    from each run's first two frames and returns one (T, n_plant) array per
    run. ``score`` is the negative observed-node MAE at the longest shared
    horizon, so larger is better under model selection.
    """

    def __init__(self, hidden=64, layers=4, substeps=4, dropout=0.0,
                 epochs=130, batch_size=8, micro_batch=4,
                 batches_per_epoch=20, lr=1e-3, grad_clip=1.0, k_start=1,
                 k_max=64, warmup_epochs=10, k_double_every=20,
                 p_base_start=0.3, p_base_end=0.0, tf_bump=0.15,
                 tf_bump_decay_epochs=10, mode="dense", use_cosine=True,
                 val_every=10, seed=42, graph=None):
        self.hidden = hidden
        self.layers = layers
        self.substeps = substeps
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.batches_per_epoch = batches_per_epoch
        self.lr = lr
        self.grad_clip = grad_clip
        self.k_start = k_start
        self.k_max = k_max
        self.warmup_epochs = warmup_epochs
        self.k_double_every = k_double_every
        self.p_base_start = p_base_start
        self.p_base_end = p_base_end
        self.tf_bump = tf_bump
        self.tf_bump_decay_epochs = tf_bump_decay_epochs
        self.mode = mode
        self.use_cosine = use_cosine
        self.val_every = val_every
        self.seed = seed
        self.graph = graph

    def _configs(self):
        from .training import TrainConfig
        check_positive("epochs", self.epochs, kind=int)
        check_positive("lr", self.lr)
        check_choice("mode", self.mode, ("dense", "sparse"))
        check_fraction("p_base_start", self.p_base_start)
        check_fraction("p_base_end", self.p_base_end)
        hyper = ModelHyper(hidden=int(self.hidden), layers=int(self.layers),
                           substeps=int(self.substeps),
                           dropout=float(self.dropout))
        cfg = TrainConfig(
            epochs=int(self.epochs), batch_size=int(self.batch_size),
            micro_batch=int(self.micro_batch),
            batches_per_epoch=int(self.batches_per_epoch),
            lr=float(self.lr), grad_clip=float(self.grad_clip),
            k_start=int(self.k_start), k_max=int(self.k_max),
            warmup_epochs=int(self.warmup_epochs),
            k_double_every=int(self.k_double_every),
            p_base_start=float(self.p_base_start),
            p_base_end=float(self.p_base_end), tf_bump=float(self.tf_bump),
            tf_bump_decay_epochs=int(self.tf_bump_decay_epochs),
            mode=self.mode, use_cosine=bool(self.use_cosine),
            val_every=int(self.val_every))
        return hyper, cfg

    def fit(self, X, y=None, validation=None, log=None):
        from .config import substream
        from .training import RunArrays, pretrain
        hyper, cfg = self._configs()
        runs = check_trajectories(X, min_runs=1)
        self.graph_ = self.graph if self.graph is not None \
            else canonical_graph()
        ensure_valid(self.graph_)
        train = [RunArrays.from_trajectory(r, self.graph_) for r in runs]
        val = [RunArrays.from_trajectory(r, self.graph_)
               for r in check_trajectories(validation)] if validation else []
        rng = substream(int(self.seed), "estimator", "fit")
        self.params_, self.stats_, self.tgmi_, self.history_ = pretrain(
            self.graph_, train, val, hyper, cfg, rng, log=log)
        return self

    def predict(self, X):
        from .rollout import rollout_runs
        from .training import RunArrays
        check_is_fitted(self, ["params_", "stats_", "tgmi_"])
        runs = check_trajectories(X)
        arrays = [RunArrays.from_trajectory(r, self.graph_) for r in runs]
        return rollout_runs(self.params_, self.graph_, self.stats_,
                            self.tgmi_, arrays)

    def evaluate(self, X, horizons=None):
        from .training import RunArrays, evaluate_runs
        check_is_fitted(self, ["params_", "stats_", "tgmi_"])
        runs = check_trajectories(X)
        arrays = [RunArrays.from_trajectory(r, self.graph_) for r in runs]
        return evaluate_runs(self.params_, self.graph_, self.stats_,
                             self.tgmi_, arrays, horizons=horizons)

    def score(self, X, y=None):
        metrics = self.evaluate(X)
        h = max(metrics["horizons"])
        return -float(metrics["observed"][h])

    def save(self, path, meta=None):
        from .checkpoint import save_checkpoint
        check_is_fitted(self, ["params_", "stats_", "tgmi_"])
        save_checkpoint(path, self.params_, self.graph_, stats=self.stats_,
                        tgmi=self.tgmi_, meta=meta or {})
        return path

    @classmethod
    def from_checkpoint(cls, path):
        from .checkpoint import load_checkpoint
        params, graph, stats, tgmi, meta = load_checkpoint(path)
        est = cls(hidden=params.hyper.hidden, layers=params.hyper.layers,
                  substeps=params.hyper.substeps,
                  dropout=params.hyper.dropout, graph=graph)
        est.graph_ = graph
        est.params_ = params
        est.stats_ = stats
        est.tgmi_ = tgmi
        est.history_ = meta.get("history", [])
        return est
