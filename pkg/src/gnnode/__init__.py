"""Physics-informed graph neural-ODE surrogate for multi-loop thermal plants.

Subsystems: a tape-based autodiff core (:mod:`gnnode.autodiff`), the plant
graph (:mod:`gnnode.graph`), signal preparation (:mod:`gnnode.preprocessing`),
topology-guided imputation (:mod:`gnnode.tgmi`), the surrogate model
(:mod:`gnnode.model`), training loops (:mod:`gnnode.training`), a lumped
plant simulator (:mod:`gnnode.simulator`), rollout/ensemble evaluation
(:mod:`gnnode.rollout`), scikit-learn style estimators
(:mod:`gnnode.estimators`), and a CLI (``gnnode``).
"""

__version__ = "0.1.0"

from .graph import build_graph, canonical_graph, load_graph, validate  # noqa: F401
from .data import Trajectory, load_dataset  # noqa: F401
from .model import ModelHyper  # noqa: F401
from .estimators import (GnnOdeSurrogate, SavitzkyGolaySmoother,  # noqa: F401
                         TgmiImputer)
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
