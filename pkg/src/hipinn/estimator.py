"""scikit-learn style front end for hierarchical PINN training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .engine import Jet
from .hitrain import HierarchySchedule, LevelSpec, Reference, train
from .nets import spec_from_dict
from .problems import ProblemSpec, get_problem, sample

__all__ = ["HiPINNRegressor"]

_DEFAULT_LEVELS = ({"network": {"type": "mlp", "hidden": [64, 64]}, "iterations": 2000},)


class HiPINNRegressor(RegressorMixin, BaseEstimator):
    """Hierarchical PINN solver with the ``fit``/``predict`` protocol.

    The training data is the PDE itself, so ``fit`` needs no targets.
    Optional ``(X, y)`` pairs are used only as a reference for the
    relative L2 error column of ``trace_``.

    Parameters
    ----------
    problem : str or ProblemSpec
        Registered problem name (see ``hipinn.problems.get_problem``) or a spec.
    levels : sequence of dict, optional
        One entry per level, each ``{"network": {...}, "iterations": int}``
        with optional ``lr`` and ``weighting`` overrides. Network dicts use
        the experiment-config schema. Defaults to one 2x64 MLP level.
    n_interior, n_boundary : int
        Collocation counts.
    lr : float
        Adam learning rate.
    decay_rate : float, optional
        Exponential decay factor applied every ``decay_steps`` iterations.
    weighting : {"ntk", "gradnorm", "none"}
        Adaptive loss weighting rule.
    weight_every : int
        Weight update period in iterations.
    resample : bool
        Draw fresh collocation points at every iteration.
    stride : int
        Trace checkpoint spacing.
    random_state : int
        Seed for sampling and initialization.

    Attributes
    ----------
    composite_ : CompositeModel
        Trained additive model, all levels frozen.
    trace_ : TrainingTrace
    problem_ : ProblemSpec
    n_features_in_ : int
    """

    def __init__(
        self,
        problem="poisson2d",
        levels=None,
        n_interior: int = 400,
        n_boundary: int = 400,
        lr: float = 1e-3,
        decay_rate=None,
        decay_steps: int = 1000,
        weighting: str = "ntk",
        weight_every: int = 100,
        resample: bool = False,
        stride: int = 100,
        random_state: int = 0,
    ):
        self.problem = problem
        self.levels = levels
        self.n_interior = n_interior
        self.n_boundary = n_boundary
        self.lr = lr
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.weighting = weighting
        self.weight_every = weight_every
        self.resample = resample
        self.stride = stride
        self.random_state = random_state

    def _resolve_problem(self) -> ProblemSpec:
        if isinstance(self.problem, ProblemSpec):
            return self.problem
        if isinstance(self.problem, str):
            return get_problem(self.problem)
        raise TypeError(f"problem must be a name or ProblemSpec, got {type(self.problem).__name__}")

    def _schedule(self, dim: int) -> HierarchySchedule:
        levels = _DEFAULT_LEVELS if self.levels is None else self.levels
        if not levels:
            raise ValueError("levels must not be empty")
        return HierarchySchedule(
            [
                LevelSpec(
                    spec_from_dict(lv["network"], dim),
                    int(lv["iterations"]),
                    lr=float(lv.get("lr", self.lr)),
                    decay_rate=self.decay_rate,
                    decay_steps=self.decay_steps,
                    weighting=lv.get("weighting", self.weighting),
                    weight_every=self.weight_every,
                )
                for lv in levels
            ]
        )

    def fit(self, X=None, y=None):
        """Train all levels.

        Parameters
        ----------
        X : array of shape (n_points, n_dims), optional
            Reference points for error monitoring.
        y : array of shape (n_points,), optional
            Reference values at ``X``; required when ``X`` is given.

        Returns
        -------
        self
        """
        problem = self._resolve_problem()
        reference = None
        if X is not None:
            if y is None:
                raise ValueError("reference values y are required when X is given")
            X, y = check_X_y(X, y, y_numeric=True)
            if X.shape[1] != problem.n:
                raise ValueError(f"X has {X.shape[1]} features, problem is {problem.n}-dimensional")
            reference = Reference(X, y)
        elif y is not None:
            raise ValueError("y given without X")
        schedule = self._schedule(problem.n)
        samples = sample(problem, self.n_interior, self.n_boundary, self.random_state)
        self.composite_, self.trace_ = train(
            problem,
            schedule,
            samples,
            reference,
            seed=self.random_state,
            stride=self.stride,
            resample=self.resample,
        )
        self.problem_ = problem
        self.n_features_in_ = problem.n
        return self

    def predict(self, X) -> np.ndarray:
        """Evaluate the summed level networks at ``X``."""
        check_is_fitted(self, "composite_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.composite_.predict(X)

    def residual(self, X) -> np.ndarray:
        """Pointwise PDE residual of the trained model at interior points ``X``."""
        check_is_fitted(self, "composite_")
        X = check_array(X)
        u = self.composite_(Jet.from_input(X, 2))
        return np.asarray(self.problem_.residual(X, u).value, dtype=float)
