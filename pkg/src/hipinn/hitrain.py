"""Hierarchical training: composite model, level losses, Adam, adaptive weights."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .engine import (
    FrozenParameterError,
    Jet,
    Node,
    ParameterStore,
    concat,
    evaluate,
    parameter_gradient,
    per_sample_gradient_norms,
)
from .nets import FourierNetSpec, MlpSpec, init_network
from .problems import BoundarySegment, ProblemSpec, SampleSet, sample

__all__ = [
    "CompositeModel",
    "LossWeights",
    "LevelObjective",
    "assemble_level_loss",
    "shifted_problem",
    "AdamState",
    "adam_step",
    "update_adaptive_weights",
    "ntk_traces",
    "gradient_norms",
    "LevelSpec",
    "HierarchySchedule",
    "TrainingTrace",
    "TrainingDiverged",
    "Reference",
    "relative_l2",
    "level_seed",
    "train",
]

log = logging.getLogger(__name__)

INTERIOR = "interior"


# ---------------------------------------------------------------------------
# composite model


class CompositeModel:
    """Additive stack of level networks ``u = sum_m v_m``.

    Every level below the active (last) one is frozen.
    """

    def __init__(self, levels: Sequence[tuple] = ()):
        self.levels: list[tuple] = []
        for net, store in levels:
            self.add_level(net, store)

    @property
    def input_dim(self):
        return self.levels[0][0].input_dim if self.levels else None

    @property
    def active_level(self) -> int:
        return len(self.levels) - 1

    @property
    def active(self):
        return self.levels[-1]

    def add_level(self, net, store: ParameterStore):
        for _, s in self.levels:
            s.freeze()
        self.levels.append((net, store))
        return self

    def frozen(self) -> "CompositeModel":
        """The composite of all levels below the active one."""
        out = CompositeModel()
        out.levels = list(self.levels[:-1])
        return out

    def __call__(self, X: Jet, params=None) -> Jet:
        if not self.levels:
            return Jet.constant_field(np.zeros(X.shape[:1]), X.n, X.order)
        out = None
        for net, store in self.levels:
            v = net(X, store)
            out = v if out is None else out + v
        return out

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.levels:
            return np.zeros(len(np.atleast_2d(x)))
        return sum(evaluate(net, x, store) for net, store in self.levels)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossWeights:
    """Positive weight per loss component (``"interior"`` and each boundary group)."""

    values: dict

    def __post_init__(self):
        self.values = {k: float(v) for k, v in self.values.items()}
        for k, v in self.values.items():
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"weight {k!r} must be positive and finite, got {v}")

    @classmethod
    def ones(cls, problem: ProblemSpec) -> "LossWeights":
        return cls({INTERIOR: 1.0, **{g: 1.0 for g in problem.groups()}})

    def __getitem__(self, key):
        return self.values[key]

    def keys(self):
        return list(self.values)


@dataclass
class _PointSet:
    label: str
    x: np.ndarray
    order: int
    segments: list  # (segment, row slice) for boundary sets
    target: np.ndarray
    frozen: Jet | None = None
    prepared: object = None


class LevelObjective:
    """Level loss with everything that does not depend on the active parameters cached.

    Embeddings of the sample points, the frozen composite's jets and the
    source/boundary data are evaluated once at construction.
    """

    def __init__(self, problem: ProblemSpec, composite: CompositeModel, samples: SampleSet):
        if not composite.levels:
            raise ValueError("composite model has no levels")
        if len(samples.interior) == 0:
            raise ValueError("empty interior sample set")
        self.problem = problem
        self.net, self.store = composite.active
        frozen = composite.frozen()
        self.sets: list[_PointSet] = []
        x = samples.interior
        self.sets.append(_PointSet(INTERIOR, x, 2, [], np.asarray(problem.source(x), dtype=float)))
        for group in problem.groups():
            segs = problem.segments(group)
            parts, rows, start = [], [], 0
            for seg in segs:
                pts = samples.boundary.get(seg.name, np.zeros((0, problem.n)))
                parts.append(pts)
                rows.append((seg, slice(start, start + len(pts))))
                start += len(pts)
            if start == 0:
                raise ValueError(f"empty boundary sample set for {group!r}")
            xb = np.concatenate(parts)
            target = np.concatenate([np.asarray(seg.data(xb[sl]), dtype=float) for seg, sl in rows])
            order = max(seg.order() for seg in segs)
            self.sets.append(_PointSet(group, xb, order, rows, target))
        for ps in self.sets:
            X = Jet.from_input(ps.x, ps.order)
            ps.prepared = self.net.prepare(X)
            if frozen.levels:
                ps.frozen = frozen(X)

    @property
    def labels(self) -> list[str]:
        return [ps.label for ps in self.sets]

    def _field(self, ps: _PointSet) -> Jet:
        v = self.net.apply(ps.prepared, self.store)
        return v if ps.frozen is None else ps.frozen + v

    def residuals(self) -> dict[str, Node]:
        """Pointwise defects per component: ``N[u] - f`` and ``B[u] - g``."""
        out = {}
        for ps in self.sets:
            u = self._field(ps)
            if ps.label == INTERIOR:
                r = self.problem.operator(ps.x, u)
            else:
                pieces = [seg.apply(_rows(u, sl)) for seg, sl in ps.segments if sl.stop > sl.start]
                r = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
            out[ps.label] = r - ps.target
        return out

    def loss(self, weights: LossWeights) -> tuple[Node, dict[str, float]]:
        """Weighted total loss node and the unweighted component values."""
        total, comps = None, {}
        for label, r in self.residuals().items():
            term = (r * r).mean()
            comps[label] = float(term.value)
            term = weights[label] * term
            total = term if total is None else total + term
        return total, comps


def _rows(u: Jet, sl: slice) -> Jet:
    return Jet(u.node[:, sl], u.n, u.order)


def assemble_level_loss(problem, composite, samples, weights: LossWeights) -> Node:
    """Scalar loss of the active level; only its parameters are differentiable."""
    return LevelObjective(problem, composite, samples).loss(weights)[0]


def shifted_problem(problem: ProblemSpec, frozen_composite: CompositeModel) -> ProblemSpec:
    """Original linear problem with source ``f - N[u_M]`` and data ``g - B[u_M]``."""
    if not problem.linear:
        raise ValueError(f"problem {problem.name!r} is nonlinear; no shifted form exists")
    model = frozen_composite

    def source(x):
        x = np.asarray(x, dtype=float)
        return problem.source(x) - problem.operator(x, model(Jet.from_input(x, 2))).value

    def shift(seg: BoundarySegment):
        def g(x):
            x = np.asarray(x, dtype=float)
            return seg.data(x) - seg.apply(model(Jet.from_input(x, seg.order()))).value

        return replace(seg, data=g)

    return ProblemSpec(
        problem.name + "_shifted",
        problem.domain,
        problem.operator,
        source,
        tuple(shift(s) for s in problem.boundary),
        None,
        dict(problem.meta),
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.95
    eps: float = 1e-8
    decay_rate: float | None = None
    decay_steps: int = 1000
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def learning_rate(self) -> float:
        if self.decay_rate is None:
            return self.lr
        return self.lr * self.decay_rate ** (self.step / self.decay_steps)


def adam_step(state: AdamState, params: ParameterStore, grad) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    if params.frozen:
        raise FrozenParameterError("optimizer step on a frozen parameter store")
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.values.shape:
        raise ValueError(f"gradient length {grad.size} does not match {params.size} parameters")
    if state.m is None:
        state.m = np.zeros_like(params.values)
        state.v = np.zeros_like(params.values)
    lr = state.learning_rate()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    mhat = state.m / (1 - b1**state.step)
    vhat = state.v / (1 - b2**state.step)
    params.values -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# adaptive weights


def update_adaptive_weights(stats: dict, previous: LossWeights | None = None) -> LossWeights:
    """Balance components inversely to their gradient statistic.

    ``lambda_k = sum_j T_j / T_k`` rescaled so the smallest weight is 1.
    Components with ``T_k = 0`` keep their previous weight.
    """
    if len(stats) < 2:
        raise ValueError("adaptive weighting needs at least two loss components")
    stats = {k: float(v) for k, v in stats.items()}
    for k, v in stats.items():
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f"statistic for {k!r} must be finite and non-negative, got {v}")
    prev = previous.values if previous is not None else {k: 1.0 for k in stats}
    active = {k: v for k, v in stats.items() if v > 0}
    if not active:
        return LossWeights(dict(prev))
    total = sum(stats.values())
    raw = {k: total / v for k, v in active.items()}
    low = min(raw.values())
    return LossWeights({k: raw[k] / low if k in raw else prev[k] for k in stats})


def ntk_traces(objective: LevelObjective) -> dict[str, float]:
    """``T_k = sum_i |grad_theta r_{k,i}|^2`` per component."""
    return {
        label: float(per_sample_gradient_norms(r, objective.store).sum())
        for label, r in objective.residuals().items()
    }


def gradient_norms(objective: LevelObjective) -> dict[str, float]:
    """``|grad_theta L_k|`` per unweighted component loss (cheap variant)."""
    out = {}
    for label, r in objective.residuals().items():
        g = parameter_gradient((r * r).mean(), objective.store)
        out[label] = float(np.linalg.norm(g))
    return out


_WEIGHTING = {"ntk": ntk_traces, "gradnorm": gradient_norms}


# ---------------------------------------------------------------------------
# schedule and trace


@dataclass
class LevelSpec:
    network: MlpSpec | FourierNetSpec
    iterations: int
    lr: float = 1e-3
    decay_rate: float | None = None
    decay_steps: int = 1000
    weighting: str = "ntk"
    weight_every: int = 100
    formulation: str = "composite"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("level iteration budget must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.weighting not in ("none", *_WEIGHTING):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.weight_every < 1:
            raise ValueError("weight_every must be positive")
        if self.formulation not in ("composite", "shifted"):
            raise ValueError(f"unknown formulation {self.formulation!r}")


@dataclass
class HierarchySchedule:
    levels: list[LevelSpec]

    def __post_init__(self):
        self.levels = list(self.levels)
        if not self.levels:
            raise ValueError("schedule must contain at least one level")

    @property
    def total_iterations(self) -> int:
        return sum(lv.iterations for lv in self.levels)

    @property
    def transitions(self) -> list[int]:
        return list(np.cumsum([lv.iterations for lv in self.levels])[:-1])


def loss_columns(groups: Sequence[str]) -> list[str]:
    """Trace column per boundary group: a lone group is reported as ``loss_boundary``."""
    if len(groups) == 1:
        return ["loss_boundary"]
    return [f"loss_{g}" for g in groups]


@dataclass
class TrainingTrace:
    groups: list[str]
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        comps = [INTERIOR] + list(self.groups)
        return (
            ["iteration", "level", "loss_interior"]
            + loss_columns(self.groups)
            + [f"lambda_{c}" for c in comps]
            + ["rel_l2_error"]
        )

    def record(self, iteration, level, losses: dict, weights: LossWeights, error=None):
        if self.rows and iteration <= self.rows[-1]["iteration"]:
            raise ValueError("checkpoint iterations must be strictly increasing")
        row = {"iteration": int(iteration), "level": int(level), "loss_interior": losses[INTERIOR]}
        for col, g in zip(loss_columns(self.groups), self.groups):
            row[col] = losses[g]
        for c in [INTERIOR] + list(self.groups):
            row[f"lambda_{c}"] = weights[c]
        row["rel_l2_error"] = float("nan") if error is None else float(error)
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, self.columns, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, level, losses, trace=None):
        self.iteration, self.level, self.losses, self.trace = iteration, level, losses, trace
        comps = ", ".join(f"{k}={v!r}" for k, v in losses.items())
        super().__init__(f"non-finite loss at iteration {iteration} (level {level}): {comps}")


def relative_l2(approx, reference) -> float:
    approx, reference = np.asarray(approx, dtype=float), np.asarray(reference, dtype=float)
    denom = np.linalg.norm(reference)
    if denom == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(approx - reference) / denom)


class Reference:
    """Reference values on fixed points; frozen-level predictions are cached."""

    def __init__(self, points, values):
        self.points = np.asarray(points, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if len(self.points) != len(self.values):
            raise ValueError("reference points and values differ in length")
        self._cache: dict = {}

    def predict(self, composite: CompositeModel) -> np.ndarray:
        out = np.zeros(len(self.points))
        for m, (net, store) in enumerate(composite.levels):
            key = (m, id(store))
            if store.frozen and key in self._cache:
                out = out + self._cache[key]
                continue
            v = evaluate(net, self.points, store)
            if store.frozen:
                self._cache[key] = v
            out = out + v
        return out

    def error(self, composite: CompositeModel) -> float:
        return relative_l2(self.predict(composite), self.values)


def level_seed(seed: int, level: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(level)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# training loop


def train(
    problem: ProblemSpec,
    schedule: HierarchySchedule,
    samples: SampleSet,
    reference: Reference | None = None,
    seed: int = 0,
    stride: int = 100,
    resample: bool = False,
    callback=None,
):
    """Train the levels of ``schedule`` in sequence.

    Parameters
    ----------
    problem, samples
        PDE and collocation points; every level uses the same points unless
        ``resample`` draws fresh ones (same counts) at every iteration.
    reference
        Optional points and values for the relative L2 error column.
    stride
        Checkpoint spacing in (global) iterations; the last iteration of each
        level is always recorded.
    callback
        Called as ``callback(iteration, level, losses, composite)`` after
        every step.

    Returns
    -------
    (CompositeModel, TrainingTrace)

    Raises
    ------
    TrainingDiverged
        On a non-finite loss; the partial trace is attached.
    """
    composite = CompositeModel()
    groups = problem.groups()
    trace = TrainingTrace(groups)
    counts = {name: len(pts) for name, pts in samples.boundary.items()}
    it = 0
    for m, spec in enumerate(schedule.levels):
        net, store = init_network(spec.network, level_seed(seed, m))
        composite.add_level(net, store)
        target = problem
        if spec.formulation == "shifted":
            target = shifted_problem(problem, composite.frozen())
            solo = CompositeModel([(net, store)])
        model = solo if spec.formulation == "shifted" else composite
        objective = LevelObjective(target, model, samples)
        state = AdamState(lr=spec.lr, decay_rate=spec.decay_rate, decay_steps=spec.decay_steps)
        weights = LossWeights.ones(problem)
        stat = _WEIGHTING.get(spec.weighting)
        last = it + spec.iterations
        while it < last:
            if resample:
                fresh = sample(problem, len(samples.interior), counts, level_seed(seed, 10_000 + it))
                objective = LevelObjective(target, model, fresh)
            total, losses = objective.loss(weights)
            if not all(math.isfinite(v) for v in losses.values()):
                raise TrainingDiverged(it + 1, m, losses, trace)
            adam_step(state, store, parameter_gradient(total, store))
            it += 1
            if stat is not None and it % spec.weight_every == 0:
                weights = update_adaptive_weights(stat(objective), weights)
            if it % stride == 0 or it == last:
                err = reference.error(composite) if reference is not None else None
                trace.record(it, m, losses, weights, err)
            if callback is not None:
                callback(it, m, losses, composite)
        log.info("level %d finished at iteration %d: %s", m, it, losses)
    for _, s in composite.levels:
        s.freeze()
    return composite, trace
