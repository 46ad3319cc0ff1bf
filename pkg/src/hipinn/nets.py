"""Network architectures: tanh MLPs and Fourier-feature embedded networks.

A network object is a *builder*: called with an input :class:`~hipinn.engine.Jet`
and a :class:`~hipinn.engine.ParameterStore` it returns the jet of its scalar
output. Networks are split into ``prepare`` (everything that depends on the
inputs only, such as Fourier embeddings) and ``apply`` (the trainable part) so
that training loops can cache the former.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .engine import Jet, Node, ParameterStore, concat_jets

__all__ = [
    "MlpSpec",
    "FourierEmbeddingSpec",
    "FourierNetSpec",
    "FourierEmbedding",
    "MLP",
    "FourierNet",
    "init_network",
    "embed",
    "spec_from_dict",
    "spec_to_dict",
    "dump_parameters",
    "parse_parameters",
]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive widths")
        if self.output_dim != 1:
            raise ValueError("only scalar outputs are supported")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class FourierEmbeddingSpec:
    """One random Fourier embedding: ``x -> [a cos(Bx); a sin(Bx)]``.

    ``B`` has shape ``(num_features, input_dim)`` with N(0, sigma^2) entries
    and is drawn when the network is initialized.
    """

    sigma: float
    num_features: int = 100
    scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.num_features < 1:
            raise ValueError("num_features must be positive")
        if self.scale is not None:
            scale = tuple(float(a) for a in self.scale)
            if len(scale) != self.num_features or min(scale) <= 0:
                raise ValueError("scale must hold num_features positive entries")
            object.__setattr__(self, "scale", scale)


@dataclass(frozen=True)
class FourierNetSpec:
    """Embeddings -> shared extractor MLP -> concatenation -> dense tanh -> linear."""

    input_dim: int
    embeddings: tuple[FourierEmbeddingSpec, ...]
    extractor_widths: tuple[int, ...] = (200, 200, 200)
    dense_head_width: int = 200
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "embeddings", tuple(self.embeddings))
        object.__setattr__(self, "extractor_widths", tuple(int(w) for w in self.extractor_widths))
        if not self.embeddings:
            raise ValueError("at least one embedding is required")
        if len({e.num_features for e in self.embeddings}) != 1:
            raise ValueError("embeddings must share num_features to share the extractor")
        if self.dense_head_width < 1:
            raise ValueError("dense_head_width must be positive")
        if self.output_dim != 1:
            raise ValueError("only scalar outputs are supported")
        # validates widths
        self.extractor

    @property
    def embedded_dim(self) -> int:
        return 2 * self.embeddings[0].num_features

    @property
    def extractor(self) -> MlpSpec:
        return MlpSpec(self.embedded_dim, self.extractor_widths)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class FourierEmbedding:
    """A Fourier embedding with its wavenumber matrix fixed."""

    def __init__(self, B, scale=None):
        self.B = np.asarray(B, dtype=float)
        m = self.B.shape[0]
        self.scale = np.ones(m) if scale is None else np.asarray(scale, dtype=float)
        self._a2 = np.concatenate([self.scale, self.scale])

    @property
    def num_features(self):
        return self.B.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.B.shape[1]:
            raise ValueError(f"input dimension {x.shape[-1]} does not match {self.B.shape[1]}")
        z = x @ self.B.T
        return np.concatenate([self.scale * np.cos(z), self.scale * np.sin(z)], axis=-1)

    def jet(self, X: Jet) -> Jet:
        z = X.affine(_const(self.B.T))
        return concat_jets([z.cos(), z.sin()]) * self._a2


def _const(a):
    return Node(np.asarray(a, dtype=float))


def embed(x, emb: FourierEmbedding):
    """``[a cos(Bx); a sin(Bx)]`` for one point or a batch."""
    return emb(x)


def _dense_stack(h: Jet, store: ParameterStore, prefix: str, depth: int) -> Jet:
    for i in range(depth):
        h = h.affine(store.node(f"{prefix}.{i}.W"), store.node(f"{prefix}.{i}.b")).tanh()
    return h


class MLP:
    """Plain tanh MLP with a linear scalar output."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.input_dim = spec.input_dim

    @property
    def layout(self):
        widths = (self.spec.input_dim,) + self.spec.hidden_widths
        layout = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layout += [(f"hidden.{i}.W", (a, b)), (f"hidden.{i}.b", (b,))]
        layout += [("out.W", (widths[-1], 1)), ("out.b", (1,))]
        return layout

    def init_values(self, rng) -> np.ndarray:
        parts = []
        for name, shape in self.layout:
            parts.append(_glorot(rng, *shape).ravel() if name.endswith("W") else np.zeros(shape))
        return np.concatenate(parts)

    def prepare(self, X: Jet) -> Jet:
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"input dimension {X.shape[-1]} does not match {self.input_dim}")
        return X

    def apply(self, prepared: Jet, store: ParameterStore) -> Jet:
        h = _dense_stack(prepared, store, "hidden", len(self.spec.hidden_widths))
        return h.affine(store.node("out.W"), store.node("out.b"))[..., 0]

    def __call__(self, X: Jet, store: ParameterStore) -> Jet:
        return self.apply(self.prepare(X), store)

    def fixed_arrays(self):
        return {}


class FourierNet:
    """Fourier-feature embedded network sharing one extractor across embeddings."""

    def __init__(self, spec: FourierNetSpec, embeddings: list[FourierEmbedding]):
        self.spec = spec
        self.input_dim = spec.input_dim
        self.embeddings = embeddings

    @property
    def layout(self):
        widths = (self.spec.embedded_dim,) + self.spec.extractor_widths
        layout = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layout += [(f"extractor.{i}.W", (a, b)), (f"extractor.{i}.b", (b,))]
        concat_width = widths[-1] * len(self.embeddings)
        d = self.spec.dense_head_width
        layout += [("dense.W", (concat_width, d)), ("dense.b", (d,))]
        layout += [("out.W", (d, 1)), ("out.b", (1,))]
        return layout

    def init_values(self, rng) -> np.ndarray:
        parts = []
        for name, shape in self.layout:
            parts.append(_glorot(rng, *shape).ravel() if name.endswith("W") else np.zeros(shape))
        return np.concatenate(parts)

    def prepare(self, X: Jet) -> list[Jet]:
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"input dimension {X.shape[-1]} does not match {self.input_dim}")
        return [emb.jet(X) for emb in self.embeddings]

    def apply(self, prepared: list[Jet], store: ParameterStore) -> Jet:
        depth = len(self.spec.extractor_widths)
        feats = [_dense_stack(e, store, "extractor", depth) for e in prepared]
        h = feats[0] if len(feats) == 1 else concat_jets(feats)
        h = h.affine(store.node("dense.W"), store.node("dense.b")).tanh()
        return h.affine(store.node("out.W"), store.node("out.b"))[..., 0]

    def __call__(self, X: Jet, store: ParameterStore) -> Jet:
        return self.apply(self.prepare(X), store)

    def fixed_arrays(self):
        return {f"embedding.{i}.B": e.B for i, e in enumerate(self.embeddings)}


def init_network(spec, seed: int):
    """Build a network and its Glorot-normal initialized parameters.

    The seeded generator first draws every embedding's wavenumber matrix, in
    order, then the weights layer by layer. Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    if isinstance(spec, MlpSpec):
        net = MLP(spec)
    elif isinstance(spec, FourierNetSpec):
        embs = []
        for e in spec.embeddings:
            B = rng.normal(0.0, e.sigma, size=(e.num_features, spec.input_dim))
            embs.append(FourierEmbedding(B, e.scale))
        net = FourierNet(spec, embs)
    else:
        raise TypeError(f"unknown network spec {type(spec).__name__}")
    store = ParameterStore(net.layout, net.init_values(rng))
    return net, store


# ---------------------------------------------------------------------------
# config and snapshot serialization


def spec_from_dict(d: dict, input_dim: int):
    kind = d.get("type", "mlp")
    if kind == "mlp":
        return MlpSpec(input_dim, tuple(d["hidden"]))
    if kind == "fourier":
        m = int(d.get("features", 100))
        sigmas = d["sigmas"]
        if isinstance(sigmas, (int, float)):
            sigmas = [sigmas]
        return FourierNetSpec(
            input_dim,
            tuple(FourierEmbeddingSpec(float(s), m) for s in sigmas),
            tuple(d.get("extractor", (200, 200, 200))),
            int(d.get("dense", 200)),
        )
    raise ValueError(f"unknown network type {kind!r}")


def spec_to_dict(spec) -> dict:
    if isinstance(spec, MlpSpec):
        return {"type": "mlp", "hidden": list(spec.hidden_widths)}
    return {
        "type": "fourier",
        "sigmas": [e.sigma for e in spec.embeddings],
        "features": spec.embeddings[0].num_features,
        "extractor": list(spec.extractor_widths),
        "dense": spec.dense_head_width,
    }


_HEADER = "# hipinn-parameters "


def dump_parameters(store: ParameterStore, fixed: dict | None = None) -> str:
    """Text snapshot: a JSON layout header line, then one value per line."""
    header = {
        "layout": [[name, list(shape)] for name, shape in store.layout],
        "frozen": store.frozen,
        "fixed": {k: np.asarray(v).tolist() for k, v in (fixed or {}).items()},
    }
    lines = [_HEADER + json.dumps(header)]
    lines += [repr(float(v)) for v in store.values]
    return "\n".join(lines) + "\n"


def parse_parameters(text: str):
    first, _, rest = text.partition("\n")
    if not first.startswith(_HEADER):
        raise ValueError("not a parameter snapshot")
    header = json.loads(first[len(_HEADER) :])
    values = np.array([float(v) for v in rest.split()], dtype=float)
    store = ParameterStore(header["layout"], values, header["frozen"])
    fixed = {k: np.asarray(v, dtype=float) for k, v in header["fixed"].items()}
    return store, fixed
