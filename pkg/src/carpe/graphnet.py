"""Social context: node embedding plus one GIN-style aggregation over a
fully-connected pedestrian graph.

    h   = rho([A_i, R_i])
    h'_i = phi0((1 + eps) * h_i) + phi1(sum_{j != i} h_j)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, n_in: int, n_out: int) -> "Dense":
        return cls(uniform_init(rng, (n_out, n_in), n_in), zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.W, self.b)


@dataclass
class MLP:
    """Two dense layers with a ReLU between them and a linear output."""

    first: Dense
    second: Dense

    @classmethod
    def init(cls, rng, n_in: int, n_hidden: int, n_out: int) -> "MLP":
        return cls(Dense.init(rng, n_in, n_hidden), Dense.init(rng, n_hidden, n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(tc.relu(self.first(x)))

    def tensors(self) -> list[Tensor]:
        return [self.first.W, self.first.b, self.second.W, self.second.b]


@dataclass
class GraphParams:
    rho: Dense
    phi0: MLP
    phi1: MLP
    epsilon: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, beta: int) -> "GraphParams":
        # rho: 4b -> 8b; phi0/phi1: 8b -> 4b -> 2b
        return cls(
            rho=Dense.init(rng, 4 * beta, 8 * beta),
            phi0=MLP.init(rng, 8 * beta, 4 * beta, 2 * beta),
            phi1=MLP.init(rng, 8 * beta, 4 * beta, 2 * beta),
            epsilon=zeros(1),
        )

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("rho.W", self.rho.W), ("rho.b", self.rho.b)]
        for name, mlp in (("phi0", self.phi0), ("phi1", self.phi1)):
            out += [(f"{name}.W1", mlp.first.W), (f"{name}.b1", mlp.first.b),
                    (f"{name}.W2", mlp.second.W), (f"{name}.b2", mlp.second.b)]
        out.append(("epsilon", self.epsilon))
        return out


@dataclass
class NodeFeatures:
    h: Tensor
    h_prime: Tensor


def node_inputs(A: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Concatenate flattened absolute and relative tracks: P x 4*beta.

    Flattening is time-major with (x, y) innermost.
    """
    A = np.asarray(A)
    R = np.asarray(R)
    if A.shape != R.shape or A.ndim != 3:
        raise tc.ShapeError(f"absolute {A.shape} and relative {R.shape} tracks must both be P x beta x 2")
    if A.shape[0] == 0:
        raise ValueError("graph needs at least one pedestrian")
    p = A.shape[0]
    return np.concatenate([A.reshape(p, -1), R.reshape(p, -1)], axis=1)


def embed_nodes(A: np.ndarray, R: np.ndarray, params: GraphParams) -> Tensor:
    x = Tensor(node_inputs(A, R), dtype=params.rho.W.dtype)
    return params.rho(x)


def _neighbour_index(counts: Sequence[int]) -> np.ndarray:
    """src[r, j] = row of the j-th member of r's graph, or -1 for self/absent."""
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    width = int(counts.max()) if len(counts) else 0
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(n) - starts
    size = np.repeat(counts, counts)
    j = np.arange(width)[None, :]
    src = starts[:, None] + j
    src[(j >= size[:, None]) | (j == local[:, None])] = -1
    return src


def _neighbour_apply(h: np.ndarray, src: np.ndarray) -> np.ndarray:
    s = np.zeros_like(h)
    for j in range(src.shape[1]):
        rows = np.flatnonzero(src[:, j] >= 0)
        s[rows] += h[src[rows, j]]
    return s


def neighborhood_sum(h: Tensor, counts: Sequence[int] | None = None) -> Tensor:
    """``s[i] = sum of h[j] over the other members of i's graph``.

    ``counts`` splits the rows into consecutive independent graphs (one per
    frame); by default all rows form one graph. Terms are added in index
    order, so the result matches a plain double loop bit for bit.
    """
    if counts is None:
        counts = [h.shape[0]]
    if sum(counts) != h.shape[0]:
        raise tc.ShapeError(f"graph sizes {list(counts)} do not cover {h.shape[0]} rows")
    src = _neighbour_index(counts)
    out = _neighbour_apply(h.data, src)
    # the operator is symmetric, so its adjoint is itself
    return tc.make_op("neighborhood_sum", (h,), out, lambda g: (_neighbour_apply(g, src),))


def gin_layer(h: Tensor, params: GraphParams, counts: Sequence[int] | None = None) -> Tensor:
    if h.ndim != 2 or h.shape[1] != params.phi0.first.W.shape[1]:
        raise tc.ShapeError(f"node features {h.shape} do not match phi input width "
                            f"{params.phi0.first.W.shape[1]}")
    alpha = tc.add(params.epsilon, 1.0)
    self_term = params.phi0(tc.mul(h, alpha))
    social_term = params.phi1(neighborhood_sum(h, counts))
    return tc.add(self_term, social_term)


def graph_forward(sample, params: GraphParams, counts: Sequence[int] | None = None) -> NodeFeatures:
    """Embed then aggregate. ``sample`` needs ``obs_abs`` and ``obs_rel``."""
    h = embed_nodes(sample.obs_abs, sample.obs_rel, params)
    return NodeFeatures(h, gin_layer(h, params, counts))
