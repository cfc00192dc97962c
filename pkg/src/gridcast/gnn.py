"""Graph convolution kernels, the averaging ensemble block and the two graph networks.

Node features are (N, F) or batched (B, N, F); every kernel maps the last
axis F_in -> F_out and shares the graph operators across the batch.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .features import GNN_CHANNELS
from .graph import GraphOperators
from .nn import Module, glorot
from .tensor_core import Tensor, add, linear, relu, scale, spmm

OUT_CHANNELS = 96
OUT_INIT_SCALE = 0.1


def _check_nodes(x: Tensor, n: int, f_in: int, what: str):
    if x.ndim not in (2, 3) or x.shape[-2] != n:
        raise ShapeError(f"{what}: features {x.shape} do not fit a {n}-node operator")
    if x.shape[-1] != f_in:
        raise ShapeError(f"{what}: expected {f_in} input features, got {x.shape[-1]}")


class ChebConv(Module):
    """Chebyshev filter sum_k T_k(L~) x W_k + b on the scaled Laplacian."""

    def __init__(self, f_in: int, f_out: int, k: int = 3, rng=None, dtype=np.float32):
        super().__init__(dtype)
        if k < 1:
            raise ValueError("Chebyshev order must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.f_in, self.f_out, self.k = f_in, f_out, k
        self.weights = [self.param(f"w{i}", glorot(rng, f_in, f_out)) for i in range(k)]
        self.bias = self.param("b", np.zeros(f_out))

    def __call__(self, x: Tensor, ops: GraphOperators) -> Tensor:
        return cheb_forward(x, ops.l_tilde, self.weights, self.bias)


def cheb_forward(x: Tensor, l_tilde, weights, bias) -> Tensor:
    _check_nodes(x, l_tilde.n_rows, weights[0].shape[0], "cheb")
    t_prev, t_cur = None, x
    out = linear(x, weights[0])
    for k in range(1, len(weights)):
        if k == 1:
            t_next = spmm(l_tilde, t_cur)
        else:
            t_next = scale(spmm(l_tilde, t_cur), 2.0) - t_prev
        out = out + linear(t_next, weights[k])
        t_prev, t_cur = t_cur, t_next
    return add(out, bias)


class SageConv(Module):
    """x W_self + mean_neighbours(x) W_neigh + b."""

    def __init__(self, f_in: int, f_out: int, rng=None, dtype=np.float32):
        super().__init__(dtype)
        rng = rng or np.random.default_rng(0)
        self.f_in, self.f_out = f_in, f_out
        self.w_self = self.param("w_self", glorot(rng, f_in, f_out))
        self.w_neigh = self.param("w_neigh", glorot(rng, f_in, f_out))
        self.bias = self.param("b", np.zeros(f_out))

    def __call__(self, x: Tensor, ops: GraphOperators) -> Tensor:
        return sage_forward(x, ops.mean_adj, self.w_self, self.w_neigh, self.bias)


def sage_forward(x: Tensor, mean_adj, w_self, w_neigh, bias) -> Tensor:
    _check_nodes(x, mean_adj.n_rows, w_self.shape[0], "sage")
    return add(linear(x, w_self) + linear(spmm(mean_adj, x), w_neigh), bias)


class SgConv(Module):
    """S^K x W + b with K propagation steps on the self-looped normalised adjacency."""

    def __init__(self, f_in: int, f_out: int, k: int = 5, rng=None, dtype=np.float32):
        super().__init__(dtype)
        rng = rng or np.random.default_rng(0)
        self.f_in, self.f_out, self.k = f_in, f_out, k
        self.weight = self.param("w", glorot(rng, f_in, f_out))
        self.bias = self.param("b", np.zeros(f_out))

    def __call__(self, x: Tensor, ops: GraphOperators) -> Tensor:
        return sg_forward(x, ops.s_hat, self.weight, self.bias, self.k)


def sg_forward(x: Tensor, s_hat, weight, bias, k: int = 5) -> Tensor:
    _check_nodes(x, s_hat.n_rows, weight.shape[0], "sg")
    h = x
    for _ in range(k):
        h = spmm(s_hat, h)
    return linear(h, weight, bias)


class EnsembleBlock(Module):
    """Mean of a ChebConv, a SageConv and an SgConv applied to the same input."""

    def __init__(self, f_in: int, f_out: int, cheb_k: int = 3, sg_k: int = 5, rng=None, dtype=np.float32):
        super().__init__(dtype)
        rng = rng or np.random.default_rng(0)
        self.members = [
            self.child("cheb", ChebConv(f_in, f_out, cheb_k, rng, dtype)),
            self.child("sage", SageConv(f_in, f_out, rng, dtype)),
            self.child("sg", SgConv(f_in, f_out, sg_k, rng, dtype)),
        ]

    def __call__(self, x: Tensor, ops: GraphOperators) -> Tensor:
        return ensemble_block_forward(x, ops, self.members)


def ensemble_block_forward(x: Tensor, ops: GraphOperators, members) -> Tensor:
    outs = [m(x, ops) for m in members]
    shapes = {o.shape for o in outs}
    if len(shapes) != 1:
        raise ShapeError(f"ensemble members disagree on output shape: {shapes}")
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return scale(total, 1.0 / len(outs))


class _ResidualGraphNet(Module):
    kind = ""

    def __init__(self, in_features: int = GNN_CHANNELS, hidden: int = 64, blocks: int = 4,
                 out_features: int = OUT_CHANNELS, cheb_k: int = 3, sg_k: int = 5,
                 seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        rng = np.random.default_rng(seed)
        self.in_features, self.hidden, self.out_features = in_features, hidden, out_features
        self.cheb_k, self.sg_k = cheb_k, sg_k
        self.w_in = self.param("in.w", glorot(rng, in_features, hidden))
        self.b_in = self.param("in.b", np.zeros(hidden))
        self.blocks = [self.child(f"block{i}", self._make_block(rng)) for i in range(blocks)]
        # the residual stack grows activations, so start the readout small
        self.w_out = self.param("out.w", OUT_INIT_SCALE * glorot(rng, hidden, out_features))
        self.b_out = self.param("out.b", np.zeros(out_features))

    def _make_block(self, rng) -> Module:
        raise NotImplementedError

    def config(self) -> dict:
        return {"hidden": self.hidden, "blocks": len(self.blocks), "cheb_k": self.cheb_k, "sg_k": self.sg_k}

    def __call__(self, x, ops: GraphOperators) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.kind}: expected {self.in_features} node features, got {x.shape[-1]}")
        h = linear(x, self.w_in, self.b_in)
        for block in self.blocks:
            h = h + relu(block(h, ops))
        return linear(h, self.w_out, self.b_out)


class GraphEnsembleNet(_ResidualGraphNet):
    kind = "ensemble"

    def _make_block(self, rng):
        return EnsembleBlock(self.hidden, self.hidden, self.cheb_k, self.sg_k, rng, self.dtype)


class GraphResNet(_ResidualGraphNet):
    """Same residual skeleton with a single ChebConv per block."""

    kind = "resnet"

    def _make_block(self, rng):
        return ChebConv(self.hidden, self.hidden, self.cheb_k, rng, self.dtype)


def graph_ensemble_net_forward(net: GraphEnsembleNet, features, ops: GraphOperators) -> Tensor:
    return net(features, ops)


def graph_resnet_forward(net: GraphResNet, features, ops: GraphOperators) -> Tensor:
    return net(features, ops)
