"""Self-verification: finite-difference gradient checks and dense-oracle comparisons.

Every check returns a :class:`CheckResult` with the largest error it saw. The
kernels under test are looked up in a table so a caller can swap one out (for
instance with a deliberately broken version) and confirm the suite notices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gnn, oracles
from . import tensor_core as tc
from .graph import GraphOperators, graph_from_adjacency
from .losses import hidden_layer_loss
from .tensor_core import SparseMatrix, Tensor
from .unet import UNet, UNetConfig

FD_STEP = 1e-5
GRAD_TOL = 1e-4
# denominator floor for the relative error, so coordinates whose true
# gradient is ~0 are judged on absolute error instead
REL_FLOOR = 1e-6
ORACLE_TOL = 1e-12
KERNEL_ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    kind: str  # "grad" or "oracle"
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.kind}\t{self.name}\tmax_err={self.max_error:.3e}\ttol={self.tolerance:.0e}"


def default_kernels() -> dict[str, Callable]:
    return {
        "conv2d": tc.conv2d,
        "avg_pool2": tc.avg_pool2,
        "upsample_nearest2": tc.upsample_nearest2,
        "spmm": tc.spmm,
        "cheb": gnn.cheb_forward,
        "sage": gnn.sage_forward,
        "sg": gnn.sg_forward,
        "ensemble_block": gnn.ensemble_block_forward,
    }


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _pick_coords(rng, shape, limit):
    total = int(np.prod(shape))
    flat = np.arange(total) if total <= limit else rng.choice(total, size=limit, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def grad_check(fn: Callable[..., Tensor], arrays: list[np.ndarray], rng, max_coords: int = 40,
               params: list[tc.Parameter] = (), h: float = FD_STEP) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps Tensors built from ``arrays`` to an output tensor; the scalar
    under test is sum(out * R) for a fixed random R. ``params`` are float64
    Parameters that ``fn`` closes over; they are perturbed in place.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    for p in params:
        p.zero_grad()
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    tc.backward(tc.tsum(tc.mul(out, Tensor(weights))))
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    analytic += [p.grad.copy() for p in params]

    def scalar():
        with tc.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    worst = 0.0
    for arr, grad in zip(arrays + [p.data for p in params], analytic):
        coords = _pick_coords(rng, arr.shape, max_coords)
        if not coords:
            continue
        numeric = oracles.central_differences(scalar, [arr], [coords], h)[0]
        picked = np.array([grad[c] for c in coords])
        worst = max(worst, float(np.max(relative_error(picked, numeric))))
    return worst


# ---------------------------------------------------------------- graph helpers


def random_operators(rng, n: int) -> tuple[np.ndarray, GraphOperators]:
    a = oracles.random_adjacency(rng, n)
    return a, GraphOperators.from_graph(graph_from_adjacency(a))


def _members_for(rng, f_in, f_out, cheb_k=3, sg_k=5):
    return gnn.EnsembleBlock(f_in, f_out, cheb_k, sg_k, rng=rng, dtype=np.float64)


# ---------------------------------------------------------------- oracle checks


def oracle_checks(kernels: dict[str, Callable], rng, n_graphs: int = 200) -> list[CheckResult]:
    k = kernels
    results = []
    conv_err = 0.0
    for shape, c_out, size in [((1, 4, 4), 1, 3), ((3, 5, 6), 4, 3), ((2, 4, 3), 3, 1)]:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((c_out, shape[0], size, size))
        b = rng.standard_normal(c_out)
        got = k["conv2d"](Tensor(x), Tensor(w), Tensor(b)).data
        conv_err = max(conv_err, float(np.max(np.abs(got - oracles.conv2d_loops(x, w, b)))))
    results.append(CheckResult("conv2d", "oracle", conv_err, ORACLE_TOL))

    x = rng.standard_normal((3, 6, 8))
    pool_err = float(np.max(np.abs(k["avg_pool2"](Tensor(x)).data - oracles.avg_pool2_loops(x))))
    results.append(CheckResult("avg_pool2", "oracle", pool_err, ORACLE_TOL))

    x = rng.standard_normal((2, 3, 4))
    want = x.repeat(2, axis=1).repeat(2, axis=2)
    up_err = float(np.max(np.abs(k["upsample_nearest2"](Tensor(x)).data - want)))
    results.append(CheckResult("upsample_nearest2", "oracle", up_err, ORACLE_TOL))

    spmm_err = 0.0
    for _ in range(20):
        dense = rng.standard_normal((6, 6)) * (rng.random((6, 6)) < 0.4)
        x = rng.standard_normal((6, 3))
        got = k["spmm"](SparseMatrix.from_dense(dense), Tensor(x)).data
        spmm_err = max(spmm_err, float(np.max(np.abs(got - dense @ x))))
    results.append(CheckResult("spmm", "oracle", spmm_err, ORACLE_TOL))

    adj_err = lap_err = 0.0
    errs = {"cheb": 0.0, "sage": 0.0, "sg": 0.0, "ensemble_block": 0.0}
    for _ in range(n_graphs):
        n = int(rng.integers(1, 13))
        f_in, f_out = (int(v) for v in rng.integers(1, 6, size=2))
        a, ops = random_operators(rng, n)
        adj_err = max(adj_err, float(np.max(np.abs(ops.s_hat.to_dense() - oracles.dense_normalized_adjacency(a)))))
        lap_err = max(lap_err, float(np.max(np.abs(ops.l_tilde.to_dense() - oracles.dense_scaled_laplacian(a)))))
        x = rng.standard_normal((n, f_in))
        cw = [rng.standard_normal((f_in, f_out)) for _ in range(3)]
        b = rng.standard_normal(f_out)
        got = k["cheb"](Tensor(x), ops.l_tilde, [Tensor(w) for w in cw], Tensor(b)).data
        errs["cheb"] = max(errs["cheb"], float(np.max(np.abs(got - oracles.cheb_dense(x, a, cw, b)))))
        ws, wn = rng.standard_normal((2, f_in, f_out))
        got = k["sage"](Tensor(x), ops.mean_adj, Tensor(ws), Tensor(wn), Tensor(b)).data
        errs["sage"] = max(errs["sage"], float(np.max(np.abs(got - oracles.sage_loops(x, a, ws, wn, b)))))
        w = rng.standard_normal((f_in, f_out))
        got = k["sg"](Tensor(x), ops.s_hat, Tensor(w), Tensor(b), 5).data
        errs["sg"] = max(errs["sg"], float(np.max(np.abs(got - oracles.sg_dense(x, a, w, b, 5)))))

        block = _members_for(rng, f_in, f_out)
        c, s, g = block.members
        got = k["ensemble_block"](Tensor(x), ops, block.members).data
        want = (oracles.cheb_dense(x, a, [p.data for p in c.weights], c.bias.data)
                + oracles.sage_loops(x, a, s.w_self.data, s.w_neigh.data, s.bias.data)
                + oracles.sg_dense(x, a, g.weight.data, g.bias.data, g.k)) / 3.0
        errs["ensemble_block"] = max(errs["ensemble_block"], float(np.max(np.abs(got - want))))
    results.append(CheckResult("normalized_adjacency", "oracle", adj_err, ORACLE_TOL))
    results.append(CheckResult("scaled_laplacian", "oracle", lap_err, ORACLE_TOL))
    for name, err in errs.items():
        results.append(CheckResult(name, "oracle", err, KERNEL_ORACLE_TOL))
    return results


# ---------------------------------------------------------------- gradient checks


def grad_checks(kernels: dict[str, Callable], rng) -> list[CheckResult]:
    k = kernels
    r = rng
    out = []

    def add(name, fn, arrays, max_coords=40, params=()):
        out.append(CheckResult(name, "grad", grad_check(fn, arrays, r, max_coords, params), GRAD_TOL))

    add("add_broadcast", lambda a, b: tc.add(a, b), [r.standard_normal((3, 4)), r.standard_normal(4)])
    add("mul_broadcast", lambda a, b: tc.mul(a, b), [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))])
    add("scale_neg", lambda a: tc.neg(tc.scale(a, 1.7)), [r.standard_normal((5,))])
    add("relu", tc.relu, [_away_from_zero(r, (4, 5))])
    add("square", tc.square, [r.standard_normal((3, 3))])
    add("sum_mean", lambda a: tc.add(tc.tsum(a, axis=0), tc.mean(a, axis=0)), [r.standard_normal((4, 3))])
    add("reshape_transpose", lambda a: tc.transpose(tc.reshape(a, (3, 2, 2)), (2, 0, 1)),
        [r.standard_normal((4, 3))])
    add("concat", lambda a, b: tc.concat([a, b], axis=1), [r.standard_normal((2, 3)), r.standard_normal((2, 2))])
    add("matmul", tc.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))])
    add("linear", tc.linear, [r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)])
    add("pad_crop", lambda a: tc.crop_top_left(tc.pad_bottom_right(a, 2, 1), 4, 3), [r.standard_normal((2, 3, 3))])
    add("mse", lambda a, b: tc.mse(a, b), [r.standard_normal((3, 4)), r.standard_normal((3, 4))])

    add("conv2d", lambda x, w, b: k["conv2d"](x, w, b),
        [r.standard_normal((2, 3, 5, 4)), r.standard_normal((2, 3, 3, 3)), r.standard_normal(2)])
    add("conv2d_1x1", lambda x, w, b: k["conv2d"](x, w, b),
        [r.standard_normal((3, 4, 4)), r.standard_normal((2, 3, 1, 1)), r.standard_normal(2)])
    add("avg_pool2", lambda x: k["avg_pool2"](x), [r.standard_normal((2, 4, 6))])
    add("upsample_nearest2", lambda x: k["upsample_nearest2"](x), [r.standard_normal((2, 3, 2))])

    dense = r.standard_normal((5, 4)) * (r.random((5, 4)) < 0.5)
    dense[0, 0] = 1.0
    sm = SparseMatrix.from_dense(dense)
    add("spmm", lambda x: k["spmm"](sm, x), [r.standard_normal((2, 4, 3))])
    add("spmm_values", lambda x, v: k["spmm"](sm, x, v), [r.standard_normal((4, 3)), r.standard_normal(sm.nnz)])

    a, ops = random_operators(r, 7)
    f_in, f_out = 3, 2
    add("cheb", lambda x, w0, w1, w2, b: k["cheb"](x, ops.l_tilde, [w0, w1, w2], b),
        [r.standard_normal((7, f_in))] + [r.standard_normal((f_in, f_out)) for _ in range(3)]
        + [r.standard_normal(f_out)])
    add("sage", lambda x, ws, wn, b: k["sage"](x, ops.mean_adj, ws, wn, b),
        [r.standard_normal((7, f_in)), r.standard_normal((f_in, f_out)), r.standard_normal((f_in, f_out)),
         r.standard_normal(f_out)])
    add("sg", lambda x, w, b: k["sg"](x, ops.s_hat, w, b, 5),
        [r.standard_normal((7, f_in)), r.standard_normal((f_in, f_out)), r.standard_normal(f_out)])

    block = _members_for(r, f_in, f_out)
    _jitter(block, r)
    add("ensemble_block", lambda x: k["ensemble_block"](x, ops, block.members), [r.standard_normal((7, f_in))],
        params=block.parameters())

    for name, cls in [("graph_ensemble_net", gnn.GraphEnsembleNet), ("graph_resnet", gnn.GraphResNet)]:
        net = cls(in_features=4, hidden=3, blocks=2, out_features=2, seed=int(r.integers(1 << 30)),
                  dtype=np.float64)
        _jitter(net, r)
        add(name, lambda x, net=net: net(x, ops), [r.standard_normal((2, 7, 4))], max_coords=12,
            params=net.parameters())

    cfg = UNetConfig(depth=2, base_channels=2, in_channels=3, out_channels=4)
    unet = UNet(cfg, seed=int(r.integers(1 << 30)), dtype=np.float64)
    _jitter(unet, r)
    add("unet_d2", lambda x: unet(x), [r.standard_normal((3, 8, 8))], max_coords=8,
        params=[p for name, p in unet.named_parameters() if not name.startswith("adapter.")])

    frozen = UNet(UNetConfig(depth=2, base_channels=2, in_channels=3, out_channels=4),
                  seed=int(r.integers(1 << 30)), dtype=np.float64)
    _jitter(frozen, r)
    target = r.standard_normal((4, 8, 8))
    weights = [0.4, 0.35, 0.25]

    def hidden(pred):
        return hidden_layer_loss(pred, target, frozen.encode_frames, weights)

    add("hidden_layer_loss", hidden, [r.standard_normal((4, 8, 8))], max_coords=30)
    return out


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _jitter(module, rng):
    """Give zero-initialised biases random values so every path carries gradient."""
    for _, p in module.named_parameters():
        if not np.any(p.data):
            p.data = rng.standard_normal(p.shape) * 0.1


def run_all(seed: int = 0, overrides: dict[str, Callable] | None = None, n_graphs: int = 200) -> list[CheckResult]:
    kernels = default_kernels()
    kernels.update(overrides or {})
    rng = np.random.default_rng(seed)
    return oracle_checks(kernels, rng, n_graphs) + grad_checks(kernels, rng)


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"# {len(results) - len(failed)}/{len(results)} checks passed"
                 + (f"; failed: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines) + "\n"
