"""Finite-difference verification for the autodiff engine.

Every differentiable op is checked against central differences in 64-bit,
then two end-to-end checks run a minimal counting model and compare a
small slice of parameter gradients the same way. The suite is fully
seeded; ``run_suite`` returns a result per check so the CLI and the test
suite can report pass/fail lines individually.

Two deliberate exclusions. The bin snap is not checked by finite
differences: its backward pass is identity by construction while its
forward is piecewise constant, so the two disagree everywhere. And the
end-to-end check of the discretized variant perturbs only pathway
parameters, because those are the coordinates where that identity
mismatch cannot leak into the comparison (the response never depends on
them). The continuous variant covers the remaining parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .errors import ConfigError
from .model import ModelConfig, build

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3
STEP = 1e-4  # central-difference h, matched to 64-bit headroom


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True,
                  dtype=np.float64)


def _const(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _probe(out_of, wrt, h=STEP):
    """Max FD error of a scalarized loss over each tensor in ``wrt``.

    ``out_of()`` rebuilds the op output; the loss is its inner product with
    a fixed random probe so every output coordinate influences the scalar.
    """
    probe = Tensor(np.random.default_rng(99).standard_normal(out_of().shape),
                   dtype=np.float64)
    loss = lambda _x: ad.tensor_sum(ad.mul(out_of(), probe))
    return max(finite_diff_check(loss, t, h=h) for t in wrt)


# ---------------------------------------------------------------------------
# Per-op checks
# ---------------------------------------------------------------------------

def _check_conv2d(rng):
    errs = []
    for stride, padding, dilation in ((1, 1, 1), (2, 0, 1), (1, 2, 2)):
        x = _t(rng, (2, 7, 7))
        w = _t(rng, (3, 2, 3, 3))
        b = _t(rng, (3,))
        errs.append(_probe(
            lambda: ad.conv2d(x, w, b, stride=stride, padding=padding,
                              dilation=dilation),
            (x, w, b)))
    return max(errs)


def _check_conv_transpose2d(rng):
    errs = []
    for stride in (1, 2):
        x = _t(rng, (3, 4, 4))
        w = _t(rng, (3, 2, 2, 2))
        errs.append(_probe(lambda: ad.conv_transpose2d(x, w, stride=stride), (x, w)))
    return max(errs)


def _check_max_pool2d(rng):
    # distinct window values with gaps far above h, so the argmax is stable
    vals = rng.permutation(2 * 6 * 6).astype(np.float64) * 0.1
    x = Tensor(vals.reshape(2, 6, 6), requires_grad=True, dtype=np.float64)
    return _probe(lambda: ad.max_pool2d(x, 2), (x,))


def _check_global_avg_pool(rng):
    x = _t(rng, (3, 5, 5))
    return _probe(lambda: ad.global_avg_pool(x), (x,))


def _check_affine(rng):
    x = _t(rng, (6,))
    w = _t(rng, (4, 6))
    b = _t(rng, (4,))
    return _probe(lambda: ad.affine(x, w, b), (x, w, b))


def _check_relu(rng):
    v = rng.standard_normal((3, 5))
    v = np.sign(v) * (np.abs(v) + 0.1)  # keep every input off the kink
    x = Tensor(v, requires_grad=True, dtype=np.float64)
    return _probe(lambda: ad.relu(x), (x,))


def _check_sigmoid(rng):
    x = _t(rng, (3, 5), scale=2.0)
    return _probe(lambda: ad.sigmoid(x), (x,))


def _check_arctan(rng):
    x = _t(rng, (3, 5), scale=2.0)
    return _probe(lambda: ad.arctan(x), (x,))


def _check_scale(rng):
    x = _t(rng, (3, 5))
    return _probe(lambda: ad.scale(x, -1.7), (x,))


def _check_add(rng):
    x, y = _t(rng, (4, 4)), _t(rng, (4, 4))
    return _probe(lambda: ad.add(x, y), (x, y))


def _check_mul(rng):
    x, y = _t(rng, (4, 4)), _t(rng, (4, 4))
    return _probe(lambda: ad.mul(x, y), (x, y))


def _check_tensor_sum(rng):
    x = _t(rng, (3, 4))
    return finite_diff_check(lambda _x: ad.tensor_sum(x), x, h=STEP)


def _check_weighted_sum(rng):
    a, b = _t(rng, (3, 4)), _t(rng, (3, 4))
    w = Tensor(np.array([0.37]), requires_grad=True, dtype=np.float64)
    err = _probe(lambda: ad.weighted_sum(a, b, w), (a, b, w))
    a2, b2 = _t(rng, (3, 4)), _t(rng, (3, 4))
    err2 = _probe(lambda: ad.weighted_sum(a2, b2, 0.3), (a2, b2))
    return max(err, err2)


def _check_mse_density_loss(rng):
    p1, p2 = _t(rng, (1, 4, 4)), _t(rng, (1, 4, 4))
    g1 = _t(rng, (1, 4, 4))
    g2 = _const(rng, (1, 4, 4))
    f = lambda _x: ad.mse_density_loss([p1, p2], [g1, g2])
    return max(finite_diff_check(f, t, h=STEP) for t in (p1, p2, g1))


def _check_composite(rng):
    # conv -> relu -> gap with preactivations kept clear of the relu kink
    for _ in range(100):
        x = Tensor(rng.uniform(-1.0, 1.0, size=(1, 6, 6)), requires_grad=True,
                   dtype=np.float64)
        w = _t(rng, (3, 1, 3, 3))
        b = _t(rng, (3,))
        pre = ad.conv2d(Tensor(x.data, dtype=np.float64), Tensor(w.data, dtype=np.float64),
                        Tensor(b.data, dtype=np.float64), padding=1)
        if np.abs(pre.data).min() > 50 * STEP:
            break
    return _probe(lambda: ad.global_avg_pool(ad.relu(ad.conv2d(x, w, b, padding=1))),
                  (x, w, b))


# ---------------------------------------------------------------------------
# End-to-end model checks
# ---------------------------------------------------------------------------

_MINIMAL = dict(backbone_channels=(4,), backbone_pools=1, dense_kernel=5,
                dense_layers=1, sparse_layers=1, pathway_channels=4,
                adaption_hidden=4, bins=10)

_KINK_MARGIN = 10 * STEP  # clearance a value needs from a kink or tie


def _graph_nodes(root):
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node._parents)


def _kink_report(loss):
    """Locate kink-adjacent coordinates in a recorded forward pass.

    Central differences are only valid where the function is locally
    smooth. A relu preactivation near 0 breaks the FD window of the bias
    feeding it (the bias shifts the whole channel by exactly h), and a
    near-tie inside a max-pool window breaks FD for everything upstream.
    Returns per-channel relu margins keyed by bias tensor id, plus the
    smallest max-vs-runner-up gap over all pool windows.
    """
    bias_margins = {}
    pool_margin = math.inf
    for node in _graph_nodes(loss):
        if node._op == "relu":
            pre = node._parents[0]
            if pre._op in ("conv2d", "affine") and len(pre._parents) == 3:
                bias = pre._parents[2]
                absv = np.abs(pre.data)
                per = absv.min(axis=(1, 2)) if absv.ndim == 3 else absv
                prev = bias_margins.get(id(bias))
                bias_margins[id(bias)] = per if prev is None else np.minimum(prev, per)
        elif node._op == "max_pool2d":
            x = node._parents[0]
            c, h, w = x.shape
            ho, wo = node.shape[1], node.shape[2]
            k = h // ho
            win = (x.data.reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4)
                   .reshape(c, ho, wo, k * k))
            top2 = np.sort(win, axis=3)[..., -2:]
            pool_margin = min(pool_margin, float((top2[..., 1] - top2[..., 0]).min()))
    return bias_margins, pool_margin


def _model_slice_error(model, image, gt, names, rng, per_tensor=4, h=STEP):
    """FD error over a few coordinates of each named parameter tensor.

    Bias coordinates whose relu channel sits within the kink margin are
    excluded; FD is undefined there, not the gradient.
    """
    def loss_value():
        out = model.forward(image)
        return ad.mse_density_loss([out.fused], [gt])

    for p in model.parameters():
        p.zero_grad()
    loss = loss_value()
    bias_margins, _ = _kink_report(loss)
    ad.backward(loss)

    worst = 0.0
    for name in names:
        p = model.params[name]
        eligible = np.arange(p.size)
        margins = bias_margins.get(id(p))
        if margins is not None:
            eligible = eligible[margins > _KINK_MARGIN]
            if eligible.size == 0:
                continue
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in rng.choice(eligible, size=min(per_tensor, eligible.size),
                            replace=False):
            analytic = float(gflat[i])
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_value().item()
            flat[i] = orig - h
            f_minus = loss_value().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def _end_to_end(variant, rng, param_prefixes=None):
    cfg = ModelConfig(variant=variant, **_MINIMAL)
    model = build(cfg, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    for _ in range(200):
        image = Tensor(rng.uniform(0.0, 1.0, size=(1, 12, 12)), dtype=np.float64)
        gt = Tensor(rng.uniform(0.0, 0.05, size=(1, 6, 6)), dtype=np.float64)
        out = model.forward(image)
        _, pool_margin = _kink_report(out.fused)
        frac = out.w_star * cfg.bins
        interior = abs(frac - round(frac)) > 1e-3  # strictly inside its bin
        if pool_margin > _KINK_MARGIN and interior:
            break
    names = sorted(model.params)
    if param_prefixes is not None:
        names = [n for n in names if n.startswith(param_prefixes)]
    return _model_slice_error(model, image, gt, names, rng)


def _check_end_to_end_continuous(rng):
    return _end_to_end("continuous", rng)


def _check_end_to_end_discretized(rng):
    return _end_to_end("discretized", rng, param_prefixes=("dense.", "sparse."))


_REGISTRY = (
    ("conv2d", _check_conv2d, OP_TOL),
    ("conv_transpose2d", _check_conv_transpose2d, OP_TOL),
    ("max_pool2d", _check_max_pool2d, OP_TOL),
    ("global_avg_pool", _check_global_avg_pool, OP_TOL),
    ("affine", _check_affine, OP_TOL),
    ("relu", _check_relu, OP_TOL),
    ("sigmoid", _check_sigmoid, OP_TOL),
    ("arctan", _check_arctan, OP_TOL),
    ("scale", _check_scale, OP_TOL),
    ("add", _check_add, OP_TOL),
    ("mul", _check_mul, OP_TOL),
    ("tensor_sum", _check_tensor_sum, OP_TOL),
    ("weighted_sum", _check_weighted_sum, OP_TOL),
    ("mse_density_loss", _check_mse_density_loss, OP_TOL),
    ("composite_conv_relu_gap", _check_composite, OP_TOL),
    ("end_to_end_continuous", _check_end_to_end_continuous, END_TO_END_TOL),
    ("end_to_end_discretized", _check_end_to_end_discretized, END_TO_END_TOL),
)

CHECK_NAMES = tuple(name for name, _, _ in _REGISTRY)


def run_suite(seed: int = 0, op=None) -> list:
    """Run all checks (or one named ``op``); returns a list of CheckResult."""
    if op is not None and op not in CHECK_NAMES:
        raise ConfigError(f"unknown gradcheck op {op!r}; choose from {CHECK_NAMES}")
    results = []
    for idx, (name, fn, tol) in enumerate(_REGISTRY):
        if op is not None and name != op:
            continue
        rng = np.random.default_rng([seed, idx])
        t0 = time.perf_counter()
        err = float(fn(rng))
        results.append(CheckResult(name=name, max_rel_error=err, tolerance=tol,
                                   seconds=time.perf_counter() - t0))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{status} {r.name:28s} max_rel_err={r.max_rel_error:.3e} "
                     f"tol={r.tolerance:.0e} ({r.seconds:.2f}s)")
    return "\n".join(lines)
