"""Central finite-difference verification of every differentiable operator.

Each check builds small float64 leaf tensors, runs a scalar-valued function
through the operator graph, and compares the analytic gradients produced by
``backward`` against central differences with step 1e-4.  The default
tolerance is a max relative error of 1e-3; real agreement is usually far
tighter because the checks run in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-4
MAX_REL_ERROR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def fd_gradient(fn, leaf: Tensor, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of scalar fn() w.r.t. one leaf, central differences."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data)
        flat[i] = orig - step
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn, leaves: dict[str, Tensor], step: float = FD_STEP) -> float:
    """Max relative error between backward() and finite differences.

    fn must rebuild the graph from the current leaf values on every call.
    """
    for leaf in leaves.values():
        leaf.requires_grad = True
        leaf.zero_grad()
    out = fn()
    out.backward()
    worst = 0.0
    for leaf in leaves.values():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = fd_gradient(fn, leaf, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def standard_operator_checks(seed: int = 0) -> list[CheckResult]:
    """The full per-operator suite backing the gradcheck command."""
    rng = _rng(seed)

    def t(*shape, scale=1.0, offset=0.0):
        return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)

    checks: list[CheckResult] = []

    def run(name, fn, leaves):
        err = check_gradients(fn, leaves)
        checks.append(CheckResult(name, err, err <= MAX_REL_ERROR))

    x = t(2, 3, 4, 4)
    y = t(2, 3, 4, 4)
    run("add", lambda: T.add(x, y).sum(), {"x": x, "y": y})
    run("sub", lambda: T.sub(x, y).sum(), {"x": x, "y": y})
    run("mul", lambda: T.mul(x, y).mean(), {"x": x, "y": y})
    yd = Tensor(rng.standard_normal((2, 3, 4, 4)) + 3.0, requires_grad=True)
    run("div", lambda: T.div(x, yd).mean(), {"x": x, "y": yd})

    s = t(2, 1, 4, 4)
    c = t(2, 3, 1, 1)
    run(
        "elementwise_mul broadcast",
        lambda: T.elementwise_mul(T.elementwise_mul(x, s), c).sum(),
        {"x": x, "s": s, "c": c},
    )

    xr = t(2, 3, 4, 4)
    run("relu", lambda: T.relu(xr).sum(), {"x": xr})
    run("sigmoid", lambda: T.sigmoid(x).sum(), {"x": x})
    xs = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)
    run("sqrt", lambda: T.sqrt(xs).sum(), {"x": xs})

    m = t(3, 5)
    w = t(2, 5)
    b = t(2)
    run("linear", lambda: T.linear(m, w, b).sum(), {"x": m, "w": w, "b": b})

    xc = t(2, 3, 4, 4)
    wc = t(2, 3, 3, 3, scale=0.5)
    bc = t(2)
    run(
        "conv2d 3x3 pad1",
        lambda: T.conv2d(xc, wc, bc, stride=1, padding=1).sum(),
        {"x": xc, "w": wc, "b": bc},
    )
    w1 = t(4, 3, 1, 1)
    run("conv2d 1x1", lambda: T.conv2d(xc, w1).mean(), {"x": xc, "w": w1})
    w2 = t(2, 3, 3, 3, scale=0.5)
    run(
        "conv2d 3x3 stride2",
        lambda: T.conv2d(xc, w2, stride=2, padding=1).sum(),
        {"x": xc, "w": w2},
    )

    run("avg_pool_2x2", lambda: T.avg_pool_2x2(xc).sum(), {"x": xc})
    run("global_avg_pool", lambda: T.global_avg_pool(xc).sum(), {"x": xc})

    xb = t(3, 2, 2, 2)
    gb = Tensor(np.abs(rng.standard_normal(2)) + 0.5, requires_grad=True)
    bb = t(2)
    run(
        "batch_norm train",
        lambda: T.batch_norm(
            xb, gb, bb, np.zeros(2), np.ones(2), training=True
        ).sum(),
        {"x": xb, "gamma": gb, "beta": bb},
    )

    xm = t(3, 6)
    run("reduce_max", lambda: T.reduce_max(xm, axis=1).sum(), {"x": xm})
    run("reduce_min", lambda: T.reduce_min(xm, axis=1).sum(), {"x": xm})
    cols = rng.integers(0, 6, size=3)
    run("select_columns", lambda: T.select_columns(xm, cols).sum(), {"x": xm})

    p1 = t(3, 2)
    p2 = t(3, 4)
    run("concat", lambda: T.concat([p1, p2], axis=1).sum(), {"a": p1, "b": p2})
    xn = Tensor(rng.standard_normal((3, 4)) + 2.0, requires_grad=True)
    run("l2_normalize", lambda: T.l2_normalize(xn).sum(), {"x": xn})

    logits = t(4, 5, scale=2.0)
    labels = rng.integers(0, 5, size=4)
    run(
        "cross_entropy",
        lambda: T.cross_entropy(logits, labels),
        {"logits": logits},
    )

    return checks


def loss_checks(seed: int = 1) -> list[CheckResult]:
    """Finite-difference checks for the training losses, 64-bit mode."""
    from . import losses
    from .attention import normalize_spatial

    rng = _rng(seed)
    checks: list[CheckResult] = []

    def run(name, fn, leaves):
        err = check_gradients(fn, leaves)
        checks.append(CheckResult(name, err, err <= MAX_REL_ERROR))

    s = Tensor(rng.uniform(1.05, 1.95, size=(2, 1, 3, 4)), requires_grad=True)
    m = np.clip(rng.uniform(0, 1, size=(2, 1, 3, 4)), 0, 1)
    run(
        "attention_rmse(normalize_spatial)",
        lambda: losses.attention_rmse(normalize_spatial(s), Tensor(m)),
        {"s": s},
    )

    parts = [
        Tensor(rng.uniform(0.1, 2.0, size=()), requires_grad=True) for _ in range(4)
    ]
    run(
        "attention_total",
        lambda: losses.attention_total(*parts, lambda0=0.5),
        {f"l{i}": p for i, p in enumerate(parts)},
    )

    logits = Tensor(rng.standard_normal((6, 4)) * 2.0, requires_grad=True)
    labels = rng.integers(0, 4, size=6)
    run("softmax_loss", lambda: losses.softmax_loss(logits, labels), {"l": logits})

    feats = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    ids = np.repeat(np.arange(2), 4)
    run(
        "batch_hard_triplet",
        lambda: losses.batch_hard_triplet(
            T.l2_normalize(feats), ids, p_ids=2, k_images=4, margin=0.3
        ),
        {"f": feats},
    )

    run(
        "total_loss",
        lambda: losses.total_loss(
            losses.softmax_loss(logits, labels),
            losses.softmax_loss(logits, labels),
            losses.batch_hard_triplet(
                T.l2_normalize(feats), ids, p_ids=2, k_images=4, margin=0.3
            ),
            losses.attention_rmse(normalize_spatial(s), Tensor(m)),
            lambda1=2.0,
            lambda2=0.1,
        ),
        {"logits": logits, "f": feats, "s": s},
    )
    return checks


def run_all(seed: int = 0) -> list[CheckResult]:
    return standard_operator_checks(seed) + loss_checks(seed + 1)
