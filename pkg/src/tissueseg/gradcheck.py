"""Finite-difference verification of analytic gradients.

Each check compares the autodiff gradient of a scalar function with central
differences.  The reported error for a parameter group is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
checked entries, so tiny entries are judged on the group's scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import functional as F
from .config import ModelConfig
from .losses import composite_loss
from .tensor import Tensor, backward, concat, matmul, mul, tsum
from . import tensor as T

TOLERANCE = 1e-4
STEP = 1e-5
NOISE_FLOOR = 1e-8


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class CheckReport:
    scope: str
    groups: list[GroupResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    def table(self) -> str:
        lines = [f"{'group':<56} {'checked':>7} {'max_rel_err':>12}  status"]
        for g in self.groups:
            lines.append(f"{g.name:<56} {g.checked:>7} {g.max_rel_error:>12.3e}  {'PASS' if g.passed else 'FAIL'}")
        lines.append(f"scope {self.scope}: {'PASS' if self.passed else 'FAIL'} "
                     f"(max {self.max_rel_error:.3e}, {self.seconds:.1f}s)")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, or 0 when both sides sit below ``NOISE_FLOOR``.

    A central difference of an O(1) loss cannot resolve gradients much below
    eps_machine / STEP ~ 1e-11, so groups whose true gradient vanishes would
    otherwise compare rounding noise with rounding noise.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale < NOISE_FLOOR:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: dict[str, Tensor],
    step: float = STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    piece: Callable[[], object] | None = None,
    branches: bool = False,
) -> list[GroupResult]:
    """Compare autodiff and central differences for every tensor in ``leaves``.

    ``max_entries`` samples that many entries per tensor.  ``piece``, when
    given, returns a key identifying the smooth piece the function is on
    (e.g. thresholded masks); perturbations that change it are skipped.
    With ``branches`` the ReLU and max-pool selections join that key, so a
    step across an activation kink is skipped as well.
    """
    if branches:
        fn, piece = _with_branches(fn, piece)
    rng = rng or np.random.default_rng(0)
    for t in leaves.values():
        t.grad = None
    loss = fn()
    base_piece = piece() if piece is not None else None
    backward(loss, leaves.values())
    analytic = {name: t.grad.copy() for name, t in leaves.items()}
    results = []
    with T.no_grad():
        for name, t in leaves.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
            num, ana, skipped = [], [], 0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = fn().item()
                kp = piece() if piece is not None else None
                flat[i] = orig - step
                fm = fn().item()
                km = piece() if piece is not None else None
                flat[i] = orig
                if piece is not None and not (_same(kp, base_piece) and _same(km, base_piece)):
                    skipped += 1
                    continue
                num.append((fp - fm) / (2 * step))
                ana.append(analytic[name].reshape(-1)[i])
            results.append(GroupResult(name, relative_error(np.array(ana), np.array(num)), len(num), skipped))
    return results


def _with_branches(fn, piece):
    log = {}

    def wrapped():
        with T.record_branches() as rec:
            out = fn()
        log["sel"] = rec
        return out

    def key():
        return [piece() if piece is not None else None, log["sel"]]

    return wrapped, key


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def _leaf(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    r = Tensor(rng.normal(size=out.shape))
    return tsum(mul(out, r))


# -- op cases -----------------------------------------------------------------------------
# each case maps an rng to (scalar function, leaves)

def _case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    return lambda: _project(a + b, np.random.default_rng(1)), {"a": a, "b": b}


def _case_mul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)
    return lambda: _project(a * b, np.random.default_rng(1)), {"a": a, "b": b}


def _case_div(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4, low=0.5, high=2.0)
    return lambda: _project(a / b, np.random.default_rng(1)), {"a": a, "b": b}


def _case_matmul(rng):
    a, b = _leaf(rng, 3, 5), _leaf(rng, 5, 2)
    return lambda: _project(matmul(a, b), np.random.default_rng(1)), {"a": a, "b": b}


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return lambda: _project(concat([a, b], axis=-1), np.random.default_rng(1)), {"a": a, "b": b}


def _case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    x = _leaf(rng, 2, 2, 5, 5)
    w = _leaf(rng, 3, 2, k, k)
    b = _leaf(rng, 3)
    return lambda: _project(F.conv2d(x, w, b, stride, pad), np.random.default_rng(1)), {"x": x, "w": w, "b": b}


def _case_maxpool2d(rng):
    x = _leaf(rng, 1, 2, 5, 5)
    k, s, p = [(3, 1, 1), (3, 2, 1), (2, 2, 0)][int(rng.integers(3))]
    return lambda: _project(F.maxpool2d(x, k, s, p), np.random.default_rng(1)), {"x": x}


def _case_bilinear(rng):
    x = _leaf(rng, 1, 2, 3, 2)
    oh, ow = int(rng.integers(3, 7)), int(rng.integers(2, 6))
    return lambda: _project(F.bilinear_upsample(x, oh, ow), np.random.default_rng(1)), {"x": x}


def _case_relu(rng):
    x = _leaf(rng, 4, 5)
    return lambda: _project(T.relu(x), np.random.default_rng(1)), {"x": x}


def _case_leaky_relu(rng):
    x = _leaf(rng, 4, 5)
    return lambda: _project(T.leaky_relu(x, 0.2), np.random.default_rng(1)), {"x": x}


def _case_sigmoid(rng):
    x = _leaf(rng, 4, 5, low=-4, high=4)
    return lambda: _project(T.sigmoid(x), np.random.default_rng(1)), {"x": x}


def _case_softmax(rng):
    x = _leaf(rng, 3, 4, low=-3, high=3)
    axis = int(rng.integers(2))
    return lambda: _project(T.softmax(x, axis=axis), np.random.default_rng(1)), {"x": x}


def _case_log_softmax(rng):
    x = _leaf(rng, 3, 4, low=-3, high=3)
    return lambda: _project(F.log_softmax(x, axis=-1), np.random.default_rng(1)), {"x": x}


def _case_exp_log(rng):
    x = _leaf(rng, 3, 4, low=0.2, high=2.0)
    return lambda: _project(T.log(x) + T.exp(x) + T.sqrt(x), np.random.default_rng(1)), {"x": x}


def _case_layer_norm(rng):
    x, g, b = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    return lambda: _project(F.layer_norm(x, g, b), np.random.default_rng(1)), {"x": x, "gamma": g, "beta": b}


def _case_batch_norm_train(rng):
    x, g, b = _leaf(rng, 2, 3, 3, 3), _leaf(rng, 3), _leaf(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    return lambda: _project(F.batch_norm2d(x, g, b, rm, rv, True), np.random.default_rng(1)), {"x": x, "gamma": g, "beta": b}


def _case_batch_norm_eval(rng):
    x, g, b = _leaf(rng, 2, 3, 3, 3), _leaf(rng, 3), _leaf(rng, 3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    return lambda: _project(F.batch_norm2d(x, g, b, rm, rv, False), np.random.default_rng(1)), {"x": x, "gamma": g, "beta": b}


def _case_weighted_ce(rng):
    z = _leaf(rng, 2, 3, 3, 3, low=-3, high=3)
    y = rng.integers(0, 3, size=(2, 3, 3))
    w = rng.uniform(0.2, 2.0, size=3)
    return lambda: F.weighted_cross_entropy(z, y, w), {"logits": z}


def _case_reductions(rng):
    x = _leaf(rng, 3, 4, 2)
    return lambda: _project(x.sum(axis=1) + x.mean(axis=(0, 1)), np.random.default_rng(1)), {"x": x}


def _case_indexing(rng):
    from .trm import rowwise_linear

    x = _leaf(rng, 4, 3)
    w = _leaf(rng, 2, 3)
    idx = rng.integers(0, 4, size=6)
    fn = lambda: _project(rowwise_linear(T.take_rows(x, idx), w) + x[1:3, :2].sum(), np.random.default_rng(1))
    return fn, {"x": x, "w": w}


def _case_segment_ops(rng):
    from .trm import MaskSet, masked_average, project_spatial, segment_sum

    v = _leaf(rng, 6, 3)
    seg = rng.integers(0, 4, size=6)
    feats = _leaf(rng, 3, 4, 4)
    ms = MaskSet.from_masks(rng.random((3, 4, 4)) < 0.4)
    emb = _leaf(rng, 3, 3)

    def fn():
        return (_project(segment_sum(v, seg, 4), np.random.default_rng(1))
                + _project(masked_average(feats, ms, 1e-6), np.random.default_rng(2))
                + _project(project_spatial(emb, ms), np.random.default_rng(3)))

    return fn, {"values": v, "feats": feats, "embeddings": emb}


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "div": _case_div,
    "matmul": _case_matmul,
    "concat": _case_concat,
    "conv2d": _case_conv2d,
    "maxpool2d": _case_maxpool2d,
    "bilinear_upsample": _case_bilinear,
    "relu": _case_relu,
    "leaky_relu": _case_leaky_relu,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "exp_log_sqrt": _case_exp_log,
    "layer_norm": _case_layer_norm,
    "batch_norm2d_train": _case_batch_norm_train,
    "batch_norm2d_eval": _case_batch_norm_eval,
    "weighted_cross_entropy": _case_weighted_ce,
    "reductions": _case_reductions,
    "gather_rowwise_linear": _case_indexing,
    "segment_ops": _case_segment_ops,
}


def check_op(name: str, cases: int = 100, seed: int = 0) -> GroupResult:
    """Run ``cases`` random instances of one op case; report the worst error."""
    if name not in OP_CASES:
        raise KeyError(f"unknown op '{name}'; known: {sorted(OP_CASES)}")
    worst, checked = 0.0, 0
    for c in range(cases):
        rng = np.random.default_rng([seed, c])
        fn, leaves = OP_CASES[name](rng)
        for g in check_gradients(fn, leaves):
            worst = max(worst, g.max_rel_error)
            checked += g.checked
    return GroupResult(f"op:{name}", worst, checked)


# -- model scopes ------------------------------------------------------------------------------

TINY = dict(num_classes=2, base_width=4, node_dim=8, gnn_layers=2, ffn_hidden=16)


def tiny_model_check(variant: str, max_entries: int = 4, seed: int = 0, **overrides) -> list[GroupResult]:
    """Gradient check of the whole network at 32 x 32 with K=2, w=4, d=8, L=2."""
    from .model import SegmentationModel

    cfg = ModelConfig(**{**TINY, "gnn_variant": variant, **overrides})
    model = SegmentationModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((2, 3, 32, 32))
    y = np.zeros((2, 32, 32), dtype=np.int64)
    y[:, :, 16:] = 1
    y[1, :8] = 0
    # a class-1 bias in the initial head yields non-empty masks and a real graph
    model.params["head.initial.bias"].data[:] = [0.0, 1.5]
    # With a 1 x 1 bottleneck and batch 2 every batch norm output is close to +-1, so
    # residual sums land next to the ReLU kink.  Generic affine parameters move the
    # check point off that degenerate configuration.
    for path, t in model.params.items():
        if ".bn" in path or path.endswith("bn.weight"):
            t.data[:] = t.data + rng.uniform(-0.4, 0.4, size=t.shape)
    state = {}

    def fn():
        out = model(x)
        state["graphs"] = out.graphs
        return composite_loss(out.final_logits, out.init_logits, y, 0.4).total

    def piece():
        return [g.masks.masks for g in state["graphs"]]

    fn()
    results = check_gradients(fn, dict(model.params.items()), max_entries=max_entries,
                              rng=np.random.default_rng(seed + 2), piece=piece, branches=True)
    for r in results:
        r.name = f"{variant}:{r.name}"
    return results


def module_check(seed: int = 0) -> list[GroupResult]:
    """Gradient check of the relation module alone on a random decoder map."""
    from .model import SegmentationModel

    results = []
    for variant in ("simple", "attention"):
        cfg = ModelConfig(**{**TINY, "gnn_variant": variant, "num_classes": 3,
                             "use_edge_weights": True, "boundary_aware_edges": True})
        model = SegmentationModel(cfg, seed=seed)
        rng = np.random.default_rng(seed + 1)
        d2 = Tensor(rng.normal(size=(2, 8, 6, 6)), requires_grad=True)
        probs = rng.dirichlet(np.ones(3) * 0.3, size=(2, 6, 6)).transpose(0, 3, 1, 2)
        leaves = {k: v for k, v in model.params.items() if k.startswith("trm.")}
        leaves["d2"] = d2
        fn = lambda: _project(model.trm.forward(probs, d2, True)[0], np.random.default_rng(3))
        for r in check_gradients(fn, leaves, max_entries=6, rng=np.random.default_rng(4)):
            r.name = f"trm[{variant}]:{r.name}"
            results.append(r)
    return results


SCOPES = ("op", "module", "full-model-tiny")


def run_scope(scope: str, cases: int = 100) -> CheckReport:
    """Run one scope: ``op``, ``op:<name>``, ``module`` or ``full-model-tiny``."""
    t0 = time.perf_counter()
    report = CheckReport(scope)
    if scope == "op":
        report.groups = [check_op(name, cases) for name in OP_CASES]
    elif scope.startswith("op:"):
        report.groups = [check_op(scope[3:], cases)]
    elif scope == "module":
        report.groups = module_check()
    elif scope == "full-model-tiny":
        report.groups = tiny_model_check("simple") + tiny_model_check("attention")
    else:
        raise KeyError(f"unknown scope '{scope}'; expected one of {SCOPES} or op:<name>")
    report.seconds = time.perf_counter() - t0
    return report
