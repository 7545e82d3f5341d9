"""Central finite-difference checks for every differentiable operation.

Each check draws a random small problem in float64, forms the scalar
objective ``sum(R * op(inputs))`` for a random cotangent ``R``, and compares
the analytic vector-Jacobian product against central differences with step
``h``. For each tensor the error is ``max|analytic - numeric| / scale`` with
``scale = max(max|analytic|, max|numeric|, CASE_FLOOR * case_scale)``, where
``case_scale`` is the largest gradient magnitude among all tensors of the
case. The floor keeps structurally-zero gradients (a bias feeding a
train-mode BN, a shift under softmax) from comparing round-off against
round-off. An op reports the maximum over its tensors and cases.

Whole-model checks perturb single parameters. A coordinate whose step
straddles a kink (leaky ReLU, max-pool winner, hardest-sample switch) is
detected from finite differences alone and replaced by a fresh draw.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import losses
from . import nonlocal_block as NL
from .tensor import make_rng

STEP = 1e-5
CASE_FLOOR = 1e-2
# model checks resample coordinates whose step straddles a ReLU, max-pool or mining switch
KINK_TOL = 1e-6
KINK_RETRIES = 5
F64 = np.float64


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def _magnitude(a: np.ndarray, n: np.ndarray) -> float:
    return max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    scale = max(_magnitude(analytic, numeric), floor)
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def case_error(pairs) -> float:
    case_scale = max(_magnitude(a, n) for a, n in pairs)
    return max(rel_error(a, n, CASE_FLOOR * case_scale) for a, n in pairs)


Pairs = list[tuple[np.ndarray, np.ndarray]]


def _randn(rng, *shape):
    return rng.standard_normal(shape).astype(F64)


def _random_conv(rng, c_in, kernel=None, bias=True):
    c_out = int(rng.integers(1, 4))
    k = kernel or tuple(int(v) for v in rng.integers(1, 4, size=3))
    stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
    pad = tuple(int(v) for v in rng.integers(0, 2, size=3))
    return L.Conv3dParams(_randn(rng, c_out, c_in, *k), _randn(rng, c_out) if bias else None, stride, pad)


def check_conv3d(rng) -> Pairs:
    c_in = int(rng.integers(1, 4))
    x = _randn(rng, int(rng.integers(1, 3)), c_in, *rng.integers(3, 6, size=3))
    p = _random_conv(rng, c_in)
    R = _randn(rng, *L.conv3d_forward(x, p).shape)
    obj = lambda: float((R * L.conv3d_forward(x, p)).sum())
    gx, gw, gb = L.conv3d_backward(R, x, p)
    return [(gx, numeric_grad(obj, x)), (gw, numeric_grad(obj, p.weight)), (gb, numeric_grad(obj, p.bias))]


def check_separable_conv3d(rng) -> Pairs:
    c_in = int(rng.integers(1, 4))
    x = _randn(rng, int(rng.integers(1, 3)), c_in, *rng.integers(3, 6, size=3))
    t = _random_conv(rng, c_in, kernel=(int(rng.integers(1, 4)), 1, 1))
    s = _random_conv(rng, t.weight.shape[0], kernel=(1, *(int(v) for v in rng.integers(1, 4, size=2))))
    R = _randn(rng, *L.separable_conv3d_forward(x, t, s).shape)
    obj = lambda: float((R * L.separable_conv3d_forward(x, t, s)).sum())
    gx, (gwt, gbt), (gws, gbs) = L.separable_conv3d_backward(R, x, t, s)
    return [(gx, numeric_grad(obj, x))] + [
        (a, numeric_grad(obj, arr)) for a, arr in ((gwt, t.weight), (gbt, t.bias), (gws, s.weight), (gbs, s.bias))
    ]


def check_pool3d(rng) -> Pairs:
    x = _randn(rng, 2, 2, *rng.integers(3, 6, size=3))
    kernel = tuple(int(v) for v in rng.integers(1, 3, size=3))
    stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
    out = []
    for kind in ("max", "avg"):
        y, arg = L.pool3d_forward(x, kind, kernel, stride, 0)
        R = _randn(rng, *y.shape)
        obj = lambda: float((R * L.pool3d_forward(x, kind, kernel, stride, 0)[0]).sum())
        out.append((L.pool3d_backward(R, x, kind, kernel, stride, 0, arg), numeric_grad(obj, x)))
    return out


def check_batchnorm(rng) -> Pairs:
    C = int(rng.integers(1, 4))
    x = _randn(rng, int(rng.integers(2, 4)), C, *rng.integers(1, 4, size=3))
    out = []
    for training in (True, False):
        p = L.BatchNormParams.create(C, dtype=F64, training=training)
        p.gamma[...] = _randn(rng, C)
        p.beta[...] = _randn(rng, C)
        p.running_mean[...] = _randn(rng, C)
        p.running_var[...] = rng.uniform(0.5, 2.0, size=C)
        frozen = copy.deepcopy(p)

        def fwd():
            return L.batchnorm_forward(x, copy.deepcopy(frozen))[0]

        R = _randn(rng, *x.shape)
        obj = lambda: float((R * fwd()).sum())
        _, cache = L.batchnorm_forward(x, copy.deepcopy(frozen))
        gx, gg, gb = L.batchnorm_backward(R, cache, frozen)
        out += [(gx, numeric_grad(obj, x)), (gg, numeric_grad(obj, frozen.gamma)), (gb, numeric_grad(obj, frozen.beta))]
    return out


def check_linear(rng) -> Pairs:
    B, d_in, d_out = (int(v) for v in rng.integers(1, 6, size=3))
    x = _randn(rng, B, d_in)
    p = L.LinearParams(_randn(rng, d_out, d_in), _randn(rng, d_out))
    R = _randn(rng, B, d_out)
    obj = lambda: float((R * L.linear_forward(x, p)).sum())
    gx, gw, gb = L.linear_backward(R, x, p)
    return [(gx, numeric_grad(obj, x)), (gw, numeric_grad(obj, p.weight)), (gb, numeric_grad(obj, p.bias))]


def check_nonlocal(rng) -> Pairs:
    C = 2 * int(rng.integers(1, 3))
    x = _randn(rng, int(rng.integers(1, 3)), C, *rng.integers(1, 4, size=3))
    p = NL.init_nonlocal(C, rng, dtype=F64)
    # non-zero scale, otherwise only the residual path is exercised
    p.wz_bn.gamma[...] = _randn(rng, C)
    p.wz_bn.beta[...] = _randn(rng, C)
    for conv in (p.theta, p.phi, p.g, p.wz):
        conv.bias[...] = _randn(rng, *conv.bias.shape) * 0.1
    if x.shape[0] * np.prod(x.shape[2:]) < 2:
        p.wz_bn.training = False
    R = _randn(rng, *x.shape)

    def obj():
        q = copy.copy(p)
        q.wz_bn = copy.deepcopy(p.wz_bn)
        return float((R * NL.nonlocal_forward(x, q)[0]).sum())

    q = copy.copy(p)
    q.wz_bn = copy.deepcopy(p.wz_bn)
    _, cache = NL.nonlocal_forward(x, q)
    gx, grads = NL.nonlocal_backward(R, cache, p)
    named = p.named()
    return [(gx, numeric_grad(obj, x))] + [(grads[k], numeric_grad(obj, named[k])) for k in sorted(named)]


def check_triplet(rng) -> Pairs:
    P, K, d = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 6))
    labels = np.repeat(np.arange(P), K)
    f = _randn(rng, P * K, d)
    margin = float(rng.uniform(0.5, 3.0))
    reduction = ("mean", "sum")[int(rng.integers(0, 2))]
    obj = lambda: float(losses.triplet_batch_hard(f, labels, margin, reduction)[0])
    _, g = losses.triplet_batch_hard(f, labels, margin, reduction)
    return [(g, numeric_grad(obj, f))]


def check_label_smoothed_ce(rng) -> Pairs:
    B, N = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    logits = _randn(rng, B, N) * 2
    labels = rng.integers(0, N, size=B)
    eps = float(rng.choice([0.0, 0.1, float(rng.uniform(0, 0.9))]))
    obj = lambda: float(losses.label_smoothed_ce(logits, labels, eps)[0])
    _, g = losses.label_smoothed_ce(logits, labels, eps)
    return [(g, numeric_grad(obj, logits))]


def central_slope(f: Callable[[float], float], h: float) -> float:
    return (f(h) - f(-h)) / (2 * h)


def crosses_kink(f: Callable[[float], float], slope: float, h: float = STEP) -> bool:
    """True when ``f`` is visibly non-smooth on ``[-h, h]``.

    Compares the central slope at ``h`` with the one at ``h / 10``; for a
    smooth ``f`` they differ by O(h^2). Never looks at the analytic gradient,
    so a wrong adjoint cannot be filtered out by it.
    """
    return abs(slope - central_slope(f, h / 10)) > KINK_TOL * max(1.0, abs(slope))


def check_model(rng, n_params: int = 10, config=None, frames: tuple[int, int, int] = (2, 8, 8)) -> Pairs:
    """Total loss through an encoder, checked on ``n_params`` random scalar parameters.

    Defaults to a tiny two-stage encoder; pass ``config`` (any dtype) to check
    another architecture, which is rebuilt in float64.
    """
    from .model import ModelConfig, StageConfig, build

    if config is None:
        config = ModelConfig(
            in_channels=2, stem_channels=4, stem_spatial_kernel=3, stem_pool=True,
            stages=[StageConfig(1, 4), StageConfig(1, 6, stride=2)], nonlocal_placement=[[0], [0]],
            embedding_dim=6, n_identities=3,
        )
    cfg = ModelConfig.from_dict({**config.to_dict(), "dtype": "float64"})
    enc = build(cfg, seed=int(rng.integers(0, 2**31)))
    for layer in enc.nonlocal_layers().values():
        layer.p.wz_bn.gamma[...] = _randn(rng, *layer.p.wz_bn.gamma.shape)
    labels = np.repeat(np.arange(2), 2)
    tracks = _randn(rng, 4, cfg.in_channels, *frames)
    loss_cfg = losses.LossConfig(margin=1.0, epsilon=0.1, n_classes=cfg.n_identities)
    drop_seed = int(rng.integers(0, 2**31))

    def run():
        feats, logits = enc.forward(tracks, make_rng(drop_seed))
        return losses.total_loss(feats, logits, labels, loss_cfg)

    obj = lambda: run()[0].total
    enc.zero_grad()
    _, gf, gl = run()
    enc.backward(gf, gl)
    params, grads = enc.named_parameters(), enc.named_grads()
    names = sorted(params)
    analytic, numeric = [], []
    for _ in range(KINK_RETRIES * n_params):
        if len(analytic) == n_params:
            break
        name = names[int(rng.integers(0, len(names)))]
        idx = tuple(int(rng.integers(0, s)) for s in params[name].shape)
        arr = params[name]
        old = arr[idx]

        def shifted(delta):
            arr[idx] = old + delta
            try:
                return obj()
            finally:
                arr[idx] = old

        slope = central_slope(shifted, STEP)
        if crosses_kink(shifted, slope):
            continue
        analytic.append(grads[name][idx])
        numeric.append(slope)
    if len(analytic) < n_params:
        raise RuntimeError(f"only {len(analytic)} of {n_params} sampled coordinates were kink-free")
    return [(np.array(analytic), np.array(numeric))]


CHECKS: dict[str, Callable[[np.random.Generator], Pairs]] = {
    "conv3d": check_conv3d,
    "separable_conv3d": check_separable_conv3d,
    "pool3d": check_pool3d,
    "batchnorm": check_batchnorm,
    "linear": check_linear,
    "nonlocal": check_nonlocal,
    "triplet": check_triplet,
    "label_smoothed_ce": check_label_smoothed_ce,
    "model": check_model,
}


@dataclass
class OpResult:
    op: str
    cases: int
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    results: list[OpResult]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def format(self) -> str:
        lines = [f"{'op':<20}{'cases':>6}  {'max_rel_err':>16}  status"]
        for r in self.results:
            lines.append(f"{r.op:<20}{r.cases:>6}  {r.max_rel_err:>16.9g}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"tolerance {self.tolerance:.9g}: {'all passed' if self.passed else 'FAILED'}")
        return "\n".join(lines) + "\n"


def gradcheck_suite(tolerance: float = 1e-4, seed: int = 0, ops: list[str] | None = None,
                    cases: int = 3) -> GradcheckReport:
    """Run ``cases`` random problems per op; each op gets its own seeded stream."""
    names = list(CHECKS) if ops is None else ops
    results = []
    for i, name in enumerate(names):
        if name not in CHECKS:
            raise KeyError(f"unknown op {name!r}; choose from {sorted(CHECKS)}")
        rng = make_rng([seed, i])
        err = 0.0
        for _ in range(cases):
            err = max(err, case_error(CHECKS[name](rng)))
        results.append(OpResult(name, cases, err, bool(err < tolerance)))
    return GradcheckReport(results, tolerance)
