"""Finite-difference verification suite behind the `gradcheck` command.

Every differentiable primitive is checked element by element: analytic
gradients from `backward` against central differences.  The full composite
loss (both twins through the network, projection, cross-correlation and
Dice) is checked with one directional probe per parameter tensor, which
keeps the comparison well-conditioned where per-element ratios are not
(near-zero gradient entries, relu kinks).

Finite differences are always evaluated on the float64 version of the
function, whatever precision the analytic side runs at; at 32 bits the
check therefore measures the rounding of the float32 forward/backward path
against a clean oracle.

First-conv biases inside residual blocks are excluded from the ratio test:
instance normalisation absorbs per-channel shifts, so their true gradient
is identically zero; the suite instead asserts the analytic gradient
vanishes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, network

THRESHOLDS = {64: 1e-3, 32: 1e-2}
_FD_EPS = 1e-5
_FD_EPS_COMPOSITE = 1e-6


@dataclass
class OpCase:
    name: str
    make_inputs: Callable[[], list[np.ndarray]]
    fn: Callable[[list[ad.Tensor]], ad.Tensor]


def _proj_to_scalar(out: ad.Tensor, seed: int = 0) -> ad.Tensor:
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.tsum(ad.mul(out, ad.constant(r.astype(out.dtype))))


def _analytic_grads(case: OpCase, arrays: list[np.ndarray], dtype) -> list[np.ndarray]:
    ts = [ad.parameter(a.astype(dtype)) for a in arrays]
    loss = case.fn(ts)
    ad.backward(loss)
    return [
        (t.grad if t.grad is not None else np.zeros_like(t.data)).astype(np.float64)
        for t in ts
    ]


def _f64_eval(case: OpCase, arrays: list[np.ndarray]) -> float:
    return float(case.fn([ad.constant(a) for a in arrays]).data)


def check_op(case: OpCase, precision: int, eps: float = _FD_EPS) -> float:
    """Max per-element relative error for one primitive."""
    arrays = case.make_inputs()
    dtype = np.float64 if precision == 64 else np.float32
    grads = _analytic_grads(case, arrays, dtype)
    worst = 0.0
    for k, arr in enumerate(arrays):
        num = ad.numeric_gradient(lambda: _f64_eval(case, arrays), arr, eps)
        worst = max(worst, ad.max_rel_error(grads[k], num))
    return worst


def op_cases(seed: int = 2024) -> list[OpCase]:
    rng = np.random.default_rng(seed)

    def rand(*shape, positive=False, scale=1.0):
        a = rng.standard_normal(shape) * scale
        return np.abs(a) + 0.5 if positive else a

    cases = [
        OpCase("conv3_stride1",
               lambda: [rand(2, 4, 5, 4), rand(3, 2, 3, 3, 3, scale=0.4), rand(3)],
               lambda ts: _proj_to_scalar(ad.conv3(ts[0], ts[1], ts[2], 1))),
        OpCase("conv3_stride2",
               lambda: [rand(2, 5, 4, 5), rand(3, 2, 3, 3, 3, scale=0.4), rand(3)],
               lambda ts: _proj_to_scalar(ad.conv3(ts[0], ts[1], ts[2], 2))),
        OpCase("instance_norm",
               lambda: [rand(2, 3, 4, 3), rand(2), rand(2)],
               lambda ts: _proj_to_scalar(ad.instance_norm(ts[0], ts[1], ts[2]))),
        OpCase("relu", lambda: [rand(3, 4) + 0.2],
               lambda ts: _proj_to_scalar(ad.relu(ts[0]))),
        OpCase("sigmoid", lambda: [rand(3, 4)],
               lambda ts: _proj_to_scalar(ad.sigmoid(ts[0]))),
        OpCase("add", lambda: [rand(3, 4), rand(3, 4)],
               lambda ts: _proj_to_scalar(ad.add(ts[0], ts[1]))),
        OpCase("sub", lambda: [rand(3, 4), rand(3, 4)],
               lambda ts: _proj_to_scalar(ad.sub(ts[0], ts[1]))),
        OpCase("mul", lambda: [rand(3, 4), rand(3, 4)],
               lambda ts: _proj_to_scalar(ad.mul(ts[0], ts[1]))),
        OpCase("div", lambda: [rand(3, 4), rand(3, 4, positive=True)],
               lambda ts: _proj_to_scalar(ad.div(ts[0], ts[1]))),
        OpCase("scale", lambda: [rand(3, 4)],
               lambda ts: _proj_to_scalar(ad.scale(ts[0], -1.7))),
        OpCase("sqrt", lambda: [rand(3, 4, positive=True)],
               lambda ts: _proj_to_scalar(ad.sqrt(ts[0]))),
        OpCase("reciprocal", lambda: [rand(3, 4, positive=True)],
               lambda ts: _proj_to_scalar(2.0 / ts[0])),
        OpCase("sum_axis", lambda: [rand(2, 3, 4)],
               lambda ts: _proj_to_scalar(ad.tsum(ts[0], axis=1))),
        OpCase("matmul", lambda: [rand(4, 3), rand(3, 5)],
               lambda ts: _proj_to_scalar(ad.matmul(ts[0], ts[1]))),
        OpCase("transpose", lambda: [rand(4, 3)],
               lambda ts: _proj_to_scalar(ad.transpose(ts[0]))),
        OpCase("reshape", lambda: [rand(2, 6)],
               lambda ts: _proj_to_scalar(ad.reshape(ts[0], (3, 4)))),
        OpCase("linear", lambda: [rand(4, 3), rand(5, 3), rand(5)],
               lambda ts: _proj_to_scalar(ad.linear(ts[0], ts[1], ts[2]))),
        OpCase("avg_pool", lambda: [rand(2, 4, 4, 4)],
               lambda ts: _proj_to_scalar(ad.avg_pool(ts[0], 2))),
        OpCase("avg_pool_reflect", lambda: [rand(1, 5, 4, 3)],
               lambda ts: _proj_to_scalar(ad.avg_pool(ts[0], 2))),
        OpCase("upsample_nearest2", lambda: [rand(2, 2, 3, 2)],
               lambda ts: _proj_to_scalar(ad.upsample_nearest2(ts[0]))),
        OpCase("scale_columns", lambda: [rand(5, 3), rand(3, positive=True)],
               lambda ts: _proj_to_scalar(ad.scale_columns(ts[0], ts[1]))),
        OpCase("feature_norm", lambda: [rand(6, 4)],
               lambda ts: _proj_to_scalar(ad.feature_norm(ts[0]))),
        OpCase("soft_dice_loss",
               lambda: [np.clip(np.abs(rand(3, 3, 3, 3)), 0.05, 0.95)],
               lambda ts, truth=(rng.random((3, 3, 3, 3)) > 0.5).astype(np.float64):
                   losses.soft_dice_loss(ts[0], ad.constant(truth.astype(ts[0].dtype)))),
        OpCase("cross_correlation_bt",
               lambda: [rand(5, 3), rand(5, 3)],
               lambda ts: losses.barlow_twins_loss(
                   losses.cross_correlation(ts[0], ts[1]), 0.01)),
    ]
    return cases


# -- full composite: twins through the network, projection, combined loss ------

def _composite_fixture(seed: int = 5):
    cfg = network.SegResNetConfig(
        in_channels=2, init_filters=2, depth=1, blocks_per_level=(1, 1), out_classes=3,
        projection=network.ProjectionConfig(pool_factor=2, mlp_hidden=3, mlp_out=4),
    )
    rng = np.random.default_rng(seed)
    data = {
        "xa": rng.standard_normal((2, 4, 4, 4)),
        "xb": rng.standard_normal((2, 4, 4, 4)) * 0.9 + 0.05,
        "ta": (rng.random((3, 4, 4, 4)) > 0.6).astype(np.float64),
        "tb": (rng.random((3, 4, 4, 4)) > 0.6).astype(np.float64),
    }
    return cfg, data


def _composite_loss(model, data, dtype) -> ad.Tensor:
    xa = ad.constant(data["xa"].astype(dtype))
    xb = ad.constant(data["xb"].astype(dtype))
    ta = ad.constant(data["ta"].astype(dtype))
    tb = ad.constant(data["tb"].astype(dtype))
    fa = network.forward_features(model, xa)
    fb = network.forward_features(model, xb)
    return losses.total_loss(
        network.segmentation_head(model, fa), network.segmentation_head(model, fb),
        ta, tb,
        network.forward_projection(model, fa), network.forward_projection(model, fb),
        lam=0.05,
    ).total


def _is_norm_absorbed_bias(name: str) -> bool:
    return name.endswith("conv1.b")


def check_composite(precision: int, seed: int = 5) -> float:
    """Directional FD probe per parameter tensor through the whole model."""
    cfg, data = _composite_fixture(seed)
    model64 = network.build(cfg, np.random.default_rng(seed + 1), dtype=np.float64)

    if precision == 64:
        model = model64
        dtype = np.float64
    else:
        dtype = np.float32
        arrays = {k: t.data.astype(np.float32) for k, t in model64.params.items()}
        model = network.SegResNetModel(
            cfg, {k: ad.parameter(a) for k, a in arrays.items()}
        )
    for p in model.params.values():
        p.grad = None
    ad.backward(_composite_loss(model, data, dtype))

    eps = _FD_EPS_COMPOSITE
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for name, p64 in model64.params.items():
        g = model.params[name].grad
        g = np.zeros_like(p64.data) if g is None else g.astype(np.float64)
        if _is_norm_absorbed_bias(name):
            # instance norm cancels per-channel shifts: gradient must vanish
            worst = max(worst, float(np.abs(g).max()) / (1.0 if precision == 64 else 1e4))
            continue
        u = rng.standard_normal(p64.data.shape)
        u /= np.linalg.norm(u)
        analytic = float((g * u).sum())
        orig = p64.data.copy()
        p64.data = orig + eps * u
        fp = float(_composite_loss(model64, data, np.float64).data)
        p64.data = orig - eps * u
        fm = float(_composite_loss(model64, data, np.float64).data)
        p64.data = orig
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, ad.max_rel_error(np.float64(analytic), np.float64(numeric)))
    return worst


def run_suite(precision: int = 64, log: Callable[[str], None] | None = None
              ) -> dict[str, float]:
    """All primitive checks plus the composite; returns name -> max rel error."""
    if precision not in THRESHOLDS:
        raise ValueError(f"precision must be 32 or 64, got {precision}")
    results: dict[str, float] = {}
    for case in op_cases():
        results[case.name] = check_op(case, precision)
        if log:
            log(f"  {case.name:24s} {results[case.name]:.3e}")
    results["composite_total_loss"] = check_composite(precision)
    if log:
        log(f"  {'composite_total_loss':24s} {results['composite_total_loss']:.3e}")
    return results


def suite_passes(results: dict[str, float], precision: int) -> bool:
    return max(results.values()) < THRESHOLDS[precision]
