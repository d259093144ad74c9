"""Finite-difference gradient checks for every differentiable operation.

Each module contributes a list of named cases; a case is a function and
the float64 inputs it is checked at, drawn from ``[-2, 2]`` with the
given seed. The command line ``gradcheck`` tool and the test suite both
run these.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import losses as L
from . import ssr as S
from . import tensor as T
from .fusion import (
    ChannelAttentionParams,
    SpatialAttentionParams,
    binary_fuse,
    channel_attention,
    combined_attention,
    multi_fuse,
    spatial_attention,
)
from .gradcheck import GradcheckReport, gradcheck

__all__ = ["Case", "MODULES", "cases_for", "run_suite"]


@dataclass
class Case:
    name: str
    fn: Callable
    inputs: Sequence[np.ndarray]


def _u(rng, *shape, low=-2.0, high=2.0):
    return rng.uniform(low, high, shape)


def _tensor_cases(rng) -> List[Case]:
    a = _u(rng, 2, 3, 4, 4)
    return [
        Case("add", lambda x, y: T.add(x, y), [a, _u(rng, 2, 1, 4, 4)]),
        Case("sub", lambda x, y: T.sub(x, y), [a, _u(rng, 1, 3, 1, 1)]),
        Case("mul", lambda x, y: T.mul(x, y), [_u(rng, 2, 1, 3, 3), _u(rng, 2, 3, 1, 1)]),
        Case("neg", T.neg, [a]),
        Case("scalar_mul", lambda x: T.scalar_mul(x, -1.7), [a]),
        Case("add_scalar", lambda x: T.add_scalar(x, 0.3), [a]),
        Case("rsub_scalar", lambda x: T.rsub_scalar(1.0, x), [a]),
        Case("sigmoid", T.sigmoid, [_u(rng, 1, 2, 3, 3)]),
        Case("relu", T.relu, [a]),
        Case("softplus", T.softplus, [a]),
        Case("abs", T.abs, [a]),
        Case("exp_neg", T.exp_neg, [a]),
        Case("reduce_sum", T.reduce_sum, [a]),
        Case("mean", T.mean, [a]),
        Case("conv2d_3x3", lambda x, w, b: T.conv2d(x, w, b, padding=1), [_u(rng, 2, 2, 5, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)]),
        Case("conv2d_narrow", lambda x, w, b: T.conv2d(x, w, b, padding=1), [_u(rng, 1, 4, 5, 4), _u(rng, 2, 4, 3, 3), _u(rng, 2)]),
        Case("conv2d_stride2", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [_u(rng, 1, 2, 6, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)]),
        Case("conv2d_1x1", lambda x, w, b: T.conv2d(x, w, b), [_u(rng, 2, 3, 3, 3), _u(rng, 2, 3, 1, 1), _u(rng, 2)]),
        Case("global_avg_pool", T.global_avg_pool, [a]),
        Case("global_max_pool", T.global_max_pool, [a]),
        Case("bilinear_up", lambda x: T.bilinear_resize(x, 7, 5), [_u(rng, 1, 2, 3, 2)]),
        Case("bilinear_down", lambda x: T.bilinear_resize(x, 3, 2), [_u(rng, 1, 2, 6, 5)]),
        Case("bilinear_align_corners", lambda x: T.bilinear_resize(x, 5, 4, align_corners=True), [_u(rng, 1, 1, 3, 3)]),
        Case("concat", lambda x, y: T.concat([x, y]), [_u(rng, 1, 2, 3, 3), _u(rng, 1, 1, 3, 3)]),
    ]


def _attention_inputs(rng, c):
    sp = SpatialAttentionParams.create(c, max(c // 2, 1), rng=rng, dtype=np.float64, out_scale=1.0)
    cp = ChannelAttentionParams.create(c, 2, rng=rng, dtype=np.float64, out_scale=1.0)
    # moderate weights and non-zero biases keep the gates away from saturation
    return [0.5 * p.data + (0 if p.data.ndim == 4 else rng.uniform(-0.5, 0.5, p.shape)) for p in sp.parameters() + cp.parameters()]


def _sp(p):
    return SpatialAttentionParams(*p[:4])


def _cp(p):
    return ChannelAttentionParams(*p[4:8])


def _afa_cases(rng) -> List[Case]:
    c = 4
    f1, f2, f3 = (_u(rng, 1, c, 4, 4) for _ in range(3))
    p1, p2, p3 = (_attention_inputs(rng, c) for _ in range(3))
    return [
        Case("spatial_attention", lambda f, *p: spatial_attention(f, SpatialAttentionParams(*p)), [f1] + p1[:4]),
        Case("channel_attention", lambda f, *p: channel_attention(f, ChannelAttentionParams(*p)), [f1] + p1[4:]),
        Case("binary_fuse", lambda fs, fd, *p: binary_fuse(fs, fd, _sp(p), _cp(p)), [f1, f2] + p1),
        Case("combined_attention", lambda f, *p: combined_attention(f, _sp(p), _cp(p)), [f1] + p1),
        Case(
            "multi_fuse",
            lambda a, b, d, *p: multi_fuse([a, b, d], [(_sp(p[0:8]), _cp(p[0:8])), (_sp(p[8:16]), _cp(p[8:16])), (_sp(p[16:24]), _cp(p[16:24]))]),
            [f1, f2, f3] + p1 + p2 + p3,
        ),
    ]


def _ssr_cases(rng) -> List[Case]:
    cases = []
    y = [_u(rng, 1, 1, 3, 3) for _ in range(3)]
    preds = [_u(rng, 1, 2, 3, 3) for _ in range(3)]
    for phi in S.PhiKind:
        cases.append(Case(f"transmittance_{phi.value}", lambda v, phi=phi: S.transmittance(phi, v), [y[0]]))
        cases.append(Case(f"ssr_alphas_{phi.value}", lambda *ys, phi=phi: T.concat(S.ssr_alphas(S.SsrState(list(ys), phi))), y))
        cases.append(
            Case(
                f"ssr_fuse_{phi.value}",
                lambda p1, p2, p3, y1, y2, y3, phi=phi: S.ssr_fuse([p1, p2, p3], S.SsrState([y1, y2, y3], phi)),
                preds + y,
            )
        )
    return cases


def _loss_cases(rng) -> List[Case]:
    labels = rng.integers(0, 3, (2, 3, 3))
    labels[0, 0, 0] = L.IGNORE_INDEX
    targets = (rng.uniform(size=(2, 1, 3, 3)) < 0.4).astype(np.int64)
    heads = [_u(rng, 2, 3, 3, 3) for _ in range(4)]
    bheads = [_u(rng, 2, 1, 3, 3) for _ in range(4)]
    return [
        Case("cross_entropy", lambda x: L.cross_entropy(x, labels), [_u(rng, 2, 3, 3, 3)]),
        Case("weighted_bce", lambda x: L.weighted_bce(x, targets, 10.0), [_u(rng, 2, 1, 3, 3)]),
        Case(
            "composite_segmentation_loss",
            lambda f, s1, s2, a, h1, h2, h3, h4: L.composite_segmentation_loss(f, [s1, s2], a, [h1, h2, h3, h4], labels).total,
            [_u(rng, 2, 3, 3, 3), _u(rng, 2, 3, 3, 3), _u(rng, 2, 3, 3, 3), _u(rng, 2, 3, 3, 3)] + heads,
        ),
        Case(
            "composite_boundary_loss",
            lambda f, h1, h2, h3, h4: L.composite_boundary_loss(f, [h1, h2, h3, h4], targets).total,
            [_u(rng, 2, 1, 3, 3)] + bheads,
        ),
    ]


MODULES: Dict[str, Callable] = {
    "tensor": _tensor_cases,
    "afa": _afa_cases,
    "ssr": _ssr_cases,
    "loss": _loss_cases,
}


def cases_for(module: str, seed: int) -> List[Case]:
    if module not in MODULES:
        raise KeyError(f"unknown module {module!r}; expected one of {sorted(MODULES)}")
    return MODULES[module](np.random.default_rng(seed))


def run_suite(module: str, seed: int, eps: float = 1e-4, tol: float = 1e-3):
    """Yield ``(case name, report)`` for every case of ``module``."""
    for case in cases_for(module, seed):
        report: GradcheckReport = gradcheck(case.fn, case.inputs, eps=eps, tol=tol, seed=seed)
        yield case.name, report
