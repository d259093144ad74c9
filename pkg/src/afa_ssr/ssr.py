"""Scale-space rendering: multi-scale fusion driven by per-pixel stopping logits.

A pixel is treated as a particle travelling from the coarsest scale to the
finest. At scale ``i`` it passes with probability ``t_i = exp(-phi(y_i))``
(the transmittance), so the weight of scale ``i`` is the probability of
stopping there:

    alpha_i = (1 - t_i) * prod_{j<i} t_j

and the fused prediction is ``sum_i alpha_i * P_i``. ``phi`` must be
non-negative. The absolute value is the default; softplus with an
infinite last term recovers hierarchical multi-scale attention (HMA).

Two code paths live here: tensor operations that take part in training,
and small numpy routines (alphas, Jacobians, gradient scans) for analysis.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Iterable, List, Sequence, TextIO

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "PhiKind",
    "SsrState",
    "ScaleSet",
    "phi_eval",
    "phi_prime",
    "transmittance",
    "ssr_alphas",
    "ssr_fuse",
    "alphas_np",
    "ssr_jacobian_analytic",
    "ScanRow",
    "ssr_gradient_scan",
    "write_scan_csv",
    "SCAN_HEADER",
]

SCAN_HEADER = ("phi", "y1", "y2", "a1", "alpha1", "alpha2", "j_fro")


class PhiKind(str, enum.Enum):
    ABS = "abs"
    SOFTPLUS = "softplus"
    #: softplus everywhere, and phi = +inf at the last (finest) scale
    SOFTPLUS_TERMINAL_INF = "hma"

    @classmethod
    def parse(cls, value) -> "PhiKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown phi {value!r}; expected one of {[p.value for p in cls]}") from None


@dataclass
class SsrState:
    """Per-scale logit maps ``y`` (each (N, 1, H, W)), ordered coarse to fine."""

    y: List[Tensor]
    phi: PhiKind = PhiKind.ABS

    def __post_init__(self):
        self.phi = PhiKind.parse(self.phi)
        if not self.y:
            raise ShapeError("SsrState needs at least one scale")
        ref = self.y[0].shape
        for i, y in enumerate(self.y):
            if y.shape != ref or y.shape[1] != 1:
                raise ShapeError(f"scale {i}: logits must be aligned one-channel maps of shape {ref}, got {y.shape}")

    @property
    def k(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class ScaleSet:
    factors: tuple = (0.5, 1.0)

    def __post_init__(self):
        f = tuple(float(x) for x in self.factors)
        object.__setattr__(self, "factors", f)
        if not f:
            raise ValueError("scale set is empty")
        if any(x <= 0 for x in f):
            raise ValueError(f"scale factors must be positive, got {f}")
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError(f"scale factors must be strictly increasing, got {f}")

    def __len__(self) -> int:
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def size_at(self, factor: float, h: int, w: int) -> tuple:
        return max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)


# ----------------------------------------------------------------------------
# phi
# ----------------------------------------------------------------------------


def _terminal_inf(phi: PhiKind, is_terminal: bool) -> bool:
    return phi is PhiKind.SOFTPLUS_TERMINAL_INF and is_terminal


def phi_eval(phi, y, is_terminal: bool = False):
    phi = PhiKind.parse(phi)
    y = np.asarray(y, dtype=np.float64)
    if _terminal_inf(phi, is_terminal):
        return np.full_like(y, np.inf)
    if phi is PhiKind.ABS:
        return np.abs(y)
    return np.maximum(y, 0) + np.log1p(np.exp(-np.abs(y)))


def phi_prime(phi, y, is_terminal: bool = False):
    """Derivative of phi; ``sign(y)`` for the absolute value, so 0 at the kink."""
    phi = PhiKind.parse(phi)
    y = np.asarray(y, dtype=np.float64)
    if _terminal_inf(phi, is_terminal):
        return np.zeros_like(y)
    if phi is PhiKind.ABS:
        return np.sign(y)
    return T._sigmoid_np(y)


def _transmittance_np(phi: PhiKind, y, is_terminal: bool):
    if _terminal_inf(phi, is_terminal):
        return np.zeros_like(np.asarray(y, dtype=np.float64))
    return np.exp(-phi_eval(phi, y))


def transmittance(phi, y: Tensor, is_terminal: bool = False) -> Tensor:
    """``exp(-phi(y))`` as a differentiable tensor; exactly 0 for an infinite terminal phi."""
    phi = PhiKind.parse(phi)
    if _terminal_inf(phi, is_terminal):
        return Tensor(np.zeros(y.shape, dtype=y.dtype))
    mapped = T.abs(y) if phi is PhiKind.ABS else T.softplus(y)
    return T.exp_neg(mapped)


# ----------------------------------------------------------------------------
# tensor path
# ----------------------------------------------------------------------------


def ssr_alphas(state: SsrState) -> List[Tensor]:
    """Stopping probability of every scale, each (N, 1, H, W)."""
    alphas = []
    reach = None  # probability of reaching the current scale
    for i, y in enumerate(state.y):
        t = transmittance(state.phi, y, is_terminal=i == state.k - 1)
        stop = 1.0 - t
        alphas.append(stop if reach is None else stop * reach)
        reach = t if reach is None else reach * t
    return alphas


def ssr_fuse(predictions: Sequence[Tensor], state: SsrState, alphas: Sequence[Tensor] = None) -> Tensor:
    """Render ``sum_i alpha_i * P_i``; alphas broadcast over the prediction channels."""
    if len(predictions) != state.k:
        raise ShapeError(f"ssr_fuse: {len(predictions)} predictions for {state.k} scales")
    ref = predictions[0].shape
    for i, p in enumerate(predictions):
        if p.shape != ref:
            raise ShapeError(f"ssr_fuse: prediction {i} has shape {p.shape}, expected {ref}")
        if (p.shape[0], p.shape[2], p.shape[3]) != (state.y[0].shape[0], state.y[0].shape[2], state.y[0].shape[3]):
            raise ShapeError(f"ssr_fuse: prediction {p.shape} is not aligned with logits {state.y[0].shape}")
    if alphas is None:
        alphas = ssr_alphas(state)
    out = None
    for p, a in zip(predictions, alphas):
        term = p * a
        out = term if out is None else out + term
    return out


# ----------------------------------------------------------------------------
# analysis path
# ----------------------------------------------------------------------------


def alphas_np(y, phi) -> np.ndarray:
    """Scale attention for logits ``y`` with the scale index on the last axis."""
    phi = PhiKind.parse(phi)
    y = np.asarray(y, dtype=np.float64)
    k = y.shape[-1]
    out = np.empty_like(y)
    reach = np.ones(y.shape[:-1])
    for i in range(k):
        t = _transmittance_np(phi, y[..., i], i == k - 1)
        out[..., i] = (1.0 - t) * reach
        reach = reach * t
    return out


def ssr_jacobian_analytic(y, phi) -> np.ndarray:
    """Closed-form ``d alpha_i / d y_l`` at one pixel, a lower-triangular k x k matrix."""
    phi = PhiKind.parse(phi)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    k = y.size
    alpha = alphas_np(y, phi)
    t = np.array([_transmittance_np(phi, y[i], i == k - 1) for i in range(k)])
    dphi = np.array([phi_prime(phi, y[i], i == k - 1) for i in range(k)])
    jac = np.zeros((k, k))
    for i in range(k):
        jac[i, i] = dphi[i] * np.prod(t[: i + 1])
        for ell in range(i):
            jac[i, ell] = -dphi[ell] * alpha[i]
    return jac


@dataclass(frozen=True)
class ScanRow:
    phi: str
    y1: float
    y2: float
    a1: float
    alpha1: float
    alpha2: float
    j_fro: float

    def j11(self) -> float:
        """|d alpha_1 / d y_1| recovered from the row: |phi'(y1)| * a1."""
        return float(np.abs(phi_prime(self.phi, self.y1)) * self.a1)


def ssr_gradient_scan(phis: Iterable, y1_values, y2_values) -> List[ScanRow]:
    """Two-scale attention and Jacobian norm over a grid.

    Rows are ordered by phi, then y1, then y2, matching the input order.
    """
    rows = []
    y1_values = np.asarray(y1_values, dtype=np.float64).reshape(-1)
    y2_values = np.asarray(y2_values, dtype=np.float64).reshape(-1)
    for phi in phis:
        phi = PhiKind.parse(phi)
        for y1 in y1_values:
            for y2 in y2_values:
                y = np.array([y1, y2])
                alpha = alphas_np(y, phi)
                jac = ssr_jacobian_analytic(y, phi)
                a1 = float(_transmittance_np(phi, y1, False))
                rows.append(ScanRow(phi.value, float(y1), float(y2), a1, float(alpha[0]), float(alpha[1]), float(np.linalg.norm(jac))))
    return rows


def _fmt(x: float) -> str:
    return np.format_float_positional(x, precision=12, unique=True, trim="-")


def write_scan_csv(rows: Sequence[ScanRow], out: TextIO = None) -> str:
    """Write rows as CSV (header ``phi,y1,y2,a1,alpha1,alpha2,j_fro``); returns the text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCAN_HEADER)
    for r in rows:
        writer.writerow([r.phi, _fmt(r.y1), _fmt(r.y2), _fmt(r.a1), _fmt(r.alpha1), _fmt(r.alpha2), _fmt(r.j_fro)])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text
