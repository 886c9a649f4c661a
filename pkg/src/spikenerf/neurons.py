"""Spiking activations for the density output and their surrogate gradients.

All neurons run a single time step except :func:`if_step`, which keeps a
membrane potential between calls.  Firing is ``u_pre >= v_th``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation, NumericError


class NeuronKind(str, enum.Enum):
    IF = "IF"
    FIF = "FIF"
    BFIF = "BFIF"
    HARD_BOUND_FIF = "HardBoundFIF"
    # plain NeRF baseline, kept alongside the spiking kinds for comparisons
    RELU = "ReLU"


class Surrogate(str, enum.Enum):
    PIECEWISE_LINEAR = "PiecewiseLinear"
    ACCUM_COUNT = "AccumCount"


@dataclass(frozen=True)
class NeuronParams:
    v_th: float = 0.0
    k: float = 1.0
    r: float = 100.0
    lambda_sg: float = 1.0
    kind: NeuronKind = NeuronKind.BFIF
    hard_bound_b: float = 1.0
    # width of the V_th surrogate window: "k" as printed, or "kr"
    window: str = "k"
    surrogate: Surrogate = Surrogate.PIECEWISE_LINEAR

    def __post_init__(self):
        object.__setattr__(self, "kind", NeuronKind(self.kind))
        object.__setattr__(self, "surrogate", Surrogate(self.surrogate))
        if self.k <= 0 or self.r <= 0 or self.lambda_sg <= 0 or self.hard_bound_b <= 0:
            raise ContractViolation("k, r, lambda_sg and hard_bound_b must be positive")
        if self.v_th < 0:
            raise ContractViolation("v_th must be non-negative")
        if self.window not in ("k", "kr"):
            raise ContractViolation(f"window must be 'k' or 'kr', got {self.window!r}")

    @property
    def max_activation(self) -> float:
        """Supremum of the bounded pre-activation, ``k*r`` for B-FIF."""
        if self.kind == NeuronKind.BFIF:
            return self.k * self.r
        if self.kind == NeuronKind.HARD_BOUND_FIF:
            return self.hard_bound_b
        if self.kind == NeuronKind.IF:
            return self.v_th
        return float("inf")

    def can_fire(self) -> bool:
        return self.kind != NeuronKind.BFIF or self.v_th < self.k * self.r

    def with_(self, **kw) -> "NeuronParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "v_th": self.v_th,
            "k": self.k,
            "r": self.r,
            "lambda_sg": self.lambda_sg,
            "kind": self.kind.value,
            "hard_bound_b": self.hard_bound_b,
            "window": self.window,
            "surrogate": self.surrogate.value,
        }


@dataclass
class NeuronState:
    membrane_u: float = 0.0
    step: int = 0


def _finite(x, what="drive"):
    if not np.all(np.isfinite(x)):
        raise NumericError(what)


def _expect(params: NeuronParams, kind: NeuronKind):
    if params.kind != kind:
        raise ContractViolation(f"expected {kind.value} params, got {params.kind.value}")


def if_step(state: NeuronState, drive: float, params: NeuronParams) -> tuple[float, NeuronState]:
    """One integrate-and-fire step; the output is ``v_th`` on a spike."""
    _expect(params, NeuronKind.IF)
    _finite(drive)
    u_pre = state.membrane_u + drive
    if u_pre >= params.v_th:
        return params.v_th, NeuronState(0.0, state.step + 1)
    return 0.0, NeuronState(u_pre, state.step + 1)


def fif_forward(drive, params: NeuronParams):
    """Full-precision IF: pass the membrane potential through when it fires."""
    _expect(params, NeuronKind.FIF)
    _finite(drive)
    drive = np.asarray(drive, dtype=np.float64) if np.isscalar(drive) else drive
    out = np.where(drive >= params.v_th, drive, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def _below(bound):
    """Largest float strictly below ``bound`` (same dtype)."""
    bound = np.asarray(bound)
    return np.nextafter(bound, np.zeros_like(bound))


def bfif_pre(drive, k, r):
    """``k r tanh(drive / r)``, kept strictly below ``k r``.

    ``tanh`` rounds to exactly 1 once ``drive / r`` passes about 19 (9 in
    float32), which would let the membrane touch its open upper bound.
    """
    return np.minimum(k * r * np.tanh(drive / r), _below(k * r))


def bfif_forward(drive, params: NeuronParams):
    """Bounded full-precision IF.

    Returns ``(y, u_pre, o)`` with ``u_pre = k r tanh(drive / r)``,
    ``o = [u_pre >= v_th]`` and ``y = o * u_pre``.  Works on scalars and arrays.
    """
    _expect(params, NeuronKind.BFIF)
    if params.k <= 0 or params.r <= 0:
        raise ContractViolation("B-FIF needs k > 0 and r > 0")
    _finite(drive)
    u_pre = bfif_pre(np.asarray(drive, dtype=np.float64) if np.isscalar(drive) else drive, params.k, params.r)
    o = u_pre >= params.v_th
    y = np.where(o, u_pre, 0.0)
    if np.ndim(y) == 0:
        return float(y), float(u_pre), int(o)
    return y, u_pre, o.astype(np.int8)


def hardbound_fif_forward(drive, params: NeuronParams):
    """FIF clipped at ``B``: ``min(o * drive, B)``."""
    _expect(params, NeuronKind.HARD_BOUND_FIF)
    if params.hard_bound_b <= 0:
        raise ContractViolation("hard bound B must be positive")
    _finite(drive)
    drive = np.asarray(drive, dtype=np.float64) if np.isscalar(drive) else drive
    out = np.minimum(np.where(drive >= params.v_th, drive, 0.0), params.hard_bound_b)
    return float(out) if np.ndim(out) == 0 else out


def surrogate_window(u_pre, v_th, width):
    """Triangular window max(0, (w - |u - v|) / w^2)."""
    return np.maximum(0.0, (width - np.abs(u_pre - v_th)) / (width * width))


def _width(params: NeuronParams) -> float:
    return params.k if params.window == "k" else params.k * params.r


def surrogate_backward(u_pre, o, upstream, params: NeuronParams, variant: Surrogate | str | None = None):
    """Backward rule of the fired output ``y = o * u_pre``.

    Returns ``(grad_u_pre, grad_v_th)``.  The piecewise-linear rule gives
    ``dy/du_pre = o`` and ``dy/dv_th = lambda * window * u_pre``; the
    accumulated-count rule gives ``dy/dv_th = 1 - o``.
    """
    if params.k <= 0:
        raise ContractViolation("k must be positive")
    _finite(u_pre, "u_pre")
    _finite(upstream, "upstream")
    variant = Surrogate(variant or params.surrogate)
    grad_u = upstream * o
    if variant == Surrogate.PIECEWISE_LINEAR:
        grad_v = upstream * params.lambda_sg * surrogate_window(u_pre, params.v_th, _width(params)) * u_pre
    else:
        grad_v = upstream * (1 - o)
    if np.ndim(grad_u) == 0:
        return float(grad_u), float(grad_v)
    return grad_u, grad_v


# ----------------------------------------------------------------- graph ops
#
# Inputs: (drive, v_th, k, r); v_th, k and r are scalar nodes.  The static
# neuron settings (lambda, window, surrogate kind, B) travel as kwargs.


def _bfif_fw(drive, v_th, k, r, *, lambda_sg=1.0, window="k", surrogate="PiecewiseLinear"):
    th = np.tanh(drive / r)
    u = np.minimum(k * r * th, _below(k * r)).astype(drive.dtype, copy=False)
    o = u >= v_th
    y = np.where(o, u, 0).astype(drive.dtype)
    return y, (drive, th, u, o, v_th, k, r, lambda_sg, window, Surrogate(surrogate))


def _bfif_bw(ctx, g):
    drive, th, u, o, v_th, k, r, lam, window, surrogate = ctx
    gu = g * o
    # chain u = k r tanh(drive / r) into each input
    sech2 = 1 - th * th
    g_drive = gu * k * sech2
    g_k = np.sum(gu * r * th)
    g_r = np.sum(gu * k * (th - (drive / r) * sech2))
    if surrogate == Surrogate.PIECEWISE_LINEAR:
        width = k if window == "k" else k * r
        g_v = np.sum(g * lam * surrogate_window(u, v_th, width) * u)
    else:
        g_v = np.sum(g * (1 - o))
    dt = drive.dtype
    return g_drive, np.asarray(g_v, dt), np.asarray(g_k, dt), np.asarray(g_r, dt)


bfif_op = dc.register_custom_op("bfif", _bfif_fw, _bfif_bw, arity=4)


def _fif_fw(drive, v_th, *, lambda_sg=1.0, width=1.0, surrogate="PiecewiseLinear"):
    o = drive >= v_th
    return np.where(o, drive, 0).astype(drive.dtype), (drive, o, v_th, lambda_sg, width, Surrogate(surrogate))


def _fif_bw(ctx, g):
    drive, o, v_th, lam, width, surrogate = ctx
    if surrogate == Surrogate.PIECEWISE_LINEAR:
        g_v = np.sum(g * lam * surrogate_window(drive, v_th, width) * drive)
    else:
        g_v = np.sum(g * (1 - o))
    return g * o, np.asarray(g_v, drive.dtype)


fif_op = dc.register_custom_op("fif", _fif_fw, _fif_bw, arity=2)


def _hb_fw(drive, v_th, *, bound=1.0, lambda_sg=1.0, width=1.0):
    o = drive >= v_th
    y = np.minimum(np.where(o, drive, 0), bound).astype(drive.dtype)
    return y, (drive, o, v_th, bound, lambda_sg, width)


def _hb_bw(ctx, g):
    drive, o, v_th, bound, lam, width = ctx
    pass_through = o & (drive < bound)
    g_v = np.sum(g * lam * surrogate_window(drive, v_th, width) * np.minimum(drive, bound))
    return g * pass_through, np.asarray(g_v, drive.dtype)


hardbound_op = dc.register_custom_op("hardbound_fif", _hb_fw, _hb_bw, arity=2)


def _if_fw(drive, v_th, *, lambda_sg=1.0, width=1.0):
    o = drive >= v_th
    return np.where(o, v_th, 0).astype(drive.dtype), (drive, o, v_th, lambda_sg, width)


def _if_bw(ctx, g):
    # y = H(u - v) v: the Heaviside derivative is replaced by the window
    drive, o, v_th, lam, width = ctx
    win = lam * surrogate_window(drive, v_th, width)
    return g * win * v_th, np.asarray(np.sum(g * o), drive.dtype)


if_op = dc.register_custom_op("if", _if_fw, _if_bw, arity=2)


def activate(drive: dc.Node, v_th: dc.Node, k: dc.Node, r: dc.Node, params: NeuronParams) -> dc.Node:
    """Apply the configured density activation inside a graph."""
    kind = params.kind
    width = _width(params)
    if kind == NeuronKind.BFIF:
        return bfif_op(drive, v_th, k, r, lambda_sg=params.lambda_sg, window=params.window,
                       surrogate=params.surrogate.value)
    if kind == NeuronKind.FIF:
        return fif_op(drive, v_th, lambda_sg=params.lambda_sg, width=width, surrogate=params.surrogate.value)
    if kind == NeuronKind.HARD_BOUND_FIF:
        return hardbound_op(drive, v_th, bound=params.hard_bound_b, lambda_sg=params.lambda_sg, width=width)
    if kind == NeuronKind.IF:
        return if_op(drive, v_th, lambda_sg=params.lambda_sg, width=width)
    return dc.relu(drive)


def pre_activation(drive, params: NeuronParams):
    """Membrane potential that is compared against ``v_th`` (numpy)."""
    if params.kind == NeuronKind.BFIF:
        return bfif_pre(drive, params.k, params.r)
    return drive


def fired_mask(drive, params: NeuronParams):
    if params.kind == NeuronKind.RELU:
        return drive > 0
    return pre_activation(drive, params) >= params.v_th
