"""Positional-encoded MLP radiance field with a spiking density output."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .neurons import NeuronKind, NeuronParams, activate, fired_mask, pre_activation

NEURON_KEYS = ("v_th", "k", "r")


@dataclass
class FieldConfig:
    pos_freqs: int = 10
    dir_freqs: int = 4
    hidden_width: int = 64
    depth_layers: int = 4
    include_raw_input: bool = True
    density_bias_init: float = 0.5       # start with every density neuron firing
    density_activation: NeuronParams = field(default_factory=NeuronParams)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.density_activation, dict):
            self.density_activation = NeuronParams(**self.density_activation)
        if self.pos_freqs < 1 or self.dir_freqs < 1:
            raise dc.ContractViolation("frequency counts must be >= 1")
        if self.hidden_width < 8:
            raise dc.ContractViolation("hidden_width must be >= 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["density_activation"] = self.density_activation.to_dict()
        return d

    @property
    def pos_dim(self) -> int:
        return (3 if self.include_raw_input else 0) + 6 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        return (3 if self.include_raw_input else 0) + 6 * self.dir_freqs

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        H = self.hidden_width
        shapes = []
        fan = self.pos_dim
        for i in range(self.depth_layers):
            shapes += [(f"W{i}", (fan, H)), (f"b{i}", (H,))]
            fan = H
        shapes += [
            ("W_sigma", (H, 1)), ("b_sigma", (1,)),
            ("W_feat", (H, H)), ("b_feat", (H,)),
            ("W_dir", (H + self.dir_dim, H // 2)), ("b_dir", (H // 2,)),
            ("W_rgb", (H // 2, 3)), ("b_rgb", (3,)),
        ]
        return shapes


@dataclass
class FieldParams:
    config: FieldConfig
    arrays: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.arrays["W0"].dtype

    def names(self) -> list[str]:
        return list(self.arrays)

    def neuron(self) -> NeuronParams:
        a = self.arrays
        return self.config.density_activation.with_(
            v_th=float(a["v_th"]), k=float(a["k"]), r=float(a["r"]))

    def nodes(self, requires_grad: bool = True) -> dict[str, dc.Node]:
        return {n: dc.Node(v, requires_grad=requires_grad, name=n) for n, v in self.arrays.items()}

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.config, {n: v.astype(dtype) for n, v in self.arrays.items()})

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {n: v.copy() for n, v in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "FieldParams":
        flat = np.asarray(flat).ravel()
        if flat.size != self.size():
            raise dc.ContractViolation(f"parameter count mismatch: {flat.size} != {self.size()}")
        out, i = {}, 0
        for n, v in self.arrays.items():
            out[n] = flat[i:i + v.size].reshape(v.shape).astype(v.dtype)
            i += v.size
        return FieldParams(self.config, out)

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(config: FieldConfig, dtype=np.float32) -> FieldParams:
    """Fan-in uniform init; the neuron starts at k=1, r=100, v_th=0 by default.

    The density bias starts positive so every sample fires at first: a
    neuron below threshold passes no gradient to its drive, so a field that
    starts silent never learns.
    """
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in config.layer_shapes():
        fan_in = shape[0]
        if name.startswith("b"):
            fan_in = arrays["W" + name[1:]].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    arrays["b_sigma"] = np.full((1,), config.density_bias_init, dtype=dtype)
    na = config.density_activation
    arrays["v_th"] = np.asarray(na.v_th, dtype=dtype)
    arrays["k"] = np.asarray(na.k, dtype=dtype)
    arrays["r"] = np.asarray(na.r, dtype=dtype)
    return FieldParams(config, arrays)


def positional_encode(v, L: int, include_raw: bool = True) -> np.ndarray:
    """[v] ++ [sin(2^j pi v), cos(2^j pi v)] for j = 0..L-1, along the last axis."""
    if L < 1:
        raise dc.ContractViolation("L must be >= 1")
    v = np.asarray(v)
    if v.ndim == 1:
        return positional_encode(v[None], L, include_raw)[0]
    parts = [v] if include_raw else []
    for j in range(L):
        arg = (2.0 ** j) * np.pi * v
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1).astype(v.dtype if v.dtype.kind == "f" else np.float64, copy=False)


def _linear(h: dc.Node, nodes: Mapping[str, dc.Node], w: str, b: str) -> dc.Node:
    return dc.add_bias(dc.matmul(h, nodes[w]), nodes[b])


def _trunk(x: np.ndarray, nodes, config: FieldConfig, probe: list | None = None):
    dtype = nodes["W0"].dtype
    h = dc.const(positional_encode(x.astype(dtype), config.pos_freqs, config.include_raw_input))
    for i in range(config.depth_layers):
        z = _linear(h, nodes, f"W{i}", f"b{i}")
        if probe is not None:
            probe.append(z.value > 0)
        try:
            h = dc.relu(z)
        except dc.NumericError as e:
            raise dc.NumericError(f"layer {i}", str(e)) from e
    drive = dc.reshape(_linear(h, nodes, "W_sigma", "b_sigma"), (x.shape[0],))
    return h, drive


def _density(drive: dc.Node, nodes, config: FieldConfig, probe: list | None = None) -> dc.Node:
    na = config.density_activation
    if probe is not None:
        current = na.with_(v_th=float(nodes["v_th"].value), k=float(nodes["k"].value), r=float(nodes["r"].value))
        probe.append(fired_mask(drive.value, current))
    return activate(drive, nodes["v_th"], nodes["k"], nodes["r"], na)


@dataclass
class FieldOutput:
    sigma: dc.Node   # (P,)
    rgb: dc.Node     # (P, 3)
    drive: dc.Node   # (P,) input to the density neuron
    u_pre: np.ndarray


def density_radiance(x, d, params: FieldParams | Mapping[str, dc.Node], probe: list | None = None) -> FieldOutput:
    """Evaluate density and colour at points ``x`` (P, 3) seen along ``d`` (P, 3)."""
    nodes, config = _resolve(params)
    x = np.atleast_2d(np.asarray(x))
    d = np.atleast_2d(np.asarray(d))
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1) > 1e-5):
        raise dc.ContractViolation("view directions must be unit length")
    h, drive = _trunk(x, nodes, config, probe)
    sigma = _density(drive, nodes, config, probe)
    feat = _linear(h, nodes, "W_feat", "b_feat")
    dtype = nodes["W0"].dtype
    pe_d = dc.const(positional_encode(d.astype(dtype), config.dir_freqs, config.include_raw_input))
    hd = dc.relu(_linear(dc.concat_cols([feat, pe_d]), nodes, "W_dir", "b_dir"))
    if probe is not None:
        probe.append(hd.value > 0)
    rgb = dc.sigmoid(_linear(hd, nodes, "W_rgb", "b_rgb"))
    na = config.density_activation.with_(
        v_th=float(nodes["v_th"].value), k=float(nodes["k"].value), r=float(nodes["r"].value))
    return FieldOutput(sigma, rgb, drive, pre_activation(drive.value, na))


def density(x, params, probe: list | None = None) -> dc.Node:
    nodes, config = _resolve(params)
    x = np.atleast_2d(np.asarray(x))
    _, drive = _trunk(x, nodes, config, probe)
    return _density(drive, nodes, config, probe)


_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)


def density_gradient_fd(x, params, eps: float = 1e-3, probe: list | None = None) -> dc.Node:
    """Central-difference density gradient (P, 3) that stays on the tape.

    The six probes per point go through the network as one stacked batch, so
    L_g gradients reach the weights without nested autodiff.
    """
    if eps <= 0:
        raise dc.ContractViolation("eps must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    P = x.shape[0]
    probes = (x[:, None, :] + eps * _OFFSETS[None]).reshape(6 * P, 3)
    sig = dc.reshape(density(probes, params, probe), (P, 6))
    comps = [dc.mul(dc.sub(dc.cols(sig, 2 * a), dc.cols(sig, 2 * a + 1)), 1.0 / (2 * eps)) for a in range(3)]
    return dc.concat_cols(comps)


def _resolve(params):
    if isinstance(params, FieldParams):
        return params.nodes(requires_grad=False), params.config
    nodes, config = params
    return nodes, config


def bound_node_set(params: FieldParams, requires_grad=True):
    """(nodes, config) pair accepted by the forward functions."""
    return params.nodes(requires_grad), params.config


__all__ = [
    "FieldConfig", "FieldParams", "FieldOutput", "init_params", "positional_encode",
    "density_radiance", "density", "density_gradient_fd", "bound_node_set", "NeuronKind",
]


def field_fn(params: FieldParams, dtype=None):
    """Plain numpy closure ``(x, d) -> (sigma, rgb)`` for rendering and evaluation."""
    p = params if dtype is None else params.astype(dtype)
    nodes = p.nodes(requires_grad=False)

    def fn(x, d):
        out = density_radiance(x, d, (nodes, p.config))
        return out.sigma.value, out.rgb.value

    return fn
