"""Feed-forward building blocks with exact reverse-mode gradients.

Layers are described by LayerSpec records and parameterized by one flat
ParamVector, so optimizers and the NTK assembly can treat the whole network
as a single coordinate vector. backward() returns gradients with respect to
both parameters and inputs; correctness is pinned by finite-difference tests
rather than trusted by construction.

Batch normalization is deliberately absent: per-layer He scaling at init
covers its conditioning role, and a parameter-free layer_norm kind is
available for the image pipeline where extra normalization helps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionError, FormatError, SpecError
from .tensorcore import Rng, rand_normal

LAYER_KINDS = ("linear", "relu", "residual_block", "se_block", "layer_norm")

_LN_EPS = 1e-8
_CHECKPOINT_MAGIC = b"OPNETCK1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    se_reduction: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise SpecError(f"dims must be positive: {self}")
        if self.kind in ("relu", "residual_block", "se_block", "layer_norm"):
            if self.in_dim != self.out_dim:
                raise SpecError(f"{self.kind} requires in_dim == out_dim: {self}")
        if self.kind == "se_block":
            if self.se_reduction <= 0 or self.in_dim % self.se_reduction != 0:
                raise SpecError(
                    f"se_reduction must divide in_dim: {self.in_dim} % {self.se_reduction}"
                )

    @property
    def se_channels(self) -> int:
        return self.in_dim // self.se_reduction

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "linear":
            return {"w": (self.in_dim, self.out_dim), "b": (self.out_dim,)}
        if self.kind == "residual_block":
            n = self.in_dim
            return {"w1": (n, n), "b1": (n,), "w2": (n, n), "b2": (n,)}
        if self.kind == "se_block":
            c = self.se_channels
            return {"w1": (c, c), "b1": (c,), "w2": (c, c), "b2": (c,)}
        return {}


@dataclass
class ParamVector:
    """All trainable parameters as one flat float64 vector plus a layout map."""

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        size = int(np.prod(shape))
        return self.values[offset : offset + size].reshape(shape)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.size


def build_layout(specs: list[LayerSpec]) -> tuple[dict, int]:
    """Stable name -> (offset, shape) map over the layer chain."""
    _validate_chain(specs)
    layout: dict[str, tuple[int, tuple[int, ...]]] = {}
    offset = 0
    for i, spec in enumerate(specs):
        for pname, shape in spec.param_shapes().items():
            layout[f"L{i}.{spec.kind}.{pname}"] = (offset, shape)
            offset += int(np.prod(shape))
    return layout, offset


def _validate_chain(specs: list[LayerSpec]) -> None:
    if not specs:
        raise SpecError("layer chain is empty")
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_dim != cur.in_dim:
            raise SpecError(
                f"layer dims do not chain: {prev.kind}({prev.out_dim}) -> {cur.kind}({cur.in_dim})"
            )


def init_params(specs: list[LayerSpec], rng: Rng, scheme: str = "he") -> ParamVector:
    """He-scaled normal weights (std = sqrt(2/fan_in)), zero biases.

    scheme="zero" gives an all-zero vector, handy for stub models in tests.
    """
    layout, total = build_layout(specs)
    values = np.zeros(total, dtype=np.float64)
    params = ParamVector(values, layout)
    if scheme == "zero":
        return params
    if scheme != "he":
        raise SpecError(f"unknown init scheme {scheme!r}")
    for name, (offset, shape) in layout.items():
        if name.rsplit(".", 1)[1].startswith("w"):
            fan_in = shape[0]
            block = rand_normal(rng, shape, mean=0.0, std=np.sqrt(2.0 / fan_in))
            values[offset : offset + block.size] = block.ravel()
    return params


@dataclass
class Mlp:
    layers: list[LayerSpec]
    params: ParamVector

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def mlp(specs: list[LayerSpec], rng: Rng, scheme: str = "he") -> Mlp:
    return Mlp(specs, init_params(specs, rng, scheme))


def dense_stack(dims: list[int]) -> list[LayerSpec]:
    """linear+relu chain through dims, ending with a bare linear layer."""
    specs = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        specs.append(LayerSpec("linear", a, b))
        if i < len(dims) - 2:
            specs.append(LayerSpec("relu", b, b))
    return specs


def _layer_forward(spec: LayerSpec, params: ParamVector, idx: int, x: np.ndarray):
    """Returns (output, cache) where cache holds what backward needs."""
    key = f"L{idx}.{spec.kind}"
    if spec.kind == "linear":
        w = params.view(f"{key}.w")
        b = params.view(f"{key}.b")
        return x @ w + b, (x,)
    if spec.kind == "relu":
        return np.maximum(x, 0.0), (x,)
    if spec.kind == "residual_block":
        w1 = params.view(f"{key}.w1")
        b1 = params.view(f"{key}.b1")
        w2 = params.view(f"{key}.w2")
        b2 = params.view(f"{key}.b2")
        h = x @ w1 + b1
        a = np.maximum(h, 0.0)
        return x + a @ w2 + b2, (x, h, a)
    if spec.kind == "se_block":
        c = spec.se_channels
        r = spec.se_reduction
        w1 = params.view(f"{key}.w1")
        b1 = params.view(f"{key}.b1")
        w2 = params.view(f"{key}.w2")
        b2 = params.view(f"{key}.b2")
        pooled = x.reshape(x.shape[0], c, r).mean(axis=2)
        h = pooled @ w1 + b1
        a = np.maximum(h, 0.0)
        gate = expit(a @ w2 + b2)
        y = (x.reshape(x.shape[0], c, r) * gate[:, :, None]).reshape(x.shape)
        return y, (x, pooled, h, a, gate)
    if spec.kind == "layer_norm":
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        y = (x - mu) * inv
        return y, (y, inv)
    raise SpecError(f"unknown layer kind {spec.kind!r}")


def _layer_backward(spec, params, grads, idx, cache, g):
    """Accumulates parameter grads into `grads`, returns the input gradient."""
    key = f"L{idx}.{spec.kind}"
    if spec.kind == "linear":
        (x,) = cache
        w = params.view(f"{key}.w")
        grads.view(f"{key}.w")[...] += x.T @ g
        grads.view(f"{key}.b")[...] += g.sum(axis=0)
        return g @ w.T
    if spec.kind == "relu":
        (x,) = cache
        return g * (x > 0.0)
    if spec.kind == "residual_block":
        x, h, a = cache
        w1 = params.view(f"{key}.w1")
        w2 = params.view(f"{key}.w2")
        da = g @ w2.T
        dh = da * (h > 0.0)
        grads.view(f"{key}.w2")[...] += a.T @ g
        grads.view(f"{key}.b2")[...] += g.sum(axis=0)
        grads.view(f"{key}.w1")[...] += x.T @ dh
        grads.view(f"{key}.b1")[...] += dh.sum(axis=0)
        return g + dh @ w1.T
    if spec.kind == "se_block":
        x, pooled, h, a, gate = cache
        c = spec.se_channels
        r = spec.se_reduction
        w1 = params.view(f"{key}.w1")
        w2 = params.view(f"{key}.w2")
        g3 = g.reshape(g.shape[0], c, r)
        x3 = x.reshape(x.shape[0], c, r)
        dx = (g3 * gate[:, :, None]).reshape(x.shape)
        dgate = (g3 * x3).sum(axis=2)
        dpre2 = dgate * gate * (1.0 - gate)
        grads.view(f"{key}.w2")[...] += a.T @ dpre2
        grads.view(f"{key}.b2")[...] += dpre2.sum(axis=0)
        dpre1 = (dpre2 @ w2.T) * (h > 0.0)
        grads.view(f"{key}.w1")[...] += pooled.T @ dpre1
        grads.view(f"{key}.b1")[...] += dpre1.sum(axis=0)
        dpooled = dpre1 @ w1.T
        dx += np.repeat(dpooled / r, r, axis=1)
        return dx
    if spec.kind == "layer_norm":
        y, inv = cache
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gym)
    raise SpecError(f"unknown layer kind {spec.kind!r}")


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Batch forward pass; x is [batch, in_dim]."""
    out, _ = forward_with_cache(net, x)
    return out


def forward_with_cache(net: Mlp, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match in_dim {net.in_dim}")
    caches = []
    out = x
    for i, spec in enumerate(net.layers):
        out, cache = _layer_forward(spec, net.params, i, out)
        caches.append(cache)
    return out, caches


def backward(net: Mlp, x: np.ndarray, out_grad: np.ndarray):
    """Exact reverse-mode pass: returns (param_grad, input_grad).

    out_grad is the gradient of the scalar objective with respect to the
    forward output; batch rows accumulate into one ParamVector.
    """
    out, caches = forward_with_cache(net, x)
    g = np.asarray(out_grad, dtype=np.float64)
    if g.shape != out.shape:
        raise DimensionError(f"out_grad shape {g.shape} does not match output {out.shape}")
    grads = net.params.zeros_like()
    for i in range(len(net.layers) - 1, -1, -1):
        g = _layer_backward(net.layers[i], net.params, grads, i, caches[i], g)
    return grads, g


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 header length, JSON header, f64-LE payload


def _specs_to_json(specs: list[LayerSpec]) -> list[dict]:
    return [
        {"kind": s.kind, "in_dim": s.in_dim, "out_dim": s.out_dim, "se_reduction": s.se_reduction}
        for s in specs
    ]


def _specs_from_json(items: list[dict]) -> list[LayerSpec]:
    return [
        LayerSpec(d["kind"], d["in_dim"], d["out_dim"], d.get("se_reduction", 0)) for d in items
    ]


def save_mlp(path, net: Mlp, seed: int | None = None, extra: dict | None = None) -> None:
    header = {
        "format": 1,
        "layers": _specs_to_json(net.layers),
        "layout": {k: [off, list(shape)] for k, (off, shape) in net.params.layout.items()},
        "seed": seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = net.params.values.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def load_mlp(path) -> tuple[Mlp, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        raw = f.read()
    specs = _specs_from_json(header["layers"])
    layout = {k: (off, tuple(shape)) for k, (off, shape) in header["layout"].items()}
    expected, _ = build_layout(specs)
    if layout != expected:
        raise FormatError("checkpoint layout does not match its layer specs")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    total = sum(int(np.prod(shape)) for _, shape in layout.values())
    if values.size != total:
        raise FormatError(f"payload holds {values.size} floats, layout expects {total}")
    return Mlp(specs, ParamVector(values, layout)), header
