"""Branch/trunk operator network with an inverse source-prediction head.

The field model is u(x) = sum_j <branch(z_j, lambda_j), trunk(x)>: the branch
encodes each point source (location plus complex strength as two reals), the
trunk encodes a query coordinate, and their inner products sum over sources.
The inverse head runs a shared MLP over per-receiver features (coordinates
plus observed value), mean-pools the per-receiver outputs, and decodes the
pooled vector into source parameters, which keeps it permutation invariant.

Summation and pooling orders are canonicalized (sources and receiver rows
sorted lexicographically) so results do not depend on list order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import neural
from .errors import DimensionError, FormatError, ParameterError
from .neural import LayerSpec, Mlp, ParamVector
from .tensorcore import Rng

_CHECKPOINT_MAGIC = b"OPNETCK1"

BRANCH_IN_FLUIDS = 4  # (z_x, z_y, lambda_re, lambda_im)
HEAD_IN = 3  # (x, y, observed)


@dataclass(frozen=True)
class SourceSpec:
    """One point source: 2D location and complex strength stored as (re, im)."""

    location: tuple[float, float]
    strength: tuple[float, float]

    def features(self) -> np.ndarray:
        return np.array(
            [self.location[0], self.location[1], self.strength[0], self.strength[1]],
            dtype=np.float64,
        )

    def sort_key(self):
        return (self.location[0], self.location[1], self.strength[0], self.strength[1])


@dataclass(frozen=True)
class ReceiverSet:
    """Observation coordinates, one row per receiver."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise DimensionError(f"receivers must be [T x 2] with T >= 1, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class DeepONetModel:
    branch: Mlp
    trunk: Mlp
    inverse_head: Mlp
    latent_dim: int
    n_max: int
    domain_lo: tuple[float, float] = (0.0, 0.0)
    domain_hi: tuple[float, float] = (1.0, 1.0)
    obs_feature_scale: float = 1.0

    def __post_init__(self):
        if self.branch.out_dim != self.latent_dim or self.trunk.out_dim != self.latent_dim:
            raise DimensionError(
                f"branch/trunk out_dims ({self.branch.out_dim}, {self.trunk.out_dim}) "
                f"must equal latent_dim {self.latent_dim}"
            )
        if self.inverse_head.out_dim != 4 * self.n_max:
            raise DimensionError(
                f"inverse head emits {self.inverse_head.out_dim}, needs 4*n_max={4 * self.n_max}"
            )

    @property
    def field_param_count(self) -> int:
        return len(self.branch.params) + len(self.trunk.params)


def default_model(
    rng: Rng,
    branch_in: int = BRANCH_IN_FLUIDS,
    latent_dim: int = 64,
    width: int = 128,
    depth: int = 3,
    n_max: int = 4,
    head_width: int = 128,
    use_se: bool = False,
    se_reduction: int = 8,
    use_layer_norm: bool = False,
) -> DeepONetModel:
    """Stock architecture: 3x128 branch and trunk, d=64, 2x128 inverse head."""

    def body(in_dim: int) -> list[LayerSpec]:
        specs = [LayerSpec("linear", in_dim, width), LayerSpec("relu", width, width)]
        for _ in range(depth - 1):
            specs.append(LayerSpec("residual_block", width, width))
            if use_layer_norm:
                specs.append(LayerSpec("layer_norm", width, width))
        if use_se:
            specs.append(LayerSpec("se_block", width, width, se_reduction=se_reduction))
        specs.append(LayerSpec("linear", width, latent_dim))
        return specs

    head_specs = neural.dense_stack([HEAD_IN, head_width, head_width, 4 * n_max])
    return DeepONetModel(
        branch=neural.mlp(body(branch_in), rng),
        trunk=neural.mlp(body(2), rng),
        inverse_head=neural.mlp(head_specs, rng),
        latent_dim=latent_dim,
        n_max=n_max,
    )


def sorted_sources(sources: list[SourceSpec]) -> list[SourceSpec]:
    return sorted(sources, key=SourceSpec.sort_key)


def predict_field(
    model: DeepONetModel, sources: list[SourceSpec], receivers: ReceiverSet
) -> np.ndarray:
    """Predicted scalar field at each receiver: sum_j <b_j, t_t>.

    Sources are accumulated one at a time in canonical sorted order, so the
    result is exactly the left-to-right sum of single-source predictions
    taken in that same order, and exactly invariant to input list order.
    """
    if not sources:
        raise ParameterError("predict_field needs at least one source")
    trunk_rows = neural.forward(model.trunk, receivers.points)
    out = np.zeros(len(receivers), dtype=np.float64)
    for src in sorted_sources(sources):
        b = neural.forward(model.branch, src.features()[None, :])[0]
        out += trunk_rows @ b
    return out


def field_from_branch_rows(
    model: DeepONetModel, branch_inputs: np.ndarray, coords: np.ndarray
) -> np.ndarray:
    """Low-level combiner: rows of branch inputs against query coordinates.

    Returns [n_inputs x n_coords]; the image pipeline feeds flattened images
    through this path, one row per image.
    """
    b = neural.forward(model.branch, branch_inputs)
    t = neural.forward(model.trunk, coords)
    return b @ t.T


def _head_features(model: DeepONetModel, observed: np.ndarray, receivers: ReceiverSet):
    observed = np.asarray(observed, dtype=np.float64).ravel()
    if observed.shape[0] != len(receivers):
        raise DimensionError(
            f"observed has {observed.shape[0]} values for {len(receivers)} receivers"
        )
    feats = np.column_stack(
        [receivers.points, observed * model.obs_feature_scale]
    )
    order = np.lexsort((feats[:, 2], feats[:, 1], feats[:, 0]))
    return feats[order]


def head_raw_output(model: DeepONetModel, observed, receivers) -> np.ndarray:
    """Mean-pooled head output, reshaped to [n_max, 4], before squashing."""
    feats = _head_features(model, observed, receivers)
    per_receiver = neural.forward(model.inverse_head, feats)
    return per_receiver.mean(axis=0).reshape(model.n_max, 4)


def squash_locations(model: DeepONetModel, raw_xy: np.ndarray) -> np.ndarray:
    """Affine sigmoid map from raw head outputs into the domain box."""
    lo = np.asarray(model.domain_lo)
    hi = np.asarray(model.domain_hi)
    return lo + (hi - lo) * expit(raw_xy)


def predict_sources(
    model: DeepONetModel, observed: np.ndarray, receivers: ReceiverSet, n_sources: int
) -> list[SourceSpec]:
    """Inverse direction: recover n_sources (location, strength) estimates."""
    if n_sources < 1:
        raise ParameterError(f"n_sources must be >= 1, got {n_sources}")
    if n_sources > model.n_max:
        raise ParameterError(f"n_sources={n_sources} exceeds configured maximum {model.n_max}")
    raw = head_raw_output(model, observed, receivers)[:n_sources]
    locs = squash_locations(model, raw[:, :2])
    return [
        SourceSpec((locs[j, 0], locs[j, 1]), (raw[j, 2], raw[j, 3]))
        for j in range(n_sources)
    ]


def param_jacobian(
    model: DeepONetModel, sources: list[SourceSpec], receivers: ReceiverSet
) -> np.ndarray:
    """Rows are field gradients: row t is d u(x_t) / d theta over branch+trunk.

    Each row comes from one backward() call seeded with a unit gradient at
    that receiver, matching the per-receiver definition exactly.
    """
    if not sources:
        raise ParameterError("param_jacobian needs at least one source")
    srcs = sorted_sources(sources)
    feats = np.stack([s.features() for s in srcs])
    branch_rows = neural.forward(model.branch, feats)
    b_sum = np.zeros(model.latent_dim)
    for j in range(branch_rows.shape[0]):
        b_sum += branch_rows[j]
    trunk_rows = neural.forward(model.trunk, receivers.points)

    t_count = len(receivers)
    jac = np.zeros((t_count, model.field_param_count), dtype=np.float64)
    nb = len(model.branch.params)
    for t in range(t_count):
        bgrad, _ = neural.backward(
            model.branch, feats, np.tile(trunk_rows[t], (feats.shape[0], 1))
        )
        tgrad, _ = neural.backward(model.trunk, receivers.points[t : t + 1], b_sum[None, :])
        jac[t, :nb] = bgrad.values
        jac[t, nb:] = tgrad.values
    return jac


def field_params(model: DeepONetModel) -> np.ndarray:
    """Concatenated (branch, trunk) parameter vector matching param_jacobian columns."""
    return np.concatenate([model.branch.params.values, model.trunk.params.values])


def set_field_params(model: DeepONetModel, flat: np.ndarray) -> None:
    nb = len(model.branch.params)
    if flat.size != model.field_param_count:
        raise DimensionError(f"expected {model.field_param_count} params, got {flat.size}")
    model.branch.params.values[...] = flat[:nb]
    model.trunk.params.values[...] = flat[nb:]


# ---------------------------------------------------------------------------
# checkpointing: one file holding all three subnetworks plus a manifest


def save_deeponet(path, model: DeepONetModel, seed: int | None = None, extra: dict | None = None):
    parts = []
    payloads = []
    for name, net in (("branch", model.branch), ("trunk", model.trunk), ("head", model.inverse_head)):
        parts.append(
            {
                "name": name,
                "layers": neural._specs_to_json(net.layers),
                "count": len(net.params),
            }
        )
        payloads.append(net.params.values.astype("<f8").tobytes())
    header = {
        "format": 1,
        "model": "deeponet",
        "manifest": {
            "latent_dim": model.latent_dim,
            "n_max": model.n_max,
            "domain_lo": list(model.domain_lo),
            "domain_hi": list(model.domain_hi),
            "obs_feature_scale": model.obs_feature_scale,
        },
        "parts": parts,
        "seed": seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for payload in payloads:
            f.write(payload)


def load_deeponet(path) -> tuple[DeepONetModel, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        raw = f.read()
    if header.get("model") != "deeponet":
        raise FormatError("checkpoint is not a deeponet model")
    nets = {}
    offset = 0
    for part in header["parts"]:
        specs = neural._specs_from_json(part["layers"])
        layout, total = neural.build_layout(specs)
        if total != part["count"]:
            raise FormatError(f"part {part['name']}: layout/count mismatch")
        nbytes = total * 8
        values = np.frombuffer(raw[offset : offset + nbytes], dtype="<f8").astype(np.float64)
        if values.size != total:
            raise FormatError(f"part {part['name']}: truncated payload at offset {offset}")
        offset += nbytes
        nets[part["name"]] = Mlp(specs, ParamVector(values, layout))
    man = header["manifest"]
    model = DeepONetModel(
        branch=nets["branch"],
        trunk=nets["trunk"],
        inverse_head=nets["head"],
        latent_dim=man["latent_dim"],
        n_max=man["n_max"],
        domain_lo=tuple(man["domain_lo"]),
        domain_hi=tuple(man["domain_hi"]),
        obs_feature_scale=man["obs_feature_scale"],
    )
    return model, header
