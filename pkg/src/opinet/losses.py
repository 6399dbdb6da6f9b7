"""Loss components for field fitting, source recovery, and reconstruction.

Four terms combine into the training objective: a data misfit, a PDE residual
in Helmholtz form (laplacian(u) + k^2 u - f) evaluated with a 5-point finite
difference stencil, a matched source-parameter error, and a perceptual term
computed through a frozen randomly initialized conv stack (a lightweight,
download-free stand-in for a pretrained feature network).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .deeponet import DeepONetModel, ReceiverSet, SourceSpec, predict_field
from .errors import DimensionError, NumericError, ParameterError
from .tensorcore import Rng, rand_normal

EXTRACTOR_SEED = 2024
EXTRACTOR_CHANNELS = (16, 32, 64)

LOSS_REPORT_COLUMNS = (
    "step",
    "L_data",
    "L_phys",
    "L_source",
    "L_perceptual",
    "L_ntk",
    "total",
)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.2
    delta: float = 0.3

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ParameterError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class PhysicsConfig:
    wavenumber: float = 1.0
    fd_step: float = 1e-3
    sigma: float = 2.0 / 64.0  # mollifier width, two cells of the stock data grid
    domain_lo: tuple[float, float] = (0.0, 0.0)
    domain_hi: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.wavenumber < 0:
            raise ParameterError(f"wavenumber must be >= 0, got {self.wavenumber}")
        if self.fd_step <= 0:
            raise ParameterError(f"fd_step must be positive, got {self.fd_step}")
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")


# ---------------------------------------------------------------------------
# data term


def data_loss(pred: np.ndarray, obs: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise DimensionError(f"pred has {pred.shape[0]} values, obs has {obs.shape[0]}")
    diff = pred - obs
    return float(np.mean(diff * diff))


def data_loss_grad(pred: np.ndarray, obs: np.ndarray) -> tuple[float, np.ndarray]:
    """(loss, d loss / d pred)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise DimensionError(f"pred has {pred.shape[0]} values, obs has {obs.shape[0]}")
    diff = pred - obs
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# physics term


def mollified_source_field(
    points: np.ndarray, sources: list[SourceSpec], sigma: float
) -> np.ndarray:
    """Forcing field from point sources smeared into unit-mass Gaussians.

    Each source contributes Re(lambda) * exp(-|x-z|^2 / (2 sigma^2)) / (2 pi
    sigma^2), so its integral over the plane is exactly Re(lambda).
    """
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros(points.shape[0])
    if not sources:
        return out
    scale = 1.0 / (2.0 * np.pi * sigma * sigma)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for src in sorted(sources, key=SourceSpec.sort_key):
        d = points - np.asarray(src.location)
        out += src.strength[0] * scale * np.exp(-np.sum(d * d, axis=1) * inv2s2)
    return out


def mollified_source_field_grad(
    points: np.ndarray, locations: np.ndarray, amplitudes: np.ndarray, sigma: float
):
    """Forcing values plus gradients w.r.t. source locations and amplitudes.

    Returns (f[T], df_dloc[T, N, 2], df_damp[T, N]).
    """
    points = np.asarray(points, dtype=np.float64)
    locations = np.asarray(locations, dtype=np.float64)
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    t, n = points.shape[0], locations.shape[0]
    scale = 1.0 / (2.0 * np.pi * sigma * sigma)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    f = np.zeros(t)
    df_dloc = np.zeros((t, n, 2))
    df_damp = np.zeros((t, n))
    for j in range(n):
        d = points - locations[j]
        bump = scale * np.exp(-np.sum(d * d, axis=1) * inv2s2)
        f += amplitudes[j] * bump
        df_damp[:, j] = bump
        # d/dz of exp(-|x-z|^2/(2s^2)) brings down +(x-z)/s^2
        df_dloc[:, j, :] = (amplitudes[j] * bump / (sigma * sigma))[:, None] * d
    return f, df_dloc, df_damp


def field_from_model(model: DeepONetModel, sources: list[SourceSpec]):
    """Callable x[N x 2] -> u[N] closing over a model and its input sources."""

    def field(points: np.ndarray) -> np.ndarray:
        return predict_field(model, sources, ReceiverSet(points))

    return field


def stencil_points(points: np.ndarray, h: float) -> np.ndarray:
    """Rows [x, x+h e1, x-h e1, x+h e2, x-h e2] stacked blockwise, [5T x 2]."""
    points = np.asarray(points, dtype=np.float64)
    e1 = np.array([h, 0.0])
    e2 = np.array([0.0, h])
    return np.vstack([points, points + e1, points - e1, points + e2, points - e2])


def fd_laplacian(values_5t: np.ndarray, t: int, h: float) -> np.ndarray:
    """5-point Laplacian from field values laid out by stencil_points."""
    u0 = values_5t[:t]
    up1, um1 = values_5t[t : 2 * t], values_5t[2 * t : 3 * t]
    up2, um2 = values_5t[3 * t : 4 * t], values_5t[4 * t :]
    return (up1 + um1 + up2 + um2 - 4.0 * u0) / (h * h)


def _check_interior(points: np.ndarray, cfg: PhysicsConfig) -> None:
    h2 = 2.0 * cfg.fd_step
    lo = np.asarray(cfg.domain_lo)
    hi = np.asarray(cfg.domain_hi)
    bad = np.where(
        np.any(points < lo + h2, axis=1) | np.any(points > hi - h2, axis=1)
    )[0]
    if bad.size:
        raise ParameterError(
            f"receivers {bad.tolist()} are closer than 2h={h2} to the domain boundary"
        )
    if points.shape[0] >= 2:
        # the stencil step must resolve below the receiver spacing
        d = points[:, None, :] - points[None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=2))
        dist[dist == 0.0] = np.inf
        spacing = float(dist.min())
        if np.isfinite(spacing) and cfg.fd_step >= spacing:
            raise ParameterError(
                f"fd_step {cfg.fd_step} is not below the minimum receiver spacing {spacing:.3e}"
            )


def physics_residuals(
    field, sources: list[SourceSpec], receivers: ReceiverSet, cfg: PhysicsConfig
) -> np.ndarray:
    """Helmholtz-form residual laplacian(u) + k^2 u - f at each receiver.

    `field` maps coordinate rows to field values (use field_from_model to
    wrap an operator model); `sources` feed the mollified forcing and may be
    empty for an unforced check.
    """
    pts = receivers.points
    _check_interior(pts, cfg)
    t = pts.shape[0]
    values = np.asarray(field(stencil_points(pts, cfg.fd_step)), dtype=np.float64)
    if values.shape != (5 * t,):
        raise DimensionError(f"field returned shape {values.shape}, wanted ({5 * t},)")
    lap = fd_laplacian(values, t, cfg.fd_step)
    k2 = cfg.wavenumber * cfg.wavenumber
    return lap + k2 * values[:t] - mollified_source_field(pts, sources, cfg.sigma)


def physics_loss(
    field, sources: list[SourceSpec], receivers: ReceiverSet, cfg: PhysicsConfig
) -> float:
    r = physics_residuals(field, sources, receivers, cfg)
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# source term


def _source_arrays(specs: list[SourceSpec]) -> tuple[np.ndarray, np.ndarray]:
    locs = np.array([s.location for s in specs], dtype=np.float64)
    strengths = np.array([s.strength for s in specs], dtype=np.float64)
    return locs, strengths


def match_sources(pred: list[SourceSpec], truth: list[SourceSpec]) -> np.ndarray:
    """Hungarian pairing on squared location distance; entry i gives the
    truth index matched to prediction i."""
    if len(pred) != len(truth):
        raise DimensionError(f"{len(pred)} predicted vs {len(truth)} true sources")
    pl, _ = _source_arrays(pred)
    tl, _ = _source_arrays(truth)
    d = pl[:, None, :] - tl[None, :, :]
    cost = np.sum(d * d, axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(pred), dtype=np.int64)
    out[rows] = cols
    return out


def source_loss(pred: list[SourceSpec], truth: list[SourceSpec]) -> float:
    loss, _, _ = source_loss_grad(pred, truth)
    return loss


def source_loss_grad(pred: list[SourceSpec], truth: list[SourceSpec]):
    """(loss, d loss/d pred locations [N x 2], d loss/d pred strengths [N x 2]).

    The assignment is held fixed while differentiating, the standard
    subgradient through a discrete matching.
    """
    assign = match_sources(pred, truth)
    pl, ps = _source_arrays(pred)
    tl, ts = _source_arrays(truth)
    n = len(pred)
    dz = pl - tl[assign]
    dl = ps - ts[assign]
    loss = float((np.sum(dz * dz) + np.sum(dl * dl)) / n)
    return loss, 2.0 * dz / n, 2.0 * dl / n


# ---------------------------------------------------------------------------
# perceptual term


@dataclass(frozen=True)
class FeatureExtractor:
    """Three strided 3x3 conv+ReLU stages with frozen random weights."""

    in_channels: int
    weights: tuple[np.ndarray, ...]


def feature_extractor(in_channels: int = 1) -> FeatureExtractor:
    if in_channels not in (1, 3):
        raise ParameterError(f"extractor supports 1 or 3 input channels, got {in_channels}")
    rng = Rng(EXTRACTOR_SEED)
    weights = []
    c_in = in_channels
    for c_out in EXTRACTOR_CHANNELS:
        fan_in = c_in * 9
        w = rand_normal(rng, (c_out, c_in, 3, 3), 0.0, np.sqrt(2.0 / fan_in))
        w.flags.writeable = False
        weights.append(w)
        c_in = c_out
    return FeatureExtractor(in_channels, tuple(weights))


def _as_chw(img: np.ndarray, in_channels: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, :, :]
    if img.ndim != 3 or img.shape[0] != in_channels:
        raise DimensionError(
            f"image shape {img.shape} does not provide {in_channels} leading channels"
        )
    return img


def _conv_down(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """3x3 conv, stride 2, zero padding 1; x is [Cin, H, W]."""
    c_in, h, wd = x.shape
    xp = np.zeros((c_in, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    ho = (h - 1) // 2 + 1
    wo = (wd - 1) // 2 + 1
    cols = np.empty((c_in * 9, ho * wo))
    for di in range(3):
        for dj in range(3):
            window = xp[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2]
            cols[np.arange(c_in) * 9 + di * 3 + dj] = window.reshape(c_in, -1)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(w.shape[0], ho, wo)


def _conv_down_input_grad(dout: np.ndarray, w: np.ndarray, in_shape) -> np.ndarray:
    """Adjoint of _conv_down with respect to its input."""
    c_in, h, wd = in_shape
    ho, wo = dout.shape[1], dout.shape[2]
    dcols = w.reshape(w.shape[0], -1).T @ dout.reshape(w.shape[0], -1)
    dxp = np.zeros((c_in, h + 2, wd + 2))
    for di in range(3):
        for dj in range(3):
            rows = dcols[np.arange(c_in) * 9 + di * 3 + dj].reshape(c_in, ho, wo)
            dxp[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2] += rows
    return dxp[:, 1:-1, 1:-1]


def extract_features(fx: FeatureExtractor, img: np.ndarray) -> np.ndarray:
    x = _as_chw(img, fx.in_channels)
    for w in fx.weights:
        x = np.maximum(_conv_down(x, w), 0.0)
    return x


def perceptual_loss(pred_img, obs_img, fx: FeatureExtractor) -> float:
    loss, _ = perceptual_loss_grad(pred_img, obs_img, fx)
    return loss


def perceptual_loss_grad(pred_img, obs_img, fx: FeatureExtractor):
    """(loss, d loss / d pred_img); the extractor weights stay frozen."""
    was_2d = np.asarray(pred_img).ndim == 2
    pred = _as_chw(pred_img, fx.in_channels)
    obs = _as_chw(obs_img, fx.in_channels)
    if pred.shape != obs.shape:
        raise DimensionError(f"image shapes differ: {pred.shape} vs {obs.shape}")

    acts = [pred]
    x = pred
    for w in fx.weights:
        x = np.maximum(_conv_down(x, w), 0.0)
        acts.append(x)
    f_obs = extract_features(fx, obs)

    diff = acts[-1] - f_obs
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    for i in reversed(range(len(fx.weights))):
        g = g * (acts[i + 1] > 0.0)
        g = _conv_down_input_grad(g, fx.weights[i], acts[i].shape)
    if was_2d:
        g = g[0]
    return loss, g


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class LossComponents:
    """Raw component values; None marks a term disabled for the task."""

    data: float | None = None
    phys: float | None = None
    source: float | None = None
    perceptual: float | None = None


def total_loss(components: LossComponents, weights: LossWeights = LossWeights()):
    """Weighted sum plus an itemized report.

    Report maps component name to {value, weight, weighted, enabled};
    disabled (None) components contribute zero.
    """
    pairs = (
        ("data", components.data, weights.alpha),
        ("phys", components.phys, weights.beta),
        ("source", components.source, weights.gamma),
        ("perceptual", components.perceptual, weights.delta),
    )
    total = 0.0
    report = {}
    for name, value, weight in pairs:
        if value is None:
            report[name] = {"value": 0.0, "weight": weight, "weighted": 0.0, "enabled": False}
            continue
        if not np.isfinite(value):
            raise NumericError(f"{name} loss is not finite: {value}")
        weighted = weight * value
        report[name] = {"value": float(value), "weight": weight, "weighted": weighted, "enabled": True}
        total += weighted
    return total, report


def write_loss_report(path, rows: list[dict]) -> None:
    """CSV training log, one row per step with all components itemized."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row[col] for col in LOSS_REPORT_COLUMNS})
