"""Image dataset ingestion, mask corruption, and reconstruction metrics.

Readers cover the two classic binary layouts: IDX (big-endian magic and
dims, unsigned byte pixels) and CIFAR fixed-size records (label bytes
followed by 3072 plane-major RGB bytes). Pixels are normalized to [0, 1]
at load time and every metric assumes that range.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .tensorcore import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 99.0

METRIC_REPORT_COLUMNS = (
    "name",
    "n",
    "psnr_mean",
    "psnr_std",
    "ssim_mean",
    "ssim_std",
    "mse_mean",
    "mse_std",
    "exact_matches",
)


@dataclass
class ImageBatch:
    """Images as [B x C x H x W] in [0, 1], with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        img = np.asarray(self.images, dtype=np.float64)
        if img.ndim != 4:
            raise DimensionError(f"images must be [B x C x H x W], got shape {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ParameterError(
                f"pixel values must lie in [0, 1], got range "
                f"[{img.min():.4g}, {img.max():.4g}]"
            )
        self.images = img
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (img.shape[0],):
                raise DimensionError(
                    f"labels must be one per image, got {lab.shape} for {img.shape[0]} images"
                )
            self.labels = lab


@dataclass(frozen=True)
class MaskSpec:
    """Square zero-fill mask: side length in pixels plus the corner seed."""

    side: int
    seed: int = 0

    def __post_init__(self):
        if self.side < 1:
            raise ParameterError(f"mask side must be >= 1, got {self.side}")


@dataclass(frozen=True)
class PsnrResult:
    db: float
    exact: bool


@dataclass(frozen=True)
class MetricReport:
    """Per-batch metric aggregate, mean and standard deviation over n images."""

    n: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    mse_mean: float
    mse_std: float
    exact_matches: int = 0


# ---------------------------------------------------------------------------
# readers


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"file truncated at offset {offset} reading {what}")
    return raw


def _read_idx(path) -> tuple[int, np.ndarray]:
    with open(path, "rb") as f:
        raw = _read_exact(f, 4, 0, "magic")
        (magic,) = struct.unpack(">I", raw)
        if magic == IDX_IMAGE_MAGIC:
            dims_raw = _read_exact(f, 12, 4, "image dims")
            n, h, w = struct.unpack(">III", dims_raw)
            payload = _read_exact(f, n * h * w, 16, f"{n}x{h}x{w} pixels")
            extra = f.read(1)
            if extra:
                raise FormatError(
                    f"trailing bytes at offset {16 + n * h * w}: header count does not match payload"
                )
            data = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
            return magic, data
        if magic == IDX_LABEL_MAGIC:
            dims_raw = _read_exact(f, 4, 4, "label count")
            (n,) = struct.unpack(">I", dims_raw)
            payload = _read_exact(f, n, 8, f"{n} labels")
            extra = f.read(1)
            if extra:
                raise FormatError(
                    f"trailing bytes at offset {8 + n}: header count does not match payload"
                )
            return magic, np.frombuffer(payload, dtype=np.uint8).copy()
        raise FormatError(f"bad IDX magic 0x{magic:08x} at offset 0")


def load_idx(path, labels_path=None) -> ImageBatch:
    """Read an IDX image file (optionally paired with an IDX label file).

    Images come back as [B x 1 x H x W] with pixels divided by 255.
    """
    magic, data = _read_idx(path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"expected image magic 0x{IDX_IMAGE_MAGIC:08x} in {path}, got 0x{magic:08x}"
        )
    images = data[:, None, :, :].astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        lmagic, labels = _read_idx(labels_path)
        if lmagic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"expected label magic 0x{IDX_LABEL_MAGIC:08x} in {labels_path}, "
                f"got 0x{lmagic:08x}"
            )
        if labels.shape[0] != images.shape[0]:
            raise FormatError(
                f"label count {labels.shape[0]} does not match image count {images.shape[0]}"
            )
    return ImageBatch(images, labels)


def load_cifar(path, coarse: bool = False) -> ImageBatch:
    """Read a CIFAR binary batch.

    Record size is inferred from the file length: 3073 bytes (1 label +
    3072 RGB) for the 10-class layout, 3074 (coarse + fine labels) for the
    100-class one. The coarse flag selects which label to keep and is only
    meaningful for the two-label layout.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise FormatError(f"{path} is empty")
    if coarse:
        if len(raw) % CIFAR100_RECORD != 0:
            raise FormatError(
                f"coarse labels need {CIFAR100_RECORD}-byte records; "
                f"{len(raw)} bytes is not a multiple"
            )
        record = CIFAR100_RECORD
    elif len(raw) % CIFAR10_RECORD == 0:
        record = CIFAR10_RECORD
    elif len(raw) % CIFAR100_RECORD == 0:
        record = CIFAR100_RECORD
    else:
        raise FormatError(
            f"{len(raw)} bytes is not a multiple of a CIFAR record "
            f"({CIFAR10_RECORD} or {CIFAR100_RECORD})"
        )
    data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    n_label_bytes = record - 3072
    if coarse:
        labels = data[:, 0]
    else:
        labels = data[:, n_label_bytes - 1]
    pixels = data[:, n_label_bytes:].reshape(-1, 3, 32, 32)
    return ImageBatch(pixels.astype(np.float64) / 255.0, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# corruption


def corrupt(batch: ImageBatch, mask: MaskSpec, rng: Rng | None = None):
    """Zero a random square per image; returns (corrupted batch, masks).

    Corners are drawn uniformly per image (row then column) from the given
    generator, defaulting to Rng(mask.seed). Masks are [B x H x W] with 1.0
    marking zeroed pixels; every channel shares the image's square.
    """
    b, _, h, w = batch.images.shape
    if mask.side > min(h, w):
        raise ParameterError(
            f"mask side {mask.side} exceeds image extent {min(h, w)}"
        )
    if rng is None:
        rng = Rng(mask.seed)
    images = batch.images.copy()
    masks = np.zeros((b, h, w))
    for i in range(b):
        ci = rng.randint(h - mask.side + 1)
        cj = rng.randint(w - mask.side + 1)
        images[i, :, ci : ci + mask.side, cj : cj + mask.side] = 0.0
        masks[i, ci : ci + mask.side, cj : cj + mask.side] = 1.0
    labels = None if batch.labels is None else batch.labels.copy()
    return ImageBatch(images, labels), masks


# ---------------------------------------------------------------------------
# metrics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b) -> PsnrResult:
    """Peak signal-to-noise ratio in dB against a unit dynamic range.

    An exact match has no finite PSNR; it is reported as the 99.0 dB
    sentinel with the exact flag set.
    """
    err = mse(a, b)
    if err == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    return PsnrResult(float(10.0 * np.log10(1.0 / err)), False)


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    g /= g.sum()
    return np.outer(g, g)


_SSIM_KERNEL = _ssim_kernel()


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3:
        return img.mean(axis=0)
    raise DimensionError(f"expected [H x W] or [C x H x W], got shape {img.shape}")


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(windows, _SSIM_KERNEL, axes=([2, 3], [0, 1]))


def ssim(a, b) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Moments are window-weighted without sample correction; the usual
    stabilizers are C1 = (K1 L)^2, C2 = (K2 L)^2 with K1 = 0.01, K2 = 0.03
    and unit dynamic range. RGB inputs are reduced by channel mean first.
    """
    a, b = _pair(a, b)
    ga, gb = _to_gray(a), _to_gray(b)
    h, w = ga.shape
    if min(h, w) < SSIM_WINDOW:
        raise ParameterError(
            f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    mu_a = _windowed_mean(ga)
    mu_b = _windowed_mean(gb)
    var_a = _windowed_mean(ga * ga) - mu_a * mu_a
    var_b = _windowed_mean(gb * gb) - mu_b * mu_b
    cov = _windowed_mean(ga * gb) - mu_a * mu_b
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def batch_metrics(reference, candidate) -> MetricReport:
    """Per-image psnr/ssim/mse over a batch, aggregated as mean and std."""
    ref = reference.images if isinstance(reference, ImageBatch) else np.asarray(reference)
    cand = candidate.images if isinstance(candidate, ImageBatch) else np.asarray(candidate)
    ref, cand = _pair(ref, cand)
    if ref.ndim != 4:
        raise DimensionError(f"expected a [B x C x H x W] batch, got shape {ref.shape}")
    psnrs, ssims, mses = [], [], []
    exact = 0
    for i in range(ref.shape[0]):
        p = psnr(ref[i], cand[i])
        exact += int(p.exact)
        psnrs.append(p.db)
        ssims.append(ssim(ref[i], cand[i]))
        mses.append(mse(ref[i], cand[i]))
    psnrs, ssims, mses = np.array(psnrs), np.array(ssims), np.array(mses)
    return MetricReport(
        n=ref.shape[0],
        psnr_mean=float(psnrs.mean()),
        psnr_std=float(psnrs.std()),
        ssim_mean=float(ssims.mean()),
        ssim_std=float(ssims.std()),
        mse_mean=float(mses.mean()),
        mse_std=float(mses.std()),
        exact_matches=exact,
    )


def write_metric_report(path, rows: dict[str, MetricReport]) -> None:
    """CSV table of named metric aggregates, one row per entry."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_REPORT_COLUMNS)
        writer.writeheader()
        for name, report in rows.items():
            writer.writerow(
                {
                    "name": name,
                    "n": report.n,
                    "psnr_mean": repr(report.psnr_mean),
                    "psnr_std": repr(report.psnr_std),
                    "ssim_mean": repr(report.ssim_mean),
                    "ssim_std": repr(report.ssim_std),
                    "mse_mean": repr(report.mse_mean),
                    "mse_std": repr(report.mse_std),
                    "exact_matches": report.exact_matches,
                }
            )


def read_metric_report(path) -> dict[str, MetricReport]:
    out: dict[str, MetricReport] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRIC_REPORT_COLUMNS:
            raise FormatError(f"unexpected metric report header in {path}")
        for row in reader:
            out[row["name"]] = MetricReport(
                n=int(row["n"]),
                psnr_mean=float(row["psnr_mean"]),
                psnr_std=float(row["psnr_std"]),
                ssim_mean=float(row["ssim_mean"]),
                ssim_std=float(row["ssim_std"]),
                mse_mean=float(row["mse_mean"]),
                mse_std=float(row["mse_std"]),
                exact_matches=int(row["exact_matches"]),
            )
    return out
