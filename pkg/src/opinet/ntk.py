"""Empirical tangent-kernel diagnostics for the field network.

The kernel between two probe points is the inner product of parameter
gradients, Theta(x, x') = grad_u(x) . grad_u(x'), assembled as J J^T from the
per-receiver parameter Jacobian. Its spectrum drives a spectral learning-rate
rule, a drift penalty against the initial kernel, and a linearized prediction
of full-batch gradient-descent residuals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .deeponet import DeepONetModel, ReceiverSet, SourceSpec, param_jacobian
from .errors import (
    ContractViolation,
    DegenerateKernelError,
    ParameterError,
    ResourceError,
)
from .tensorcore import sym_eig

PROBE_CAP = 256
# eigenvalues below this multiple of lambda_max count as numerically zero
POSITIVE_CUTOFF = 1e-10

REPORT_COLUMNS = (
    "step",
    "lambda_max",
    "lambda_min_pos",
    "condition_number",
    "drift_penalty",
    "adapted_lr",
)


@dataclass(frozen=True)
class NtkGram:
    """Kernel matrix over a fixed probe set, with its spectrum precomputed."""

    probe: ReceiverSet
    sources: tuple[SourceSpec, ...]
    theta: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    computed_at_step: int = 0

    @property
    def n(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class NtkSchedule:
    period: int
    base_lr: float
    safety: float = 0.9
    lr_floor: float = 1e-6
    lr_ceiling: float = 1.0

    def __post_init__(self):
        if self.period < 1:
            raise ParameterError(f"period must be >= 1, got {self.period}")
        if not (0.0 < self.safety <= 1.0):
            raise ParameterError(f"safety must lie in (0, 1], got {self.safety}")
        if not (0.0 < self.lr_floor <= self.lr_ceiling):
            raise ParameterError(
                f"need 0 < lr_floor <= lr_ceiling, got ({self.lr_floor}, {self.lr_ceiling})"
            )


def gram_from_theta(
    theta: np.ndarray,
    probe_sources: list[SourceSpec],
    probe_receivers: ReceiverSet,
    step: int = 0,
) -> NtkGram:
    """Wrap a kernel matrix, enforcing symmetry and near-PSD invariants."""
    theta = np.asarray(theta, dtype=np.float64)
    asym = float(np.max(np.abs(theta - theta.T))) if theta.size else 0.0
    if asym > 1e-10:
        raise ContractViolation(f"kernel asymmetry {asym:.3e} exceeds 1e-10")
    eigenvalues, eigenvectors = sym_eig(theta)
    if eigenvalues[-1] < -1e-8:
        raise ContractViolation(
            f"kernel has eigenvalue {eigenvalues[-1]:.3e} below the -1e-8 PSD floor"
        )
    return NtkGram(
        probe=probe_receivers,
        sources=tuple(probe_sources),
        theta=theta,
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        computed_at_step=step,
    )


def gram_from_jacobian(
    jac: np.ndarray,
    probe_sources: list[SourceSpec],
    probe_receivers: ReceiverSet,
    step: int = 0,
) -> NtkGram:
    """Theta = J J^T with each pairwise dot written to both triangles."""
    raw = jac @ jac.T
    theta = np.tril(raw) + np.tril(raw, -1).T
    return gram_from_theta(theta, probe_sources, probe_receivers, step)


def assemble_gram(
    model: DeepONetModel,
    probe_sources: list[SourceSpec],
    probe_receivers: ReceiverSet,
    step: int = 0,
    cap: int = PROBE_CAP,
) -> NtkGram:
    if len(probe_receivers) > cap:
        raise ResourceError(
            f"probe has {len(probe_receivers)} points, over the cap of {cap}"
        )
    jac = param_jacobian(model, probe_sources, probe_receivers)
    return gram_from_jacobian(jac, probe_sources, probe_receivers, step)


def positive_spectrum(gram: NtkGram) -> tuple[float, float]:
    """(lambda_max, lambda_min_pos); raises if nothing clears the cutoff."""
    lam_max = float(gram.eigenvalues[0])
    cutoff = POSITIVE_CUTOFF * max(lam_max, 0.0)
    positive = gram.eigenvalues[gram.eigenvalues > cutoff]
    if positive.size == 0:
        raise DegenerateKernelError(
            f"no eigenvalue above {cutoff:.3e}; kernel is numerically rank zero"
        )
    return lam_max, float(positive[-1])


def adapt_lr(gram: NtkGram, schedule: NtkSchedule) -> float:
    """Spectral step size: safety * 2/(lambda_max + lambda_min_pos), clamped.

    This is the classical optimal fixed rate for gradient descent on a
    quadratic whose curvature spans [lambda_min_pos, lambda_max].
    """
    lam_max, lam_min_pos = positive_spectrum(gram)
    eta = schedule.safety * 2.0 / (lam_max + lam_min_pos)
    return float(min(max(eta, schedule.lr_floor), schedule.lr_ceiling))


def _check_same_probe(current: NtkGram, reference: NtkGram) -> None:
    if current.theta.shape != reference.theta.shape:
        raise ContractViolation(
            f"kernel shapes differ: {current.theta.shape} vs {reference.theta.shape}"
        )
    if current.sources != reference.sources or not np.array_equal(
        current.probe.points, reference.probe.points
    ):
        raise ContractViolation("kernels were assembled on different probe sets")


def ntk_drift_penalty(current: NtkGram, reference: NtkGram) -> float:
    """Normalized squared Frobenius distance to the reference kernel."""
    _check_same_probe(current, reference)
    diff = current.theta - reference.theta
    num = float(np.sum(diff * diff))
    den = max(float(np.sum(reference.theta * reference.theta)), 1e-12)
    return num / den


def predict_linearized_residuals(
    gram: NtkGram, initial_residual: np.ndarray, lr: float, steps: int
) -> np.ndarray:
    """Residual after `steps` of linearized GD: r_t = (I - lr*Theta)^t r_0.

    Computed by repeated multiplication; see residuals_via_spectrum for the
    eigenbasis route used as a cross-check.
    """
    if lr < 0:
        raise ParameterError(f"lr must be nonnegative, got {lr}")
    r = np.asarray(initial_residual, dtype=np.float64).copy()
    if r.shape != (gram.n,):
        raise ParameterError(f"residual shape {r.shape} does not match probe size {gram.n}")
    step_mat = np.eye(gram.n) - lr * gram.theta
    for _ in range(steps):
        r = step_mat @ r
    return r


def residuals_via_spectrum(
    gram: NtkGram, initial_residual: np.ndarray, lr: float, steps: int
) -> np.ndarray:
    """Same dynamics through the eigenbasis: V (1 - lr*lambda)^t V^T r_0."""
    r0 = np.asarray(initial_residual, dtype=np.float64)
    coeffs = gram.eigenvectors.T @ r0
    decay = (1.0 - lr * gram.eigenvalues) ** steps
    return gram.eigenvectors @ (decay * coeffs)


def report_row(
    gram: NtkGram, drift_penalty: float, adapted_lr: float
) -> dict[str, float]:
    lam_max, lam_min_pos = positive_spectrum(gram)
    return {
        "step": gram.computed_at_step,
        "lambda_max": lam_max,
        "lambda_min_pos": lam_min_pos,
        "condition_number": lam_max / lam_min_pos,
        "drift_penalty": drift_penalty,
        "adapted_lr": adapted_lr,
    }


def write_report(path, rows: list[dict]) -> None:
    """CSV spectrum log, one row per kernel recomputation."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row[col] for col in REPORT_COLUMNS})
