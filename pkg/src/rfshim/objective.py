"""Forward model and shimming metrics.

The combined field is ``s = A b`` (channel maps weighted by complex coil
weights). All metrics operate on the masked region only: samples outside the
mask are gathered away before any arithmetic, so they can never influence a
result. Weight vectors carry a canonical real parameterization
``[Re b_1..Re b_C, Im b_1..Im b_C]`` used by the gradient-based solvers and
the predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .fields import MultiChannelField


@dataclass(frozen=True)
class ShimWeights:
    """Complex per-coil weights.

    ``values`` is a (C,) complex128 vector. :meth:`to_real` /
    :meth:`from_real` form an exact bijection with the canonical 2C real
    layout.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 1 or v.size < 1:
            raise InvalidArgumentError("weights must be a non-empty vector")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("weights must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def to_real(self) -> np.ndarray:
        """Canonical 2C real layout [Re..., Im...]."""
        return np.concatenate([self.values.real, self.values.imag])

    @classmethod
    def from_real(cls, theta: np.ndarray) -> "ShimWeights":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size % 2 != 0:
            raise InvalidArgumentError("real parameterization must have even length")
        c = theta.size // 2
        return cls(values=theta[:c] + 1j * theta[c:])

    def quantized_f32(self) -> "ShimWeights":
        """Round to the nearest float32-representable values (persistence grid)."""
        return ShimWeights(values=self.values.astype(np.complex64).astype(np.complex128))

    def scaled(self, factor: complex) -> "ShimWeights":
        return ShimWeights(values=self.values * factor)


@dataclass(frozen=True)
class ObjectiveParams:
    """Regularization weight and the magnitude guard for ``|s| -> 0``."""

    lam: float = 0.0
    epsilon_mag: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError("lam must be >= 0")
        if not self.epsilon_mag > 0:
            raise InvalidArgumentError("epsilon_mag must be > 0")


def quadrature_weights(n_coils: int) -> ShimWeights:
    """Unit-magnitude weights whose phases follow the coil azimuths."""
    if n_coils < 1:
        raise InvalidArgumentError("n_coils must be >= 1")
    phases = 2.0 * math.pi * np.arange(n_coils) / n_coils
    return ShimWeights(values=np.exp(1j * phases))


def _check_compatible(field: MultiChannelField, weights: ShimWeights) -> None:
    if len(weights) != field.n_channels:
        raise InvalidArgumentError(
            f"weight count {len(weights)} != channel count {field.n_channels}"
        )


def combine(field: MultiChannelField, weights: ShimWeights) -> np.ndarray:
    """Combined complex field ``s = A b`` on the full grid (complex128)."""
    _check_compatible(field, weights)
    return np.tensordot(weights.values, field.grids.astype(np.complex128), axes=(0, 0))


def masked_columns(field: MultiChannelField, mask: np.ndarray) -> np.ndarray:
    """System matrix restricted to the mask: (count_inside, C) complex128.

    Gathering first makes every metric exactly independent of samples
    outside the mask.
    """
    if mask.shape != field.grids.shape[1:]:
        raise InvalidArgumentError("mask dimensions must match the field")
    if not mask.any():
        raise InvalidArgumentError("mask is empty")
    return field.grids[:, mask].astype(np.complex128).T


def _masked_combined(field, weights, mask):
    _check_compatible(field, weights)
    return masked_columns(field, mask) @ weights.values


def rmse_percent(
    field: MultiChannelField,
    weights: ShimWeights,
    mask: np.ndarray,
    target: np.ndarray,
) -> float:
    """Root-mean-square magnitude error over the mask, in % of the target.

    ``100 * sqrt( sum_mask (|s_v| - m_v)^2 / count_inside )``; zero exactly
    when the combined magnitude matches the target on every masked voxel.
    """
    s = _masked_combined(field, weights, mask)
    diff = np.abs(s) - target[mask].astype(np.float64)
    return float(100.0 * math.sqrt(float(diff @ diff) / diff.size))


def mls_objective(
    field: MultiChannelField,
    weights: ShimWeights,
    mask: np.ndarray,
    target: np.ndarray,
    params: ObjectiveParams = ObjectiveParams(),
) -> float:
    """Magnitude-least-squares objective
    ``sum_mask (|s_v| - m_v)^2 + lam * ||b||^2``."""
    s = _masked_combined(field, weights, mask)
    diff = np.abs(s) - target[mask].astype(np.float64)
    reg = params.lam * float(np.vdot(weights.values, weights.values).real)
    return float(diff @ diff) + reg


def objective_gradient(
    field: MultiChannelField,
    weights: ShimWeights,
    mask: np.ndarray,
    target: np.ndarray,
    params: ObjectiveParams = ObjectiveParams(),
) -> np.ndarray:
    """Gradient of :func:`mls_objective` in the canonical 2C real layout.

    Derived from the conjugate-coordinate derivative
    ``sum_mask (r_v - m_v) * (s_v / max(r_v, eps)) * conj(A_vc) + lam * b_c``
    with ``r_v = |s_v|``; the real gradient is twice its real/imag parts.
    The ``eps`` guard fixes the direction where the magnitude is not
    differentiable.
    """
    a = masked_columns(field, mask)
    _check_compatible(field, weights)
    s = a @ weights.values
    r = np.abs(s)
    m = target[mask].astype(np.float64)
    direction = s / np.maximum(r, params.epsilon_mag)
    conj_grad = a.conj().T @ ((r - m) * direction) + params.lam * weights.values
    return np.concatenate([2.0 * conj_grad.real, 2.0 * conj_grad.imag])
