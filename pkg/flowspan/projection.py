# Copyright (c) 2024 flowspan developers
"""
Projection of observed flow onto the span of a flow basis.

The procedure is:

1. :py:func:`assemble` stacks the basis into a ``2HW x n`` matrix, one
   flattened field per column, after normalizing every column. Rotation
   columns get norm 1; translation columns get their disparity-free
   template scaled to norm 2 before the disparity multiplies in.
2. :py:func:`orthonormalize` takes the thin SVD and keeps the left singular
   vectors whose singular values exceed a threshold ``eps``.
3. :py:func:`project` computes ``U_s U_s^T flow`` and the residual norm,
   which is the flow reconstruction loss.
"""

import os
from dataclasses import dataclass
from logging import getLogger
from typing import List, Literal, Optional

import numpy as np
import pandas as pd
import scipy.linalg

from .basis import FlowBasis
from .geometry import FlowField, ImageShape, flatten, unflatten
from .impl.exceptions import FlowspanException

logger = getLogger(__name__)


DEFAULT_EPSILON = 1e-5
"""The singular-value threshold below which directions are dropped."""

CAMERA_LOSS_WEIGHT = 0.5
"""Weight of the camera-only solve in a dual solve."""

FULL_LOSS_WEIGHT = 1.0
"""Weight of the full-basis solve in a dual solve, and of a single solve."""

ThresholdMode = Literal["absolute", "relative"]
"""
How ``eps`` is compared to singular values.

``"absolute"`` compares raw singular values to ``eps``. ``"relative"``
compares them to ``eps * sigma_max``.
"""


class ProjectionException(FlowspanException):
    """An exception raised by the `flowspan.projection` module."""


class EnvironmentEpsilon:
    """
    A small class that holds a threshold override loaded from the environment.

    If the environment variable `FLOWSPAN_EPSILON` is set, its value
    replaces :py:data:`DEFAULT_EPSILON` wherever a caller does not pass an
    explicit threshold.
    """

    _env_var = "FLOWSPAN_EPSILON"

    @classmethod
    def epsilon(cls) -> float:
        value = os.environ.get(cls._env_var, None)

        if value is None:
            return DEFAULT_EPSILON

        try:
            eps = float(value)
        except ValueError as exc:
            raise ProjectionException(
                f"Environment variable {cls._env_var}='{value}' is not a number."
            ) from exc

        if not eps > 0:
            raise ProjectionException(
                f"Environment variable {cls._env_var} must be positive, not {eps}."
            )

        return eps


def _resolve_epsilon(eps: Optional[float]) -> float:
    if eps is None:
        return EnvironmentEpsilon.epsilon()
    if not eps > 0:
        raise ProjectionException(f"Threshold eps must be positive, not {eps}.")
    return float(eps)


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """
    A basis assembled into a matrix of normalized columns.

    Parameters
    ----------
    columns
        The ``2HW x n`` matrix.
    labels
        The label of each column.
    scales
        The factor each basis field was multiplied by. Coefficients with
        respect to the columns times these give coefficients with respect
        to the original, unnormalized basis fields.
    shape
        The image shape.
    """

    columns: np.ndarray
    labels: List[str]
    scales: np.ndarray
    shape: ImageShape

    @property
    def n_columns(self) -> int:
        return self.columns.shape[1]


def _column_scale(field_norm: float, target: float, label: str) -> float:
    if field_norm == 0.0:
        logger.warning("Basis field '%s' is zero; leaving it unscaled.", label)
        return 1.0
    return target / field_norm


def assemble(basis: FlowBasis) -> BasisMatrix:
    """
    Assemble a basis into a matrix of normalized columns.

    Parameters
    ----------
    basis
        A non-empty basis.

    Returns
    -------
        The matrix, with the record of per-column scaling.
    """
    if len(basis) == 0 or basis.shape is None:
        raise ProjectionException("Cannot assemble an empty basis.")

    scales = np.empty(len(basis))
    for k, member in enumerate(basis):
        if member.kind == "rotation":
            scales[k] = _column_scale(member.field.norm(), 1.0, member.label)
        else:
            scales[k] = _column_scale(member.template.norm(), 2.0, member.label)

    columns = np.stack([flatten(member.field) for member in basis], axis=1) * scales

    if not np.all(np.isfinite(columns)):
        raise ProjectionException("Assembled basis matrix has non-finite entries.")

    return BasisMatrix(columns, basis.labels, scales, basis.shape)


@dataclass(frozen=True, eq=False)
class Subspace:
    """
    An orthonormal basis for the span of a :py:class:`BasisMatrix`.

    Parameters
    ----------
    matrix
        The matrix that was decomposed.
    u
        The retained left singular vectors ``U_s``, ``2HW x r``.
    singular_values
        All ``n`` singular values, in decreasing order.
    vt
        The retained right singular vectors, ``r x n``.
    threshold
        The absolute cutoff actually applied.
    """

    matrix: BasisMatrix
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray
    threshold: float

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def retained_values(self) -> np.ndarray:
        return self.singular_values[: self.rank]

    @property
    def dropped_values(self) -> np.ndarray:
        return self.singular_values[self.rank :]

    def projector(self) -> np.ndarray:
        """The dense ``2HW x 2HW`` projector. Only sensible for small images."""
        return self.u @ self.u.T


def orthonormalize(
    matrix: BasisMatrix,
    eps: Optional[float] = None,
    *,
    mode: ThresholdMode = "absolute",
) -> Subspace:
    """
    Find an orthonormal basis for the span of the columns.

    Parameters
    ----------
    matrix
        The assembled basis.
    eps
        The singular-value threshold. Defaults to :py:data:`DEFAULT_EPSILON`
        or the `FLOWSPAN_EPSILON` environment override.
    mode
        Whether `eps` is absolute or relative to the largest singular value.

    Returns
    -------
        The retained left singular vectors and the full spectrum.
    """
    eps = _resolve_epsilon(eps)

    try:
        u, s, vt = scipy.linalg.svd(matrix.columns, full_matrices=False)
    except np.linalg.LinAlgError:
        logger.info("gesdd did not converge; retrying with gesvd.")
        try:
            u, s, vt = scipy.linalg.svd(
                matrix.columns, full_matrices=False, lapack_driver="gesvd"
            )
        except np.linalg.LinAlgError as exc:
            raise ProjectionException(
                f"SVD of a {matrix.columns.shape} basis matrix did not converge."
            ) from exc

    if mode == "absolute":
        threshold = eps
    elif mode == "relative":
        threshold = eps * (s[0] if s.size else 0.0)
    else:
        raise ProjectionException(f"Unknown threshold mode '{mode}'.")

    rank = int(np.count_nonzero(s > threshold))

    if rank < s.size:
        logger.debug(
            "Dropped %d of %d directions with singular values %s <= %g.",
            s.size - rank,
            s.size,
            s[rank:],
            threshold,
        )

    return Subspace(matrix, u[:, :rank], s, vt[:rank], threshold)


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """
    The outcome of projecting a flow onto a subspace.

    Parameters
    ----------
    reconstructed
        The projection of the observed flow onto the subspace.
    residual_norm
        ``||flow - reconstructed||``, the flow reconstruction loss in pixels.
    coefficients
        Least-squares coefficients with respect to the original,
        unnormalized basis fields. Minimum-norm (in normalized column
        coordinates) if the basis is rank deficient.
    labels
        The basis label for each coefficient.
    rank
        The number of retained singular vectors.
    singular_values
        The full spectrum of the normalized basis matrix.
    """

    reconstructed: FlowField
    residual_norm: float
    coefficients: np.ndarray
    labels: List[str]
    rank: int
    singular_values: np.ndarray

    @property
    def degenerate(self) -> bool:
        """`True` if the coefficients are not unique."""
        return self.rank < len(self.labels)

    def coefficient(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def coefficient_series(self) -> pd.Series:
        """The coefficients indexed by basis label."""
        return pd.Series(self.coefficients, index=self.labels, name="coefficient")


def project(subspace: Subspace, flow: FlowField) -> ProjectionResult:
    """
    Project an observed flow onto a subspace.

    Parameters
    ----------
    subspace
        From :py:func:`orthonormalize`.
    flow
        The observed flow, the same shape as the basis.

    Returns
    -------
        The projection, residual norm and coefficients.
    """
    shape = subspace.matrix.shape
    if flow.shape != shape:
        raise ProjectionException(
            f"Flow is {flow.shape.height} x {flow.shape.width} but the basis is "
            f"{shape.height} x {shape.width}."
        )

    target = flatten(flow)
    weights = subspace.u.T @ target
    reconstructed = subspace.u @ weights

    normalized = subspace.vt.T @ (weights / subspace.retained_values)
    coefficients = normalized * subspace.matrix.scales

    residual_norm = float(np.linalg.norm(target - reconstructed))

    return ProjectionResult(
        unflatten(reconstructed, shape),
        residual_norm,
        coefficients,
        list(subspace.matrix.labels),
        subspace.rank,
        subspace.singular_values,
    )


def project_onto(
    basis: FlowBasis,
    flow: FlowField,
    eps: Optional[float] = None,
    *,
    mode: ThresholdMode = "absolute",
) -> ProjectionResult:
    """Assemble, orthonormalize and project in one call."""
    return project(orthonormalize(assemble(basis), eps, mode=mode), flow)


def flow_reconstruction_loss(
    basis: FlowBasis,
    flow: FlowField,
    eps: Optional[float] = None,
    *,
    mode: ThresholdMode = "absolute",
) -> float:
    """
    The distance from a flow to the span of a basis.

    Parameters
    ----------
    basis
        The flow basis.
    flow
        The observed flow.
    eps
        The singular-value threshold.
    mode
        See :py:data:`ThresholdMode`.

    Returns
    -------
        ``||flow - U_s U_s^T flow||``.
    """
    return project_onto(basis, flow, eps, mode=mode).residual_norm


@dataclass(frozen=True)
class DualSolveLoss:
    """The weighted sum of a camera-only and a full-basis reconstruction loss."""

    total: float
    camera: float
    full: float
    camera_weight: float
    full_weight: float


def dual_solve_loss(
    camera: FlowBasis,
    full: FlowBasis,
    flow: FlowField,
    eps: Optional[float] = None,
    *,
    camera_weight: float = CAMERA_LOSS_WEIGHT,
    full_weight: float = FULL_LOSS_WEIGHT,
    mode: ThresholdMode = "absolute",
) -> DualSolveLoss:
    """
    Solve twice, once with only the camera basis and once with the full basis.

    This is the training objective used when an object embedding is
    learned: it keeps the disparity useful on its own even when the
    embedding could explain the flow.
    """
    camera_loss = flow_reconstruction_loss(camera, flow, eps, mode=mode)
    full_loss = flow_reconstruction_loss(full, flow, eps, mode=mode)

    return DualSolveLoss(
        camera_weight * camera_loss + full_weight * full_loss,
        camera_loss,
        full_loss,
        camera_weight,
        full_weight,
    )
