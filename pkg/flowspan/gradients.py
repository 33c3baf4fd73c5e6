# Copyright (c) 2024 flowspan developers
"""
Gradients of the flow reconstruction loss.

The loss ``L = ||flow - P flow||`` depends on disparity and embedding only
through the span of the basis. Every basis field is linear in disparity
and in each embedding channel, so we can use the variable projection
identity: with ``r`` the residual and ``c`` the least-squares
coefficients, the derivative of ``L`` with respect to basis field ``k`` is
``-c_k r / L``. The chain rule through the field definitions then gives
``dL/dd`` and ``dL/dphi`` without ever differentiating the SVD.

The regularizers used to keep a learned disparity and embedding in range
are here too.
"""

from dataclasses import dataclass, field
from logging import getLogger
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.special

from .basis import FlowBasis, ObjectEmbedding
from .geometry import DisparityMap, FlowField, Intrinsics, PrincipalPoint, make_grid
from .impl.exceptions import FlowspanException
from .impl.family.analytic import (
    EmbeddingFamily,
    TranslationFamily,
    camera_only_family,
)
from .impl.family.base import BasisFamily
from .projection import (
    CAMERA_LOSS_WEIGHT,
    FULL_LOSS_WEIGHT,
    Subspace,
    ThresholdMode,
    assemble,
    orthonormalize,
    project,
)

logger = getLogger(__name__)


DEFAULT_GUARD_FACTOR = 10.0
"""
Singular values within this factor of the threshold make the loss untrustworthy.

A singular value ``s`` is near the threshold ``eps`` if
``eps / g < s < eps * g``.
"""

ZERO_LOSS_TOLERANCE = 1e-12
"""Losses below this fraction of ``||flow||`` are treated as exactly zero."""

DISPARITY_REGULARIZER_WEIGHT = 1e-6
"""Weight applied to the disparity regularizer."""

DISPARITY_REGULARIZER_LIMIT = 5.0
"""Pre-activation values above this are penalized."""

EMBEDDING_REGULARIZER_WEIGHT = 1e-6
"""Weight applied to the embedding regularizer."""

DEFAULT_FD_STEP = 1e-4
"""Relative step for central finite differences."""

CameraSpec = Union[Intrinsics, PrincipalPoint]
EmbeddingLike = Union[ObjectEmbedding, np.ndarray]


class GradientException(FlowspanException):
    """An exception raised by the `flowspan.gradients` module."""


class NearThresholdSingularValue(GradientException):
    """
    Some singular value is too close to the threshold for a reliable gradient.

    Near the threshold the retained rank, and with it the loss, can jump.
    Retrying with a slightly different ``eps`` usually helps.
    """

    def __init__(self, singular_values: np.ndarray, threshold: float, guard: float):
        self.singular_values = singular_values
        self.threshold = threshold
        self.guard = guard
        super().__init__(
            f"Singular values {singular_values} lie within a factor {guard} "
            f"of the threshold {threshold:g}."
        )


@dataclass(frozen=True)
class LossConfig:
    """
    Everything about the loss other than its inputs.

    Parameters
    ----------
    mode
        How ``eps`` is applied; see :py:data:`flowspan.projection.ThresholdMode`.
    guard_factor
        See :py:data:`DEFAULT_GUARD_FACTOR`.
    object_rotation
        With an embedding, also let each object rotate.
    translation_axes
        If set, e.g. ``"x"`` or ``"xz"``, use only those camera translation
        fields and no rotation. Ignored when an embedding is given.
    dual_solve
        With an embedding, add the loss against the camera-only basis.
    camera_weight
        Weight of the camera-only loss in a dual solve.
    full_weight
        Weight of the loss against the full basis.
    """

    mode: ThresholdMode = "absolute"
    guard_factor: float = DEFAULT_GUARD_FACTOR
    object_rotation: bool = False
    translation_axes: Optional[str] = None
    dual_solve: bool = False
    camera_weight: float = CAMERA_LOSS_WEIGHT
    full_weight: float = FULL_LOSS_WEIGHT

    def terms(
        self, camera: CameraSpec, with_embedding: bool
    ) -> List[Tuple[BasisFamily, float]]:
        """The families whose losses are summed, with their weights."""
        if with_embedding:
            full = EmbeddingFamily(camera, object_rotation=self.object_rotation)
            if self.dual_solve:
                return [
                    (camera_only_family(camera), self.camera_weight),
                    (full, self.full_weight),
                ]
            return [(full, self.full_weight)]

        if self.translation_axes is not None:
            translation = TranslationFamily(camera, self.translation_axes)
            return [(translation, self.full_weight)]

        return [(camera_only_family(camera), self.full_weight)]


@dataclass(frozen=True, eq=False)
class LossGradients:
    """
    The loss and its gradients.

    Parameters
    ----------
    loss_value
        The (weighted) flow reconstruction loss.
    d_disparity
        ``dL/dd``, shape ``(H, W)``.
    d_embedding
        ``dL/dphi``, shape ``(H, W, A)``, or `None` without an embedding.
    """

    loss_value: float
    d_disparity: np.ndarray
    d_embedding: Optional[np.ndarray] = None


def _embedding_array(embedding: Optional[EmbeddingLike]) -> Optional[np.ndarray]:
    if embedding is None:
        return None
    if isinstance(embedding, ObjectEmbedding):
        return embedding.data
    return np.asarray(embedding, dtype=np.float64)


def _check_guard_band(subspace: Subspace, guard: float):
    s = subspace.singular_values
    threshold = subspace.threshold
    near = s[(s > threshold / guard) & (s < threshold * guard)]
    if near.size:
        raise NearThresholdSingularValue(near, threshold, guard)


def _single_loss_grad(
    family: BasisFamily,
    disparity: DisparityMap,
    phi: Optional[np.ndarray],
    flow: FlowField,
    eps: Optional[float],
    config: LossConfig,
) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    grid = make_grid(disparity.shape)
    uses_phi = phi is not None and family.needs_embedding

    basis = family.build(grid, disparity, phi if uses_phi else None, check_norm=False)
    subspace = orthonormalize(assemble(basis), eps, mode=config.mode)
    _check_guard_band(subspace, config.guard_factor)

    result = project(subspace, flow)
    loss = result.residual_norm

    d_disparity = np.zeros(disparity.shape.as_tuple())
    d_phi = np.zeros_like(phi) if uses_phi else None

    if loss <= ZERO_LOSS_TOLERANCE * flow.norm():
        return loss, d_disparity, d_phi

    residual = flow.data - result.reconstructed.data

    unit_basis: Optional[FlowBasis] = None
    if uses_phi:
        # The fields with every phi_i set to one are the derivatives
        # of each embedding-weighted field with respect to phi_i.
        unit_basis = family.build(grid, disparity, np.ones_like(phi), check_norm=False)

    for member, coefficient in zip(basis, result.coefficients):
        if coefficient == 0.0:
            continue
        g = (-coefficient / loss) * residual
        if member.disparity_weighted:
            d_disparity += np.sum(g * member.template.data, axis=-1)
        if uses_phi and member.embedding_index is not None:
            source = unit_basis[member.label].field.data
            d_phi[..., member.embedding_index] += np.sum(g * source, axis=-1)

    return loss, d_disparity, d_phi


def loss_grad(
    disparity: DisparityMap,
    embedding: Optional[EmbeddingLike],
    camera: CameraSpec,
    flow: FlowField,
    eps: Optional[float] = None,
    config: Optional[LossConfig] = None,
) -> LossGradients:
    """
    The flow reconstruction loss and its gradients.

    Parameters
    ----------
    disparity
        Per-pixel inverse depth.
    embedding
        Per-pixel object embedding, or `None`. Arrays are used as given,
        without checking for unit length, so that the gradient is with
        respect to the raw values.
    camera
        Full intrinsics, or just a principal point for an unknown focal length.
    flow
        The observed flow.
    eps
        Singular-value threshold.
    config
        Loss options. Defaults to a single solve.

    Returns
    -------
        The loss and its gradients.

    Raises
    ------
    NearThresholdSingularValue
        If the loss is not reliably differentiable at this point.
    """
    if config is None:
        config = LossConfig()

    phi = _embedding_array(embedding)
    if phi is not None and phi.shape[:2] != disparity.shape.as_tuple():
        raise GradientException(
            f"Embedding is {phi.shape[0]} x {phi.shape[1]} but disparity is "
            f"{disparity.shape.height} x {disparity.shape.width}."
        )

    total = 0.0
    d_disparity = np.zeros(disparity.shape.as_tuple())
    d_phi = np.zeros_like(phi) if phi is not None else None

    for family, weight in config.terms(camera, phi is not None):
        loss, d_d, d_p = _single_loss_grad(family, disparity, phi, flow, eps, config)
        total += weight * loss
        d_disparity += weight * d_d
        if d_p is not None:
            d_phi += weight * d_p

    return LossGradients(total, d_disparity, d_phi)


def evaluate_loss(
    disparity: DisparityMap,
    embedding: Optional[EmbeddingLike],
    camera: CameraSpec,
    flow: FlowField,
    eps: Optional[float] = None,
    config: Optional[LossConfig] = None,
) -> float:
    """The same loss as :py:func:`loss_grad`, without gradients or guard checks."""
    if config is None:
        config = LossConfig()

    phi = _embedding_array(embedding)
    grid = make_grid(disparity.shape)

    total = 0.0
    for family, weight in config.terms(camera, phi is not None):
        basis = family.build(
            grid, disparity, phi if family.needs_embedding else None, check_norm=False
        )
        subspace = orthonormalize(assemble(basis), eps, mode=config.mode)
        total += weight * project(subspace, flow).residual_norm

    return total


@dataclass(frozen=True, eq=False)
class GradientCheck:
    """
    The outcome of comparing analytic gradients to finite differences.

    The relative error is normwise: the largest absolute difference over
    the checked coordinates divided by the largest numerical gradient
    entry.
    """

    max_relative_error: float
    worst_coordinate: Tuple[str, Tuple[int, ...]]
    analytic: np.ndarray
    numeric: np.ndarray
    coordinates: List[Tuple[str, Tuple[int, ...]]] = field(repr=False)
    loss_value: float = 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error <= tolerance


def gradient_check(
    disparity: DisparityMap,
    embedding: Optional[EmbeddingLike],
    camera: CameraSpec,
    flow: FlowField,
    eps: Optional[float] = None,
    config: Optional[LossConfig] = None,
    *,
    step: float = DEFAULT_FD_STEP,
    max_coordinates: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradientCheck:
    """
    Check :py:func:`loss_grad` against central finite differences.

    Parameters
    ----------
    disparity, embedding, camera, flow, eps, config
        As for :py:func:`loss_grad`.
    step
        The step for coordinate ``x`` is ``step * max(|x|, 1e-3)``.
    max_coordinates
        Check only a random sample of this many coordinates.
    rng
        Source of the sample.

    Returns
    -------
        The comparison.
    """
    grads = loss_grad(disparity, embedding, camera, flow, eps, config)
    phi = _embedding_array(embedding)

    coordinates: List[Tuple[str, Tuple[int, ...]]] = [
        ("disparity", index) for index in np.ndindex(*disparity.data.shape)
    ]
    if phi is not None:
        coordinates += [("embedding", index) for index in np.ndindex(*phi.shape)]

    if max_coordinates is not None and max_coordinates < len(coordinates):
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = np.sort(
            rng.choice(len(coordinates), size=max_coordinates, replace=False)
        )
        coordinates = [coordinates[k] for k in chosen]

    def loss_at(d: np.ndarray, p: Optional[np.ndarray]) -> float:
        return evaluate_loss(DisparityMap(d), p, camera, flow, eps, config)

    analytic = np.empty(len(coordinates))
    numeric = np.empty(len(coordinates))

    for k, (which, index) in enumerate(coordinates):
        source = disparity.data if which == "disparity" else phi
        x = source[index]
        h = step * max(abs(x), 1e-3)

        plus = np.array(source)
        minus = np.array(source)
        plus[index] = x + h
        minus[index] = x - h

        if which == "disparity":
            f_plus, f_minus = loss_at(plus, phi), loss_at(minus, phi)
            analytic[k] = grads.d_disparity[index]
        else:
            f_plus = loss_at(disparity.data, plus)
            f_minus = loss_at(disparity.data, minus)
            analytic[k] = grads.d_embedding[index]

        numeric[k] = (f_plus - f_minus) / (2 * h)

    differences = np.abs(analytic - numeric)
    scale = max(float(np.max(np.abs(numeric))), np.finfo(float).tiny)
    worst = int(np.argmax(differences))

    check = GradientCheck(
        float(differences[worst] / scale),
        coordinates[worst],
        analytic,
        numeric,
        coordinates,
        grads.loss_value,
    )

    logger.debug(
        "Gradient check over %d coordinates: max relative error %.3g at %s.",
        len(coordinates),
        check.max_relative_error,
        check.worst_coordinate,
    )

    return check


@dataclass(frozen=True, eq=False)
class RegularizerTerm:
    """
    A regularizer value and gradient.

    `loss` and `gradient` are unweighted; the weighted versions are what a
    training objective adds.
    """

    loss: float
    gradient: np.ndarray
    weight: float

    @property
    def weighted_loss(self) -> float:
        return self.weight * self.loss

    @property
    def weighted_gradient(self) -> np.ndarray:
        return self.weight * self.gradient


def disparity_regularizer(
    z: np.ndarray, weight: float = DISPARITY_REGULARIZER_WEIGHT
) -> RegularizerTerm:
    """
    Penalize large disparity pre-activations.

    The loss is the image mean of ``max(0, z - 5)``. The subgradient at
    ``z = 5`` is taken to be 0.

    Parameters
    ----------
    z
        Per-pixel pre-activation, shape ``(H, W)``.
    weight
        The weight reported with the term.

    Returns
    -------
        The term.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise GradientException("Disparity pre-activation contains non-finite values.")

    excess = z - DISPARITY_REGULARIZER_LIMIT
    loss = float(np.mean(np.maximum(0.0, excess)))
    gradient = (excess > 0).astype(np.float64) / z.size

    return RegularizerTerm(loss, gradient, weight)


def embedding_regularizer(
    z: np.ndarray, weight: float = EMBEDDING_REGULARIZER_WEIGHT
) -> RegularizerTerm:
    """
    Penalize embedding pre-activations longer than unit length.

    The loss is the image mean of ``max(0, sum_i z_i^2 - 1)``.

    Parameters
    ----------
    z
        Per-pixel pre-normalization embedding, shape ``(H, W, A)``.
    weight
        The weight reported with the term.

    Returns
    -------
        The term.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise GradientException(f"Expected an (H, W, A) array, not shape {z.shape}.")
    if not np.all(np.isfinite(z)):
        raise GradientException("Embedding pre-activation contains non-finite values.")

    n_pixels = z.shape[0] * z.shape[1]
    excess = np.sum(z**2, axis=-1) - 1.0
    loss = float(np.mean(np.maximum(0.0, excess)))
    gradient = np.where((excess > 0)[..., np.newaxis], 2.0 * z, 0.0) / n_pixels

    return RegularizerTerm(loss, gradient, weight)


def sigmoid_disparity(z: np.ndarray) -> DisparityMap:
    """Disparity from a per-pixel pre-activation, through a sigmoid."""
    return DisparityMap(scipy.special.expit(np.asarray(z, dtype=np.float64)))


def sigmoid_chain(z: np.ndarray, d_disparity: np.ndarray) -> np.ndarray:
    """Carry ``dL/dd`` back through :py:func:`sigmoid_disparity` to ``dL/dz``."""
    s = scipy.special.expit(np.asarray(z, dtype=np.float64))
    return np.asarray(d_disparity) * s * (1.0 - s)
