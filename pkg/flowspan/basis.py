# Copyright (c) 2024 flowspan developers
"""
Analytic flow bases.

This module builds every family of basis flow fields we work with:

* the six-field camera basis (three translations scaled by disparity and
  three disparity-free rotations),
* the eight-field basis for an unknown focal length, where the x and y
  rotations are each split into a pair of fields, one scaling with ``f``
  and one with ``1/f``,
* masked bases for a rigidly moving object, and
* the object-embedding basis, where each translation field is multiplied
  by each channel of a per-pixel unit embedding.

Every field is wrapped in a :py:class:`BasisField` that remembers its
disparity-free template, so that :py:mod:`flowspan.projection` can apply
its column normalization and :py:mod:`flowspan.gradients` can push
gradients back to disparity and embedding.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import (
    DisparityMap,
    FlowField,
    ImageShape,
    Intrinsics,
    PixelGrid,
    PrincipalPoint,
)
from .impl.exceptions import FlowspanException

logger = getLogger(__name__)


DEFAULT_EMBEDDING_DIM = 6
"""The embedding dimension ``A`` used unless told otherwise."""

MAX_EMBEDDING_DIM = 16
"""The largest embedding dimension we accept."""

EMBEDDING_NORM_TOLERANCE = 1e-6
"""How far from unit length an embedding vector may be before we reject it."""

FieldKind = Literal["translation", "rotation"]
"""
How a field is normalized before projection.

Rotation fields are scaled to norm 1. Translation fields, and anything
derived from them by masking or embedding weights, have their
disparity-free template scaled to norm 2.
"""

CameraSpec = Union[Intrinsics, PrincipalPoint]


class BasisException(FlowspanException):
    """An exception raised by the `flowspan.basis` module."""


@dataclass(frozen=True, eq=False)
class BasisField:
    """
    One labeled member of a flow basis.

    Parameters
    ----------
    label
        Symbolic tag, unique within a basis, e.g. ``"Tx"``, ``"R2y"`` or
        ``"Emb(3,Tz)"``.
    field
        The flow field itself.
    kind
        The normalization class, see :py:data:`FieldKind`.
    template
        The field before pointwise multiplication by disparity. For fields
        that do not depend on disparity this is `field` itself.
    disparity_weighted
        `True` if ``field = template * d``.
    embedding_index
        The embedding channel ``i`` if the field is ``phi_i`` times something.
    """

    label: str
    field: FlowField
    kind: FieldKind
    template: FlowField
    disparity_weighted: bool = False
    embedding_index: Optional[int] = None

    def masked(self, mask: np.ndarray, label: str) -> "BasisField":
        """
        Restrict to a binary mask. The result always normalizes as a translation.
        """
        return BasisField(
            label,
            self.field.masked(mask),
            "translation",
            self.template.masked(mask),
            self.disparity_weighted,
            self.embedding_index,
        )


class FlowBasis:
    """
    An ordered, labeled collection of flow fields that spans a subspace.

    Parameters
    ----------
    fields
        The members, in order. All must share one shape and labels must be
        unique.
    """

    def __init__(self, fields: Sequence[BasisField]):
        fields = tuple(fields)

        if len(fields) > 0:
            shapes = {f.field.data.shape for f in fields}
            if len(shapes) > 1:
                raise BasisException(
                    f"All basis fields must share one shape, found {sorted(shapes)}."
                )

        labels = [f.label for f in fields]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise BasisException(f"Duplicate basis labels {duplicates}.")

        self._fields = fields

    @property
    def fields(self) -> Tuple[BasisField, ...]:
        return self._fields

    @property
    def shape(self) -> Optional[ImageShape]:
        """The common shape, or `None` for an empty basis."""
        if not self._fields:
            return None
        return self._fields[0].field.shape

    @property
    def labels(self) -> List[str]:
        return [f.label for f in self._fields]

    def __len__(self) -> int:
        return len(self._fields)

    def __iter__(self) -> Iterator[BasisField]:
        return iter(self._fields)

    def __getitem__(self, key: Union[int, str]) -> BasisField:
        if isinstance(key, str):
            for f in self._fields:
                if f.label == key:
                    return f
            raise KeyError(key)
        return self._fields[key]

    def __contains__(self, label: str) -> bool:
        return label in self.labels

    def __repr__(self) -> str:
        return f"FlowBasis({self.labels})"

    def concat(self, other: "FlowBasis") -> "FlowBasis":
        """A basis holding our fields followed by those of `other`."""
        return FlowBasis(self._fields + other.fields)

    def select(self, labels: Sequence[str]) -> "FlowBasis":
        """A basis of just the named fields, in the order given."""
        return FlowBasis([self[label] for label in labels])

    def stack(self) -> np.ndarray:
        """All fields as an ``(n, H, W, 2)`` array."""
        return np.stack([f.field.data for f in self._fields])


@dataclass(frozen=True, eq=False)
class ObjectMask:
    """A binary per-pixel mask, 1 inside the object and 0 elsewhere."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise BasisException(f"A mask must be (H, W), not shape {data.shape}.")
        if not np.all((data == 0) | (data == 1)):
            raise BasisException("Object mask must be binary (only 0 and 1).")
        data = data.astype(np.float64)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> ImageShape:
        return ImageShape(*self.data.shape)

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def as_bool(self) -> np.ndarray:
        return self.data > 0.5


@dataclass(frozen=True, eq=False)
class ObjectEmbedding:
    """
    A per-pixel unit vector ``phi(u, v)`` in ``R^A``.

    The data is an ``(H, W, A)`` array. Every pixel must have unit length
    to within :py:data:`EMBEDDING_NORM_TOLERANCE`; use
    :py:func:`renormalize` to build one from unnormalized values.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        _check_embedding_array(data)
        norms = np.linalg.norm(data, axis=-1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > EMBEDDING_NORM_TOLERANCE:
            raise BasisException(
                f"Embedding vectors must have unit length; worst deviation is {worst:.3g}."
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        """The embedding dimension ``A``."""
        return self.data.shape[2]

    @property
    def shape(self) -> ImageShape:
        return ImageShape(self.data.shape[0], self.data.shape[1])

    @classmethod
    def from_labels(
        cls, labels: np.ndarray, dim: Optional[int] = None
    ) -> "ObjectEmbedding":
        """
        One-hot embedding of an integer label map.

        Pixels with label ``j`` get the unit vector ``e_j``. The result is
        the standard way to express a set of disjoint masks as an embedding.
        """
        labels = np.asarray(labels, dtype=int)
        if dim is None:
            dim = int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= dim:
            raise BasisException(
                f"Labels must lie in [0, {dim}), found [{labels.min()}, {labels.max()}]."
            )
        return cls(np.eye(dim)[labels])


def _check_embedding_array(data: np.ndarray):
    if data.ndim != 3:
        raise BasisException(f"An embedding must be (H, W, A), not shape {data.shape}.")
    if not 1 <= data.shape[2] <= MAX_EMBEDDING_DIM:
        raise BasisException(
            f"Embedding dimension must be in 1..{MAX_EMBEDDING_DIM}, not {data.shape[2]}."
        )
    if not np.all(np.isfinite(data)):
        raise BasisException("Embedding contains non-finite values.")


def renormalize(raw: np.ndarray) -> ObjectEmbedding:
    """
    Scale every pixel of an ``(H, W, A)`` array to unit length.

    Raises
    ------
    BasisException
        If some pixel is the zero vector.
    """
    raw = np.asarray(raw, dtype=np.float64)
    _check_embedding_array(raw)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise BasisException("Cannot renormalize an embedding with zero vectors.")
    return ObjectEmbedding(raw / norms)


def _check_shape(grid: PixelGrid, shape: ImageShape, what: str):
    if grid.shape != shape:
        raise BasisException(
            f"Shape mismatch: grid is {grid.shape.height} x {grid.shape.width} "
            f"but {what} is {shape.height} x {shape.width}."
        )


def translation_templates(
    grid: PixelGrid, camera: CameraSpec
) -> Tuple[FlowField, FlowField, FlowField]:
    """
    The translation fields with disparity set to one everywhere.

    With a :py:class:`PrincipalPoint` only, focal lengths are taken as 1.
    """
    fx, fy = _focal_lengths(camera)
    zero = np.zeros_like(grid.u)

    return (
        FlowField.from_components(np.full_like(grid.u, fx), zero),
        FlowField.from_components(zero, np.full_like(grid.u, fy)),
        FlowField.from_components(camera.cx - grid.u, camera.cy - grid.v),
    )


def _focal_lengths(camera: CameraSpec) -> Tuple[float, float]:
    if isinstance(camera, Intrinsics):
        return camera.fx, camera.fy
    return 1.0, 1.0


def translation_basis(
    grid: PixelGrid, camera: CameraSpec, disparity: DisparityMap
) -> List[BasisField]:
    """
    The three translation fields.

    ``Tx = (d fx, 0)``, ``Ty = (0, d fy)`` and ``Tz = (d (cx - u), d (cy - v))``.
    Flow from translation is proportional to disparity.

    Parameters
    ----------
    grid
        The pixel grid.
    camera
        Intrinsics, or just a principal point for unit focal length.
    disparity
        Per-pixel inverse depth.

    Returns
    -------
        Fields labeled ``Tx``, ``Ty`` and ``Tz``.
    """
    _check_shape(grid, disparity.shape, "disparity")

    templates = translation_templates(grid, camera)
    return [
        BasisField(
            label, template.masked(disparity.data), "translation", template, True
        )
        for label, template in zip(("Tx", "Ty", "Tz"), templates)
    ]


def rotation_basis(grid: PixelGrid, intrinsics: Intrinsics) -> List[BasisField]:
    """
    The three rotation fields for known intrinsics.

    They do not depend on disparity, since motion induced by a pure camera
    rotation is independent of depth.
    """
    fx, fy = intrinsics.fx, intrinsics.fy
    x = grid.u - intrinsics.cx
    y = grid.v - intrinsics.cy

    rx = FlowField.from_components(x * y / fy, fy + y**2 / fy)
    ry = FlowField.from_components(fx + x**2 / fx, x * y / fx)
    rz = FlowField.from_components(fx / fy * y, -fy / fx * x)

    return [
        BasisField(label, field, "rotation", field)
        for label, field in (("Rx", rx), ("Ry", ry), ("Rz", rz))
    ]


def rotation_basis_unknown_focal(
    grid: PixelGrid, principal_point: PrincipalPoint
) -> List[BasisField]:
    """
    The split x and y rotation fields for an unknown focal length.

    With ``fx = fy = f``, ``Rx = f R1x + (1/f) R2x`` and
    ``Ry = f R1y + (1/f) R2y``.

    Returns
    -------
        Fields labeled ``R1x``, ``R2x``, ``R1y`` and ``R2y``, in that order.
    """
    x = grid.u - principal_point.cx
    y = grid.v - principal_point.cy
    zero = np.zeros_like(x)
    one = np.ones_like(x)

    fields = (
        ("R1x", FlowField.from_components(zero, one)),
        ("R2x", FlowField.from_components(x * y, y**2)),
        ("R1y", FlowField.from_components(one, zero)),
        ("R2y", FlowField.from_components(x**2, x * y)),
    )
    return [BasisField(label, field, "rotation", field) for label, field in fields]


def _unit_ratio_rz(grid: PixelGrid, principal_point: PrincipalPoint) -> BasisField:
    # Rz with fx / fy fixed to 1; the 8-field basis cannot enforce fx = fy.
    x = grid.u - principal_point.cx
    y = grid.v - principal_point.cy
    field = FlowField.from_components(y, -x)
    return BasisField("Rz", field, "rotation", field)


def _rotation_fields(grid: PixelGrid, camera: CameraSpec) -> List[BasisField]:
    if isinstance(camera, Intrinsics):
        return rotation_basis(grid, camera)

    return rotation_basis_unknown_focal(grid, camera) + [_unit_ratio_rz(grid, camera)]


def camera_basis(
    grid: PixelGrid, intrinsics: Intrinsics, disparity: DisparityMap
) -> FlowBasis:
    """The six-field basis ``Tx, Ty, Tz, Rx, Ry, Rz`` for known intrinsics."""
    translations = translation_basis(grid, intrinsics, disparity)
    return FlowBasis(translations + rotation_basis(grid, intrinsics))


def unknown_focal_basis(
    grid: PixelGrid, principal_point: PrincipalPoint, disparity: DisparityMap
) -> FlowBasis:
    """
    The eight-field basis for an unknown focal length.

    The order is ``Tx, Ty, Tz, R1x, R2x, R1y, R2y, Rz``. Translation fields
    use unit focal length, which only rescales them.
    """
    if isinstance(principal_point, Intrinsics):
        principal_point = principal_point.principal_point

    return FlowBasis(
        translation_basis(grid, principal_point, disparity)
        + _rotation_fields(grid, principal_point)
    )


def masked_basis(
    mask: Union[ObjectMask, np.ndarray],
    base: FlowBasis,
    *,
    translation_only: bool = False,
    name: str = "m",
) -> FlowBasis:
    """
    Restrict a basis to a rigidly moving object.

    For any rigid object motion there is an equivalent camera motion, so
    the flow of a moving object lies in the span of the camera basis
    multiplied pointwise by the object's mask.

    Parameters
    ----------
    mask
        The binary object mask.
    base
        Usually a camera basis.
    translation_only
        If `True`, keep only ``Tx``, ``Ty`` and ``Tz`` from `base`, giving
        three dimensions per object.
    name
        Prefix for the output labels, which look like ``"m*Tx"``.

    Returns
    -------
        The masked basis. A mask that is zero everywhere gives zero fields;
        the rank collapse is left to the projection threshold.
    """
    if not isinstance(mask, ObjectMask):
        mask = ObjectMask(mask)

    if base.shape is not None and base.shape != mask.shape:
        raise BasisException(
            f"Mask is {mask.shape.height} x {mask.shape.width} but basis is "
            f"{base.shape.height} x {base.shape.width}."
        )

    fields = base.fields
    if translation_only:
        fields = tuple(base[label] for label in ("Tx", "Ty", "Tz"))

    if mask.area == 0:
        logger.warning("Mask '%s' is empty; its basis fields are all zero.", name)

    return FlowBasis([f.masked(mask.data, f"{name}*{f.label}") for f in fields])


def _embedding_data(
    embedding: Union[ObjectEmbedding, np.ndarray], check_norm: bool
) -> np.ndarray:
    if isinstance(embedding, ObjectEmbedding):
        return embedding.data
    if check_norm:
        return ObjectEmbedding(embedding).data

    data = np.asarray(embedding, dtype=np.float64)
    _check_embedding_array(data)
    return data


def _weighted(
    source: BasisField, weight: np.ndarray, index: int, label: str
) -> BasisField:
    return BasisField(
        label,
        source.field.masked(weight),
        "translation",
        source.template.masked(weight),
        source.disparity_weighted,
        index,
    )


def object_rotation_fields(
    embedding: Union[ObjectEmbedding, np.ndarray],
    rotation_fields: Sequence[BasisField],
    *,
    check_norm: bool = True,
) -> List[BasisField]:
    """
    The optional per-object rotation fields ``phi_i R``.

    These allow each object to rotate independently. They are off by
    default in :py:func:`embedding_basis`.
    """
    phi = _embedding_data(embedding, check_norm)

    return [
        _weighted(rotation, phi[..., i], i, f"Emb({i},{rotation.label})")
        for i in range(phi.shape[2])
        for rotation in rotation_fields
    ]


def embedding_translation_fields(
    grid: PixelGrid,
    camera: CameraSpec,
    disparity: DisparityMap,
    embedding: Union[ObjectEmbedding, np.ndarray],
    *,
    check_norm: bool = True,
) -> List[BasisField]:
    """
    The ``3A`` fields ``phi_i Tx, phi_i Ty, phi_i Tz``.

    Projecting onto these implicitly finds the ``3 x A`` matrix ``M`` that
    maps embedding space to per-axis translation.
    """
    phi = _embedding_data(embedding, check_norm)
    if phi.shape[:2] != grid.shape.as_tuple():
        raise BasisException(
            f"Embedding is {phi.shape[0]} x {phi.shape[1]} but grid is "
            f"{grid.shape.height} x {grid.shape.width}."
        )

    translations = translation_basis(grid, camera, disparity)

    return [
        _weighted(translation, phi[..., i], i, f"Emb({i},{translation.label})")
        for i in range(phi.shape[2])
        for translation in translations
    ]


def embedding_basis(
    grid: PixelGrid,
    camera: CameraSpec,
    disparity: DisparityMap,
    embedding: Union[ObjectEmbedding, np.ndarray],
    *,
    focal_known: Optional[bool] = None,
    object_rotation: bool = False,
    check_norm: bool = True,
) -> FlowBasis:
    """
    The object-embedding basis.

    This is ``3A`` embedding-weighted translation fields plus the camera
    rotation fields: three of them if the focal length is known, giving
    ``3A + 3`` dimensions, or the five unknown-focal fields ``R1x, R2x,
    R1y, R2y, Rz``, giving ``3A + 5``.

    Parameters
    ----------
    grid
        The pixel grid.
    camera
        Intrinsics when the focal length is known, or a principal point
        when it is not.
    disparity
        Per-pixel inverse depth.
    embedding
        The per-pixel unit embedding.
    focal_known
        Override the choice implied by the type of `camera`. Passing
        `False` with full intrinsics uses just their principal point.
    object_rotation
        If `True`, also add ``phi_i R`` for every rotation field.
    check_norm
        If `False`, accept an array whose rows are not unit length. This is
        only for finite-difference checks of gradients.

    Returns
    -------
        The basis.
    """
    if focal_known is None:
        focal_known = isinstance(camera, Intrinsics)
    if focal_known and not isinstance(camera, Intrinsics):
        raise BasisException("A known-focal embedding basis needs full intrinsics.")
    if not focal_known and isinstance(camera, Intrinsics):
        camera = camera.principal_point

    fields = embedding_translation_fields(
        grid, camera, disparity, embedding, check_norm=check_norm
    )
    rotations = _rotation_fields(grid, camera)
    fields += rotations

    if object_rotation:
        fields += object_rotation_fields(embedding, rotations, check_norm=check_norm)

    basis = FlowBasis(fields)

    logger.debug("Built embedding basis with %d fields.", len(basis))

    return basis
