# Copyright (c) 2024 flowspan developers
"""
The analytic basis families: camera, unknown focal, translation-only and embedding.
"""

from typing import Optional, Union

from flowspan.basis import (
    BasisException,
    FlowBasis,
    camera_basis,
    embedding_basis,
    translation_basis,
    unknown_focal_basis,
)
from flowspan.geometry import DisparityMap, Intrinsics, PixelGrid, PrincipalPoint
from flowspan.impl.family.base import BasisFamily, EmbeddingLike

CameraSpec = Union[Intrinsics, PrincipalPoint]


class CameraFamily(BasisFamily):
    """
    The six-field camera basis for known intrinsics.

    Users will rarely construct this directly; see
    :py:func:`flowspan.impl.family.analytic.family_for`.
    """

    name = "camera"

    def __init__(self, intrinsics: Intrinsics):
        self._intrinsics = intrinsics

    @property
    def intrinsics(self) -> Intrinsics:
        return self._intrinsics

    def build(self, grid, disparity, embedding=None, *, check_norm=True) -> FlowBasis:
        return camera_basis(grid, self._intrinsics, disparity)

    def cardinality(self, embedding_dim: int = 0) -> int:
        return 6

    def __repr__(self) -> str:
        return f"CameraFamily({self._intrinsics})"


class UnknownFocalFamily(BasisFamily):
    """The eight-field basis when only the principal point is known."""

    name = "unknown-focal"

    def __init__(self, camera: CameraSpec):
        if isinstance(camera, Intrinsics):
            camera = camera.principal_point
        self._principal_point = camera

    @property
    def principal_point(self) -> PrincipalPoint:
        return self._principal_point

    def build(self, grid, disparity, embedding=None, *, check_norm=True) -> FlowBasis:
        return unknown_focal_basis(grid, self._principal_point, disparity)

    def cardinality(self, embedding_dim: int = 0) -> int:
        return 8

    def __repr__(self) -> str:
        return f"UnknownFocalFamily({self._principal_point})"


class TranslationFamily(BasisFamily):
    """
    Camera translation fields only, optionally a subset of the axes.

    With no rotation fields the span is invariant to a global scaling of
    disparity, which makes this family handy for checking gradients.
    """

    name = "translation"

    def __init__(self, camera: CameraSpec, axes: str = "xyz"):
        axes = axes.lower()
        if not axes or set(axes) - set("xyz") or len(set(axes)) != len(axes):
            raise BasisException(
                f"Axes must be distinct letters from 'xyz', not '{axes}'."
            )
        self._camera = camera
        self._axes = axes

    def build(self, grid, disparity, embedding=None, *, check_norm=True) -> FlowBasis:
        fields = translation_basis(grid, self._camera, disparity)
        return FlowBasis(f for f in fields if f.label[1].lower() in self._axes)

    def cardinality(self, embedding_dim: int = 0) -> int:
        return len(self._axes)


class EmbeddingFamily(BasisFamily):
    """
    Embedding-weighted translations plus camera rotations.

    That is ``3A + 3`` fields for known intrinsics or ``3A + 5`` for an
    unknown focal length, plus ``3A`` or ``5A`` more with object rotation.
    """

    name = "embedding"
    needs_embedding = True

    def __init__(self, camera: CameraSpec, *, object_rotation: bool = False):
        self._camera = camera
        self._object_rotation = object_rotation

    @property
    def focal_known(self) -> bool:
        return isinstance(self._camera, Intrinsics)

    def build(
        self,
        grid: PixelGrid,
        disparity: DisparityMap,
        embedding: Optional[EmbeddingLike] = None,
        *,
        check_norm: bool = True,
    ) -> FlowBasis:
        if embedding is None:
            raise BasisException("The embedding family needs an embedding.")
        return embedding_basis(
            grid,
            self._camera,
            disparity,
            embedding,
            object_rotation=self._object_rotation,
            check_norm=check_norm,
        )

    def cardinality(self, embedding_dim: int = 0) -> int:
        n_rotation = 3 if self.focal_known else 5
        per_object = 3 + (n_rotation if self._object_rotation else 0)
        return per_object * embedding_dim + n_rotation


def camera_only_family(camera: CameraSpec) -> BasisFamily:
    """The camera family that matches the camera we know about."""
    if isinstance(camera, Intrinsics):
        return CameraFamily(camera)
    return UnknownFocalFamily(camera)


def family_for(
    camera: CameraSpec,
    *,
    embedding: bool = False,
    object_rotation: bool = False,
) -> BasisFamily:
    """
    Pick a family from what we know.

    Parameters
    ----------
    camera
        Full intrinsics select the known-focal variants, a principal point
        the unknown-focal ones.
    embedding
        If `True`, the embedding family.
    object_rotation
        Add per-object rotation fields to the embedding family.

    Returns
    -------
        The family.
    """
    if embedding:
        return EmbeddingFamily(camera, object_rotation=object_rotation)
    return camera_only_family(camera)
