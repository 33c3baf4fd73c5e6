# Copyright (c) 2024 flowspan developers
"""
Abstract base class for basis families.

A family knows how to turn a scene representation (a disparity map and,
for some families, an object embedding) into a :py:class:`FlowBasis`.
The concrete implementations are in
:py:mod:`flowspan.impl.family.analytic`.
"""

from abc import ABC, abstractmethod
from typing import Optional, Union

import numpy as np

from flowspan.basis import FlowBasis, ObjectEmbedding
from flowspan.geometry import DisparityMap, ImageShape, PixelGrid, make_grid

EmbeddingLike = Union[ObjectEmbedding, np.ndarray]


class BasisFamily(ABC):
    """
    A parameterized family of flow bases.

    The purpose of this class is to let code that consumes bases, like
    :py:func:`flowspan.gradients.loss_grad` or the command line, work with
    any family without knowing how its fields are built.
    """

    name: str = "abstract"
    """Short name used on the command line and in manifests."""

    needs_embedding: bool = False
    """`True` if :py:meth:`build` requires an embedding."""

    @abstractmethod
    def build(
        self,
        grid: PixelGrid,
        disparity: DisparityMap,
        embedding: Optional[EmbeddingLike] = None,
        *,
        check_norm: bool = True,
    ) -> FlowBasis:
        """
        Build the basis for one scene.

        Parameters
        ----------
        grid
            The pixel grid of the image.
        disparity
            Per-pixel inverse depth.
        embedding
            Per-pixel object embedding, for families that use one.
        check_norm
            Whether to insist that the embedding is unit length per pixel.

        Returns
        -------
            The basis.
        """
        raise NotImplementedError("Abstract method.")

    @abstractmethod
    def cardinality(self, embedding_dim: int = 0) -> int:
        """
        The number of fields :py:meth:`build` produces.

        Parameters
        ----------
        embedding_dim
            The embedding dimension ``A``, ignored by families without one.
        """
        raise NotImplementedError("Abstract method.")

    def build_for_shape(
        self,
        shape: ImageShape,
        disparity: DisparityMap,
        embedding: Optional[EmbeddingLike] = None,
    ) -> FlowBasis:
        """Convenience wrapper that makes the grid for us."""
        return self.build(make_grid(shape), disparity, embedding)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"
