# Copyright (c) 2024 flowspan developers
"""
Tools for looking at and using a per-pixel object embedding.

We reduce an embedding to three channels with PCA for display, compute
its spatial gradient magnitude, which highlights object boundaries, and
segment an image by assigning each pixel to the nearest of a few seed
points in bilateral space, the joint space of image position and
embedding.
"""

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.decomposition import PCA

from .basis import ObjectEmbedding
from .geometry import ImageShape, make_grid
from .impl.exceptions import FlowspanException

logger = getLogger(__name__)


DEFAULT_LAMBDA_SPATIAL = 1.0
"""Default weight on squared, diagonal-normalized pixel distance."""

DEFAULT_LAMBDA_EMBED = 10.0
"""Default weight on squared embedding distance."""

ZERO_VARIANCE_TOLERANCE = 1e-12
"""Principal components with variance at or below this are flagged."""

EmbeddingLike = Union[ObjectEmbedding, np.ndarray]


class EmbeddingException(FlowspanException):
    """An exception raised by the `flowspan.embedding` module."""


def _embedding_data(embedding: EmbeddingLike) -> np.ndarray:
    if isinstance(embedding, ObjectEmbedding):
        data = embedding.data
    else:
        data = np.asarray(embedding, dtype=np.float64)
    if data.ndim != 3:
        raise EmbeddingException(
            f"An embedding must be (H, W, A), not shape {data.shape}."
        )
    return data


@dataclass(frozen=True)
class SeedPoint:
    """
    A hand-picked point on an object or the background.

    Parameters
    ----------
    u
        Horizontal pixel coordinate.
    v
        Vertical pixel coordinate.
    label
        The object id given to pixels nearest this seed.
    """

    u: float
    v: float
    label: int

    def pixel(self) -> tuple:
        """The ``(row, column)`` of the pixel containing the seed."""
        return int(np.floor(self.v)), int(np.floor(self.u))


@dataclass(frozen=True)
class BilateralConfig:
    """
    Weights of the two parts of the bilateral distance.

    Parameters
    ----------
    lambda_spatial
        Weight on squared pixel distance, measured in units of the image
        diagonal so the weight does not depend on resolution.
    lambda_embed
        Weight on squared embedding distance.
    """

    lambda_spatial: float = DEFAULT_LAMBDA_SPATIAL
    lambda_embed: float = DEFAULT_LAMBDA_EMBED

    def __post_init__(self):
        if self.lambda_spatial < 0 or self.lambda_embed < 0:
            raise EmbeddingException(
                f"Bilateral weights must be non-negative, not "
                f"({self.lambda_spatial}, {self.lambda_embed})."
            )
        if self.lambda_spatial == 0 and self.lambda_embed == 0:
            raise EmbeddingException("Bilateral weights cannot both be zero.")


@dataclass(frozen=True, eq=False)
class EmbeddingPCA:
    """
    Principal components of an embedding.

    Parameters
    ----------
    scores
        Per-pixel component scores, shape ``(H, W, k)``.
    image
        The scores mapped affinely to ``[0, 1]`` per channel, for display.
        Constant channels map to 0.
    explained_variance
        The variance of each component, decreasing.
    zero_variance
        Which components have no variance.
    """

    scores: np.ndarray
    image: np.ndarray
    explained_variance: np.ndarray
    zero_variance: np.ndarray

    @property
    def degenerate(self) -> bool:
        return bool(np.any(self.zero_variance))


def embedding_pca(embedding: EmbeddingLike, k: int = 3) -> EmbeddingPCA:
    """
    Reduce an embedding to its first `k` principal components.

    Parameters
    ----------
    embedding
        The embedding, ``(H, W, A)``.
    k
        The number of components, at most ``A``.

    Returns
    -------
        The components, a display image and the explained variance.
    """
    phi = _embedding_data(embedding)
    height, width, dim = phi.shape

    if not 1 <= k <= dim:
        raise EmbeddingException(
            f"Cannot take {k} components of a {dim}-dimensional embedding."
        )
    if k > height * width:
        raise EmbeddingException(
            f"Cannot take {k} components from {height * width} pixels."
        )

    samples = phi.reshape(-1, dim)
    pca = PCA(n_components=k, svd_solver="full")
    scores = pca.fit_transform(samples).reshape(height, width, k)

    variance = np.asarray(pca.explained_variance_, dtype=np.float64)
    # A single pixel has no sample variance; sklearn reports NaN.
    if height * width < 2:
        variance = np.zeros(k)
    variance = np.where(np.isfinite(variance), variance, 0.0)
    zero_variance = variance <= ZERO_VARIANCE_TOLERANCE

    if np.any(zero_variance):
        logger.warning(
            "%d of %d principal components have zero variance.",
            int(zero_variance.sum()),
            k,
        )
        scores[..., zero_variance] = 0.0

    low = scores.min(axis=(0, 1))
    span = scores.max(axis=(0, 1)) - low
    image = np.where(span > 0, (scores - low) / np.where(span > 0, span, 1.0), 0.0)

    return EmbeddingPCA(scores, image, variance, zero_variance)


def embedding_gradient_magnitude(embedding: EmbeddingLike) -> np.ndarray:
    """
    The per-pixel norm of the spatial Jacobian of the embedding.

    Derivatives are finite differences: central in the interior and one
    sided at the image edges. The result is zero wherever the embedding
    is locally constant.

    Parameters
    ----------
    embedding
        The embedding, ``(H, W, A)``.

    Returns
    -------
        An ``(H, W)`` array.
    """
    phi = _embedding_data(embedding)

    squared = np.zeros(phi.shape[:2])
    for axis in (0, 1):
        if phi.shape[axis] < 2:
            continue
        squared += np.sum(np.gradient(phi, axis=axis) ** 2, axis=-1)

    return np.sqrt(squared)


def segment_from_seeds(
    embedding: EmbeddingLike,
    seeds: Sequence[SeedPoint],
    config: BilateralConfig = BilateralConfig(),
) -> np.ndarray:
    """
    Label each pixel with the seed nearest to it in bilateral space.

    The distance from pixel ``p`` to seed ``s`` is
    ``lambda_spatial |p - s|^2 / D^2 + lambda_embed |phi(p) - phi(s)|^2``
    where ``D`` is the image diagonal and ``phi(s)`` is the embedding at
    the pixel containing the seed. Ties go to the seed listed first.

    Parameters
    ----------
    embedding
        The embedding, ``(H, W, A)``.
    seeds
        At least one seed, inside the image.
    config
        The weights.

    Returns
    -------
        An ``(H, W)`` integer array of seed labels.
    """
    phi = _embedding_data(embedding)
    height, width, dim = phi.shape

    if len(seeds) == 0:
        raise EmbeddingException("Segmentation needs at least one seed.")

    for seed in seeds:
        if not (0 <= seed.u < width and 0 <= seed.v < height):
            raise EmbeddingException(
                f"Seed at ({seed.u}, {seed.v}) is outside the {height} x {width} image."
            )

    seed_embeddings = np.array([phi[seed.pixel()] for seed in seeds])
    _warn_on_indistinct_seeds(seeds, seed_embeddings)

    grid = make_grid(ImageShape(height, width))
    positions = np.stack([grid.u.ravel(), grid.v.ravel()], axis=1)
    seed_positions = np.array([[seed.u, seed.v] for seed in seeds])

    diagonal = float(np.hypot(height, width))
    spatial = cdist(positions, seed_positions, "sqeuclidean") / diagonal**2
    embedded = cdist(phi.reshape(-1, dim), seed_embeddings, "sqeuclidean")
    cost = config.lambda_spatial * spatial + config.lambda_embed * embedded

    nearest = np.argmin(cost, axis=1)
    labels = np.array([seed.label for seed in seeds])

    return labels[nearest].reshape(height, width)


def _warn_on_indistinct_seeds(seeds: Sequence[SeedPoint], seed_embeddings: np.ndarray):
    for i in range(len(seeds)):
        for j in range(i + 1, len(seeds)):
            if seeds[i].label != seeds[j].label and np.array_equal(
                seed_embeddings[i], seed_embeddings[j]
            ):
                logger.warning(
                    "Seeds %d and %d have different labels but identical embeddings.",
                    i,
                    j,
                )


def read_seeds(path: Union[str, Path]) -> List[SeedPoint]:
    """
    Read seeds from a text file with one ``label u v`` per line.

    Blank lines and lines starting with ``#`` are ignored.
    """
    try:
        df = pd.read_csv(
            path,
            sep=r"\s+",
            comment="#",
            header=None,
            names=["LABEL", "U", "V"],
            dtype={"LABEL": int, "U": float, "V": float},
        )
    except FileNotFoundError as exc:
        raise EmbeddingException(f"No such seed file {path}.") from exc
    except pd.errors.EmptyDataError:
        return []
    except (ValueError, pd.errors.ParserError) as exc:
        raise EmbeddingException(f"Cannot parse seed file {path}: {exc}") from exc

    if df.isna().any().any():
        raise EmbeddingException(f"Seed file {path} has lines without 'label u v'.")

    return [
        SeedPoint(row.U, row.V, int(row.LABEL)) for row in df.itertuples(index=False)
    ]
