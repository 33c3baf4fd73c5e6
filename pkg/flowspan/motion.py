# Copyright (c) 2024 flowspan developers
"""
Reading motions off projection coefficients.

Projecting a flow onto a camera basis gives one coefficient per field,
and those coefficients are the motion parameters. This module turns them
back into a :py:class:`flowspan.geometry.CameraMotion`, estimates the
focal length from the split rotation fields of the unknown-focal basis,
and reads the object motion matrix ``M`` off the embedding basis.

Translation and disparity are only known up to a common scale. We fix
the gauge by reporting translation magnitude as if the median disparity
were 1.
"""

import re
from dataclasses import dataclass
from logging import getLogger
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .basis import ObjectEmbedding
from .geometry import CameraMotion, DisparityMap
from .impl.exceptions import FlowspanException
from .projection import ProjectionResult

logger = getLogger(__name__)


ZERO_COEFFICIENT_TOLERANCE = 1e-10
"""Rotation coefficients no larger than this carry no focal information."""

_EMBEDDING_LABEL = re.compile(r"^Emb\((\d+),T([xyz])\)$")


class MotionException(FlowspanException):
    """An exception raised by the `flowspan.motion` module."""


@dataclass(frozen=True)
class FocalEstimate:
    """
    A focal length estimated from the unknown-focal rotation pairs.

    Parameters
    ----------
    focal
        The geometric mean of the available pair estimates, or `None`
        if neither pair carried a usable rotation.
    from_x
        ``sqrt(c_R1x / c_R2x)``, if usable.
    from_y
        ``sqrt(c_R1y / c_R2y)``, if usable.
    """

    focal: Optional[float]
    from_x: Optional[float] = None
    from_y: Optional[float] = None

    @property
    def consistency(self) -> Optional[float]:
        """
        ``from_x / from_y``, which is 1 when ``fx = fy``.

        The basis cannot enforce ``fx = fy``, so this is a diagnostic.
        """
        if self.from_x is None or self.from_y is None:
            return None
        return self.from_x / self.from_y


def _pair_focal(c1: float, c2: float) -> Optional[float]:
    if abs(c1) <= ZERO_COEFFICIENT_TOLERANCE or abs(c2) <= ZERO_COEFFICIENT_TOLERANCE:
        return None
    if np.sign(c1) != np.sign(c2):
        logger.warning(
            "Rotation pair coefficients %g and %g disagree in sign; ignoring the pair.",
            c1,
            c2,
        )
        return None
    return float(np.sqrt(c1 / c2))


def recover_focal(
    c_r1x: float, c_r2x: float, c_r1y: float, c_r2y: float
) -> FocalEstimate:
    """
    Estimate the focal length from the split rotation coefficients.

    For a rotation ``w`` about x, ``c_R1x = f w`` and ``c_R2x = w / f``, so
    ``f = sqrt(c_R1x / c_R2x)``; likewise for y. When both pairs are
    usable the estimate is their geometric mean.

    Parameters
    ----------
    c_r1x, c_r2x, c_r1y, c_r2y
        The projection coefficients of ``R1x``, ``R2x``, ``R1y``, ``R2y``.

    Returns
    -------
        The estimate. Its `focal` is `None` if neither pair is usable, for
        example for pure translation.
    """
    from_x = _pair_focal(c_r1x, c_r2x)
    from_y = _pair_focal(c_r1y, c_r2y)

    estimates = [f for f in (from_x, from_y) if f is not None]
    if not estimates:
        return FocalEstimate(None)

    focal = float(np.prod(estimates) ** (1.0 / len(estimates)))

    return FocalEstimate(focal, from_x, from_y)


@dataclass(frozen=True, eq=False)
class ObjectMotion:
    """
    The object motion matrix and the per-pixel translation it implies.

    Parameters
    ----------
    matrix
        ``M``, shape ``(3, A)``. Column ``i`` is the translation of
        embedding direction ``i``.
    translation_field
        ``M phi`` at every pixel, shape ``(H, W, 3)``.
    degenerate
        `True` if ``M`` is not unique. ``M phi`` is unique either way.
    """

    matrix: np.ndarray
    translation_field: np.ndarray
    degenerate: bool


def _coefficients(result: ProjectionResult) -> Dict[str, float]:
    return dict(zip(result.labels, (float(c) for c in result.coefficients)))


def recover_object_matrix(
    result: ProjectionResult, embedding: Union[ObjectEmbedding, np.ndarray]
) -> ObjectMotion:
    """
    Read the object motion matrix off an embedding-basis projection.

    Parameters
    ----------
    result
        A projection onto a basis containing the ``Emb(i,T.)`` fields.
    embedding
        The embedding the basis was built from.

    Returns
    -------
        ``M`` and ``M phi``. With an unknown focal length, the x and y rows
        are per unit focal length.
    """
    if isinstance(embedding, ObjectEmbedding):
        phi = embedding.data
    else:
        phi = np.asarray(embedding)

    matrix = np.zeros((3, phi.shape[2]))
    found = 0
    for label, coefficient in _coefficients(result).items():
        match = _EMBEDDING_LABEL.match(label)
        if match is None:
            continue
        i, axis = int(match.group(1)), "xyz".index(match.group(2))
        if i >= phi.shape[2]:
            raise MotionException(
                f"Basis field {label} refers to channel {i} "
                f"of a {phi.shape[2]}-channel embedding."
            )
        matrix[axis, i] = coefficient
        found += 1

    if found == 0:
        raise MotionException(
            "The projection has no embedding translation fields; "
            f"labels are {result.labels}."
        )

    translation_field = np.einsum("ja,hwa->hwj", matrix, phi)

    return ObjectMotion(matrix, translation_field, result.degenerate)


@dataclass(frozen=True, eq=False)
class RecoveredMotion:
    """
    Motion read off a projection.

    Parameters
    ----------
    camera
        The motion parameters. Translation is relative to the disparity
        the basis was built from: doubling the disparity halves it.
    translation_direction
        Unit vector along the translation, or zeros if there is none.
    translation_magnitude
        ``|t|`` times the median disparity, i.e. the magnitude in the gauge
        where the median disparity is 1.
    disparity_scale
        The median disparity used for the gauge.
    focal
        The focal estimate, for unknown-focal bases.
    object_motion
        The object motion matrix, for embedding bases.
    rank
        The rank of the projection.
    degenerate
        `True` if the coefficients were not unique and the minimum-norm
        representative was used.
    """

    camera: CameraMotion
    translation_direction: np.ndarray
    translation_magnitude: float
    disparity_scale: float
    focal: Optional[FocalEstimate] = None
    object_motion: Optional[ObjectMotion] = None
    rank: int = 0
    degenerate: bool = False

    @property
    def focal_estimate(self) -> Optional[float]:
        return None if self.focal is None else self.focal.focal

    @property
    def object_motion_matrix(self) -> Optional[np.ndarray]:
        return None if self.object_motion is None else self.object_motion.matrix

    def to_record(self) -> dict:
        """A JSON-serializable summary."""
        record = {
            "translation": list(self.camera.translation),
            "rotation": list(self.camera.rotation),
            "translation_direction": [float(x) for x in self.translation_direction],
            "translation_magnitude": self.translation_magnitude,
            "disparity_scale": self.disparity_scale,
            "focal_estimate": self.focal_estimate,
            "focal_consistency": None if self.focal is None else self.focal.consistency,
            "rank": self.rank,
            "degenerate": self.degenerate,
        }
        if self.object_motion is not None:
            record["object_motion_matrix"] = self.object_motion.matrix.tolist()
        return record

    def to_frame(self) -> pd.DataFrame:
        """A one-row data frame of the scalar parts of :py:meth:`to_record`."""
        record = self.to_record()
        row = {
            "TX": record["translation"][0],
            "TY": record["translation"][1],
            "TZ": record["translation"][2],
            "WX": record["rotation"][0],
            "WY": record["rotation"][1],
            "WZ": record["rotation"][2],
            "T_MAGNITUDE": record["translation_magnitude"],
            "DISPARITY_SCALE": record["disparity_scale"],
            "FOCAL": record["focal_estimate"],
            "FOCAL_CONSISTENCY": record["focal_consistency"],
            "RANK": record["rank"],
            "DEGENERATE": record["degenerate"],
        }
        return pd.DataFrame([row])


def _rotation(
    coefficients: Dict[str, float], focal: Optional[FocalEstimate]
) -> Tuple[float, float, float]:
    wz = coefficients.get("Rz", 0.0)

    if "Rx" in coefficients or "Ry" in coefficients:
        return coefficients.get("Rx", 0.0), coefficients.get("Ry", 0.0), wz

    if focal is None or focal.focal is None:
        return 0.0, 0.0, wz

    f = focal.focal
    # Average the two readings; they agree exactly when the focal is right.
    wx = 0.5 * (coefficients.get("R1x", 0.0) / f + coefficients.get("R2x", 0.0) * f)
    wy = 0.5 * (coefficients.get("R1y", 0.0) / f + coefficients.get("R2y", 0.0) * f)
    return wx, wy, wz


def recover_camera_motion(
    result: ProjectionResult,
    disparity: Optional[DisparityMap] = None,
    embedding: Optional[Union[ObjectEmbedding, np.ndarray]] = None,
) -> RecoveredMotion:
    """
    Read the camera motion off a projection.

    Works for the six-field and eight-field camera bases and for the
    embedding basis, from which only rotation and the object matrix are
    available.

    Parameters
    ----------
    result
        The projection.
    disparity
        The disparity the basis was built from, for the translation gauge.
        Without it the gauge scale is taken to be 1.
    embedding
        The embedding, for an embedding basis.

    Returns
    -------
        The recovered motion. If the projection was rank deficient the
        minimum-norm coefficients are used and `degenerate` is set.
    """
    coefficients = _coefficients(result)

    focal = None
    if "R1x" in coefficients:
        focal = recover_focal(
            coefficients.get("R1x", 0.0),
            coefficients.get("R2x", 0.0),
            coefficients.get("R1y", 0.0),
            coefficients.get("R2y", 0.0),
        )

    translation = np.array([coefficients.get(f"T{axis}", 0.0) for axis in "xyz"])
    if focal is not None and focal.focal is not None:
        # Unknown-focal translation fields have unit focal length.
        translation[:2] = translation[:2] / focal.focal

    camera = CameraMotion(tuple(translation), _rotation(coefficients, focal))

    disparity_scale = 1.0 if disparity is None else float(np.median(disparity.data))

    norm = float(np.linalg.norm(translation))
    direction = translation / norm if norm > 0 else np.zeros(3)

    object_motion = None
    if embedding is not None:
        object_motion = recover_object_matrix(result, embedding)

    if result.degenerate:
        logger.info(
            "Projection has rank %d for %d fields; using minimum-norm coefficients.",
            result.rank,
            len(result.labels),
        )

    return RecoveredMotion(
        camera,
        direction,
        norm * disparity_scale,
        disparity_scale,
        focal,
        object_motion,
        result.rank,
        result.degenerate,
    )
