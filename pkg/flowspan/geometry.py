# Copyright (c) 2024 flowspan developers
"""
Shared data types and pixel-grid conventions.

Every other module in `flowspan` speaks in terms of the types defined
here. The conventions are fixed once, in this module, so that bases,
observed flows and synthetic scenes can never silently disagree:

* Pixel ``(u, v)`` coordinates are sample centers. The pixel in row ``r``
  and column ``c`` sits at ``u = c + 0.5``, ``v = r + 0.5``.
* Camera axes are +x right, +y down and +z forward, into the scene.
* A flow field of shape ``H x W`` is stored as an ``(H, W, 2)`` array whose
  last axis holds ``(du, dv)``. Flattening is row-major over pixels with
  the two components interleaved, giving a vector of length ``2HW``.
* A :py:class:`CameraMotion` is the motion of the scene *relative to the
  camera*. A scene point ``P`` moves with velocity ``t + w x P`` where
  ``w = (-wx, wy, -wz)`` is :py:meth:`CameraMotion.rotation_vector`. Under
  this gauge, instantaneous flow is exactly the sum of the motion
  parameters times the basis fields of :py:mod:`flowspan.basis`, signs
  included.
"""

from dataclasses import dataclass
from typing import Iterable, Tuple, Union

import numpy as np

from .impl.exceptions import FlowspanException

Vector3 = Tuple[float, float, float]


class GeometryException(FlowspanException):
    """An exception raised by the `flowspan.geometry` module."""


def _frozen_array(data, dtype=np.float64) -> np.ndarray:
    """Copy into a read-only array so our value types stay immutable."""
    array = np.array(data, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ImageShape:
    """The size of an image, in pixels."""

    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise GeometryException(
                f"Image shape must be at least 1 x 1, not {self.height} x {self.width}."
            )
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))

    @property
    def n_pixels(self) -> int:
        """The number of pixels, ``H * W``."""
        return self.height * self.width

    @property
    def diagonal(self) -> float:
        """Length of the image diagonal in pixels."""
        return float(np.hypot(self.height, self.width))

    def as_tuple(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class PrincipalPoint:
    """
    The principal point of a pinhole camera.

    This is all we know about a camera when the focal length is unknown.
    It may lie outside the image rectangle.
    """

    cx: float
    cy: float

    def __post_init__(self):
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise GeometryException(
                f"Principal point must be finite, not ({self.cx}, {self.cy})."
            )

    @classmethod
    def centered(cls, shape: ImageShape) -> "PrincipalPoint":
        """The principal point at the exact center of an image."""
        return cls(shape.width / 2.0, shape.height / 2.0)


@dataclass(frozen=True)
class Intrinsics:
    """
    Pinhole camera intrinsics, all in pixels.

    Parameters
    ----------
    fx
        Focal length along x. Must be positive.
    fy
        Focal length along y. Must be positive.
    cx
        Principal point x.
    cy
        Principal point y.
    """

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        values = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(value) for value in values):
            raise GeometryException(f"Intrinsics must be finite, not {values}.")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryException(
                f"Focal lengths must be positive, not fx={self.fx}, fy={self.fy}."
            )

    @property
    def principal_point(self) -> PrincipalPoint:
        return PrincipalPoint(self.cx, self.cy)

    @classmethod
    def from_string(cls, spec: str) -> "Intrinsics":
        """Parse ``"fx,fy,cx,cy"``."""
        try:
            fx, fy, cx, cy = (float(part) for part in spec.split(","))
        except ValueError as exc:
            raise GeometryException(
                f"Expected intrinsics as 'fx,fy,cx,cy', got '{spec}'."
            ) from exc
        return cls(fx, fy, cx, cy)

    @classmethod
    def centered(cls, shape: ImageShape, focal: float) -> "Intrinsics":
        """Square pixels, principal point at the image center."""
        return cls(focal, focal, shape.width / 2.0, shape.height / 2.0)


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """
    The ``(u, v)`` coordinates of every pixel center.

    Build one with :py:func:`make_grid` rather than directly.
    """

    shape: ImageShape
    u: np.ndarray
    v: np.ndarray


def make_grid(shape: ImageShape) -> PixelGrid:
    """
    Construct the pixel grid for an image shape.

    Parameters
    ----------
    shape
        The image shape.

    Returns
    -------
        A grid whose ``u`` and ``v`` arrays have shape ``(H, W)``, with
        ``u = column + 0.5`` and ``v = row + 0.5``.
    """
    columns = np.arange(shape.width, dtype=np.float64) + 0.5
    rows = np.arange(shape.height, dtype=np.float64) + 0.5
    u, v = np.meshgrid(columns, rows)
    return PixelGrid(shape, _frozen_array(u), _frozen_array(v))


class _ScalarMap:
    """Shared behaviour for immutable per-pixel scalar maps."""

    data: np.ndarray

    @property
    def shape(self) -> ImageShape:
        return ImageShape(*self.data.shape)

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class DisparityMap(_ScalarMap):
    """
    Per-pixel inverse depth.

    Every entry must be finite and non-negative.
    """

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_array(self.data)
        if data.ndim != 2:
            raise GeometryException(
                f"Disparity must be an (H, W) array, not shape {data.shape}."
            )
        if not np.all(np.isfinite(data)):
            raise GeometryException("Disparity contains non-finite values.")
        if np.any(data < 0):
            raise GeometryException(
                f"Disparity must be non-negative; minimum is {data.min()}."
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "DisparityMap":
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(depth <= 0):
            raise GeometryException("Depth must be positive to invert to disparity.")
        return cls(1.0 / depth)

    @classmethod
    def constant(cls, shape: ImageShape, value: float) -> "DisparityMap":
        return cls(np.full(shape.as_tuple(), value))

    def scaled(self, k: float) -> "DisparityMap":
        return DisparityMap(self.data * k)


@dataclass(frozen=True, eq=False)
class FlowField:
    """
    A per-pixel 2-vector field ``(du, dv)``, in pixels.

    The data is an ``(H, W, 2)`` array. See :py:func:`flatten` for the
    column-vector order.
    """

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_array(self.data)
        if data.ndim != 3 or data.shape[2] != 2:
            raise GeometryException(
                f"Flow must be an (H, W, 2) array, not shape {data.shape}."
            )
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise GeometryException(f"Flow has an empty shape {data.shape}.")
        if not np.all(np.isfinite(data)):
            raise GeometryException("Flow contains non-finite values.")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> ImageShape:
        return ImageShape(self.data.shape[0], self.data.shape[1])

    @property
    def u(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., 1]

    @classmethod
    def zeros(cls, shape: ImageShape) -> "FlowField":
        return cls(np.zeros((shape.height, shape.width, 2)))

    @classmethod
    def from_components(cls, u, v) -> "FlowField":
        u, v = np.broadcast_arrays(
            np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        )
        return cls(np.stack([u, v], axis=-1))

    def norm(self) -> float:
        """The 2-norm of the flattened field."""
        return float(np.linalg.norm(self.data))

    def magnitude(self) -> np.ndarray:
        """Per-pixel vector length."""
        return np.hypot(self.data[..., 0], self.data[..., 1])

    def masked(self, weight: np.ndarray) -> "FlowField":
        """Pointwise product with a per-pixel scalar."""
        return FlowField(self.data * np.asarray(weight)[..., np.newaxis])

    def _check_compatible(self, other: "FlowField"):
        if self.data.shape != other.data.shape:
            raise GeometryException(
                f"Flow shapes differ: {self.data.shape} vs {other.data.shape}."
            )

    def __add__(self, other: "FlowField") -> "FlowField":
        self._check_compatible(other)
        return FlowField(self.data + other.data)

    def __sub__(self, other: "FlowField") -> "FlowField":
        self._check_compatible(other)
        return FlowField(self.data - other.data)

    def __mul__(self, scalar: float) -> "FlowField":
        return FlowField(self.data * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "FlowField":
        return FlowField(-self.data)


def flatten(field: FlowField) -> np.ndarray:
    """
    View a flow field as a column vector of length ``2HW``.

    The order is row-major over pixels with ``(u, v)`` interleaved, i.e.
    ``[u(0,0), v(0,0), u(0,1), v(0,1), ...]``.
    """
    return field.data.reshape(-1)


def unflatten(vector: np.ndarray, shape: ImageShape) -> FlowField:
    """
    Inverse of :py:func:`flatten`.

    Raises
    ------
    GeometryException
        If the vector does not have exactly ``2HW`` entries.
    """
    vector = np.asarray(vector, dtype=np.float64)
    expected = 2 * shape.n_pixels
    if vector.ndim != 1 or vector.size != expected:
        raise GeometryException(
            f"Cannot unflatten a vector of shape {vector.shape} into "
            f"{shape.height} x {shape.width} flow; expected {expected} entries."
        )
    return FlowField(vector.reshape(shape.height, shape.width, 2))


def _as_vector3(values: Iterable[float], name: str) -> Vector3:
    values = tuple(float(value) for value in values)
    if len(values) != 3:
        raise GeometryException(f"{name} must have 3 entries, not {len(values)}.")
    if not all(np.isfinite(value) for value in values):
        raise GeometryException(f"{name} must be finite, not {values}.")
    return values  # type: ignore[return-value]


@dataclass(frozen=True)
class CameraMotion:
    """
    Six-parameter rigid velocity, in the basis gauge described in the module docs.

    Parameters
    ----------
    translation
        ``(tx, ty, tz)`` in scene units per frame.
    rotation
        ``(wx, wy, wz)`` in radians per frame.
    """

    translation: Vector3 = (0.0, 0.0, 0.0)
    rotation: Vector3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(
            self, "translation", _as_vector3(self.translation, "translation")
        )
        object.__setattr__(self, "rotation", _as_vector3(self.rotation, "rotation"))

    @classmethod
    def from_vector(cls, vector: Union[np.ndarray, Iterable[float]]) -> "CameraMotion":
        """Build from ``(tx, ty, tz, wx, wy, wz)``."""
        vector = [float(value) for value in vector]
        if len(vector) != 6:
            raise GeometryException(
                f"A motion vector has 6 entries, not {len(vector)}."
            )
        return cls(tuple(vector[:3]), tuple(vector[3:]))  # type: ignore[arg-type]

    @classmethod
    def from_string(cls, spec: str) -> "CameraMotion":
        """
        Parse ``"tx=1,wz=0.1"`` style specs; unnamed components are zero.
        """
        names = ["tx", "ty", "tz", "wx", "wy", "wz"]
        vector = np.zeros(6)
        for part in filter(None, (p.strip() for p in spec.split(","))):
            key, _, value = part.partition("=")
            key = key.strip().lower()
            if key not in names or not value:
                raise GeometryException(
                    f"Cannot parse motion component '{part}'; "
                    f"expected one of {names} as name=value."
                )
            vector[names.index(key)] = float(value)
        return cls.from_vector(vector)

    def as_vector(self) -> np.ndarray:
        return np.array(self.translation + self.rotation)

    def scaled(self, s: float) -> "CameraMotion":
        return CameraMotion.from_vector(self.as_vector() * s)

    def rotation_vector(self) -> np.ndarray:
        """
        The physical rotation vector ``w`` with ``dP/dt = t + w x P``.
        """
        wx, wy, wz = self.rotation
        return np.array([-wx, wy, -wz])

    def __add__(self, other: "CameraMotion") -> "CameraMotion":
        return CameraMotion.from_vector(self.as_vector() + other.as_vector())

    def is_zero(self) -> bool:
        return not np.any(self.as_vector())
