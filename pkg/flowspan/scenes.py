# Copyright (c) 2024 flowspan developers
"""
Synthetic scenes with exact ground-truth flow.

A :py:class:`Scene` is a depth map seen by a pinhole camera, optionally
with rigidly moving objects marked by masks. From it we can compute two
flows:

* :py:func:`reproject_flow`, the exact finite-displacement flow found by
  unprojecting every pixel, moving the point and projecting it again, and
* :py:func:`instantaneous_flow`, the linear combination of analytic basis
  fields that the motion parameters predict.

The second is the first-order limit of the first, which is what lets the
analytic bases be checked against an independent oracle.

Motions use the gauge documented in :py:mod:`flowspan.geometry`. An
object's motion is applied about its centroid, on top of the scene motion.
"""

from dataclasses import dataclass, field, replace
from logging import getLogger
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .basis import ObjectEmbedding, ObjectMask, camera_basis
from .flowio import read_mask, read_pfm, write_mask, write_pfm
from .geometry import (
    CameraMotion,
    DisparityMap,
    FlowField,
    ImageShape,
    Intrinsics,
    make_grid,
)
from .impl.exceptions import FlowspanException
from .impl.store import ensure_directory, json_from_path, write_json

logger = getLogger(__name__)


DEFAULT_MOTION_STEP = 1e-2
"""The default scale ``s`` applied to scene motions by :py:func:`reproject_flow`."""

SCENE_MANIFEST = "scene.json"
"""The name of the manifest in a scene directory."""


class SceneException(FlowspanException):
    """An exception raised by the `flowspan.scenes` module."""


class PointBehindCamera(SceneException):
    """A scene point ends up at or behind the image plane after moving."""


@dataclass(frozen=True, eq=False)
class SceneObject:
    """
    A rigidly moving object.

    Parameters
    ----------
    mask
        The pixels the object covers.
    motion
        Its motion relative to the rest of the scene, about its centroid.
    name
        A name for manifests and logs.
    """

    mask: ObjectMask
    motion: CameraMotion = field(default_factory=CameraMotion)
    name: str = "object"


@dataclass(frozen=True, eq=False)
class Scene:
    """
    A depth map, a camera, moving objects and a camera motion.

    Parameters
    ----------
    depth
        Per-pixel depth, positive everywhere.
    intrinsics
        The camera.
    objects
        Independently moving objects. Their masks must not overlap.
    camera_motion
        The motion of the whole scene relative to the camera.
    """

    depth: np.ndarray
    intrinsics: Intrinsics
    objects: Tuple[SceneObject, ...] = ()
    camera_motion: CameraMotion = field(default_factory=CameraMotion)

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise SceneException(f"Depth must be (H, W), not shape {depth.shape}.")
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
            raise SceneException("Depth must be finite and positive everywhere.")
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)

        objects = tuple(self.objects)
        coverage = np.zeros(depth.shape)
        for scene_object in objects:
            if scene_object.mask.data.shape != depth.shape:
                raise SceneException(
                    f"Mask for '{scene_object.name}' is {scene_object.mask.data.shape} "
                    f"but depth is {depth.shape}."
                )
            coverage += scene_object.mask.data
        if np.any(coverage > 1):
            raise SceneException("Object masks overlap.")
        object.__setattr__(self, "objects", objects)

    @property
    def shape(self) -> ImageShape:
        return ImageShape(*self.depth.shape)

    @property
    def disparity(self) -> DisparityMap:
        return DisparityMap.from_depth(self.depth)

    def with_motion(
        self,
        camera_motion: CameraMotion,
        object_motions: Optional[Sequence[CameraMotion]] = None,
    ) -> "Scene":
        """The same geometry with different motions."""
        objects = self.objects
        if object_motions is not None:
            if len(object_motions) != len(objects):
                raise SceneException(
                    f"Got {len(object_motions)} object motions "
                    f"for {len(objects)} objects."
                )
            objects = tuple(
                replace(scene_object, motion=motion)
                for scene_object, motion in zip(objects, object_motions)
            )
        return replace(self, camera_motion=camera_motion, objects=objects)

    def label_map(self) -> np.ndarray:
        """0 for background, ``k + 1`` for pixels of object ``k``."""
        labels = np.zeros(self.depth.shape, dtype=int)
        for k, scene_object in enumerate(self.objects):
            labels[scene_object.mask.as_bool()] = k + 1
        return labels

    def region_embedding(self) -> ObjectEmbedding:
        """One-hot embedding of :py:meth:`label_map`, one channel per region."""
        return ObjectEmbedding.from_labels(self.label_map(), len(self.objects) + 1)

    def points(self) -> np.ndarray:
        """The 3D point seen at every pixel, shape ``(H, W, 3)``."""
        grid = make_grid(self.shape)
        k = self.intrinsics
        x = (grid.u - k.cx) / k.fx * self.depth
        y = (grid.v - k.cy) / k.fy * self.depth
        return np.stack([x, y, self.depth], axis=-1)

    def centroid(self, scene_object: SceneObject) -> np.ndarray:
        """The mean 3D point of an object; the origin if its mask is empty."""
        inside = scene_object.mask.as_bool()
        if not inside.any():
            return np.zeros(3)
        return self.points()[inside].mean(axis=0)


def plane_scene(
    shape: ImageShape, intrinsics: Intrinsics, depth: float = 10.0
) -> Scene:
    """A fronto-parallel plane and nothing else."""
    return Scene(np.full(shape.as_tuple(), float(depth)), intrinsics)


def _box_mask(
    shape: ImageShape, rows: Tuple[int, int], cols: Tuple[int, int]
) -> ObjectMask:
    data = np.zeros(shape.as_tuple(), dtype=np.uint8)
    data[rows[0] : rows[1], cols[0] : cols[1]] = 1
    return ObjectMask(data)


def cube_scene(
    shape: ImageShape,
    intrinsics: Intrinsics,
    *,
    plane_depth: float = 10.0,
    cube_depth: float = 2.0,
) -> Scene:
    """
    An axis-aligned cube in front of a background plane.

    The cube's front face covers the center third of the image, rows and
    columns ``[n // 3, n // 3 + n // 3)``, so its mask has
    ``(H // 3) * (W // 3)`` pixels. The cube is a static object of the
    scene; give it a motion with :py:meth:`Scene.with_motion` to move it.

    Parameters
    ----------
    shape
        The image shape.
    intrinsics
        The camera.
    plane_depth
        Depth of the background.
    cube_depth
        Depth of the cube's front face.

    Returns
    -------
        The scene, with zero motion.
    """
    h3, w3 = shape.height // 3, shape.width // 3
    mask = _box_mask(shape, (h3, 2 * h3), (w3, 2 * w3))

    depth = np.full(shape.as_tuple(), float(plane_depth))
    depth[mask.as_bool()] = cube_depth

    return Scene(depth, intrinsics, (SceneObject(mask, name="cube"),))


def two_object_scene(
    shape: ImageShape,
    intrinsics: Intrinsics,
    *,
    plane_depth: float = 10.0,
    object_depths: Tuple[float, float] = (3.0, 5.0),
    object_translations: Sequence[Iterable[float]] = ((1.0, 0.0, 0.0), (0.0, 0.5, 0.0)),
) -> Scene:
    """
    Two independently translating boxes in front of a background plane.

    The first box is upper left, the second lower right; they never
    overlap.
    """
    h, w = shape.height, shape.width
    masks = [
        _box_mask(shape, (h // 4, h // 2), (w // 8, 3 * w // 8)),
        _box_mask(shape, (h // 2, 3 * h // 4), (5 * w // 8, 7 * w // 8)),
    ]

    depth = np.full(shape.as_tuple(), float(plane_depth))
    objects = []
    for k, (mask, object_depth, translation) in enumerate(
        zip(masks, object_depths, object_translations)
    ):
        depth[mask.as_bool()] = object_depth
        motion = CameraMotion(tuple(translation))
        objects.append(SceneObject(mask, motion, f"object{k}"))

    return Scene(depth, intrinsics, tuple(objects))


def _moved(
    points: np.ndarray, motion: CameraMotion, step: float, center: np.ndarray
) -> np.ndarray:
    rotation = Rotation.from_rotvec(step * motion.rotation_vector())
    shifted = (points - center).reshape(-1, 3)
    moved = rotation.apply(shifted).reshape(points.shape)
    return moved + center + step * np.asarray(motion.translation)


def reproject_flow(scene: Scene, step: float = DEFAULT_MOTION_STEP) -> FlowField:
    """
    Exact flow from moving the scene by `step` times its motion.

    Every pixel is unprojected with its depth. Points on an object are first
    moved by the object's motion about its centroid; then every point is
    moved by the scene motion. The points are projected again and the flow
    is the change in pixel position. There is no occlusion reasoning; flow
    is defined per source pixel.

    Parameters
    ----------
    scene
        The scene.
    step
        The motion scale ``s``.

    Returns
    -------
        The flow.

    Raises
    ------
    PointBehindCamera
        If some point ends up with non-positive depth.
    """
    points = scene.points()
    moved = np.array(points)

    for scene_object in scene.objects:
        if scene_object.motion.is_zero():
            continue
        inside = scene_object.mask.as_bool()
        center = scene.centroid(scene_object)
        moved[inside] = _moved(points[inside], scene_object.motion, step, center)

    moved = _moved(moved, scene.camera_motion, step, np.zeros(3))

    z = moved[..., 2]
    if np.any(z <= 0):
        raise PointBehindCamera(
            f"{int(np.count_nonzero(z <= 0))} points are behind the camera after "
            f"moving by step {step}."
        )

    k = scene.intrinsics
    grid = make_grid(scene.shape)
    u = k.fx * moved[..., 0] / z + k.cx
    v = k.fy * moved[..., 1] / z + k.cy

    return FlowField.from_components(u - grid.u, v - grid.v)


def equivalent_motion(
    scene: Scene, scene_object: SceneObject, centroid: Optional[np.ndarray] = None
) -> CameraMotion:
    """
    The motion parameters, relative to the camera basis, of an object's own motion.

    Rotating by ``w`` about the centroid ``c`` is rotating by ``w`` about
    the origin plus translating by ``-w x c``.
    """
    if centroid is None:
        centroid = scene.centroid(scene_object)
    motion = scene_object.motion
    translation = np.asarray(motion.translation) - np.cross(
        motion.rotation_vector(), centroid
    )
    return CameraMotion(tuple(translation), motion.rotation)


def combine(basis, motion: CameraMotion) -> FlowField:
    """
    ``sum_i motion_i * field_i`` over a six-field camera basis.
    """
    weights = dict(zip(("Tx", "Ty", "Tz", "Rx", "Ry", "Rz"), motion.as_vector()))
    data = np.zeros(basis.fields[0].field.data.shape)
    for member in basis:
        data += weights[member.label] * member.field.data
    return FlowField(data)


def instantaneous_flow(scene: Scene) -> FlowField:
    """
    The first-order flow predicted by the analytic camera basis.

    The camera basis is built from the scene's true disparity and weighted
    by the scene motion everywhere; each object adds its own equivalent
    motion, weighted the same way and restricted to its mask.

    Parameters
    ----------
    scene
        The scene.

    Returns
    -------
        The flow, which is the limit of ``reproject_flow(scene, s) / s``
        as ``s`` goes to 0.
    """
    basis = camera_basis(make_grid(scene.shape), scene.intrinsics, scene.disparity)

    flow = combine(basis, scene.camera_motion)

    for scene_object in scene.objects:
        if scene_object.motion.is_zero():
            continue
        object_flow = combine(basis, equivalent_motion(scene, scene_object))
        flow = flow + object_flow.masked(scene_object.mask.data)

    return flow


def _motion_record(motion: CameraMotion) -> dict:
    return {"translation": list(motion.translation), "rotation": list(motion.rotation)}


def _motion_from_record(record: dict) -> CameraMotion:
    return CameraMotion(tuple(record["translation"]), tuple(record["rotation"]))


def write_scene(directory, scene: Scene) -> Path:
    """
    Write a scene as depth PFM, one PGM per mask and a JSON manifest.

    Returns
    -------
        The manifest path.
    """
    directory = ensure_directory(directory)

    write_pfm(directory / "depth.pfm", scene.depth)

    objects = []
    for k, scene_object in enumerate(scene.objects):
        mask_name = f"mask_{k:02d}.pgm"
        write_mask(directory / mask_name, scene_object.mask)
        objects.append(
            {
                "name": scene_object.name,
                "mask": mask_name,
                "motion": _motion_record(scene_object.motion),
            }
        )

    k = scene.intrinsics
    manifest = {
        "depth": "depth.pfm",
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "camera_motion": _motion_record(scene.camera_motion),
        "objects": objects,
    }

    return write_json(directory / SCENE_MANIFEST, manifest)


def read_scene(directory) -> Scene:
    """Read a scene written by :py:func:`write_scene`."""
    directory = Path(directory)
    manifest = json_from_path(directory / SCENE_MANIFEST)

    try:
        intrinsics = Intrinsics(**manifest["intrinsics"])
        objects = tuple(
            SceneObject(
                read_mask(directory / entry["mask"]),
                _motion_from_record(entry["motion"]),
                entry.get("name", "object"),
            )
            for entry in manifest["objects"]
        )
        camera_motion = _motion_from_record(manifest["camera_motion"])
        depth_file = manifest["depth"]
    except (KeyError, TypeError) as exc:
        raise SceneException(f"Malformed scene manifest in {directory}.") from exc

    return Scene(read_pfm(directory / depth_file), intrinsics, objects, camera_motion)
