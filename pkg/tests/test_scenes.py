import tempfile
import unittest
from pathlib import Path

import numpy as np

from flowspan import FlowspanException
from flowspan.basis import ObjectMask, camera_basis, masked_basis
from flowspan.geometry import CameraMotion, ImageShape, Intrinsics, make_grid
from flowspan.projection import project_onto
from flowspan.scenes import (
    SCENE_MANIFEST,
    PointBehindCamera,
    Scene,
    SceneException,
    SceneObject,
    cube_scene,
    equivalent_motion,
    instantaneous_flow,
    plane_scene,
    read_scene,
    reproject_flow,
    two_object_scene,
    write_scene,
)


def linearization_error(scene: Scene, step: float) -> float:
    """How far the scaled exact flow is from the instantaneous flow."""
    exact = reproject_flow(scene, step)
    return (exact * (1.0 / step) - instantaneous_flow(scene)).norm()


class SceneTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.shape = ImageShape(24, 30)
        self.intrinsics = Intrinsics.centered(self.shape, 30.0)

    def test_cube(self):
        scene = cube_scene(self.shape, self.intrinsics)

        self.assertEqual(1, len(scene.objects))
        self.assertEqual((24 // 3) * (30 // 3), scene.objects[0].mask.area)
        self.assertEqual({2.0, 10.0}, set(np.unique(scene.depth)))
        self.assertEqual(0.5, scene.disparity.data[12, 15])
        self.assertEqual(0.1, scene.disparity.data[0, 0])

    def test_two_objects(self):
        scene = two_object_scene(self.shape, self.intrinsics)

        labels = scene.label_map()
        self.assertEqual({0, 1, 2}, set(np.unique(labels)))
        self.assertEqual(3, scene.region_embedding().dim)
        self.assertEqual((1.0, 0.0, 0.0), scene.objects[0].motion.translation)

    def test_points(self):
        scene = plane_scene(ImageShape(2, 2), Intrinsics(1.0, 1.0, 1.0, 1.0), depth=4.0)
        points = scene.points()

        # Pixel centers sit half a pixel either side of the principal point.
        np.testing.assert_allclose([-2.0, -2.0, 4.0], points[0, 0])
        np.testing.assert_allclose([2.0, 2.0, 4.0], points[1, 1])

    def test_validation(self):
        with self.assertRaises(SceneException):
            Scene(np.zeros((4, 4)), self.intrinsics)

        mask = ObjectMask(np.ones((4, 4)))
        with self.assertRaises(SceneException):
            Scene(np.ones((4, 4)), self.intrinsics, (SceneObject(mask), SceneObject(mask)))

        with self.assertRaises(SceneException):
            Scene(np.ones((4, 4)), self.intrinsics, (SceneObject(ObjectMask(np.ones((3, 3)))),))

    def test_with_motion(self):
        scene = cube_scene(self.shape, self.intrinsics)
        moved = scene.with_motion(CameraMotion((1.0, 0.0, 0.0)), [CameraMotion((0.0, 1.0, 0.0))])

        self.assertEqual((1.0, 0.0, 0.0), moved.camera_motion.translation)
        self.assertEqual((0.0, 1.0, 0.0), moved.objects[0].motion.translation)
        self.assertTrue(scene.camera_motion.is_zero())

        with self.assertRaises(SceneException):
            scene.with_motion(CameraMotion(), [])

    def test_no_motion_no_flow(self):
        scene = cube_scene(self.shape, self.intrinsics)
        np.testing.assert_allclose(0.0, reproject_flow(scene).data, atol=1e-12)
        np.testing.assert_array_equal(0.0, instantaneous_flow(scene).data)

    def test_lateral_translation_is_exact(self):
        scene = plane_scene(self.shape, self.intrinsics).with_motion(
            CameraMotion((1.0, -0.5, 0.0))
        )
        self.assertLess(linearization_error(scene, 1e-2), 1e-9)

        flow = instantaneous_flow(scene)
        np.testing.assert_allclose(30.0 * 0.1, flow.u)
        np.testing.assert_allclose(-0.5 * 30.0 * 0.1, flow.v)

    def test_linearization_error_halves(self):
        motions = [
            CameraMotion((0.0, 0.0, 1.0)),
            CameraMotion(rotation=(0.2, 0.0, 0.0)),
            CameraMotion(rotation=(0.0, 0.2, 0.0)),
            CameraMotion(rotation=(0.0, 0.0, 0.3)),
            CameraMotion((0.3, -0.2, 0.8), (0.05, -0.1, 0.2)),
        ]
        scene = cube_scene(self.shape, self.intrinsics)

        for motion in motions:
            moving = scene.with_motion(motion)
            ratio = linearization_error(moving, 1e-2) / linearization_error(moving, 5e-3)
            self.assertAlmostEqual(2.0, ratio, delta=0.2, msg=str(motion))

    def test_object_motion_halves(self):
        scene = two_object_scene(self.shape, self.intrinsics).with_motion(
            CameraMotion((0.0, 0.0, 0.5), (0.0, 0.1, 0.0)),
            [
                CameraMotion((1.0, 0.0, 0.0), (0.1, 0.0, 0.0)),
                CameraMotion((0.0, 0.5, 0.2), (0.0, 0.0, 0.2)),
            ],
        )

        ratio = linearization_error(scene, 1e-2) / linearization_error(scene, 5e-3)
        self.assertAlmostEqual(2.0, ratio, delta=0.2)

    def test_static_residual_is_quadratic(self):
        scene = cube_scene(self.shape, self.intrinsics).with_motion(
            CameraMotion((0.3, -0.2, 0.8), (0.05, -0.1, 0.2))
        )
        basis = camera_basis(make_grid(self.shape), self.intrinsics, scene.disparity)

        def residual(step: float) -> float:
            return project_onto(basis, reproject_flow(scene, step)).residual_norm

        c = residual(1e-2) / 1e-2**2
        self.assertGreater(c, 0.0)
        for step in (5e-3, 2.5e-3):
            self.assertLessEqual(residual(step), 1.25 * c * step**2, msg=str(step))

    def test_translating_object_in_masked_span(self):
        scene = cube_scene(self.shape, self.intrinsics).with_motion(
            CameraMotion((0.1, 0.0, 0.5), (0.0, 0.05, 0.0)),
            [CameraMotion((0.5, -0.3, 0.4))],
        )
        camera = camera_basis(make_grid(self.shape), self.intrinsics, scene.disparity)
        mask = scene.objects[0].mask
        basis = camera.concat(masked_basis(mask, camera, translation_only=True))
        self.assertEqual(9, len(basis))

        flow = instantaneous_flow(scene)
        self.assertLess(project_onto(basis, flow).residual_norm, 1e-8 * flow.norm())
        # Without the object fields the flow is well outside the span.
        self.assertGreater(project_onto(camera, flow).residual_norm, 1e-3 * flow.norm())

        coarse = project_onto(basis, reproject_flow(scene, 1e-2)).residual_norm
        fine = project_onto(basis, reproject_flow(scene, 5e-3)).residual_norm
        self.assertAlmostEqual(4.0, coarse / fine, delta=1.0)

    def test_object_flow_confined_to_mask(self):
        scene = two_object_scene(self.shape, self.intrinsics)
        flow = instantaneous_flow(scene)

        inside = scene.label_map() > 0
        np.testing.assert_array_equal(0.0, flow.data[~inside])
        self.assertTrue(np.all(flow.magnitude()[inside] > 0))

    def test_equivalent_motion(self):
        scene = two_object_scene(self.shape, self.intrinsics)
        scene_object = scene.objects[0]

        self.assertEqual(
            scene_object.motion.translation,
            equivalent_motion(scene, scene_object).translation,
        )

        spinning = SceneObject(scene_object.mask, CameraMotion(rotation=(0.0, 0.0, 1.0)))
        centroid = np.array([1.0, 0.0, 5.0])
        # Spinning about a centroid at x = 1 drags the origin along +y.
        motion = equivalent_motion(scene, spinning, centroid)
        np.testing.assert_allclose([0.0, 1.0, 0.0], motion.translation)

    def test_point_behind_camera(self):
        scene = plane_scene(self.shape, self.intrinsics, depth=10.0).with_motion(
            CameraMotion((0.0, 0.0, -20.0))
        )
        with self.assertRaises(PointBehindCamera):
            reproject_flow(scene, 1.0)


class SceneStorageTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self._directory = tempfile.TemporaryDirectory()
        self.directory = Path(self._directory.name)

    def tearDown(self) -> None:
        self._directory.cleanup()

    def test_write_and_read(self):
        shape = ImageShape(12, 16)
        scene = two_object_scene(shape, Intrinsics(20.0, 21.0, 8.0, 6.0)).with_motion(
            CameraMotion((0.0, 0.0, 1.0), (0.1, 0.0, 0.0))
        )

        manifest = write_scene(self.directory, scene)
        self.assertEqual(SCENE_MANIFEST, manifest.name)

        back = read_scene(self.directory)

        np.testing.assert_array_equal(scene.depth, back.depth)
        self.assertEqual(scene.intrinsics, back.intrinsics)
        self.assertEqual(scene.camera_motion, back.camera_motion)
        self.assertEqual(
            [o.name for o in scene.objects], [o.name for o in back.objects]
        )
        for original, restored in zip(scene.objects, back.objects):
            np.testing.assert_array_equal(original.mask.data, restored.mask.data)
            self.assertEqual(original.motion, restored.motion)

    def test_missing_manifest(self):
        with self.assertRaises(FlowspanException):
            read_scene(self.directory)


if __name__ == "__main__":
    unittest.main()
