import os
import unittest
from unittest import mock

import numpy as np

from flowspan.basis import (
    FlowBasis,
    camera_basis,
    embedding_basis,
    masked_basis,
    renormalize,
)
from flowspan.geometry import (
    CameraMotion,
    DisparityMap,
    FlowField,
    ImageShape,
    Intrinsics,
    flatten,
    make_grid,
)
from flowspan.projection import (
    DEFAULT_EPSILON,
    EnvironmentEpsilon,
    ProjectionException,
    assemble,
    dual_solve_loss,
    flow_reconstruction_loss,
    orthonormalize,
    project,
    project_onto,
)
from flowspan.scenes import combine


class ProjectionTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.shape = ImageShape(8, 10)
        self.grid = make_grid(self.shape)
        self.intrinsics = Intrinsics(12.0, 12.0, 5.0, 4.0)
        self.rng = np.random.default_rng(1234)
        self.disparity = DisparityMap(self.rng.uniform(0.2, 1.0, self.shape.as_tuple()))
        self.basis = camera_basis(self.grid, self.intrinsics, self.disparity)

    def random_flow(self) -> FlowField:
        return FlowField(self.rng.normal(size=(self.shape.height, self.shape.width, 2)))

    def test_column_normalization(self):
        matrix = assemble(self.basis)

        self.assertEqual((2 * self.shape.n_pixels, 6), matrix.columns.shape)
        self.assertEqual(self.basis.labels, matrix.labels)

        for k, member in enumerate(self.basis):
            if member.kind == "rotation":
                self.assertAlmostEqual(1.0, np.linalg.norm(matrix.columns[:, k]))
            else:
                self.assertAlmostEqual(2.0, matrix.scales[k] * member.template.norm())

    def test_orthonormal(self):
        subspace = orthonormalize(assemble(self.basis))

        self.assertEqual(6, subspace.rank)
        np.testing.assert_allclose(np.eye(6), subspace.u.T @ subspace.u, atol=1e-12)
        self.assertEqual(0, subspace.dropped_values.size)
        self.assertEqual(DEFAULT_EPSILON, subspace.threshold)

    def test_projector(self):
        projector = orthonormalize(assemble(self.basis)).projector()

        np.testing.assert_allclose(projector, projector.T, atol=1e-12)
        np.testing.assert_allclose(projector, projector @ projector, atol=1e-10)

    def test_flow_in_span(self):
        motion = CameraMotion((0.3, -0.2, 0.5), (0.01, -0.02, 0.03))
        flow = combine(self.basis, motion)

        result = project_onto(self.basis, flow)

        self.assertLess(result.residual_norm, 1e-9 * flow.norm())
        self.assertFalse(result.degenerate)
        np.testing.assert_allclose(motion.as_vector(), result.coefficients, rtol=1e-6, atol=1e-9)
        self.assertAlmostEqual(0.5, result.coefficient("Tz"))

    def test_pythagoras(self):
        flow = self.random_flow()
        result = project_onto(self.basis, flow)

        residual = flatten(flow) - flatten(result.reconstructed)
        self.assertAlmostEqual(result.residual_norm, np.linalg.norm(residual))
        self.assertAlmostEqual(
            flow.norm() ** 2, result.residual_norm**2 + result.reconstructed.norm() ** 2
        )
        self.assertAlmostEqual(
            0.0, float(residual @ flatten(result.reconstructed)), places=10
        )

    def test_idempotent(self):
        once = project_onto(self.basis, self.random_flow())
        twice = project_onto(self.basis, once.reconstructed)

        np.testing.assert_allclose(once.reconstructed.data, twice.reconstructed.data, atol=1e-10)
        self.assertLess(twice.residual_norm, 1e-9)

    def test_loss_invariant_to_disparity_scale(self):
        flow = self.random_flow()
        scaled = camera_basis(self.grid, self.intrinsics, self.disparity.scaled(3.0))

        self.assertAlmostEqual(
            flow_reconstruction_loss(self.basis, flow),
            flow_reconstruction_loss(scaled, flow),
            places=10,
        )

    def test_coefficients_scale_inversely(self):
        motion = CameraMotion((0.4, 0.1, -0.3), (0.0, 0.0, 0.0))
        flow = combine(self.basis, motion)
        scaled = camera_basis(self.grid, self.intrinsics, self.disparity.scaled(2.0))

        result = project_onto(scaled, flow)
        np.testing.assert_allclose(
            np.array(motion.translation) / 2.0, result.coefficients[:3], atol=1e-9
        )

    def test_rank_deficient(self):
        duplicate = masked_basis(np.ones(self.shape.as_tuple()), self.basis).select(["m*Tx"])
        basis = self.basis.concat(duplicate)

        flow = self.random_flow()
        result = project_onto(basis, flow)

        self.assertEqual(6, result.rank)
        self.assertTrue(result.degenerate)
        self.assertAlmostEqual(
            project_onto(self.basis, flow).residual_norm, result.residual_norm, places=9
        )
        # The minimum-norm solution splits the weight evenly.
        self.assertAlmostEqual(result.coefficient("Tx"), result.coefficient("m*Tx"))

    def test_relative_threshold(self):
        matrix = assemble(self.basis)
        absolute = orthonormalize(matrix, 1e-5)
        relative = orthonormalize(matrix, 1e-5, mode="relative")

        self.assertAlmostEqual(1e-5 * absolute.singular_values[0], relative.threshold)

        # Nothing is strictly larger than the largest singular value.
        self.assertEqual(0, orthonormalize(matrix, 1.0, mode="relative").rank)

        with self.assertRaises(ProjectionException):
            orthonormalize(matrix, 1e-5, mode="sideways")

    def test_large_threshold_drops_everything(self):
        matrix = assemble(self.basis)
        subspace = orthonormalize(matrix, 1e6)
        self.assertEqual(0, subspace.rank)

        flow = self.random_flow()
        result = project(subspace, flow)
        self.assertAlmostEqual(flow.norm(), result.residual_norm)
        np.testing.assert_array_equal(0.0, result.coefficients)

    def test_zero_field(self):
        zero = masked_basis(np.zeros(self.shape.as_tuple()), self.basis).select(["m*Rz"])

        with self.assertLogs("flowspan.projection", level="WARNING"):
            matrix = assemble(self.basis.concat(zero))

        self.assertEqual(1.0, matrix.scales[-1])
        self.assertEqual(6, orthonormalize(matrix).rank)

    def test_errors(self):
        with self.assertRaises(ProjectionException):
            assemble(FlowBasis([]))

        with self.assertRaises(ProjectionException):
            project_onto(self.basis, FlowField.zeros(ImageShape(3, 3)))

        with self.assertRaises(ProjectionException):
            orthonormalize(assemble(self.basis), -1.0)

    def test_coefficient_series(self):
        result = project_onto(self.basis, self.random_flow())
        series = result.coefficient_series()

        self.assertEqual(self.basis.labels, list(series.index))
        self.assertEqual(result.coefficient("Ry"), series["Ry"])


class EnvironmentEpsilonTestCase(unittest.TestCase):
    def test_default(self):
        with mock.patch.dict(os.environ, {}, clear=False):
            os.environ.pop("FLOWSPAN_EPSILON", None)
            self.assertEqual(DEFAULT_EPSILON, EnvironmentEpsilon.epsilon())

    def test_override(self):
        with mock.patch.dict(os.environ, {"FLOWSPAN_EPSILON": "1e-3"}):
            self.assertEqual(1e-3, EnvironmentEpsilon.epsilon())

    def test_bad_values(self):
        for value in ("abc", "0", "-1e-5"):
            with mock.patch.dict(os.environ, {"FLOWSPAN_EPSILON": value}):
                with self.assertRaises(ProjectionException):
                    EnvironmentEpsilon.epsilon()


class DualSolveTestCase(unittest.TestCase):
    def test_weights(self):
        shape = ImageShape(6, 6)
        grid = make_grid(shape)
        intrinsics = Intrinsics(10.0, 10.0, 3.0, 3.0)
        rng = np.random.default_rng(5)
        disparity = DisparityMap(rng.uniform(0.2, 1.0, shape.as_tuple()))
        embedding = renormalize(rng.normal(size=(6, 6, 2)))
        flow = FlowField(rng.normal(size=(6, 6, 2)))

        camera = camera_basis(grid, intrinsics, disparity)
        full = embedding_basis(grid, intrinsics, disparity, embedding)

        loss = dual_solve_loss(camera, full, flow)

        self.assertAlmostEqual(flow_reconstruction_loss(camera, flow), loss.camera)
        self.assertAlmostEqual(flow_reconstruction_loss(full, flow), loss.full)
        self.assertAlmostEqual(0.5 * loss.camera + 1.0 * loss.full, loss.total)

        custom = dual_solve_loss(camera, full, flow, camera_weight=0.0, full_weight=2.0)
        self.assertAlmostEqual(2.0 * loss.full, custom.total)


if __name__ == "__main__":
    unittest.main()
