import unittest

import numpy as np

from flowspan.basis import BasisException, renormalize
from flowspan.geometry import DisparityMap, ImageShape, Intrinsics, make_grid
from flowspan.impl.family.analytic import (
    CameraFamily,
    EmbeddingFamily,
    TranslationFamily,
    UnknownFocalFamily,
    camera_only_family,
    family_for,
)


class FamilyTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.shape = ImageShape(5, 6)
        self.grid = make_grid(self.shape)
        self.intrinsics = Intrinsics(15.0, 15.0, 3.0, 2.5)
        rng = np.random.default_rng(11)
        self.disparity = DisparityMap(rng.uniform(0.1, 1.0, self.shape.as_tuple()))
        self.embedding = renormalize(rng.normal(size=(5, 6, 3)))

    def assertCardinality(self, family, embedding=None):
        basis = family.build(self.grid, self.disparity, embedding)
        dim = 0 if embedding is None else embedding.dim
        self.assertEqual(family.cardinality(dim), len(basis))

    def test_cardinalities(self):
        self.assertCardinality(CameraFamily(self.intrinsics))
        self.assertCardinality(UnknownFocalFamily(self.intrinsics))
        self.assertCardinality(TranslationFamily(self.intrinsics, "xz"))
        self.assertCardinality(EmbeddingFamily(self.intrinsics), self.embedding)
        self.assertCardinality(
            EmbeddingFamily(self.intrinsics.principal_point, object_rotation=True),
            self.embedding,
        )

    def test_embedding_cardinality_formula(self):
        self.assertEqual(3 * 6 + 3, EmbeddingFamily(self.intrinsics).cardinality(6))
        self.assertEqual(
            3 * 6 + 5, EmbeddingFamily(self.intrinsics.principal_point).cardinality(6)
        )
        self.assertEqual(
            8 * 2 + 5,
            EmbeddingFamily(
                self.intrinsics.principal_point, object_rotation=True
            ).cardinality(2),
        )

    def test_family_for(self):
        self.assertIsInstance(family_for(self.intrinsics), CameraFamily)
        self.assertIsInstance(family_for(self.intrinsics.principal_point), UnknownFocalFamily)
        self.assertIsInstance(family_for(self.intrinsics, embedding=True), EmbeddingFamily)
        self.assertIsInstance(camera_only_family(self.intrinsics), CameraFamily)

    def test_names(self):
        self.assertEqual("camera", CameraFamily(self.intrinsics).name)
        self.assertEqual("unknown-focal", UnknownFocalFamily(self.intrinsics).name)
        self.assertTrue(EmbeddingFamily(self.intrinsics).needs_embedding)
        self.assertFalse(CameraFamily(self.intrinsics).needs_embedding)

    def test_translation_axes(self):
        basis = TranslationFamily(self.intrinsics, "zx").build(self.grid, self.disparity)
        self.assertEqual(["Tx", "Tz"], basis.labels)

        for axes in ("", "xw", "xx"):
            with self.assertRaises(BasisException):
                TranslationFamily(self.intrinsics, axes)

    def test_embedding_required(self):
        with self.assertRaises(BasisException):
            EmbeddingFamily(self.intrinsics).build(self.grid, self.disparity)

    def test_build_for_shape(self):
        basis = CameraFamily(self.intrinsics).build_for_shape(self.shape, self.disparity)
        self.assertEqual(self.shape, basis.shape)


if __name__ == "__main__":
    unittest.main()
