import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from flowspan.basis import camera_basis, embedding_basis, renormalize
from flowspan.flowio import (
    BASIS_MANIFEST,
    FLO_MAX_DIMENSION,
    BadMagic,
    DimensionOverflow,
    FlowIOException,
    PfmFormatError,
    TruncatedPayload,
    colorize_disparity,
    colorize_flow,
    decode_flo,
    decode_pfm,
    encode_flo,
    encode_pfm,
    read_basis_stack,
    read_disparity,
    read_embedding_stack,
    read_flo,
    read_label_map,
    read_mask,
    read_pfm,
    write_basis_stack,
    write_embedding_stack,
    write_flo,
    write_label_map,
    write_mask,
    write_pfm,
    write_rgb_png,
)
from flowspan.geometry import DisparityMap, FlowField, ImageShape, Intrinsics, make_grid
from flowspan.projection import assemble


class FloTestCase(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(0)
        data = rng.normal(size=(3, 5, 2)).astype(np.float32)
        self.flow = FlowField(data)

    def test_header(self):
        raw = encode_flo(self.flow)

        self.assertEqual(b"PIEH", raw[:4])
        self.assertEqual(5, int.from_bytes(raw[4:8], "little"))
        self.assertEqual(3, int.from_bytes(raw[8:12], "little"))
        self.assertEqual(12 + 4 * 2 * 15, len(raw))

    def test_decode(self):
        flow = decode_flo(encode_flo(self.flow))
        np.testing.assert_array_equal(self.flow.data, flow.data)

    def test_interleaved_payload(self):
        raw = encode_flo(self.flow)
        payload = np.frombuffer(raw[12:], dtype="<f4")
        self.assertEqual(np.float32(self.flow.u[0, 1]), payload[2])
        self.assertEqual(np.float32(self.flow.v[0, 1]), payload[3])

    def test_bad_magic(self):
        raw = bytearray(encode_flo(self.flow))
        raw[0:4] = b"XXXX"
        with self.assertRaises(BadMagic):
            decode_flo(bytes(raw))

    def test_truncated(self):
        raw = encode_flo(self.flow)
        with self.assertRaises(TruncatedPayload):
            decode_flo(raw[:-4])
        with self.assertRaises(TruncatedPayload):
            decode_flo(raw[:8])

    def test_dimensions(self):
        header = np.array([202021.25], dtype="<f4").tobytes()

        huge = header + np.array([FLO_MAX_DIMENSION + 1, 1], dtype="<i4").tobytes()
        with self.assertRaises(DimensionOverflow):
            decode_flo(huge)

        empty = header + np.array([0, 4], dtype="<i4").tobytes()
        with self.assertRaises(FlowIOException):
            decode_flo(empty)

    def test_trailing_data(self):
        raw = encode_flo(self.flow) + b"\0" * 8
        with self.assertLogs("flowspan.flowio", level="WARNING"):
            flow = decode_flo(raw)
        np.testing.assert_array_equal(self.flow.data, flow.data)

    def test_single_pixel(self):
        raw = encode_flo(FlowField(np.array([[[1.5, -2.0]]], dtype=np.float32)))

        self.assertEqual(20, len(raw))
        np.testing.assert_array_equal([1.5, -2.0], np.frombuffer(raw[12:], dtype="<f4"))

    def test_random_round_trips(self):
        rng = np.random.default_rng(23)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "flow.flo"
            for _ in range(1000):
                height, width = rng.integers(1, 9, size=2)
                data = rng.normal(scale=10.0, size=(height, width, 2)).astype(np.float32)
                raw = encode_flo(FlowField(data))

                write_flo(path, FlowField(data))

                self.assertEqual(raw, path.read_bytes())
                self.assertEqual(raw, encode_flo(read_flo(path)))

    def test_files(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "flow.flo"
            write_flo(path, self.flow)
            np.testing.assert_array_equal(self.flow.data, read_flo(path).data)

            with self.assertRaises(FlowIOException):
                read_flo(Path(directory) / "missing.flo")


class PfmTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.image = np.arange(12, dtype=np.float32).reshape(3, 4)

    def test_header_and_row_order(self):
        raw = encode_pfm(self.image)
        header = b"Pf\n4 3\n-1.0\n"

        self.assertTrue(raw.startswith(header))
        first_stored_row = np.frombuffer(raw[len(header) :], dtype="<f4", count=4)
        np.testing.assert_array_equal(self.image[-1], first_stored_row)

    def test_decode(self):
        image = decode_pfm(encode_pfm(self.image))
        self.assertEqual(np.float32, image.dtype)
        np.testing.assert_array_equal(self.image, image)

    def test_big_endian(self):
        raw = b"Pf\n4 3\n1.0\n" + np.flipud(self.image).astype(">f4").tobytes()
        np.testing.assert_array_equal(self.image, decode_pfm(raw))

    def test_color_rejected(self):
        raw = b"PF\n4 3\n-1.0\n" + bytes(4 * 36)
        with self.assertRaises(PfmFormatError):
            decode_pfm(raw)

    def test_malformed(self):
        for raw in (b"P6\n4 3\n-1.0\n", b"Pf\n4\n-1.0\n", b"Pf\n4 3\nabc\n", b"Pf\n4 3"):
            with self.assertRaises(PfmFormatError):
                decode_pfm(raw)

    def test_random_round_trips(self):
        rng = np.random.default_rng(29)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "image.pfm"
            for _ in range(1000):
                height, width = rng.integers(1, 9, size=2)
                image = rng.uniform(0.0, 100.0, size=(height, width)).astype(np.float32)
                raw = encode_pfm(image)

                write_pfm(path, image)

                self.assertEqual(raw, path.read_bytes())
                self.assertEqual(raw, encode_pfm(read_pfm(path)))

    def test_truncated(self):
        with self.assertRaises(TruncatedPayload):
            decode_pfm(encode_pfm(self.image)[:-1])

    def test_only_2d(self):
        with self.assertRaises(PfmFormatError):
            encode_pfm(np.zeros((2, 2, 3)))

    def test_disparity(self):
        with tempfile.TemporaryDirectory() as directory:
            good = Path(directory) / "good.pfm"
            write_pfm(good, DisparityMap(np.full((2, 3), 0.25)))
            np.testing.assert_array_equal(0.25, read_disparity(good).data)

            bad = Path(directory) / "bad.pfm"
            write_pfm(bad, np.full((2, 3), -1.0))
            with self.assertRaises(FlowIOException):
                read_disparity(bad)

            np.testing.assert_array_equal(-1.0, read_pfm(bad))


class ImageTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self._directory = tempfile.TemporaryDirectory()
        self.directory = Path(self._directory.name)

    def tearDown(self) -> None:
        self._directory.cleanup()

    def test_mask(self):
        mask = np.zeros((5, 6), dtype=int)
        mask[1:4, 2:5] = 1

        for name in ("mask.pgm", "mask.png"):
            path = self.directory / name
            write_mask(path, mask)
            np.testing.assert_array_equal(mask, read_mask(path).data)

        with Image.open(self.directory / "mask.pgm") as image:
            self.assertEqual("L", image.mode)
            self.assertEqual(255, np.array(image).max())

    def test_label_map(self):
        labels = np.array([[0, 1, 2], [7, 7, 255]])

        for name in ("labels.png", "labels.pgm"):
            path = self.directory / name
            write_label_map(path, labels)
            np.testing.assert_array_equal(labels, read_label_map(path))

        with Image.open(self.directory / "labels.png") as image:
            self.assertEqual("P", image.mode)

    def test_label_map_range(self):
        with self.assertRaises(FlowIOException):
            write_label_map(self.directory / "labels.png", np.array([[0, 256]]))

    def test_unsupported_suffix(self):
        with self.assertRaises(FlowIOException):
            write_mask(self.directory / "mask.jpg", np.zeros((2, 2), dtype=int))

    def test_rgb(self):
        rgb = np.zeros((2, 3, 3))
        rgb[0, 0] = [1.0, 0.0, 0.0]

        path = write_rgb_png(self.directory / "rgb.png", rgb)

        with Image.open(path) as image:
            pixels = np.array(image)
        np.testing.assert_array_equal([255, 0, 0], pixels[0, 0])
        np.testing.assert_array_equal([0, 0, 0], pixels[1, 2])

    def test_not_an_image(self):
        path = self.directory / "junk.png"
        path.write_bytes(b"not a png")
        with self.assertRaises(FlowIOException):
            read_mask(path)


class ColorizeTestCase(unittest.TestCase):
    def test_flow(self):
        flow = FlowField.from_components(
            np.array([[0.0, 2.0, 1.0]]), np.array([[0.0, 0.0, 0.0]])
        )

        rgb = colorize_flow(flow)

        self.assertEqual((1, 3, 3), rgb.shape)
        np.testing.assert_allclose([1.0, 1.0, 1.0], rgb[0, 0])
        np.testing.assert_allclose([1.0, 0.0, 0.0], rgb[0, 1])
        np.testing.assert_allclose([1.0, 0.5, 0.5], rgb[0, 2])

    def test_zero_flow(self):
        rgb = colorize_flow(FlowField.zeros(ImageShape(2, 2)))
        np.testing.assert_allclose(1.0, rgb)

        with self.assertRaises(FlowIOException):
            colorize_flow(FlowField.zeros(ImageShape(2, 2)), max_magnitude=-1.0)

    def test_disparity(self):
        rgb = colorize_disparity(np.array([[0.0, 0.5, 1.0]]))

        self.assertEqual((1, 3, 3), rgb.shape)
        np.testing.assert_allclose(0.0, rgb[0, 0])
        np.testing.assert_allclose(1.0, rgb[0, 2])


class StackTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self._directory = tempfile.TemporaryDirectory()
        self.directory = Path(self._directory.name)

        shape = ImageShape(4, 5)
        rng = np.random.default_rng(6)
        self.grid = make_grid(shape)
        self.intrinsics = Intrinsics(8.0, 8.0, 2.5, 2.0)
        self.disparity = DisparityMap(rng.uniform(0.25, 1.0, shape.as_tuple()))
        self.embedding = renormalize(rng.normal(size=(4, 5, 2)))

    def tearDown(self) -> None:
        self._directory.cleanup()

    def test_basis(self):
        basis = embedding_basis(self.grid, self.intrinsics, self.disparity, self.embedding)

        manifest = write_basis_stack(self.directory, basis)
        self.assertEqual(BASIS_MANIFEST, manifest.name)

        back = read_basis_stack(self.directory)

        self.assertEqual(basis.labels, back.labels)
        for original, restored in zip(basis, back):
            self.assertEqual(original.kind, restored.kind)
            self.assertEqual(original.disparity_weighted, restored.disparity_weighted)
            self.assertEqual(original.embedding_index, restored.embedding_index)
            np.testing.assert_allclose(original.field.data, restored.field.data, rtol=1e-6)

        np.testing.assert_allclose(assemble(basis).scales, assemble(back).scales, rtol=1e-5)

    def test_file_names(self):
        basis = camera_basis(self.grid, self.intrinsics, self.disparity)
        write_basis_stack(self.directory, basis)

        self.assertTrue((self.directory / "00_Tx.flo").exists())
        self.assertTrue((self.directory / "00_Tx_template.flo").exists())
        self.assertFalse((self.directory / "03_Rx_template.flo").exists())

    def test_malformed_entries(self):
        basis = camera_basis(self.grid, self.intrinsics, self.disparity)
        path = write_basis_stack(self.directory, basis)
        original = json.loads(path.read_text())

        def corrupt(edit):
            manifest = json.loads(json.dumps(original))
            edit(manifest["fields"][0])
            path.write_text(json.dumps(manifest))
            with self.assertRaises(FlowIOException):
                read_basis_stack(self.directory)

        corrupt(lambda entry: entry.pop("file"))
        corrupt(lambda entry: entry.pop("label"))
        corrupt(lambda entry: entry.pop("kind"))
        corrupt(lambda entry: entry.update(kind="shear"))
        corrupt(lambda entry: entry.update(file=3))
        corrupt(lambda entry: entry.update(embedding_index="one"))

        path.write_text(json.dumps(dict(original, fields=["Tx"])))
        with self.assertRaises(FlowIOException):
            read_basis_stack(self.directory)

    def test_missing_manifest(self):
        with self.assertRaises(FlowIOException):
            read_basis_stack(self.directory)
        with self.assertRaises(FlowIOException):
            read_embedding_stack(self.directory)

    def test_embedding(self):
        write_embedding_stack(self.directory, self.embedding)

        back = read_embedding_stack(self.directory)

        self.assertEqual(2, back.dim)
        np.testing.assert_allclose(self.embedding.data, back.data, atol=1e-6)
        self.assertTrue((self.directory / "embedding_01.pfm").exists())


if __name__ == "__main__":
    unittest.main()
