import os
import tempfile
import unittest
from pathlib import Path

from flowspan import FlowspanException
from flowspan.impl.store import (
    atomic_write_bytes,
    atomic_write_text,
    ensure_directory,
    json_from_path,
    write_json,
)


class StoreTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self._directory = tempfile.TemporaryDirectory()
        self.directory = Path(self._directory.name)

    def tearDown(self) -> None:
        self._directory.cleanup()

    def test_atomic_write(self):
        path = atomic_write_bytes(self.directory / "a.bin", b"abc")
        self.assertEqual(b"abc", path.read_bytes())

        atomic_write_text(path, "replaced")
        self.assertEqual("replaced", path.read_text())

        # No temporary files are left behind.
        self.assertEqual(["a.bin"], os.listdir(self.directory))

    def test_failed_write_cleans_up(self):
        with self.assertRaises(FileNotFoundError):
            atomic_write_bytes(self.directory / "missing" / "a.bin", b"abc")
        self.assertEqual([], os.listdir(self.directory))

    def test_json(self):
        path = write_json(self.directory / "doc.json", {"b": 1, "a": [1.5, None]})

        self.assertEqual({"a": [1.5, None], "b": 1}, json_from_path(path))
        self.assertTrue(path.read_text().startswith('{\n  "a"'))

    def test_json_errors(self):
        with self.assertRaises(FlowspanException):
            json_from_path(self.directory / "missing.json")

        bad = self.directory / "bad.json"
        bad.write_text("{not json")
        with self.assertRaises(FlowspanException):
            json_from_path(bad)

    def test_ensure_directory(self):
        path = ensure_directory(self.directory / "x" / "y")
        self.assertTrue(path.is_dir())
        self.assertEqual(path, ensure_directory(path))


if __name__ == "__main__":
    unittest.main()
