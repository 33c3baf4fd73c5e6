# Copyright (c) 2024 flowspan developers
"""
Reading and writing flow, depth, mask and embedding files, and rendering them.

Formats:

* ``.flo`` for flow fields. A little-endian float32 tag ``202021.25``
  (the bytes ``PIEH``), int32 width and height, then ``2 W H`` float32
  values, row-major with ``(u, v)`` interleaved.
* PFM (``Pf``, single channel) for depth, disparity and embedding
  channels. Rows are stored bottom-up; a negative scale token means
  little-endian, which is what we write.
* 8-bit PGM for binary masks, PNG or PGM for label maps, PNG for
  visualizations.
* Directories of the above plus a JSON manifest for basis and embedding
  stacks.
"""

import re
from io import BytesIO
from logging import getLogger
from pathlib import Path
from typing import Optional, Union

import matplotlib
import matplotlib.colors
import numpy as np
from PIL import Image

from .basis import BasisField, FlowBasis, ObjectEmbedding, ObjectMask, renormalize
from .geometry import DisparityMap, FlowField, ImageShape
from .impl.exceptions import FlowspanException
from .impl.store import (
    PathLike,
    atomic_write_bytes,
    ensure_directory,
    json_from_path,
    write_json,
)

logger = getLogger(__name__)


FLO_MAGIC = 202021.25
"""The float tag that starts every ``.flo`` file."""

FLO_MAX_DIMENSION = 32768
"""The largest width or height we will read or write in a ``.flo`` file."""

_FLO_HEADER_BYTES = 12

BASIS_MANIFEST = "basis.json"
"""The name of the manifest in a basis stack directory."""

BASIS_KINDS = ("translation", "rotation")
"""The field kinds a basis manifest may name."""

EMBEDDING_MANIFEST = "embedding.json"
"""The name of the manifest in an embedding stack directory."""

LABEL_COLORMAP = "tab20"
"""The matplotlib colormap used for label map palettes."""


class FlowIOException(FlowspanException):
    """An exception raised by the `flowspan.flowio` module."""


class BadMagic(FlowIOException):
    """A ``.flo`` file does not start with the expected tag."""


class TruncatedPayload(FlowIOException):
    """A file ends before all the data its header promises."""


class DimensionOverflow(FlowIOException):
    """A ``.flo`` width or height is larger than :py:data:`FLO_MAX_DIMENSION`."""


class PfmFormatError(FlowIOException):
    """A PFM file is malformed or is not single-channel."""


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FlowIOException(f"Cannot read {path}: {exc.strerror}.") from exc


def encode_flo(flow: FlowField) -> bytes:
    """The bytes of a ``.flo`` file holding `flow`."""
    height, width = flow.shape.as_tuple()
    if height > FLO_MAX_DIMENSION or width > FLO_MAX_DIMENSION:
        raise DimensionOverflow(
            f"Cannot write {height} x {width} flow; limit is {FLO_MAX_DIMENSION}."
        )

    payload = flow.data.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise FlowIOException("Flow values overflow 32-bit floats.")

    header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array(
        [width, height], dtype="<i4"
    ).tobytes()

    return header + payload.tobytes()


def decode_flo(raw: bytes, source: str = "<bytes>") -> FlowField:
    """Parse the bytes of a ``.flo`` file."""
    if len(raw) < _FLO_HEADER_BYTES:
        raise TruncatedPayload(
            f"{source} has {len(raw)} bytes, fewer than a .flo header."
        )

    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(f"{source} starts with {magic!r}, not {FLO_MAGIC}.")

    width, height = (int(x) for x in np.frombuffer(raw, dtype="<i4", count=2, offset=4))

    if width < 1 or height < 1:
        raise FlowIOException(f"{source} has invalid dimensions {width} x {height}.")
    if width > FLO_MAX_DIMENSION or height > FLO_MAX_DIMENSION:
        raise DimensionOverflow(
            f"{source} claims {width} x {height}; limit is {FLO_MAX_DIMENSION}."
        )

    n_values = 2 * width * height
    available = (len(raw) - _FLO_HEADER_BYTES) // 4
    if available < n_values:
        raise TruncatedPayload(
            f"{source} holds {available} floats but a {width} x {height} flow "
            f"needs {n_values}."
        )
    if available > n_values:
        logger.warning(
            "Ignoring %d trailing floats in %s.", available - n_values, source
        )

    data = np.frombuffer(raw, dtype="<f4", count=n_values, offset=_FLO_HEADER_BYTES)

    try:
        return FlowField(data.reshape(height, width, 2).astype(np.float64))
    except FlowspanException as exc:
        raise FlowIOException(f"{source} does not hold a valid flow: {exc}") from exc


def read_flo(path: PathLike) -> FlowField:
    """
    Read a ``.flo`` file.

    Raises
    ------
    BadMagic
        If the tag is wrong.
    TruncatedPayload
        If the file is too short.
    DimensionOverflow
        If the dimensions are implausibly large.
    """
    return decode_flo(_read_bytes(path), str(path))


def write_flo(path: PathLike, flow: FlowField) -> Path:
    """Write a ``.flo`` file."""
    return atomic_write_bytes(path, encode_flo(flow))


def encode_pfm(image: Union[np.ndarray, DisparityMap]) -> bytes:
    """The bytes of a little-endian single-channel PFM file."""
    data = np.asarray(image.data if isinstance(image, DisparityMap) else image)

    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim != 2:
        raise PfmFormatError(
            f"Only (H, W) images can be written as PFM, not {data.shape}."
        )

    height, width = data.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")

    return header + np.flipud(data).astype("<f4").tobytes()


def decode_pfm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """
    Parse the bytes of a single-channel PFM file.

    Returns
    -------
        A float32 ``(H, W)`` array with the top row first.
    """
    lines = raw.split(b"\n", 3)
    if len(lines) < 4:
        raise PfmFormatError(f"{source} has an incomplete PFM header.")

    kind, dims, scale_token, payload = lines
    kind = kind.strip()

    if kind == b"PF":
        raise PfmFormatError(f"{source} is a color PFM; only 'Pf' is supported.")
    if kind != b"Pf":
        raise PfmFormatError(f"{source} is not a PFM file.")

    match = re.fullmatch(rb"\s*(\d+)\s+(\d+)\s*", dims)
    if match is None:
        raise PfmFormatError(f"{source} has malformed dimensions {dims!r}.")
    width, height = int(match.group(1)), int(match.group(2))
    if width < 1 or height < 1:
        raise PfmFormatError(f"{source} has invalid dimensions {width} x {height}.")

    try:
        scale = float(scale_token.strip())
    except ValueError as exc:
        raise PfmFormatError(
            f"{source} has a malformed scale {scale_token!r}."
        ) from exc
    if scale == 0.0:
        raise PfmFormatError(f"{source} has a zero scale.")

    dtype = "<f4" if scale < 0 else ">f4"

    n_values = width * height
    if len(payload) < 4 * n_values:
        raise TruncatedPayload(
            f"{source} holds {len(payload)} payload bytes; "
            f"{width} x {height} needs {4 * n_values}."
        )

    data = np.frombuffer(payload, dtype=dtype, count=n_values).reshape(height, width)

    return np.flipud(data).astype(np.float32)


def read_pfm(path: PathLike) -> np.ndarray:
    """
    Read a single-channel PFM file.

    Raises
    ------
    PfmFormatError
        If the header is malformed or the file is a color PFM.
    TruncatedPayload
        If the file is too short.
    """
    return decode_pfm(_read_bytes(path), str(path))


def write_pfm(path: PathLike, image: Union[np.ndarray, DisparityMap]) -> Path:
    """Write a single-channel little-endian PFM file."""
    return atomic_write_bytes(path, encode_pfm(image))


def read_disparity(path: PathLike) -> DisparityMap:
    """Read a disparity map from a PFM file."""
    try:
        return DisparityMap(read_pfm(path))
    except FlowIOException:
        raise
    except FlowspanException as exc:
        raise FlowIOException(
            f"{path} does not hold a valid disparity map: {exc}"
        ) from exc


def _save_image(path: PathLike, image: Image.Image, format: str) -> Path:
    buffer = BytesIO()
    image.save(buffer, format=format)
    return atomic_write_bytes(path, buffer.getvalue())


def _format_for(path: PathLike) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return "PNG"
    if suffix in (".pgm", ".ppm", ".pnm"):
        return "PPM"
    raise FlowIOException(f"Unsupported image suffix '{suffix}' for {path}.")


def _open_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.array(image)
    except FileNotFoundError as exc:
        raise FlowIOException(f"No such file {path}.") from exc
    except (OSError, ValueError) as exc:
        raise FlowIOException(f"Cannot decode image {path}: {exc}") from exc


def write_mask(path: PathLike, mask: Union[ObjectMask, np.ndarray]) -> Path:
    """Write a binary mask as an 8-bit image, 0 and 255."""
    if not isinstance(mask, ObjectMask):
        mask = ObjectMask(mask)
    pixels = (mask.data * 255).astype(np.uint8)
    return _save_image(path, Image.fromarray(pixels), _format_for(path))


def read_mask(path: PathLike) -> ObjectMask:
    """Read an 8-bit mask; values of 128 and above are inside."""
    pixels = _open_image(path)
    if pixels.ndim != 2:
        raise FlowIOException(f"Mask {path} is not single-channel.")
    return ObjectMask((pixels >= 128).astype(np.uint8))


def _label_palette(n_colors: int = 256) -> list:
    cmap = matplotlib.colormaps[LABEL_COLORMAP]
    rgb = (np.array([cmap(i % cmap.N)[:3] for i in range(n_colors)]) * 255).round()
    return rgb.astype(np.uint8).reshape(-1).tolist()


def write_label_map(path: PathLike, labels: np.ndarray) -> Path:
    """
    Write an integer label map.

    PNG files are palette images so that labels are both viewable and
    recoverable; PGM files hold the raw label values.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FlowIOException(f"A label map must be (H, W), not {labels.shape}.")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FlowIOException(
            f"Labels must lie in 0..255, found {labels.min()}..{labels.max()}."
        )

    image_format = _format_for(path)
    image = Image.fromarray(labels.astype(np.uint8))
    if image_format == "PNG":
        # Attaching a palette to an L image makes it a P image, indices intact.
        image.putpalette(_label_palette())

    return _save_image(path, image, image_format)


def read_label_map(path: PathLike) -> np.ndarray:
    pixels = _open_image(path)
    if pixels.ndim != 2:
        raise FlowIOException(f"Label map {path} is not single-channel.")
    return pixels.astype(int)


def write_rgb_png(path: PathLike, rgb: np.ndarray) -> Path:
    """
    Write an RGB image.

    Parameters
    ----------
    path
        The destination.
    rgb
        ``(H, W, 3)`` with floats in ``[0, 1]`` or ``uint8``.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FlowIOException(f"Expected an (H, W, 3) image, not {rgb.shape}.")
    if rgb.dtype != np.uint8:
        rgb = (np.clip(rgb, 0.0, 1.0) * 255).round().astype(np.uint8)
    return _save_image(path, Image.fromarray(rgb), "PNG")


def colorize_flow(flow: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """
    Render flow with a color wheel.

    Hue is the flow angle, with 0 degrees (red) for flow along +u.
    Saturation is magnitude over `max_magnitude`, clipped to 1. Value is
    always 1, so zero flow is white.

    Parameters
    ----------
    flow
        The flow.
    max_magnitude
        The magnitude that renders fully saturated. Defaults to the
        largest magnitude in `flow`.

    Returns
    -------
        An ``(H, W, 3)`` float array in ``[0, 1]``.
    """
    magnitude = flow.magnitude()

    if max_magnitude is None:
        max_magnitude = float(magnitude.max())
    elif max_magnitude < 0:
        raise FlowIOException(
            f"max_magnitude must be non-negative, not {max_magnitude}."
        )

    if max_magnitude > 0:
        saturation = np.clip(magnitude / max_magnitude, 0.0, 1.0)
    else:
        saturation = np.zeros_like(magnitude)

    hue = np.mod(np.arctan2(flow.v, flow.u) / (2 * np.pi), 1.0)
    hsv = np.stack([hue, saturation, np.ones_like(hue)], axis=-1)

    return matplotlib.colors.hsv_to_rgb(hsv)


def colorize_disparity(
    disparity: Union[DisparityMap, np.ndarray],
    max_value: Optional[float] = None,
    cmap: str = "gray",
) -> np.ndarray:
    """Render disparity through a matplotlib colormap, near being bright."""
    if isinstance(disparity, DisparityMap):
        disparity = disparity.data
    data = np.asarray(disparity)
    if max_value is None:
        max_value = float(data.max()) if data.size else 0.0
    normalized = data / max_value if max_value > 0 else np.zeros_like(data)
    return matplotlib.colormaps[cmap](np.clip(normalized, 0.0, 1.0))[..., :3]


def _file_stem(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_")


def write_basis_stack(directory: PathLike, basis: FlowBasis) -> Path:
    """
    Write a basis as one ``.flo`` per field plus a JSON manifest.

    Disparity-weighted fields also get their disparity-free template, so
    the stack can be projected with the same column normalization as the
    in-memory basis.

    Returns
    -------
        The manifest path.
    """
    if basis.shape is None:
        raise FlowIOException("Cannot write an empty basis.")

    directory = ensure_directory(directory)
    entries = []

    for k, member in enumerate(basis):
        stem = f"{k:02d}_{_file_stem(member.label)}"
        entry = {
            "label": member.label,
            "kind": member.kind,
            "file": f"{stem}.flo",
            "template": None,
            "disparity_weighted": member.disparity_weighted,
            "embedding_index": member.embedding_index,
        }
        write_flo(directory / entry["file"], member.field)
        if member.disparity_weighted:
            entry["template"] = f"{stem}_template.flo"
            write_flo(directory / entry["template"], member.template)
        entries.append(entry)

    manifest = {"shape": list(basis.shape.as_tuple()), "fields": entries}

    logger.info("Wrote %d basis fields to %s.", len(basis), directory)

    return write_json(directory / BASIS_MANIFEST, manifest)


def _basis_entry(entry) -> tuple:
    try:
        label = str(entry["label"])
        kind = entry["kind"]
        file = entry["file"]
        template = entry.get("template")
        disparity_weighted = bool(entry.get("disparity_weighted", False))
        embedding_index = entry.get("embedding_index")
    except (AttributeError, KeyError, TypeError) as exc:
        raise FlowIOException(f"Malformed basis manifest entry {entry!r}.") from exc

    if kind not in BASIS_KINDS:
        raise FlowIOException(
            f"Basis field {label} has kind {kind!r}; "
            f"expected one of {', '.join(BASIS_KINDS)}."
        )
    if not isinstance(file, str) or (
        template is not None and not isinstance(template, str)
    ):
        raise FlowIOException(f"Basis field {label} names no valid file.")
    if embedding_index is not None and not isinstance(embedding_index, int):
        raise FlowIOException(
            f"Basis field {label} has embedding index {embedding_index!r}."
        )

    return label, kind, file, template, disparity_weighted, embedding_index


def read_basis_stack(directory: PathLike) -> FlowBasis:
    """Read a basis written by :py:func:`write_basis_stack`."""
    directory = Path(directory)
    try:
        manifest = json_from_path(directory / BASIS_MANIFEST)
        entries = list(manifest["fields"])
        expected = ImageShape(*manifest["shape"])
    except (KeyError, TypeError) as exc:
        raise FlowIOException(f"Malformed basis manifest in {directory}.") from exc
    except FlowspanException as exc:
        raise FlowIOException(str(exc)) from exc

    fields = []
    for entry in entries:
        label, kind, file, template_file, weighted, index = _basis_entry(entry)
        field = read_flo(directory / file)
        if field.shape != expected:
            raise FlowIOException(
                f"Field {file} is {field.shape} but the manifest says {expected}."
            )
        template = field
        if template_file:
            template = read_flo(directory / template_file)
        fields.append(BasisField(label, field, kind, template, weighted, index))

    return FlowBasis(fields)


def write_embedding_stack(directory: PathLike, embedding: ObjectEmbedding) -> Path:
    """Write an embedding as one PFM per channel plus a JSON manifest."""
    directory = ensure_directory(directory)
    files = []
    for i in range(embedding.dim):
        name = f"embedding_{i:02d}.pfm"
        write_pfm(directory / name, embedding.data[..., i])
        files.append(name)

    manifest = {
        "dim": embedding.dim,
        "shape": list(embedding.shape.as_tuple()),
        "files": files,
    }

    return write_json(directory / EMBEDDING_MANIFEST, manifest)


def read_embedding_stack(directory: PathLike) -> ObjectEmbedding:
    """
    Read an embedding written by :py:func:`write_embedding_stack`.

    Channels are stored as 32-bit floats, so every pixel is renormalized
    to unit length on the way in.
    """
    directory = Path(directory)
    try:
        manifest = json_from_path(directory / EMBEDDING_MANIFEST)
        files = manifest["files"]
    except (KeyError, TypeError) as exc:
        raise FlowIOException(f"Malformed embedding manifest in {directory}.") from exc
    except FlowspanException as exc:
        raise FlowIOException(str(exc)) from exc

    if not files:
        raise FlowIOException(f"Embedding manifest in {directory} lists no channels.")

    channels = [read_pfm(directory / name) for name in files]
    if len({channel.shape for channel in channels}) != 1:
        raise FlowIOException(f"Embedding channels in {directory} differ in shape.")

    try:
        return renormalize(np.stack(channels, axis=-1).astype(np.float64))
    except FlowspanException as exc:
        raise FlowIOException(
            f"{directory} does not hold a valid embedding: {exc}"
        ) from exc
