"""Raster data model and file formats.

Three on-disk formats are supported:

* hyperspectral cubes: ENVI-style ASCII header plus a raw band-sequential
  float32 little-endian data file,
* elevation grids (DEMs, wetness maps): raw float32 little-endian row-major
  grid plus a JSON sidecar,
* grayscale images: binary PGM (P5), 16-bit big-endian samples.

Loaded rasters are treated as immutable; readers return read-only arrays.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

CUBE_DTYPE = np.dtype("<f4")
GRID_DTYPE = np.dtype("<f4")


class RasterFormatError(ValueError):
    """Malformed header, sidecar or data file."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class HyperCube:
    """Band-sequential radiance/reflectance cube.

    ``data`` has shape ``(bands, lines, samples)``; ``wavelengths`` are in
    micrometers, one per band.
    """

    data: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (bands, lines, samples), got shape {self.data.shape}")
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        if wl.ndim != 1 or wl.size != self.data.shape[0]:
            raise ValueError(f"{wl.size} wavelengths for {self.data.shape[0]} bands")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "wavelengths", _freeze(wl))
        _freeze(self.data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def lines(self) -> int:
        return self.data.shape[1]

    @property
    def samples(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.lines, self.samples, self.bands

    def spectrum(self, line: int, sample: int) -> np.ndarray:
        return np.asarray(self.data[:, line, sample])

    def quality_report(self) -> dict[str, Any]:
        """Finite/negative value counts. Negative values are legal but flagged."""
        finite = np.isfinite(self.data)
        n_neg = int(np.count_nonzero(self.data < 0))
        return {
            "lines": self.lines,
            "samples": self.samples,
            "bands": self.bands,
            "all_finite": bool(finite.all()),
            "n_negative": n_neg,
            "min": float(np.nanmin(self.data)),
            "max": float(np.nanmax(self.data)),
        }


@dataclass(frozen=True, eq=False)
class DemGrid:
    """Elevation raster. Pixel ``(r, c)`` is centred at
    ``(origin_x + c * pixel_size, origin_y + r * pixel_size)``."""

    elevations: np.ndarray
    pixel_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.elevations.ndim != 2:
            raise ValueError("elevations must be 2-D")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        if not np.all(np.isfinite(self.elevations)):
            raise ValueError("elevations must be finite")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        _freeze(self.elevations)

    @property
    def height(self) -> int:
        return self.elevations.shape[0]

    @property
    def width(self) -> int:
        return self.elevations.shape[1]

    def pixel_to_world(self, col, row):
        return (self.origin[0] + np.asarray(col) * self.pixel_size,
                self.origin[1] + np.asarray(row) * self.pixel_size)

    def world_to_pixel(self, x, y):
        return ((np.asarray(x) - self.origin[0]) / self.pixel_size,
                (np.asarray(y) - self.origin[1]) / self.pixel_size)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image with intensities in [0, 1], shape ``(height, width)``."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ---------------------------------------------------------------------------
# Band access
# ---------------------------------------------------------------------------


def normalize_minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant array maps to 0.5."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def nearest_band_index(cube: HyperCube, target_wavelength: float) -> int:
    # argmin returns the first minimum, so ties go to the lower index
    return int(np.argmin(np.abs(cube.wavelengths - target_wavelength)))


def extract_band(cube: HyperCube, band: int) -> GrayImage:
    if not 0 <= band < cube.bands:
        raise IndexError(f"band {band} out of range for cube with {cube.bands} bands")
    return GrayImage(normalize_minmax(cube.data[band]))


def band_average(cube: HyperCube) -> GrayImage:
    return GrayImage(normalize_minmax(np.mean(cube.data, axis=0, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Hyperspectral cube: ENVI-style header + raw BSQ
# ---------------------------------------------------------------------------

_FLOAT32_LE_NAMES = {"4", "32-bit ieee-754 little-endian", "float32"}


def _parse_header(text: str) -> dict[str, str]:
    # Collapse {...} blocks that span lines
    fields: dict[str, str] = {}
    lines = text.splitlines()
    if not lines or lines[0].strip().upper() != "ENVI":
        raise RasterFormatError("cube header must start with 'ENVI'")
    body = "\n".join(lines[1:])
    for match in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", body, flags=re.M):
        key = match.group(1).strip().lower()
        fields[key] = match.group(2).strip()
    return fields


def _header_int(fields: dict[str, str], key: str) -> int:
    try:
        value = int(fields[key])
    except KeyError:
        raise RasterFormatError(f"header missing '{key}'") from None
    except ValueError:
        raise RasterFormatError(f"header field '{key}' is not an integer: {fields[key]!r}") from None
    if value < 1:
        raise RasterFormatError(f"header field '{key}' must be >= 1, got {value}")
    return value


def _header_list(value: str) -> list[float]:
    inner = value.strip()
    if not (inner.startswith("{") and inner.endswith("}")):
        raise RasterFormatError(f"expected a {{...}} list, got {value[:40]!r}")
    items = [t for t in re.split(r"[,\s]+", inner[1:-1]) if t]
    try:
        return [float(t) for t in items]
    except ValueError as exc:
        raise RasterFormatError(f"bad numeric list entry: {exc}") from None


def read_cube(header_path: str | Path) -> HyperCube:
    """Read an ENVI-style header and its BSQ float32 data file (memory-mapped)."""
    header_path = Path(header_path)
    fields = _parse_header(header_path.read_text())
    lines = _header_int(fields, "lines")
    samples = _header_int(fields, "samples")
    bands = _header_int(fields, "bands")

    interleave = fields.get("interleave", "bsq").lower()
    if interleave != "bsq":
        raise RasterFormatError(f"only bsq interleave is supported, got {interleave!r}")
    dtype_name = fields.get("data type", "4").lower()
    if dtype_name not in _FLOAT32_LE_NAMES:
        raise RasterFormatError(f"unsupported data type {dtype_name!r}")
    if fields.get("byte order", "0") != "0":
        raise RasterFormatError("only little-endian (byte order = 0) data is supported")
    offset = int(fields.get("header offset", "0"))

    if "wavelength" not in fields:
        raise RasterFormatError("header missing 'wavelength'")
    wavelengths = np.array(_header_list(fields["wavelength"]))
    if wavelengths.size != bands:
        raise RasterFormatError(f"{wavelengths.size} wavelengths declared for {bands} bands")
    if bands > 1 and not np.all(np.diff(wavelengths) > 0):
        raise RasterFormatError("wavelengths must be strictly increasing")
    units = fields.get("wavelength units", "micrometers").lower()
    if units in ("nanometers", "nm"):
        wavelengths = wavelengths / 1000.0

    data_name = fields.get("data file")
    data_path = header_path.parent / data_name if data_name else header_path.with_suffix(".raw")
    if not data_path.exists():
        raise RasterFormatError(f"data file {data_path} not found")
    expected = offset + lines * samples * bands * CUBE_DTYPE.itemsize
    actual = data_path.stat().st_size
    if actual != expected:
        raise RasterFormatError(
            f"data file is {actual} bytes, header declares {lines}x{samples}x{bands} float32 = {expected}"
        )
    data = np.memmap(data_path, dtype=CUBE_DTYPE, mode="r", offset=offset, shape=(bands, lines, samples))
    return HyperCube(data=data, wavelengths=wavelengths)


def write_cube(header_path: str | Path, cube: HyperCube, description: str = "") -> Path:
    """Write ``cube`` as ``<name>.hdr`` + ``<name>.raw``. Returns the data path."""
    header_path = Path(header_path)
    data_path = header_path.with_suffix(".raw")
    np.ascontiguousarray(cube.data, dtype=CUBE_DTYPE).tofile(data_path)
    wl = ", ".join(repr(float(w)) for w in cube.wavelengths)
    header = [
        "ENVI",
        f"description = {{{description}}}",
        f"samples = {cube.samples}",
        f"lines = {cube.lines}",
        f"bands = {cube.bands}",
        "header offset = 0",
        "data type = 4",
        "interleave = bsq",
        "byte order = 0",
        f"data file = {data_path.name}",
        "wavelength units = Micrometers",
        f"wavelength = {{{wl}}}",
    ]
    header_path.write_text("\n".join(header) + "\n")
    return data_path


# ---------------------------------------------------------------------------
# Raw float32 grid + JSON sidecar
# ---------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_grid(path: str | Path, grid: DemGrid) -> None:
    path = Path(path)
    np.ascontiguousarray(grid.elevations, dtype=GRID_DTYPE).tofile(path)
    meta = {
        "width": grid.width,
        "height": grid.height,
        "pixel_size_m": grid.pixel_size,
        "origin_x": grid.origin[0],
        "origin_y": grid.origin[1],
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_grid(path: str | Path) -> DemGrid:
    path = Path(path)
    meta_path = _sidecar(path)
    if not meta_path.exists():
        raise RasterFormatError(f"sidecar {meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text())
        width, height = int(meta["width"]), int(meta["height"])
        pixel_size = float(meta.get("pixel_size_m", 1.0))
        origin = (float(meta.get("origin_x", 0.0)), float(meta.get("origin_y", 0.0)))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise RasterFormatError(f"bad grid sidecar {meta_path}: {exc}") from None
    expected = width * height * GRID_DTYPE.itemsize
    if path.stat().st_size != expected:
        raise RasterFormatError(f"grid file is {path.stat().st_size} bytes, sidecar declares {expected}")
    elevations = np.fromfile(path, dtype=GRID_DTYPE).reshape(height, width)
    try:
        return DemGrid(elevations=elevations, pixel_size=pixel_size, origin=origin)
    except ValueError as exc:
        raise RasterFormatError(str(exc)) from None


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _read_netpbm_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not buf.startswith(magic):
        raise RasterFormatError(f"expected {magic.decode()} file")
    tokens: list[int] = []
    pos = len(magic)
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise RasterFormatError("truncated netpbm header")
        tokens.append(int(buf[start:pos]))
    # exactly one whitespace byte separates header from raster
    return tokens[0], tokens[1], tokens[2], pos + 1


def write_pgm(path: str | Path, image: GrayImage | np.ndarray, maxval: int = 65535) -> None:
    """Write intensities in [0,1] (or raw integer codes when ``image`` is an int array)."""
    arr = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    if np.issubdtype(arr.dtype, np.integer):
        codes = arr.astype(np.int64)
        maxval = max(int(codes.max(initial=0)), 1) if maxval is None else maxval
    else:
        codes = np.rint(np.clip(arr, 0.0, 1.0) * maxval).astype(np.int64)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(codes.astype(dtype).tobytes())


def read_pgm_codes(path: str | Path) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    w, h, maxval, pos = _read_netpbm_header(buf, b"P5")
    if not 0 < maxval < 65536:
        raise RasterFormatError(f"bad PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise RasterFormatError("truncated PGM raster")
    codes = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return codes.astype(np.int64), maxval


def read_pgm(path: str | Path) -> GrayImage:
    codes, maxval = read_pgm_codes(path)
    return GrayImage(codes / maxval)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.clip(rgb, 0, 255).astype(np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, maxval, pos = _read_netpbm_header(buf, b"P6")
    if maxval != 255:
        raise RasterFormatError("only 8-bit PPM is supported")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()
