"""Hyperspectral cube data model, band/spectrum extraction, and ENVI file I/O.

Conventions used throughout the package:

* cube values are stored band-major as a ``(bands, height, width)`` float64
  array, so extracting one band image is a contiguous copy;
* a band image is a ``(height, width)`` array indexed ``[y, x]``;
* pixel positions are ``(x, y)`` tuples; the flattened pixel index is
  ``y * width + x`` (scanline order).

On disk the cube is an ENVI pair: a text header plus a raw binary payload of
32-bit little-endian floats next to it (same basename).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "HyperCube",
    "SpectrumSet",
    "BandStack",
    "EnviFormatError",
    "load_envi",
    "save_envi",
    "extract_band",
    "extract_spectra",
    "nearest_band_index",
]

ENVI_DATA_TYPE = 4  # 32-bit IEEE float
INTERLEAVES = ("bsq", "bil", "bip")
_RAW_SUFFIXES = (".raw", ".dat", ".img", "")


class EnviFormatError(ValueError):
    """Raised when an ENVI header or payload violates the expected layout."""


def _as_readonly_f64(values: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(values, dtype=np.float64)
    out.flags.writeable = False
    return out


def _check_wavenumbers(wavenumbers: np.ndarray, n_bands: int) -> None:
    if wavenumbers.ndim != 1 or wavenumbers.shape[0] != n_bands:
        raise ValueError(
            f"wavenumbers must be 1-D with {n_bands} entries, got shape {wavenumbers.shape}"
        )
    if n_bands > 1:
        diffs = np.diff(wavenumbers)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("wavenumbers must be strictly increasing or strictly decreasing")


@dataclass(frozen=True)
class HyperCube:
    """Dense hyperspectral image with a wavenumber axis.

    ``values[b, y, x]`` is the absorbance at pixel ``(x, y)`` and band ``b``.
    The cube is immutable after construction and safe to share across
    workers; all operations on it are pure.
    """

    values: np.ndarray       # (bands, height, width) float64
    wavenumbers: np.ndarray  # (bands,) cm^-1, strictly monotonic

    def __post_init__(self) -> None:
        values = _as_readonly_f64(self.values)
        wavenumbers = _as_readonly_f64(self.wavenumbers)
        if values.ndim != 3:
            raise ValueError(f"cube values must be (bands, height, width), got shape {values.shape}")
        if min(values.shape) < 1:
            raise ValueError("cube dimensions must all be >= 1")
        if not np.all(np.isfinite(values)):
            raise ValueError("cube values must be finite (no NaN/Inf)")
        _check_wavenumbers(wavenumbers, values.shape[0])
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "wavenumbers", wavenumbers)

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def value_at(self, x: int, y: int, band: int) -> float:
        return float(self.values[band, y, x])

    def unfold(self) -> np.ndarray:
        """Return the (n_pixels, n_bands) matrix with pixel rows in scanline order."""
        return self.values.reshape(self.n_bands, self.n_pixels).T.copy()

    @classmethod
    def from_unfolded(
        cls, matrix: np.ndarray, width: int, height: int, wavenumbers: np.ndarray
    ) -> "HyperCube":
        """Inverse of :meth:`unfold`."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[0] != width * height:
            raise ValueError(
                f"matrix has {matrix.shape[0]} rows, expected {width * height} for {width}x{height}"
            )
        values = matrix.T.reshape(matrix.shape[1], height, width)
        return cls(values=values, wavenumbers=np.asarray(wavenumbers, dtype=np.float64))


@dataclass(frozen=True)
class SpectrumSet:
    """Point spectra measured at a list of pixel positions (the tall-thin H)."""

    positions: tuple[tuple[int, int], ...]  # (x, y) pixel coordinates
    spectra: np.ndarray                     # (n_points, n_bands)
    wavenumbers: np.ndarray                 # (n_bands,)

    def __post_init__(self) -> None:
        positions = tuple((int(x), int(y)) for x, y in self.positions)
        spectra = _as_readonly_f64(np.atleast_2d(self.spectra))
        wavenumbers = _as_readonly_f64(self.wavenumbers)
        if len(positions) < 1:
            raise ValueError("SpectrumSet needs at least one position")
        if len(set(positions)) != len(positions):
            raise ValueError("SpectrumSet positions must be unique")
        if spectra.shape[0] != len(positions):
            raise ValueError(
                f"spectra has {spectra.shape[0]} rows for {len(positions)} positions"
            )
        _check_wavenumbers(wavenumbers, spectra.shape[1])
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "wavenumbers", wavenumbers)

    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def n_bands(self) -> int:
        return self.spectra.shape[1]

    def flat_indices(self, width: int) -> np.ndarray:
        """Scanline-order flattened pixel indices of the positions."""
        return np.array([y * width + x for x, y in self.positions], dtype=np.intp)


@dataclass(frozen=True)
class BandStack:
    """Full-resolution band images with their wavenumber-axis indices (the short-fat M)."""

    band_indices: tuple[int, ...]
    images: np.ndarray  # (n_selected, height, width)

    def __post_init__(self) -> None:
        band_indices = tuple(int(b) for b in self.band_indices)
        images = _as_readonly_f64(np.atleast_3d(self.images))
        if images.ndim != 3:
            raise ValueError("images must be (n_selected, height, width)")
        if len(band_indices) != images.shape[0]:
            raise ValueError(
                f"{len(band_indices)} band indices for {images.shape[0]} images"
            )
        if len(set(band_indices)) != len(band_indices):
            raise ValueError("band indices must be unique")
        if any(b < 0 for b in band_indices):
            raise ValueError("band indices must be non-negative")
        object.__setattr__(self, "band_indices", band_indices)
        object.__setattr__(self, "images", images)

    @property
    def n_selected(self) -> int:
        return len(self.band_indices)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def unfold(self) -> np.ndarray:
        """Return the (n_pixels, n_selected) matrix with pixel rows in scanline order."""
        n = self.height * self.width
        return self.images.reshape(self.n_selected, n).T.copy()


def extract_band(cube: HyperCube, band_index: int) -> np.ndarray:
    """Return the full-resolution image of one band (simulated band acquisition)."""
    if not 0 <= band_index < cube.n_bands:
        raise IndexError(f"band index {band_index} out of range [0, {cube.n_bands})")
    return cube.values[band_index].copy()


def extract_spectra(cube: HyperCube, positions) -> SpectrumSet:
    """Return the full spectra at the given pixel positions (simulated point acquisition)."""
    positions = [(int(x), int(y)) for x, y in positions]
    if len(set(positions)) != len(positions):
        raise ValueError("positions must be unique")
    for x, y in positions:
        if not (0 <= x < cube.width and 0 <= y < cube.height):
            raise IndexError(f"position ({x}, {y}) outside {cube.width}x{cube.height} image")
    xs = np.array([p[0] for p in positions])
    ys = np.array([p[1] for p in positions])
    spectra = cube.values[:, ys, xs].T
    return SpectrumSet(positions=tuple(positions), spectra=spectra, wavenumbers=cube.wavenumbers)


def nearest_band_index(cube: HyperCube, wavenumber: float) -> int:
    """Index of the band closest to ``wavenumber``; ties break toward the lower index."""
    return int(np.argmin(np.abs(cube.wavenumbers - float(wavenumber))))


# ---------------------------------------------------------------------------
# ENVI I/O


def _header_and_raw_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix.lower() == ".hdr":
        return path, path.with_suffix(".raw")
    return path.with_suffix(path.suffix + ".hdr"), path.with_suffix(path.suffix + ".raw")


def save_envi(cube: HyperCube, path, interleave: str = "bsq") -> None:
    """Write ``cube`` as an ENVI header/raw pair.

    ``path`` may point at the header (``*.hdr``) or the basename; the raw
    payload is written next to the header with a ``.raw`` suffix, as 32-bit
    little-endian floats in the requested interleave.
    """
    interleave = interleave.lower()
    if interleave not in INTERLEAVES:
        raise ValueError(f"interleave must be one of {INTERLEAVES}, got {interleave!r}")
    header_path, raw_path = _header_and_raw_paths(path)

    if interleave == "bsq":
        payload = cube.values                      # (bands, lines, samples)
    elif interleave == "bil":
        payload = cube.values.transpose(1, 0, 2)   # (lines, bands, samples)
    else:
        payload = cube.values.transpose(1, 2, 0)   # (lines, samples, bands)

    wavelengths = ", ".join(f"{w:.6f}" for w in cube.wavenumbers)
    header = (
        "ENVI\n"
        "description = {hsfuse export}\n"
        f"samples = {cube.width}\n"
        f"lines = {cube.height}\n"
        f"bands = {cube.n_bands}\n"
        "header offset = 0\n"
        "file type = ENVI Standard\n"
        f"data type = {ENVI_DATA_TYPE}\n"
        f"interleave = {interleave}\n"
        "byte order = 0\n"
        "wavelength units = cm-1\n"
        f"wavelength = {{ {wavelengths} }}\n"
    )
    header_path.write_text(header)
    np.ascontiguousarray(payload, dtype="<f4").tofile(raw_path)


def _parse_envi_header(text: str, path: Path) -> dict[str, str]:
    fields: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    if lines and lines[0].strip().upper() == "ENVI":
        i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if value.startswith("{") and "}" not in value:
            # multi-line braced value
            parts = [value]
            while i < len(lines) and "}" not in lines[i]:
                parts.append(lines[i].strip())
                i += 1
            if i >= len(lines):
                raise EnviFormatError(f"{path}: unterminated '{{' value for key {key!r}")
            parts.append(lines[i].strip())
            i += 1
            value = " ".join(parts)
        if key in fields:
            raise EnviFormatError(f"{path}: duplicate header key {key!r}")
        fields[key] = value
    return fields


def _require_int(fields: dict[str, str], key: str, path: Path) -> int:
    if key not in fields:
        raise EnviFormatError(f"{path}: missing required header key {key!r}")
    try:
        return int(fields[key])
    except ValueError as exc:
        raise EnviFormatError(f"{path}: header key {key!r} is not an integer") from exc


def load_envi(header_path) -> HyperCube:
    """Load an ENVI header/raw pair into a :class:`HyperCube`.

    The on-disk interleave (bsq/bil/bip) is normalized away: the returned
    cube always addresses values as ``(x, y, band)`` via the band-major
    layout, and the wavenumber axis comes from the header wavelength list.
    """
    header_path = Path(header_path)
    fields = _parse_envi_header(header_path.read_text(), header_path)

    samples = _require_int(fields, "samples", header_path)
    lines = _require_int(fields, "lines", header_path)
    bands = _require_int(fields, "bands", header_path)
    offset = int(fields.get("header offset", "0"))
    data_type = _require_int(fields, "data type", header_path)
    byte_order = int(fields.get("byte order", "0"))
    if "interleave" not in fields:
        raise EnviFormatError(f"{header_path}: missing required header key 'interleave'")
    interleave = fields["interleave"].lower()

    if data_type != ENVI_DATA_TYPE:
        raise EnviFormatError(
            f"{header_path}: unsupported data type {data_type} (only {ENVI_DATA_TYPE} = float32)"
        )
    if byte_order != 0:
        raise EnviFormatError(f"{header_path}: unsupported byte order {byte_order} (only 0)")
    if interleave not in INTERLEAVES:
        raise EnviFormatError(f"{header_path}: unsupported interleave {interleave!r}")
    if "wavelength" not in fields:
        raise EnviFormatError(f"{header_path}: missing required header key 'wavelength'")

    wl_text = fields["wavelength"].strip()
    if not (wl_text.startswith("{") and wl_text.endswith("}")):
        raise EnviFormatError(f"{header_path}: wavelength list must be brace-delimited")
    try:
        wavenumbers = np.array(
            [float(tok) for tok in wl_text[1:-1].split(",") if tok.strip()], dtype=np.float64
        )
    except ValueError as exc:
        raise EnviFormatError(f"{header_path}: malformed wavelength list") from exc
    if wavenumbers.size != bands:
        raise EnviFormatError(
            f"{header_path}: {wavenumbers.size} wavelengths for {bands} bands"
        )

    base = header_path.with_suffix("") if header_path.suffix.lower() == ".hdr" else header_path
    raw_path = None
    for suffix in _RAW_SUFFIXES:
        candidate = Path(str(base) + suffix)
        if candidate.exists() and candidate != header_path:
            raw_path = candidate
            break
    if raw_path is None:
        raise FileNotFoundError(f"no raw payload found next to {header_path}")

    n_values = samples * lines * bands
    expected_size = offset + 4 * n_values
    actual_size = raw_path.stat().st_size
    if actual_size != expected_size:
        raise EnviFormatError(
            f"{raw_path}: size {actual_size} bytes does not match header "
            f"({samples}x{lines}x{bands} float32 + offset {offset} = {expected_size} bytes)"
        )

    flat = np.fromfile(raw_path, dtype="<f4", count=n_values, offset=offset)
    if interleave == "bsq":
        values = flat.reshape(bands, lines, samples)
    elif interleave == "bil":
        values = flat.reshape(lines, bands, samples).transpose(1, 0, 2)
    else:  # bip
        values = flat.reshape(lines, samples, bands).transpose(2, 0, 1)

    return HyperCube(values=values.astype(np.float64), wavenumbers=wavenumbers)
