"""Hypercube data model, radiometric calibration, cropping and file I/O.

Cubes are stored as ENVI headers paired with a band-interleaved-by-line
(BIL) little-endian float32 payload. Class masks are 8-bit PGM images.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BACKGROUND_TYPES = (
    "bark",
    "grass",
    "dry_leaves",
    "green_leaves",
    "yellow_leaves",
    "soil",
    "tree_branches",
    "synthetic",
)

#: Standard wavelength grid: 980-1660 nm, 5 nm step, 137 bands.
STANDARD_WAVELENGTHS = np.arange(980.0, 1660.0 + 1e-9, 5.0)


class HypercubeError(ValueError):
    pass


class CalibrationError(HypercubeError):
    pass


class Label(IntEnum):
    BACKGROUND = 0
    TARGET = 1
    EXCLUDED = 2
    NOT_ASSIGNED = 3


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Hypercube:
    """Reflectance volume of shape (height, width, bands).

    ``meta`` carries ``image_id``, ``background`` and ``group`` tags.
    """

    data: np.ndarray
    wavelengths: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        wl = np.asarray(self.wavelengths, dtype=float)
        if data.ndim != 3:
            raise HypercubeError(f"cube data must be 3-D, got shape {data.shape}")
        if wl.ndim != 1 or wl.size != data.shape[2]:
            raise HypercubeError(
                f"{wl.size} wavelengths for {data.shape[2]} bands")
        if wl.size > 1 and np.any(np.diff(wl) <= 0):
            raise HypercubeError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(data)):
            raise HypercubeError("reflectance values must be finite")
        bg = self.meta.get("background")
        if bg is not None and bg not in BACKGROUND_TYPES:
            raise HypercubeError(f"unknown background type {bg!r}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "wavelengths", _readonly(wl))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_bands(self) -> int:
        return self.data.shape[2]

    @property
    def image_id(self) -> str:
        return str(self.meta.get("image_id", ""))

    def spectra(self) -> np.ndarray:
        """All pixel spectra as a (height*width, bands) matrix, row-major."""
        return self.data.reshape(-1, self.n_bands)

    def with_data(self, data: np.ndarray, wavelengths=None) -> "Hypercube":
        wl = self.wavelengths if wavelengths is None else wavelengths
        return Hypercube(data, wl, self.meta)

    def __eq__(self, other):
        if not isinstance(other, Hypercube):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.wavelengths, other.wavelengths)
            and self.meta == other.meta
        )


@dataclass(frozen=True, eq=False)
class ClassMask:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise HypercubeError(f"mask must be 2-D, got shape {lab.shape}")
        lab = lab.astype(np.uint8)
        if lab.size and lab.max() > max(Label):
            raise HypercubeError(f"invalid label code {int(lab.max())}")
        object.__setattr__(self, "labels", _readonly(lab))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def count(self, label: Label) -> int:
        return int(np.count_nonzero(self.labels == label))

    def __eq__(self, other):
        if not isinstance(other, ClassMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class BandSet:
    """Sorted unique band indices, optionally described by nm intervals."""

    indices: tuple[int, ...]
    intervals: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        idx = tuple(sorted({int(i) for i in self.indices}))
        if any(i < 0 for i in idx):
            raise HypercubeError("band indices must be non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(
            self, "intervals", tuple((float(a), float(b)) for a, b in self.intervals))

    def __len__(self):
        return len(self.indices)

    @classmethod
    def from_intervals(cls, intervals: Iterable[Sequence[float]],
                       wavelengths=STANDARD_WAVELENGTHS) -> "BandSet":
        wl = np.asarray(wavelengths, dtype=float)
        intervals = [(float(lo), float(hi)) for lo, hi in intervals]
        keep = np.zeros(wl.size, dtype=bool)
        for lo, hi in intervals:
            keep |= (wl >= lo - 1e-9) & (wl <= hi + 1e-9)
        return cls(tuple(np.flatnonzero(keep)), tuple(intervals))

    @classmethod
    def full(cls, n_bands: int) -> "BandSet":
        return cls(tuple(range(n_bands)))

    def describe(self, wavelengths) -> list[tuple[float, float]]:
        """Contiguous runs of the selected bands as (lo_nm, hi_nm) pairs."""
        wl = np.asarray(wavelengths, dtype=float)
        runs = []
        for i in self.indices:
            if runs and i == runs[-1][1] + 1:
                runs[-1][1] = i
            else:
                runs.append([i, i])
        return [(float(wl[a]), float(wl[b])) for a, b in runs]


def calibrate_reflectance(raw, white, dark, meta=None, wavelengths=None) -> Hypercube:
    """Convert raw counts to reflectance with white and dark references.

    ``raw`` may be a Hypercube of counts or a bare (H, W, B) array, in which
    case ``wavelengths`` is required. No clamping is applied.
    """
    if isinstance(raw, Hypercube):
        counts, wl, meta = raw.data, raw.wavelengths, raw.meta if meta is None else meta
    else:
        counts = np.asarray(raw, dtype=float)
        if wavelengths is None:
            raise HypercubeError("wavelengths required for a bare count array")
        wl = wavelengths
    white = np.asarray(white, dtype=float)
    dark = np.asarray(dark, dtype=float)
    bad = np.flatnonzero(~(white > dark))
    if bad.size:
        b = int(bad[0])
        raise CalibrationError(
            f"white reference not above dark current at band {b} "
            f"({float(np.asarray(wl)[b]):g} nm)")
    refl = (counts.astype(float) - dark) / (white - dark)
    return Hypercube(refl, wl, meta or {})


def internal_correction(hc: Hypercube, gain, offset) -> Hypercube:
    """Per-band affine correction hook for image-to-image drift calibration.

    The correction coefficients are supplied externally.
    """
    gain = np.broadcast_to(np.asarray(gain, dtype=float), (hc.n_bands,))
    offset = np.broadcast_to(np.asarray(offset, dtype=float), (hc.n_bands,))
    return hc.with_data(hc.data * gain + offset)


def crop_spectral(hc: Hypercube, lo_nm: float, hi_nm: float) -> Hypercube:
    if lo_nm > hi_nm:
        raise HypercubeError(f"empty spectral range {lo_nm}-{hi_nm} nm")
    keep = (hc.wavelengths >= lo_nm - 1e-9) & (hc.wavelengths <= hi_nm + 1e-9)
    if not keep.any():
        raise HypercubeError(f"no wavelengths within {lo_nm}-{hi_nm} nm")
    return hc.with_data(hc.data[:, :, keep], hc.wavelengths[keep])


def nearest_band(wavelengths, nm: float) -> int:
    wl = np.asarray(wavelengths, dtype=float)
    b = int(np.argmin(np.abs(wl - nm)))
    if abs(wl[b] - nm) > 1e-6:
        warnings.warn(
            f"{nm:g} nm not on the wavelength axis, using {wl[b]:g} nm",
            stacklevel=3)
    return b


def dark_background_mask(hc: Hypercube, threshold_reflectance: float = 0.3,
                         probe_nm: float = 1000.0) -> ClassMask:
    """Label pixels darker than the threshold at the probe band EXCLUDED."""
    b = nearest_band(hc.wavelengths, probe_nm)
    dark = hc.data[:, :, b] < threshold_reflectance
    return ClassMask(np.where(dark, Label.EXCLUDED, Label.BACKGROUND))


def restrict_bands(hc: Hypercube, bands: BandSet | Sequence[int]) -> Hypercube:
    idx = list(bands.indices if isinstance(bands, BandSet) else bands)
    if not idx:
        raise HypercubeError("empty band set")
    if max(idx) >= hc.n_bands or min(idx) < 0:
        raise HypercubeError(
            f"band index out of range for a {hc.n_bands}-band cube")
    return hc.with_data(hc.data[:, :, idx], hc.wavelengths[idx])


# ---------------------------------------------------------------- ENVI I/O

_HEADER_KEYS = {"image id": "image_id", "background": "background", "group": "group"}


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".bil", ".bin", ".img"):
        p = p.with_suffix("")
    return p.with_suffix(".hdr"), p.with_suffix(".bil")


def save_cube(hc: Hypercube, path) -> Path:
    """Write ``hc`` as ``<path>.hdr`` + ``<path>.bil``; returns the header path."""
    hdr, binf = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    wl = ", ".join(repr(float(w)) for w in hc.wavelengths)
    lines = [
        "ENVI",
        "description = {hsipest hypercube}",
        f"samples = {hc.width}",
        f"lines = {hc.height}",
        f"bands = {hc.n_bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        "data type = 4",
        "interleave = bil",
        "byte order = 0",
        "wavelength units = Nanometers",
        f"wavelength = {{{wl}}}",
    ]
    for key, attr in _HEADER_KEYS.items():
        if hc.meta.get(attr) is not None:
            lines.append(f"{key} = {hc.meta[attr]}")
    hdr.write_text("\n".join(lines) + "\n")
    bil = np.ascontiguousarray(hc.data.astype("<f4").transpose(0, 2, 1))
    binf.write_bytes(bil.tobytes())
    return hdr


def parse_envi_header(text: str) -> dict[str, str]:
    if not text.lstrip().startswith("ENVI"):
        raise HypercubeError("not an ENVI header (missing ENVI magic)")
    fields: dict[str, str] = {}
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", text, re.M):
        fields[m.group(1).strip().lower()] = m.group(2).strip()
    return fields


def load_cube(path) -> Hypercube:
    hdr, binf = _paths(path)
    h = parse_envi_header(hdr.read_text())
    try:
        samples, lines, bands = (int(h[k]) for k in ("samples", "lines", "bands"))
    except (KeyError, ValueError) as exc:
        raise HypercubeError(f"malformed header {hdr}: {exc}") from None
    if h.get("data type", "4") != "4":
        raise HypercubeError(f"unsupported data type {h['data type']} (need 4)")
    if h.get("interleave", "bil").lower() != "bil":
        raise HypercubeError(f"unsupported interleave {h['interleave']}")
    if h.get("byte order", "0") != "0":
        raise HypercubeError("only little-endian payloads are supported")
    if "wavelength" not in h:
        raise HypercubeError(f"malformed header {hdr}: no wavelength list")
    wl = [float(v) for v in h["wavelength"].strip("{}").split(",") if v.strip()]
    if len(wl) != bands:
        raise HypercubeError(f"header lists {len(wl)} wavelengths for {bands} bands")
    payload = binf.read_bytes()
    offset = int(h.get("header offset", "0"))
    expected = samples * lines * bands * 4
    if len(payload) - offset != expected:
        raise HypercubeError(
            f"payload of {len(payload) - offset} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4", offset=offset)
    data = arr.reshape(lines, bands, samples).transpose(0, 2, 1).astype(np.float32)
    meta = {attr: h[key] for key, attr in _HEADER_KEYS.items() if key in h}
    return Hypercube(data, np.array(wl), meta)


def save_mask(mask: ClassMask | np.ndarray, path) -> Path:
    """Write label codes as a binary 8-bit PGM."""
    lab = mask.labels if isinstance(mask, ClassMask) else np.asarray(mask, np.uint8)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    h, w = lab.shape
    p.write_bytes(f"P5\n{w} {h}\n255\n".encode() + lab.astype(np.uint8).tobytes())
    return p


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise HypercubeError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise HypercubeError(f"{path}: 16-bit PGM not supported")
    body = raw[m.end():]
    if len(body) != w * h:
        raise HypercubeError(f"{path}: payload {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def load_mask(path) -> ClassMask:
    return ClassMask(read_pgm(path))
