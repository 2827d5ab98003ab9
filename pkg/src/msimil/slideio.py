"""Slide manifests, raster slide images, tissue masks and tile grids."""
from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .colorlab import rgb_to_hsv

log = logging.getLogger(__name__)

TILE_SIZE = 256
NATIVE_MAGNIFICATION = 20
MAGNIFICATIONS = (5, 10, 20)
DEFAULT_MPP = 0.5

MSI_H = "MSI_H"
MSS = "MSS"
UNKNOWN = "UNKNOWN"
LABELS = (MSI_H, MSS, UNKNOWN)
PROCEDURES = ("CORE_NEEDLE_BIOPSY", "RESECTION", "AMBIGUOUS_BIOPSY")
STAIN_SITES = ("INTERNAL", "EXTERNAL")

MANIFEST_COLUMNS = (
    "slide_id",
    "image_path",
    "label",
    "gleason_total",
    "procedure",
    "scanner_profile",
    "stain_site",
    "collection_date",
    "tumor_purity",
    "paired_id",
)
NA_VALUES = {"", "NA", "N/A", "NaN", "nan", "None"}


class ManifestError(ValueError):
    pass


@dataclass
class SlideRecord:
    slide_id: str
    image_path: str
    label: str = UNKNOWN
    gleason_total: int | None = None
    procedure: str | None = None
    scanner_profile: str = "reference"
    stain_site: str | None = None
    collection_date: dt.date | None = None
    tumor_purity: float | None = None
    paired_id: str | None = None
    microns_per_pixel: float = DEFAULT_MPP

    @property
    def y(self) -> int:
        """1 for MSI-H, 0 for MSS; raises for unlabelled records."""
        if self.label == UNKNOWN:
            raise ValueError(f"slide {self.slide_id} has no label")
        return int(self.label == MSI_H)


def _na(value: str | None) -> bool:
    return value is None or value.strip() in NA_VALUES


def _enum(value, allowed, column, slide_id):
    if _na(value):
        return None
    v = value.strip().upper()
    if v not in allowed:
        log.warning("slide %s: unknown %s %r treated as absent", slide_id, column, value)
        return None
    return v


def _parse_row(row: dict, line: int) -> SlideRecord:
    sid = (row.get("slide_id") or "").strip()
    if not sid:
        raise ManifestError(f"line {line}: empty slide_id")
    label = _enum(row["label"], LABELS, "label", sid) or UNKNOWN

    gleason = None
    if not _na(row["gleason_total"]):
        try:
            gleason = int(float(row["gleason_total"]))
        except ValueError:
            gleason = None
        if gleason is None or not 7 <= gleason <= 10:
            log.warning("slide %s: gleason_total %r treated as absent", sid, row["gleason_total"])
            gleason = None

    date = None
    if not _na(row["collection_date"]):
        try:
            date = dt.date.fromisoformat(row["collection_date"].strip())
        except ValueError:
            log.warning("slide %s: collection_date %r treated as absent", sid, row["collection_date"])

    purity = None
    if not _na(row["tumor_purity"]):
        try:
            purity = float(row["tumor_purity"])
        except ValueError:
            purity = None
        if purity is None or not 0.0 <= purity <= 1.0:
            log.warning("slide %s: tumor_purity %r treated as absent", sid, row["tumor_purity"])
            purity = None

    mpp = DEFAULT_MPP
    if not _na(row.get("microns_per_pixel")):
        mpp = float(row["microns_per_pixel"])
        if mpp <= 0:
            raise ManifestError(f"line {line}: microns_per_pixel must be positive")

    return SlideRecord(
        slide_id=sid,
        image_path=(row["image_path"] or "").strip(),
        label=label,
        gleason_total=gleason,
        procedure=_enum(row["procedure"], PROCEDURES, "procedure", sid),
        scanner_profile=(row["scanner_profile"] or "").strip() or "reference",
        stain_site=_enum(row["stain_site"], STAIN_SITES, "stain_site", sid),
        collection_date=date,
        tumor_purity=purity,
        paired_id=None if _na(row["paired_id"]) else row["paired_id"].strip(),
        microns_per_pixel=mpp,
    )


def parse_manifest(text: str | TextIO) -> list[SlideRecord]:
    """Parse a manifest CSV (text or open file) into records.

    Raises :class:`ManifestError` on a missing column or duplicate slide id.
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    for col in MANIFEST_COLUMNS:
        if col not in header:
            raise ManifestError(f"manifest is missing required column {col!r}")
    records, seen = [], set()
    for line, row in enumerate(reader, start=2):
        rec = _parse_row(row, line)
        if rec.slide_id in seen:
            raise ManifestError(f"duplicate slide_id {rec.slide_id!r} (line {line})")
        seen.add(rec.slide_id)
        records.append(rec)
    for rec in records:
        if rec.paired_id is not None and rec.paired_id not in seen:
            log.debug("slide %s: paired_id %s not in this manifest", rec.slide_id, rec.paired_id)
    return records


def read_manifest(path) -> list[SlideRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_manifest(fh)


def format_manifest(records: Iterable[SlideRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS + ("microns_per_pixel",))
    for r in records:
        writer.writerow(
            [
                r.slide_id,
                r.image_path,
                r.label,
                "NA" if r.gleason_total is None else r.gleason_total,
                r.procedure or "NA",
                r.scanner_profile,
                r.stain_site or "NA",
                r.collection_date.isoformat() if r.collection_date else "NA",
                "NA" if r.tumor_purity is None else repr(r.tumor_purity),
                r.paired_id or "NA",
                repr(r.microns_per_pixel),
            ]
        )
    return buf.getvalue()


def labelled(records: Iterable[SlideRecord]) -> list[SlideRecord]:
    """Records usable for training and evaluation (label known)."""
    return [r for r in records if r.label != UNKNOWN]


# ---------------------------------------------------------------------------
# images


@dataclass
class SlideImage:
    pixels: np.ndarray
    microns_per_pixel: float = DEFAULT_MPP
    native_magnification: int = NATIVE_MAGNIFICATION

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"slide pixels must be H x W x 3, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("slide pixels must be 8-bit")
        if self.microns_per_pixel <= 0:
            raise ValueError("microns_per_pixel must be positive")
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape[:2]


RAW_MAGIC = b"RGBP"


def write_raw_planar(path, pixels: np.ndarray) -> None:
    """Raw planar RGB: magic, little-endian height and width, then R, G, B planes."""
    px = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = px.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(px.transpose(2, 0, 1)).tobytes())


def read_raw_planar(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw planar RGB file")
    h, w = struct.unpack("<II", data[4:12])
    body = np.frombuffer(data[12:], dtype=np.uint8)
    if body.size != 3 * h * w:
        raise ValueError(f"{path}: truncated raw planar image")
    return body.reshape(3, h, w).transpose(1, 2, 0).copy()


def read_slide(path, microns_per_pixel: float = DEFAULT_MPP) -> SlideImage:
    path = Path(path)
    if path.suffix.lower() in (".rgbp", ".rgb"):
        px = read_raw_planar(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"))
    return SlideImage(px, microns_per_pixel)


def write_slide_png(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# tissue masks


@dataclass
class MaskParams:
    white_threshold: float = 0.92
    tissue_saturation_min: float = 0.05
    marker_saturation_min: float = 0.4
    # hue bands in turns: green, blue ink
    marker_hue_bands: tuple[tuple[float, float], ...] = ((0.22, 0.45), (0.52, 0.68))
    black_value_max: float = 0.12


@dataclass
class TissueMask:
    grid: np.ndarray
    marker_grid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.marker_grid is None:
            self.marker_grid = np.zeros_like(self.grid)
        self.marker_grid = np.asarray(self.marker_grid, dtype=bool)
        if self.grid.shape != self.marker_grid.shape:
            raise ValueError("tissue and marker grids differ in shape")
        self.grid = self.grid & ~self.marker_grid


def luminance(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float32) / 255.0
    return px[..., 0] * 0.299 + px[..., 1] * 0.587 + px[..., 2] * 0.114


def compute_tissue_mask(image: SlideImage, params: MaskParams | None = None) -> TissueMask:
    """Threshold heuristic: tissue is dark enough and saturated enough; pen
    marker is strongly saturated inside an ink hue band, or near black.
    Marker pixels are removed from tissue."""
    params = params or MaskParams()
    px = image.pixels.astype(np.float32) / 255.0
    hue, sat, val = rgb_to_hsv(px)
    lum = px[..., 0] * 0.299 + px[..., 1] * 0.587 + px[..., 2] * 0.114
    tissue = (lum < params.white_threshold) & (sat >= params.tissue_saturation_min)
    in_band = np.zeros(hue.shape, dtype=bool)
    for lo, hi in params.marker_hue_bands:
        in_band |= (hue >= lo) & (hue <= hi)
    marker = (sat >= params.marker_saturation_min) & in_band
    marker |= val <= params.black_value_max
    return TissueMask(tissue, marker)


def tissue_area_mm2(mask: TissueMask, microns_per_pixel: float) -> float:
    return float(np.count_nonzero(mask.grid)) * microns_per_pixel**2 / 1e6


# ---------------------------------------------------------------------------
# tiles


@dataclass(frozen=True)
class TileRef:
    slide_id: str
    grid_x: int
    grid_y: int
    magnification: int = NATIVE_MAGNIFICATION
    size_px: int = TILE_SIZE

    @property
    def factor(self) -> int:
        return NATIVE_MAGNIFICATION // self.magnification


def _factor(magnification: int) -> int:
    if magnification not in MAGNIFICATIONS:
        raise ValueError(f"magnification must be one of {MAGNIFICATIONS}, got {magnification}")
    return NATIVE_MAGNIFICATION // magnification


def _block_sums(grid: np.ndarray, block: int, ny: int, nx: int) -> np.ndarray:
    g = grid[: ny * block, : nx * block].astype(np.int64)
    return g.reshape(ny, block, nx, block).sum(axis=(1, 3))


def extract_tiles(
    image: SlideImage,
    mask: TissueMask,
    magnification: int = NATIVE_MAGNIFICATION,
    min_tissue_fraction: float = 0.5,
    slide_id: str = "",
) -> list[TileRef]:
    """Non-overlapping 256 px grid tiles at ``magnification``, row-major.

    A tile is kept when its tissue fraction reaches ``min_tissue_fraction``
    and it contains no marker pixel. Partial edge tiles are dropped.
    """
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ValueError("min_tissue_fraction must lie in [0, 1]")
    f = _factor(magnification)
    if mask.grid.shape != image.shape:
        raise ValueError("mask and image dimensions differ")
    h, w = image.shape
    foot = TILE_SIZE * f
    ny, nx = h // foot, w // foot
    if ny == 0 or nx == 0:
        return []
    tissue = _block_sums(mask.grid, foot, ny, nx) / float(foot * foot)
    marker = _block_sums(mask.marker_grid, foot, ny, nx)
    keep = (tissue >= min_tissue_fraction) & (marker == 0)
    return [
        TileRef(slide_id, int(gx), int(gy), magnification)
        for gy, gx in zip(*np.nonzero(keep))
    ]


def block_mean_u8(pixels: np.ndarray, f: int) -> np.ndarray:
    """Integer-factor block mean with round-half-up to 8 bit."""
    if f == 1:
        return np.asarray(pixels)
    h, w = pixels.shape[0] // f, pixels.shape[1] // f
    sums = pixels[: h * f, : w * f].astype(np.uint32).reshape(h, f, w, f, 3).sum(axis=(1, 3))
    n = f * f
    # floor(sum / n + 1/2) in integer arithmetic
    return ((2 * sums + n) // (2 * n)).astype(np.uint8)


def load_tile(image: SlideImage, ref: TileRef) -> np.ndarray:
    f = _factor(ref.magnification)
    foot = ref.size_px * f
    y0, x0 = ref.grid_y * foot, ref.grid_x * foot
    h, w = image.shape
    if ref.grid_x < 0 or ref.grid_y < 0 or y0 + foot > h or x0 + foot > w:
        raise IndexError(f"tile ({ref.grid_x}, {ref.grid_y}) at {ref.magnification}x lies outside the image")
    return block_mean_u8(image.pixels[y0 : y0 + foot, x0 : x0 + foot], f)


def load_tiles(image: SlideImage, refs: list[TileRef]) -> np.ndarray:
    if not refs:
        return np.zeros((0, TILE_SIZE, TILE_SIZE, 3), dtype=np.uint8)
    return np.stack([load_tile(image, r) for r in refs])


def record_fields() -> list[str]:
    return [f.name for f in fields(SlideRecord)]
