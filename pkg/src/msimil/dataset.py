"""Bag sources: map a slide record to the array of tiles (or features) it contributes."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .colorlab import IDENTITY_PROFILE, ScannerProfile, apply_profile_transform
from .milcore import read_feature_file
from .slideio import (
    MaskParams,
    SlideImage,
    SlideRecord,
    TileRef,
    compute_tissue_mask,
    extract_tiles,
    load_tiles,
    read_slide,
    tissue_area_mm2,
)

FEATURE_SUFFIX = ".milf"


class BagSource(Protocol):
    def tiles(self, record: SlideRecord) -> np.ndarray: ...


@dataclass
class SlideBag:
    """Tiles of one slide with their grid positions."""

    pixels: np.ndarray
    refs: list[TileRef]
    tissue_area_mm2: float | None = None


class InMemorySource:
    """Bags held in a dict keyed by slide id."""

    def __init__(self, bags: Mapping[str, np.ndarray]):
        self.bags = dict(bags)

    def tiles(self, record: SlideRecord) -> np.ndarray:
        return self.bags[record.slide_id]


@dataclass
class SlideTileSource:
    """Reads slide rasters from disk, colour-corrects them to the reference
    profile, masks, tiles and caches the result per slide id.

    Records whose ``image_path`` ends in ``.milf`` are read as precomputed
    feature matrices instead. ``images`` optionally supplies device pixels
    by slide id in place of the files.
    """

    root: Path | str = "."
    profiles: Mapping[str, ScannerProfile] = field(default_factory=dict)
    magnification: int = 20
    min_tissue_fraction: float = 0.5
    mask_params: MaskParams = field(default_factory=MaskParams)
    reference: ScannerProfile = IDENTITY_PROFILE
    cache: bool = True
    images: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        self._cache: dict[str, SlideBag] = {}

    def _path(self, record: SlideRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def profile_for(self, record: SlideRecord) -> ScannerProfile:
        pid = record.scanner_profile
        if pid == self.reference.profile_id:
            return self.reference
        try:
            return self.profiles[pid]
        except KeyError:
            raise KeyError(f"slide {record.slide_id}: scanner profile {pid!r} not in registry") from None

    def image(self, record: SlideRecord) -> SlideImage:
        """The slide mapped into the reference colour space."""
        if self.images is not None and record.slide_id in self.images:
            image = SlideImage(self.images[record.slide_id], record.microns_per_pixel)
        else:
            image = read_slide(self._path(record), record.microns_per_pixel)
        image.pixels = apply_profile_transform(image.pixels, self.profile_for(record), self.reference)
        return image

    def bag(self, record: SlideRecord) -> SlideBag:
        hit = self._cache.get(record.slide_id)
        if hit is not None:
            return hit
        path = self._path(record)
        if path.suffix.lower() == FEATURE_SUFFIX:
            feats = read_feature_file(path)
            out = SlideBag(feats, [TileRef(record.slide_id, i, 0) for i in range(len(feats))])
        else:
            image = self.image(record)
            mask = compute_tissue_mask(image, self.mask_params)
            refs = extract_tiles(image, mask, self.magnification, self.min_tissue_fraction, record.slide_id)
            out = SlideBag(load_tiles(image, refs), refs, tissue_area_mm2(mask, record.microns_per_pixel))
        if len(out.refs) == 0:
            raise ValueError(f"slide {record.slide_id} yields no tiles")
        if self.cache:
            self._cache[record.slide_id] = out
        return out

    def tiles(self, record: SlideRecord) -> np.ndarray:
        return self.bag(record).pixels
