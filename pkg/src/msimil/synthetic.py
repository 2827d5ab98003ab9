"""Synthetic H&E-like cohorts with a planted slide-level signal."""
from __future__ import annotations

import datetime as dt
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .colorlab import IDENTITY_PROFILE, ScannerProfile, apply_profile_transform, write_profile_registry
from .ioutil import atomic_write_text
from .slideio import (
    MSI_H,
    MSS,
    PROCEDURES,
    TILE_SIZE,
    SlideRecord,
    format_manifest,
    read_slide,
    write_raw_planar,
    write_slide_png,
)

SCANNER_B = ScannerProfile("scanner_b", (2.0, 2.2, 2.4), (0.92, 0.06, 0.02, 0.03, 0.95, 0.02, 0.02, 0.05, 0.93))
EXTERNAL_SCANNER = ScannerProfile("external_scanner", (2.4, 2.3, 2.1), (1.05, -0.03, -0.02, 0.04, 0.97, -0.01, -0.02, 0.06, 0.96))

PINK = np.array([232.0, 168.0, 204.0])
PURPLE = np.array([148.0, 92.0, 172.0])
GLASS = np.array([246.0, 245.0, 247.0])

# 8 px squares: the pattern period (16 px) survives 4x working-resolution pooling
SIGNAL_PERIOD = 16
SIGNAL_AMPLITUDE = 48.0


@dataclass
class SyntheticCohortSpec:
    n_slides: int = 200
    positive_prevalence: float = 0.2
    slide_px: tuple[int, int] = (1280, 1280)
    glass_rows: int = 1
    signal_tile_fraction: float = 0.05
    signal_strength: float = 1.0
    scanner_profiles: tuple[ScannerProfile, ...] = (IDENTITY_PROFILE, SCANNER_B)
    external_profile: ScannerProfile = EXTERNAL_SCANNER
    noise_sd: float = 8.0
    microns_per_pixel: float = 0.5
    seed: int = 0
    id_prefix: str = "S"

    def __post_init__(self):
        if not 0.0 < self.positive_prevalence < 1.0:
            raise ValueError("positive_prevalence must lie in (0, 1)")
        if not 0.0 < self.signal_tile_fraction <= 1.0:
            raise ValueError("signal_tile_fraction must lie in (0, 1]")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.n_slides < 2:
            raise ValueError("need at least two slides")
        h, w = self.slide_px
        if h < TILE_SIZE or w < TILE_SIZE:
            raise ValueError("slides must hold at least one tile")
        if self.tissue_grid[0] < 1:
            raise ValueError("glass_rows leaves no tissue")
        self.slide_px = (int(h), int(w))

    @property
    def tissue_grid(self) -> tuple[int, int]:
        """(rows, cols) of tiles covered by tissue."""
        h, w = self.slide_px
        return h // TILE_SIZE - self.glass_rows, w // TILE_SIZE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scanner_profiles"] = [asdict(p) for p in self.scanner_profiles]
        d["external_profile"] = asdict(self.external_profile)
        return d


@dataclass
class SyntheticCohort:
    spec: SyntheticCohortSpec
    records: list[SlideRecord]
    signal_tiles: dict[str, list[tuple[int, int]]]
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def image(self, slide_id: str) -> np.ndarray:
        return self.images[slide_id]


def _smooth_field(rng, h, w, cell):
    coarse = rng.standard_normal((h // cell + 3, w // cell + 3)).astype(np.float32)
    up = ndimage.zoom(coarse, cell, order=1, prefilter=False, output=np.float32)
    return up[:h, :w]


def signal_pattern(size: int = TILE_SIZE, phase: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Zero-mean +-1 checkerboard with ``SIGNAL_PERIOD`` px period."""
    half = SIGNAL_PERIOD // 2
    yy = (np.arange(size)[:, None] + phase[0]) // half
    xx = (np.arange(size)[None, :] + phase[1]) // half
    return np.where((yy + xx) % 2 == 0, 1.0, -1.0).astype(np.float32)


def render_background(rng: np.random.Generator, spec: SyntheticCohortSpec) -> np.ndarray:
    """Reference-space float image: pink/purple blobs over tissue, glass below."""
    h, w = spec.slide_px
    mix = _smooth_field(rng, h, w, 48)
    mix *= -1.6
    np.exp(mix, out=mix)
    mix += 1.0
    np.reciprocal(mix, out=mix)
    shade = _smooth_field(rng, h, w, 24)
    shade *= 0.06
    shade += 1.0
    img = rng.standard_normal((h, w, 3), dtype=np.float32)
    img *= spec.noise_sd
    pink, purple = PINK.astype(np.float32), PURPLE.astype(np.float32)
    tissue_h = spec.tissue_grid[0] * TILE_SIZE
    for c in range(3):
        img[:tissue_h, :, c] += (pink[c] + (purple[c] - pink[c]) * mix[:tissue_h]) * shade[:tissue_h]
    img[tissue_h:] += GLASS.astype(np.float32)
    return img


def _positives(rng, spec) -> np.ndarray:
    n_pos = int(round(spec.n_slides * spec.positive_prevalence))
    n_pos = min(max(n_pos, 1), spec.n_slides - 1)
    y = np.zeros(spec.n_slides, dtype=bool)
    y[rng.choice(spec.n_slides, n_pos, replace=False)] = True
    return y


def n_signal_tiles(spec: SyntheticCohortSpec) -> int:
    rows, cols = spec.tissue_grid
    return max(1, int(round(spec.signal_tile_fraction * rows * cols)))


def render_slide(spec: SyntheticCohortSpec, index: int, positive: bool):
    """Device pixels for one slide plus its planted tile positions."""
    rng = np.random.default_rng([spec.seed, 1, index])
    img = render_background(rng, spec)
    rows, cols = spec.tissue_grid
    planted: list[tuple[int, int]] = []
    # the draw happens for every slide so negatives consume the same stream
    cells = rng.choice(rows * cols, n_signal_tiles(spec), replace=False)
    phase = tuple(int(v) for v in rng.integers(0, SIGNAL_PERIOD, 2))
    if positive:
        pattern = spec.signal_strength * SIGNAL_AMPLITUDE * signal_pattern(TILE_SIZE, phase)
        for c in sorted(int(v) for v in cells):
            gy, gx = divmod(c, cols)
            y0, x0 = gy * TILE_SIZE, gx * TILE_SIZE
            img[y0 : y0 + TILE_SIZE, x0 : x0 + TILE_SIZE] += pattern[..., None]
            planted.append((gx, gy))
    img += 0.5
    np.floor(img, out=img)
    ref = np.clip(img, 0, 255).astype(np.uint8)
    return ref, planted


def generate_synthetic_cohort(spec: SyntheticCohortSpec, keep_images: bool = True) -> SyntheticCohort:
    """Render every slide and its manifest record (images stay in memory;
    see :func:`write_cohort` for disk output)."""
    meta_rng = np.random.default_rng([spec.seed, 0])
    y = _positives(meta_rng, spec)
    profiles = spec.scanner_profiles
    records, signal, images = [], {}, {}
    width = len(str(spec.n_slides - 1))
    for i in range(spec.n_slides):
        sid = f"{spec.id_prefix}{i:0{width}d}"
        prof = profiles[int(meta_rng.integers(len(profiles)))]
        gleason = int(meta_rng.integers(7, 11))
        proc = PROCEDURES[int(meta_rng.integers(len(PROCEDURES)))]
        purity = round(float(meta_rng.uniform(0.1, 0.9)), 2)
        date = dt.date(2019, 1, 1) + dt.timedelta(days=int(meta_rng.integers(0, 4 * 365)))
        ref, planted = render_slide(spec, i, bool(y[i]))
        if keep_images:
            images[sid] = apply_profile_transform(ref, IDENTITY_PROFILE, prof)
        signal[sid] = planted
        records.append(
            SlideRecord(
                slide_id=sid,
                image_path=f"slides/{sid}.png",
                label=MSI_H if y[i] else MSS,
                gleason_total=gleason,
                procedure=proc,
                scanner_profile=prof.profile_id,
                stain_site="INTERNAL",
                collection_date=date,
                tumor_purity=purity,
                microns_per_pixel=spec.microns_per_pixel,
            )
        )
    return SyntheticCohort(spec, records, signal, images)


def write_cohort(cohort: SyntheticCohort, out_dir, image_format: str = "png", manifest_name: str = "manifest.csv"):
    """Write slides, manifest, profile registry and the planted-tile sidecar.

    Every file is written under a temporary name and renamed into place.
    """
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    ext = {"png": ".png", "rgbp": ".rgbp"}[image_format]
    records = []
    for r in cohort.records:
        rel = f"slides/{r.slide_id}{ext}"
        px = cohort.images[r.slide_id]
        tmp = out / f"slides/.{r.slide_id}{ext}.tmp"
        if image_format == "png":
            write_slide_png(tmp, px)
        else:
            write_raw_planar(tmp, px)
        tmp.replace(out / rel)
        records.append(replace(r, image_path=rel))
    cohort.records = records
    profiles = {p.profile_id: p for p in cohort.spec.scanner_profiles}
    profiles.setdefault(cohort.spec.external_profile.profile_id, cohort.spec.external_profile)
    tmp = out / ".profiles.ini.tmp"
    write_profile_registry(tmp, list(profiles.values()))
    tmp.replace(out / "profiles.ini")
    signal = {k: [list(t) for t in v] for k, v in cohort.signal_tiles.items()}
    atomic_write_text(out / "signal_tiles.json", json.dumps(signal, indent=1))
    atomic_write_text(out / "cohort_spec.json", json.dumps(cohort.spec.to_dict(), indent=1))
    atomic_write_text(out / manifest_name, format_manifest(records))
    return out / manifest_name


# ---------------------------------------------------------------------------
# paired serial sections


def rerender(
    pixels: np.ndarray,
    source: ScannerProfile,
    target: ScannerProfile,
    gains: np.ndarray | None = None,
) -> np.ndarray:
    """Pixels seen through ``source`` re-recorded by ``target``; ``gains``
    scales the reference-linear channels first (a stain difference)."""
    if gains is None or np.all(gains == 1.0):
        return apply_profile_transform(pixels, source, target)
    lin = source.decode(pixels) @ source.M.T
    lin = lin * gains
    lin = lin @ np.linalg.inv(target.M).T
    return target.encode(lin)


def synthesize_paired_sections(
    cohort: SyntheticCohort,
    profiles: dict[str, ScannerProfile],
    profile_external: ScannerProfile,
    jitter_noise: float = 0.05,
    seed: int = 0,
    suffix: str = "_ext",
) -> SyntheticCohort:
    """Second rendering of every slide through ``profile_external`` with an
    independent per-slide stain gain of relative spread ``jitter_noise``.
    Each new record's ``paired_id`` names the slide it was rendered from."""
    if jitter_noise < 0:
        raise ValueError("jitter_noise must be >= 0")
    records, images = [], {}
    for r in cohort.records:
        rng = np.random.default_rng([seed, 2, zlib.crc32(r.slide_id.encode("utf-8"))])
        gains = np.exp(rng.normal(0.0, jitter_noise, 3)) if jitter_noise > 0 else None
        src = profiles.get(r.scanner_profile, IDENTITY_PROFILE)
        new_id = r.slide_id + suffix
        images[new_id] = rerender(cohort.images[r.slide_id], src, profile_external, gains)
        records.append(
            replace(
                r,
                slide_id=new_id,
                image_path=f"slides/{new_id}.png",
                scanner_profile=profile_external.profile_id,
                stain_site="EXTERNAL",
                paired_id=r.slide_id,
            )
        )
    signal = {r.slide_id + suffix: list(cohort.signal_tiles.get(r.slide_id, [])) for r in cohort.records}
    return SyntheticCohort(cohort.spec, records, signal, images)


def load_cohort_images(records, root) -> dict[str, np.ndarray]:
    root = Path(root)
    return {r.slide_id: read_slide(root / r.image_path).pixels for r in records}
