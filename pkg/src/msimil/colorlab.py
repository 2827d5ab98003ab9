"""Scanner colour correction, reference normalisation and augmentation."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CROP_SIZE = 224
TILE_SIZE = 256

SCOPE_SLIDE = "slide"
SCOPE_TILE = "tile"


class ProfileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scanner profiles


@dataclass(frozen=True)
class ScannerProfile:
    """Parametric device profile: per-channel power-law decode plus a 3x3
    matrix from linear device RGB to linear reference RGB."""

    profile_id: str
    gamma: tuple[float, float, float] = (2.2, 2.2, 2.2)
    matrix: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        g = tuple(float(v) for v in np.broadcast_to(np.asarray(self.gamma, dtype=float), (3,)))
        m = tuple(float(v) for v in np.asarray(self.matrix, dtype=float).ravel())
        if len(m) != 9:
            raise ProfileError(f"profile {self.profile_id!r}: matrix needs 9 coefficients")
        if any(v <= 0 or not np.isfinite(v) for v in g):
            raise ProfileError(f"profile {self.profile_id!r}: gamma must be positive")
        mat = np.array(m).reshape(3, 3)
        if not np.all(np.isfinite(mat)) or abs(np.linalg.det(mat)) < 1e-12:
            raise ProfileError(f"profile {self.profile_id!r}: matrix is singular")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "matrix", m)

    @property
    def M(self) -> np.ndarray:
        return np.array(self.matrix).reshape(3, 3)

    def decode(self, pixels: np.ndarray) -> np.ndarray:
        """8-bit device values -> linear device RGB in [0, 1]."""
        v = np.asarray(pixels, dtype=np.float64) / 255.0
        return np.power(v, np.array(self.gamma))

    def encode(self, linear: np.ndarray) -> np.ndarray:
        """Linear device RGB -> 8-bit values (clamped, round half up)."""
        v = np.clip(linear, 0.0, 1.0)
        v = np.power(v, 1.0 / np.array(self.gamma))
        return np.floor(v * 255.0 + 0.5).astype(np.uint8)


IDENTITY_PROFILE = ScannerProfile("reference")


def apply_profile_transform(
    tile: np.ndarray, source: ScannerProfile, target: ScannerProfile
) -> np.ndarray:
    """Map 8-bit pixels rendered by ``source`` into the colours ``target`` would record."""
    tile = np.asarray(tile)
    if source == target:
        return tile.copy()
    lin = source.decode(tile)
    combined = np.linalg.inv(target.M) @ source.M
    lin = lin @ combined.T
    return target.encode(lin)


def load_profile_registry(path) -> dict[str, ScannerProfile]:
    """Read profiles from an INI-style file::

        [aperio_gt450]
        gamma = 2.2 2.2 2.2
        matrix = 1 0 0  0 1 0  0 0 1
    """
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string(text)
    registry = {}
    for name in parser.sections():
        sec = parser[name]
        try:
            gamma = [float(v) for v in sec.get("gamma", "2.2").split()]
            if len(gamma) == 1:
                gamma = gamma * 3
            matrix = [float(v) for v in sec.get("matrix", "1 0 0 0 1 0 0 0 1").split()]
        except ValueError as exc:
            raise ProfileError(f"profile {name!r}: {exc}") from None
        registry[name] = ScannerProfile(name, tuple(gamma), tuple(matrix))
    return registry


def write_profile_registry(path, profiles: Sequence[ScannerProfile]) -> None:
    lines = []
    for prof in profiles:
        lines.append(f"[{prof.profile_id}]")
        lines.append("gamma = " + " ".join(repr(g) for g in prof.gamma))
        lines.append("matrix = " + " ".join(repr(m) for m in prof.matrix))
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormalizationStats:
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalisation stats need three channels")
        if min(self.std) <= 0:
            raise ValueError("normalisation std must be positive")

    @classmethod
    def from_tiles(cls, tiles) -> "NormalizationStats":
        """Per-channel mean and standard deviation of ``pixels / 255``."""
        arr = np.asarray(tiles, dtype=np.float64).reshape(-1, 3) / 255.0
        std = arr.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(arr.mean(axis=0)), tuple(std))


def normalize(tile: np.ndarray, stats: NormalizationStats, dtype=np.float32) -> np.ndarray:
    """HxWx3 pixels -> 3xHxW array ``(pixel/255 - mean) / std``.

    Also accepts a stack ``N x H x W x 3`` and returns ``N x 3 x H x W``.
    """
    x = np.asarray(tile, dtype=dtype)
    mean = np.asarray(stats.mean, dtype=dtype)
    scale = np.asarray(1.0 / (255.0 * np.asarray(stats.std)), dtype=dtype)
    out = x * scale - mean / np.asarray(stats.std, dtype=dtype)
    return np.moveaxis(out, -1, -3)


def normalize_planar(x: np.ndarray, stats: NormalizationStats, dtype=np.float32) -> np.ndarray:
    """Normalise an N x 3 x H x W float stack in place."""
    x = np.asarray(x, dtype=dtype)
    std = np.asarray(stats.std)
    scale = (1.0 / (255.0 * std)).astype(dtype).reshape(1, 3, 1, 1)
    shift = (np.asarray(stats.mean) / std).astype(dtype).reshape(1, 3, 1, 1)
    x *= scale
    x -= shift
    return x


def denormalize(arr: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize`, returning ``pixels / 255`` in HxWx3 layout."""
    x = np.moveaxis(np.asarray(arr, dtype=np.float64), -3, -1)
    return x * np.asarray(stats.std) + np.asarray(stats.mean)


# ---------------------------------------------------------------------------
# colour jitter


@dataclass
class JitterParams:
    brightness: float = 0.25
    contrast: float = 0.5
    saturation: float = 0.25
    hue: float = 0.04
    scope: str = SCOPE_SLIDE

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} jitter must be >= 0")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue jitter must lie in [0, 0.5]")
        self.scope = str(self.scope).lower()
        if self.scope not in (SCOPE_SLIDE, SCOPE_TILE):
            raise ValueError(f"jitter scope must be 'slide' or 'tile', got {self.scope!r}")

    @property
    def is_identity(self) -> bool:
        return self.brightness == self.contrast == self.saturation == self.hue == 0


@dataclass(frozen=True)
class JitterFactors:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


def draw_factors(params: JitterParams, rng: np.random.Generator) -> JitterFactors:
    def factor(m):
        return float(rng.uniform(max(0.0, 1.0 - m), 1.0 + m))

    b = factor(params.brightness)
    c = factor(params.contrast)
    s = factor(params.saturation)
    h = float(rng.uniform(-params.hue, params.hue))
    return JitterFactors(b, c, s, h)


def _gray(img, axis=-1):
    r, g, b = (np.take(img, i, axis=axis) for i in range(3))
    return r * 0.299 + g * 0.587 + b * 0.114


def _hsv_planes(r, g, b):
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    tiny = np.finfo(maxc.dtype).tiny
    inv = 1.0 / np.maximum(delta, tiny)
    # grey pixels take the first branch with g - b == 0, so hue is 0
    hue = np.where(
        r == maxc,
        (g - b) * inv,
        np.where(g == maxc, (b - r) * inv + 2.0, (r - g) * inv + 4.0),
    )
    hue *= 1.0 / 6.0
    hue -= np.floor(hue)  # float % is slow; floor gives the same wrap
    sat = delta / np.maximum(maxc, tiny)
    return hue, sat, maxc


def _rgb_planes(hue, sat, val):
    h6 = (hue - np.floor(hue)) * 6.0
    vs = val * sat
    chans = []
    for n in (5.0, 3.0, 1.0):
        k = h6 + n
        k -= 6.0 * (k >= 6.0)
        w = np.minimum(k, 4.0 - k)
        np.clip(w, 0.0, 1.0, out=w)
        chans.append(val - vs * w)
    return chans


def rgb_to_hsv(rgb: np.ndarray):
    """Vectorised RGB (any scale, channels last) -> hue in turns, saturation, value."""
    rgb = np.asarray(rgb)
    if rgb.dtype.kind != "f":
        rgb = rgb.astype(np.float64)
    return _hsv_planes(rgb[..., 0], rgb[..., 1], rgb[..., 2])


def hsv_to_rgb(hue, sat, val) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv` (hue in turns)."""
    return np.stack(_rgb_planes(np.asarray(hue), sat, val), axis=-1)


def _per_tile(values, ndim):
    return np.asarray(values, dtype=np.float32).reshape((-1,) + (1,) * (ndim - 1))


def jitter_planar(x: np.ndarray, factors: Sequence[JitterFactors]) -> np.ndarray:
    """In-place jitter of an N x 3 x H x W float32 stack in [0, 255]."""
    b = _per_tile([f.brightness for f in factors], 4)
    c = _per_tile([f.contrast for f in factors], 4)
    sat = _per_tile([f.saturation for f in factors], 4)
    hue = _per_tile([f.hue for f in factors], 3)
    if np.any(b != 1.0):
        x *= b
        np.clip(x, 0, 255, out=x)
    if np.any(c != 1.0):
        m = _gray(x, axis=1).mean(axis=(1, 2)).reshape(-1, 1, 1, 1)
        x -= m
        x *= c
        x += m
        np.clip(x, 0, 255, out=x)
    if np.any(sat != 1.0):
        g = _gray(x, axis=1)[:, None]
        x -= g
        x *= sat
        x += g
        np.clip(x, 0, 255, out=x)
    if np.any(hue != 0.0):
        h, s, v = _hsv_planes(x[:, 0], x[:, 1], x[:, 2])
        h += hue
        for i, plane in enumerate(_rgb_planes(h, s, v)):
            x[:, i] = plane
    return x


def apply_jitter(img: np.ndarray, f: JitterFactors | Sequence[JitterFactors]) -> np.ndarray:
    """Apply fixed factors to float pixels in [0, 255]; order is brightness,
    contrast, saturation, hue.

    ``img`` is one HxWx3 tile with one set of factors, or an NxHxWx3 stack
    with a sequence of N factor sets.
    """
    single = isinstance(f, JitterFactors)
    x = np.asarray(img, dtype=np.float32)
    if single:
        x = x[None]
        f = [f]
    planar = np.ascontiguousarray(np.moveaxis(x, -1, 1))
    out = np.moveaxis(jitter_planar(planar, f), 1, -1)
    return out[0] if single else out


def _as_input_dtype(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    if np.asarray(like).dtype == np.uint8:
        return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)
    return out


def color_jitter(tiles: Sequence[np.ndarray], params: JitterParams, rng: np.random.Generator):
    """Jitter a list of tiles. Slide scope shares one factor draw across all
    tiles of the call; tile scope draws per tile. Output dtype follows input."""
    tiles = list(tiles)
    if params.is_identity:
        return [np.array(t, copy=True) for t in tiles]
    if params.scope == SCOPE_SLIDE:
        f = draw_factors(params, rng)
        factors = [f] * len(tiles)
    else:
        factors = [draw_factors(params, rng) for _ in tiles]
    if tiles and all(t.shape == tiles[0].shape for t in tiles):
        out = apply_jitter(np.stack(tiles), factors)
        return [_as_input_dtype(o, t) for o, t in zip(out, tiles)]
    return [_as_input_dtype(apply_jitter(t, f), t) for t, f in zip(tiles, factors)]


# ---------------------------------------------------------------------------
# geometric augmentation


@dataclass(frozen=True)
class GeometricDraw:
    top: int = 16
    left: int = 16
    k: int = 0
    flip: bool = False


EVAL_DRAW = GeometricDraw()


def draw_geometric(rng: np.random.Generator, size: int = TILE_SIZE, crop: int = CROP_SIZE) -> GeometricDraw:
    span = size - crop
    top, left = (int(v) for v in rng.integers(0, span + 1, size=2))
    k = int(rng.integers(0, 4))
    flip = bool(rng.random() < 0.5)
    return GeometricDraw(top, left, k, flip)


def apply_geometric(tile: np.ndarray, d: GeometricDraw, crop: int = CROP_SIZE) -> np.ndarray:
    out = tile[d.top : d.top + crop, d.left : d.left + crop]
    if d.k:
        out = np.rot90(out, d.k, axes=(0, 1))
    if d.flip:
        out = out[:, ::-1]
    return out


def geometric_augment(
    tile: np.ndarray, rng: np.random.Generator | None = None, training: bool = True
) -> np.ndarray:
    """Random 224 crop, rotation by a multiple of 90 degrees and horizontal
    flip. With ``training=False`` this is a plain centre crop."""
    tile = np.asarray(tile)
    if tile.shape[:2] != (TILE_SIZE, TILE_SIZE):
        raise ValueError(f"expected a {TILE_SIZE}x{TILE_SIZE} tile, got {tile.shape[:2]}")
    if not training:
        return np.ascontiguousarray(apply_geometric(tile, EVAL_DRAW))
    if rng is None:
        raise ValueError("training-mode augmentation needs an rng")
    return np.ascontiguousarray(apply_geometric(tile, draw_geometric(rng)))


def block_mean_planar(x: np.ndarray, k: int) -> np.ndarray:
    """k x k block mean of an N x C x H x W stack (floor cropping)."""
    if k == 1:
        return np.asarray(x, dtype=np.float32)
    n, c, h, w = x.shape
    h2, w2 = h // k, w // k
    x = x[:, :, : h2 * k, : w2 * k]
    acc = x[:, :, :, 0::k].astype(np.float32)
    for j in range(1, k):
        acc += x[:, :, :, j::k]
    out = acc[:, :, 0::k].copy()
    for i in range(1, k):
        out += acc[:, :, i::k]
    out *= 1.0 / (k * k)
    return out


@dataclass
class Preprocessor:
    """Turns raw 256x256 uint8 tiles of one bag into model input.

    Training mode draws a geometric augmentation per tile, reduces the 224
    crop to the working resolution (``working_pool`` block mean), applies
    colour jitter in pixel space and finally reference normalisation.
    Evaluation mode centre-crops, reduces and normalises.
    """

    stats: NormalizationStats = field(default_factory=NormalizationStats)
    jitter: JitterParams = field(default_factory=JitterParams)
    working_pool: int = 4
    dtype: type = np.float32

    def __call__(self, tiles: np.ndarray, rng: np.random.Generator | None = None, training: bool = False):
        tiles = np.asarray(tiles)
        if tiles.ndim == 2:
            # precomputed features pass straight through
            return tiles.astype(self.dtype, copy=False)
        if tiles.ndim != 4 or tiles.shape[1:] != (TILE_SIZE, TILE_SIZE, 3):
            raise ValueError(f"expected N x {TILE_SIZE} x {TILE_SIZE} x 3 tiles, got {tiles.shape}")
        if training:
            crops = np.stack([apply_geometric(t, draw_geometric(rng)) for t in tiles])
        else:
            o = (TILE_SIZE - CROP_SIZE) // 2
            crops = tiles[:, o : o + CROP_SIZE, o : o + CROP_SIZE]
        planar = block_mean_planar(np.moveaxis(crops, -1, 1), self.working_pool)
        if training and not self.jitter.is_identity:
            if self.jitter.scope == SCOPE_SLIDE:
                factors = [draw_factors(self.jitter, rng)] * len(crops)
            else:
                factors = [draw_factors(self.jitter, rng) for _ in crops]
            jitter_planar(planar, factors)
        return normalize_planar(planar, self.stats, dtype=self.dtype)
