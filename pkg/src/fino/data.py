"""Image I/O, noise synthesis, patch cropping and the synthetic toy corpus.

Pixel values live on a [0, 1] scale internally; sigma arguments here are on
that scale too (divide the usual 0-255 figures by 255 before calling).
Every random draw comes from an explicitly seeded ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import load_raw, save_raw

RAW_SUFFIXES = {".fnt", ".raw"}
PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}
IMAGE_SUFFIXES = RAW_SUFFIXES | PNM_SUFFIXES


class ImageFormatError(ValueError):
    pass


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream...) so items can be built in any order."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


# -- image files -----------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read a C×H×W float64 image (PGM/PPM 8-bit, or the raw tensor dump)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        arr = load_raw(path)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ImageFormatError(f"{path}: raw image must be C×H×W, got shape {arr.shape}")
        return arr
    if suffix in PNM_SUFFIXES:
        return _read_pnm(path)
    raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        save_raw(path, img)
        return
    if suffix not in PNM_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")
    c, h, w = img.shape
    if c not in (1, 3):
        raise ImageFormatError(f"{path}: PNM needs 1 or 3 channels, got {c}")
    q = quantize(img)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(q.transpose(1, 2, 0).tobytes())


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    pos = 0

    def token() -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos:pos + 1]
            if ch == b"#":
                while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: unexpected end of header at byte {start}")
        return raw[start:pos], start

    magic, _ = token()
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported PNM magic {magic!r} at byte 0 (need P5 or P6)")
    fields = []
    for label in ("width", "height", "maxval"):
        tok, at = token()
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: bad {label} {tok!r} at byte {at}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (only 255) at byte {at}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: empty image {w}×{h}")
    pos += 1  # single whitespace after maxval
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ImageFormatError(f"{path}: truncated pixel data at byte {pos + len(body)}; "
                               f"expected {need} bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# -- noise -----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "uniform"  # uniform | variant | blind
    sigma: float = 25 / 255
    sigma_range: tuple[float, float] = (0.0, 55 / 255)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "variant", "blind"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        lo, hi = self.sigma_range
        if self.kind != "uniform" and not 0 <= lo < hi:
            raise ValueError(f"sigma range must satisfy 0 <= low < high, got ({lo}, {hi})")


def add_awgn(x: np.ndarray, sigma: float, seed: int | np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """y = x + n with n ~ N(0, sigma^2); y is not clipped."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = rng.standard_normal(np.shape(x)) * sigma
    return x + n, n


def make_variant_map(h: int, w: int, sigma_low: float, sigma_high: float, seed, grid: int = 8) -> np.ndarray:
    """Smooth H×W sigma map: a coarse uniform grid in [low, high], bilinearly upsampled."""
    if not 0 <= sigma_low <= sigma_high:
        raise ValueError(f"variant map needs 0 <= low <= high, got ({sigma_low}, {sigma_high})")
    if sigma_low == sigma_high:
        return np.full((h, w), float(sigma_low))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    coarse = rng.uniform(sigma_low, sigma_high, size=(grid, grid))
    # sample positions of pixel centres on the coarse grid
    ys = np.clip((np.arange(h) + 0.5) * grid / h - 0.5, 0, grid - 1)
    xs = np.clip((np.arange(w) + 0.5) * grid / w - 0.5, 0, grid - 1)
    y0 = np.minimum(np.floor(ys).astype(int), grid - 2)
    x0 = np.minimum(np.floor(xs).astype(int), grid - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bottom = c10 * (1 - fx) + c11 * fx
    return np.clip(top * (1 - fy) + bottom * fy, sigma_low, sigma_high)


def add_variant_noise(x: np.ndarray, sigma_map: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """n = sigma_map ⊙ g with g ~ N(0, 1), the map shared across channels."""
    if np.any(sigma_map < 0):
        raise ValueError("sigma map has negative entries")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = rng.standard_normal(np.shape(x)) * sigma_map
    return x + n, n


def sample_blind_sigma(rng: np.random.Generator, low: float, high: float, size=None):
    """Uniform on the half-open interval (low, high]."""
    u = rng.random(size)
    return high - (high - low) * u


def synthesize(x: np.ndarray, spec: NoiseSpec, stream: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noisy copy of ``x`` under ``spec``; returns (y, n, per-pixel sigma map)."""
    rng = rng_for(spec.seed, stream)
    h, w = x.shape[-2:]
    if spec.kind == "uniform":
        smap = np.full((h, w), spec.sigma)
        y, n = add_awgn(x, spec.sigma, rng)
    elif spec.kind == "blind":
        sigma = float(sample_blind_sigma(rng, *spec.sigma_range))
        smap = np.full((h, w), sigma)
        y, n = add_awgn(x, sigma, rng)
    else:
        smap = make_variant_map(h, w, *spec.sigma_range, rng)
        y, n = add_variant_noise(x, smap, rng)
    return y, n, smap


# -- cropping and the toy corpus -------------------------------------------

def crop_patches(x: np.ndarray, y: np.ndarray, size: int, count: int, seed, *,
                 multiple: int = 1, extra: np.ndarray | None = None):
    """``count`` aligned crops of ``x`` and ``y`` (and ``extra`` if given, e.g. a sigma map).

    Returns a list of (x_patch, y_patch[, extra_patch], (top, left)).
    """
    h, w = x.shape[-2:]
    if y.shape[-2:] != (h, w):
        raise ValueError(f"crop_patches: clean {x.shape} and noisy {y.shape} differ in size")
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image {h}×{w}; use a crop size <= {min(h, w)}")
    if size % multiple:
        raise ValueError(f"crop size {size} not divisible by {multiple}; "
                         f"try {size - size % multiple} or {size + multiple - size % multiple}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for _ in range(count):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        win = (..., slice(top, top + size), slice(left, left + size))
        item = [x[win], y[win]]
        if extra is not None:
            item.append(extra[win])
        item.append((top, left))
        out.append(tuple(item))
    return out


def make_toy_image(size: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Piecewise-constant rectangles/discs over a linear ramp, plus a sinusoidal texture."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((channels, size, size))
    base_dir = rng.uniform(0, 2 * np.pi)
    shapes = []
    for _ in range(int(rng.integers(2, 5))):
        kind = rng.integers(0, 2)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.1, 0.35)
        if kind == 0:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        shapes.append(mask)
    freq = rng.uniform(2, 6)
    angle = rng.uniform(0, np.pi)
    tex_mask = shapes[0]
    for c in range(channels):
        lo, hi = sorted(rng.uniform(0.1, 0.9, size=2))
        ramp = lo + (hi - lo) * (np.cos(base_dir) * xx + np.sin(base_dir) * yy + 1) / 2
        layer = ramp
        for mask in shapes:
            layer = np.where(mask, rng.uniform(0.05, 0.95), layer)
        wave = 0.15 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        layer = np.where(tex_mask, layer + wave, layer)
        img[c] = layer
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(n_images: int, size: int, seed: int, channels: int = 1) -> list[np.ndarray]:
    return [make_toy_image(size, rng_for(seed, i), channels) for i in range(n_images)]
