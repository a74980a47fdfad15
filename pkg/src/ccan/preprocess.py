"""Raster-image preprocessing into feature bags.

The pipeline tessellates a calibrated image into non-overlapping square
patches with a fixed physical edge length (default 256 microns),
resizes each to 256x256 px, drops predominantly-white patches (mean
BT.601 luma > 224), drops blurry patches (Canny edge fraction < 2%),
and turns survivors into feature tokens via a deterministic random
projection. Partial edge patches are discarded.

The Canny detector is the classic pipeline: 5x5 Gaussian smoothing
(sigma 1.4), Sobel gradients, 4-direction non-maximum suppression, and
double-threshold hysteresis (low 50 / high 100 on the gradient
magnitude clamped to 8 bits). Borders are edge-replicated for the
convolutions. Golden tests pin the exact behavior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import FeatureBag
from .errors import ConfigError, DataError


@dataclass
class RasterImage:
    """8-bit image with a physical pixel size."""

    pixels: np.ndarray  # HxWxC uint8, C in {1, 3}
    microns_per_pixel: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DataError(f"expected HxWx{{1,3}} pixels, got shape {self.pixels.shape}")
        if self.microns_per_pixel <= 0:
            raise DataError(f"microns_per_pixel must be positive, got {self.microns_per_pixel}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class PatchRecord:
    """One tessellated patch, resized to the model's input resolution."""

    pixels: np.ndarray  # 256x256x3 uint8
    row: int
    col: int
    source_rect: tuple  # (y0, x0, side, side) in source pixels


@dataclass
class PreprocessConfig:
    patch_microns: float = 256.0
    patch_pixels: int = 256
    white_threshold: float = 224.0
    blur_fraction: float = 0.02
    canny_sigma: float = 1.4
    canny_kernel: int = 5
    canny_low: float = 50.0
    canny_high: float = 100.0
    d_feature: int = 2048


@dataclass
class QCReport:
    total: int
    white_rejected: int
    blur_rejected: int
    kept: int

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("total,white_rejected,blur_rejected,kept\n")
            fh.write(f"{self.total},{self.white_rejected},{self.blur_rejected},{self.kept}\n")


# ---------------------------------------------------------------------------
# resizing and tessellation


def bilinear_resize(pixels, out_h, out_w):
    """Half-pixel-center bilinear resize; exact copy at identity scale."""
    pixels = np.asarray(pixels)
    in_h, in_w = pixels.shape[:2]
    src = pixels.astype(np.float64)

    def axis_coords(out_n, in_n):
        coords = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        lo = np.floor(coords).astype(np.int64)
        frac = coords - lo
        lo0 = np.clip(lo, 0, in_n - 1)
        lo1 = np.clip(lo + 1, 0, in_n - 1)
        return lo0, lo1, frac

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def tessellate(image, config=None):
    """Cut the image into full square patches of patch_microns edge length."""
    config = config or PreprocessConfig()
    side = round(config.patch_microns / image.microns_per_pixel)
    if side < 1:
        raise DataError(f"patch side rounds to {side} px at {image.microns_per_pixel} microns/px")
    n_rows = image.height // side
    n_cols = image.width // side
    if n_rows < 1 or n_cols < 1:
        raise DataError(
            f"image {image.width}x{image.height} px is smaller than one {side} px patch"
        )
    pixels = image.pixels
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    patches = []
    for r in range(n_rows):
        for c in range(n_cols):
            y0, x0 = r * side, c * side
            crop = pixels[y0 : y0 + side, x0 : x0 + side]
            if side != config.patch_pixels:
                crop = bilinear_resize(crop, config.patch_pixels, config.patch_pixels)
            else:
                crop = crop.copy()
            patches.append(PatchRecord(pixels=crop, row=r, col=c, source_rect=(y0, x0, side, side)))
    return patches


# ---------------------------------------------------------------------------
# filters


def grayscale(patch_pixels):
    """BT.601 luma in float64."""
    p = np.asarray(patch_pixels, dtype=np.float64)
    if p.ndim == 3 and p.shape[2] == 3:
        return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]
    return p.reshape(p.shape[0], p.shape[1])


def is_white(patch_pixels, threshold=224.0):
    """True iff the mean grayscale value strictly exceeds the threshold."""
    return bool(grayscale(patch_pixels).mean() > threshold)


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _convolve2d(img, kernel):
    kh, kw = kernel.shape
    pad_y, pad_x = kh // 2, kw // 2
    padded = np.pad(img, ((pad_y, pad_y), (pad_x, pad_x)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            out += kernel[dy, dx] * padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def canny_edges(patch_pixels, config=None):
    """Boolean edge mask from the classic Canny pipeline."""
    config = config or PreprocessConfig()
    gray = grayscale(patch_pixels)
    smoothed = _convolve2d(gray, _gaussian_kernel(config.canny_kernel, config.canny_sigma))
    gx = _convolve2d(smoothed, _SOBEL_X)
    gy = _convolve2d(smoothed, _SOBEL_Y)
    magnitude = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0

    # non-maximum suppression against the two neighbors along the gradient
    h, w = magnitude.shape
    suppressed = np.zeros_like(magnitude)
    mag_p = np.pad(magnitude, 1, mode="constant")
    center = mag_p[1:-1, 1:-1]
    neighbor_pairs = {
        0: (mag_p[1:-1, 2:], mag_p[1:-1, :-2]),  # horizontal gradient: E/W
        45: (mag_p[2:, :-2], mag_p[:-2, 2:]),  # SW / NE
        90: (mag_p[2:, 1:-1], mag_p[:-2, 1:-1]),  # S / N
        135: (mag_p[2:, 2:], mag_p[:-2, :-2]),  # SE / NW
    }
    sector = np.zeros((h, w), dtype=np.int64)
    sector[(angle >= 22.5) & (angle < 67.5)] = 45
    sector[(angle >= 67.5) & (angle < 112.5)] = 90
    sector[(angle >= 112.5) & (angle < 157.5)] = 135
    for sec, (a, b) in neighbor_pairs.items():
        mask = sector == sec
        keep = mask & (center >= a) & (center >= b)
        suppressed[keep] = magnitude[keep]
    suppressed[0, :] = suppressed[-1, :] = 0.0
    suppressed[:, 0] = suppressed[:, -1] = 0.0

    # thresholds are defined on the magnitude clamped to 8 bits
    suppressed = np.clip(suppressed, 0.0, 255.0)
    strong = suppressed >= config.canny_high
    weak = suppressed >= config.canny_low
    # hysteresis: keep weak components 8-connected to a strong pixel
    labels, n_labels = ndimage.label(weak, structure=np.ones((3, 3), dtype=np.int64))
    if n_labels == 0:
        return np.zeros_like(strong)
    strong_labels = np.unique(labels[strong])
    strong_labels = strong_labels[strong_labels > 0]
    return np.isin(labels, strong_labels)


def canny_edge_fraction(patch_pixels, config=None):
    edges = canny_edges(patch_pixels, config)
    return float(edges.sum()) / edges.size


def is_blurry(patch_pixels, config=None):
    """True iff the edge-pixel fraction is strictly below the cutoff."""
    config = config or PreprocessConfig()
    return canny_edge_fraction(patch_pixels, config) < config.blur_fraction


# ---------------------------------------------------------------------------
# stub feature extraction


def _projection_matrix(d_feature, seed):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((768, d_feature)) / np.sqrt(768.0)).astype(np.float64)


def stub_features(patch_pixels, d_feature=2048, seed=0, projection=None):
    """Deterministic stand-in for a pretrained extractor.

    Block-averages the patch to 16x16x3, flattens, applies a fixed
    seeded random projection, and squashes with tanh, so outputs are
    bounded in (-1, 1) and identical patches map to identical tokens.
    """
    p = np.asarray(patch_pixels, dtype=np.float64)
    if p.shape != (256, 256, 3):
        raise DataError(f"stub extractor expects 256x256x3 patches, got {p.shape}")
    block = 256 // 16
    small = p.reshape(16, block, 16, block, 3).mean(axis=(1, 3)) / 255.0
    flat = small.reshape(-1)
    if projection is None:
        projection = _projection_matrix(d_feature, seed)
    return np.tanh(flat @ projection).astype(np.float32)


# ---------------------------------------------------------------------------
# pipeline


def run_pipeline(image, out_path, label, bag_id, patient_id, seed=0, config=None):
    """Tessellate, filter, extract features, and write a CCFB bag.

    Returns (bag, qc_report). A patch rejected by the white filter is
    not double-counted by the blur filter; a patch is kept iff it is
    neither white nor blurry.
    """
    from .data import write_bag

    config = config or PreprocessConfig()
    patches = tessellate(image, config)
    projection = _projection_matrix(config.d_feature, seed)
    kept = []
    n_white = 0
    n_blur = 0
    for patch in patches:
        if is_white(patch.pixels, config.white_threshold):
            n_white += 1
            continue
        if is_blurry(patch.pixels, config):
            n_blur += 1
            continue
        kept.append(patch)
    qc = QCReport(total=len(patches), white_rejected=n_white, blur_rejected=n_blur, kept=len(kept))
    if not kept:
        raise DataError(
            f"no patches survived filtering ({n_white} white, {n_blur} blurry of {len(patches)})"
        )
    tokens = np.stack(
        [stub_features(p.pixels, config.d_feature, seed, projection) for p in kept]
    )
    n_rows = max(p.row for p in patches) + 1
    n_cols = max(p.col for p in patches) + 1
    bag = FeatureBag(
        bag_id=bag_id,
        patient_id=patient_id,
        label=label,
        tokens=tokens,
        rows=np.array([p.row for p in kept]),
        cols=np.array([p.col for p in kept]),
        rows_total=n_rows,
        cols_total=n_cols,
    )
    if out_path is not None:
        write_bag(bag, out_path)
    return bag, qc


def read_sidecar(path):
    """key=value metadata file: microns_per_pixel, label, bag_id, patient_id."""
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"sidecar line is not key=value: {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            meta[key] = value
    missing = {"microns_per_pixel", "label", "bag_id", "patient_id"} - meta.keys()
    if missing:
        raise ConfigError(f"sidecar missing keys: {sorted(missing)}")
    return {
        "microns_per_pixel": float(meta["microns_per_pixel"]),
        "label": int(meta["label"]),
        "bag_id": meta["bag_id"],
        "patient_id": meta["patient_id"],
    }
