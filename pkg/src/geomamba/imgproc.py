"""Classical image operators: preprocessing pipeline and pseudo-label generators.

All operators are pure functions on float arrays with u8 semantics (values in
[0, 255]). Kernels use replicate border padding so no spurious edges leak into
the pseudo-label masks.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


class ImageSizeError(ValueError):
    pass


def _check_image(img: np.ndarray, min_side: int = 3) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D gray image, got shape {img.shape}")
    if min(img.shape) < min_side:
        raise ImageSizeError(f"image {img.shape} smaller than {min_side}x{min_side}")
    return img


def _correlate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D correlation with replicate padding, same output size."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)), mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


def sobel_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = _check_image(img)
    return _correlate(img, SOBEL_X), _correlate(img, SOBEL_Y)


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    gx, gy = sobel_gradients(img)
    return np.sqrt(gx ** 2 + gy ** 2)


def sobel_mask(img: np.ndarray, quantile: float = 0.85) -> np.ndarray:
    """Binary contour mask: Sobel magnitude above its own quantile."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0,1), got {quantile}")
    mag = sobel_magnitude(img)
    thr = np.quantile(mag, quantile)
    # >= with a positivity guard: plateaus at the quantile still fire,
    # constant (all-zero-gradient) images never do
    return ((mag >= thr) & (mag > 0.0)).astype(np.float64)


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = max(1, int(round(3 * sigma)))
    k = _gaussian_kernel1d(sigma, radius)
    out = _correlate(img, k[None, :])
    return _correlate(out, k[:, None])


def harris_response(img: np.ndarray, k: float = 0.04, window: int = 5,
                    sigma: float = 1.0) -> np.ndarray:
    img = _check_image(img, min_side=max(3, window))
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd int >= 3, got {window}")
    if not 0.02 <= k <= 0.1:
        raise ValueError(f"harris k must be in [0.02, 0.1], got {k}")
    ix, iy = sobel_gradients(img)
    radius = window // 2
    sxx = gaussian_blur(ix * ix, sigma, radius)
    syy = gaussian_blur(iy * iy, sigma, radius)
    sxy = gaussian_blur(ix * iy, sigma, radius)
    det = sxx * syy - sxy ** 2
    trace = sxx + syy
    return det - k * trace ** 2


def _local_max_3x3(r: np.ndarray) -> np.ndarray:
    """True where r is >= all 8 neighbours; border rows/cols always False."""
    padded = np.pad(r, 1, mode="constant", constant_values=-np.inf)
    h, w = r.shape
    neigh = np.full_like(r, -np.inf)
    for di in range(3):
        for dj in range(3):
            if di == 1 and dj == 1:
                continue
            neigh = np.maximum(neigh, padded[di:di + h, dj:dj + w])
    out = r >= neigh
    out[0, :] = out[-1, :] = False
    out[:, 0] = out[:, -1] = False
    return out


def harris_mask(img: np.ndarray, k: float = 0.04, window: int = 5,
                quantile: float = 0.99, sigma: float = 1.0) -> np.ndarray:
    """Binary keypoint mask: positive local maxima of the Harris response
    above its quantile threshold. Never fires on the 1-pixel border."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0,1), got {quantile}")
    r = harris_response(img, k=k, window=window, sigma=sigma)
    thr = np.quantile(r, quantile)
    mask = (r > thr) & (r > 0.0) & _local_max_3x3(r)
    return mask.astype(np.float64)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool over factor x factor blocks; keeps sparse positives alive."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"mask {mask.shape} not divisible by factor {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


# ---- preprocessing operators ------------------------------------------------

def bilateral_filter(img: np.ndarray, sigma_space: float = 3.0,
                     sigma_range: float = 25.0) -> np.ndarray:
    img = _check_image(img)
    if sigma_space <= 0 or sigma_range <= 0:
        raise ValueError("bilateral sigmas must be positive")
    radius = max(1, int(round(2 * sigma_space)))
    h, w = img.shape
    padded = np.pad(img, radius, mode="edge")
    acc = np.zeros_like(img)
    wacc = np.zeros_like(img)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            shifted = padded[radius + di:radius + di + h, radius + dj:radius + dj + w]
            ws = np.exp(-0.5 * (di * di + dj * dj) / sigma_space ** 2)
            wr = np.exp(-0.5 * ((shifted - img) / sigma_range) ** 2)
            weight = ws * wr
            acc += weight * shifted
            wacc += weight
    return np.clip(acc / wacc, 0.0, 255.0)


LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])


def laplacian_sharpen(img: np.ndarray, strength: float = 0.5) -> np.ndarray:
    img = _check_image(img)
    if strength < 0:
        raise ValueError("strength must be non-negative")
    return np.clip(img - strength * _correlate(img, LAPLACIAN), 0.0, 255.0)


def median_filter(img: np.ndarray, window: int = 3) -> np.ndarray:
    img = _check_image(img)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    radius = window // 2
    h, w = img.shape
    padded = np.pad(img, radius, mode="edge")
    stack = np.stack([padded[i:i + h, j:j + w]
                      for i in range(window) for j in range(window)])
    return np.median(stack, axis=0)


def clahe(img: np.ndarray, clip_limit: float = 2.0,
          tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per-tile clipped-histogram CDF mappings, bilinearly interpolated between
    tile centers. Each tile's mapping is monotone non-decreasing.
    """
    img = _check_image(img)
    if clip_limit <= 0:
        raise ValueError("clip_limit must be positive")
    ty, tx = tiles
    h, w = img.shape
    if ty < 1 or tx < 1 or h < ty or w < tx:
        raise ValueError(f"tile grid {tiles} invalid for image {img.shape}")
    q = np.clip(np.round(img), 0, 255).astype(np.int64)
    y_edges = np.linspace(0, h, ty + 1).astype(int)
    x_edges = np.linspace(0, w, tx + 1).astype(int)
    maps = np.zeros((ty, tx, 256))
    centers_y = np.zeros(ty)
    centers_x = np.zeros(tx)
    for a in range(ty):
        centers_y[a] = 0.5 * (y_edges[a] + y_edges[a + 1]) - 0.5
        for b in range(tx):
            centers_x[b] = 0.5 * (x_edges[b] + x_edges[b + 1]) - 0.5
            tile = q[y_edges[a]:y_edges[a + 1], x_edges[b]:x_edges[b + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            clip = clip_limit * tile.size / 256.0
            excess = np.maximum(hist - clip, 0.0).sum()
            hist = np.minimum(hist, clip) + excess / 256.0
            cdf = np.cumsum(hist) / tile.size
            maps[a, b] = 255.0 * cdf
    # fractional tile coordinates per pixel, clamped to the center lattice
    fy = np.interp(np.arange(h), centers_y, np.arange(ty))
    fx = np.interp(np.arange(w), centers_x, np.arange(tx))
    y0 = np.clip(np.floor(fy).astype(int), 0, ty - 1)
    x0 = np.clip(np.floor(fx).astype(int), 0, tx - 1)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    yy0, yy1 = y0[:, None], y1[:, None]
    xx0, xx1 = x0[None, :], x1[None, :]
    m00 = maps[yy0, xx0, q]
    m01 = maps[yy0, xx1, q]
    m10 = maps[yy1, xx0, q]
    m11 = maps[yy1, xx1, q]
    out = ((1 - wy) * ((1 - wx) * m00 + wx * m01)
           + wy * ((1 - wx) * m10 + wx * m11))
    return np.clip(out, 0.0, 255.0)


def threshold_suppress(img: np.ndarray, floor: float = 20.0) -> np.ndarray:
    """Zero out weak background responses below `floor`."""
    img = _check_image(img)
    if not 0.0 <= floor <= 255.0:
        raise ValueError(f"floor must be in [0,255], got {floor}")
    return np.where(img >= floor, img, 0.0)


def preprocess_optical(img: np.ndarray, sigma_space: float = 3.0,
                       sigma_range: float = 25.0, sharpen: float = 0.5) -> np.ndarray:
    """Optical pipeline: edge-preserving smoothing, then contour sharpening."""
    return laplacian_sharpen(bilateral_filter(img, sigma_space, sigma_range), sharpen)


def preprocess_sar(img: np.ndarray, median_window: int = 3, clip_limit: float = 2.0,
                   tiles: tuple[int, int] = (8, 8), floor: float = 20.0) -> np.ndarray:
    """SAR pipeline: despeckle, equalize scattering centers, suppress background."""
    return threshold_suppress(clahe(median_filter(img, median_window), clip_limit, tiles), floor)


# ---- grayscale conversion and PNG IO ---------------------------------------

def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def load_image(path) -> np.ndarray:
    """PNG -> float array in [0,255]; HxW for gray, HxWx3 for RGB."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16"):
            return np.asarray(im.convert("L"), dtype=np.float64)
        return np.asarray(im.convert("RGB"), dtype=np.float64)


def save_image(path, img: np.ndarray):
    arr = np.clip(np.round(img), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask(path, mask: np.ndarray):
    save_image(path, mask * 255.0)


def load_mask(path) -> np.ndarray:
    return (load_image(path) > 127).astype(np.float64)
