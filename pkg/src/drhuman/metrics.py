"""Image and mask metrics: SSIM, MSE (0-255 scale) and IoU."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ._validation import InvariantError, as_array, check_binary, check_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img) -> np.ndarray:
    """H×W luma from a 3×H×W, 1×H×W or H×W image."""
    arr = as_array(img)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[0] == 1:
        return arr[0]
    if arr.ndim == 3 and arr.shape[0] == 3:
        return np.tensordot(LUMA, arr, axes=(0, 0))
    raise InvariantError(f"expected an H×W, 1×H×W or 3×H×W image, got {arr.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Mean SSIM over all full 11×11 Gaussian windows of the grayscale images."""
    check_same_shape(a, b, "images")
    x, y = to_gray(a), to_gray(b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InvariantError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
                             "SSIM window")
    win = gaussian_window()

    def filt(z):
        return ndimage.correlate(z, win, mode="constant")[5:-5, 5:-5]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def mse(a, b) -> float:
    """Mean squared difference on the 0-255 scale (inputs are in [0, 1])."""
    check_same_shape(a, b, "images")
    d = as_array(a) - as_array(b)
    return float(np.mean(d * d) * 255.0 ** 2)


def iou(a, b) -> float:
    """``|a & b| / |a | b|`` of binary masks; two empty masks give 1."""
    check_same_shape(a, b, "masks")
    x = check_binary(a, "mask").astype(bool)
    y = check_binary(b, "mask").astype(bool)
    union = np.count_nonzero(x | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(x & y) / union
