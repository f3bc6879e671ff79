"""
Functions to resample images: bilinear resizing, rotations with reflective fill and padding to a minimum size.
All arrays are channels-major C x H x W.
"""
import numpy as np
from PIL import Image
from scipy import ndimage


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize every channel to height x width.

    Args:
        arr (np.ndarray): C x H x W array
        height (int): output height
        width (int): output width

    Returns:
        np.ndarray: C x height x width float64 array, values within the input's range
    """
    if arr.shape[1:] == (height, width):
        return np.asarray(arr, dtype=np.float64).copy()
    channels = [np.asarray(Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32))
                           .resize((width, height), Image.Resampling.BILINEAR), dtype=np.float64) for ch in arr]
    out = np.stack(channels, axis=0)
    return np.clip(out, arr.min(), arr.max())

def scaled_size(height: int, width: int, factor: float) -> tuple:
    return max(1, int(round(height * factor))), max(1, int(round(width * factor)))

def rotate_reflect(arr: np.ndarray, angle: float, order: int = 1) -> np.ndarray:
    """Rotate every channel by angle degrees about the centre, keeping the size and filling with reflections

    Args:
        arr (np.ndarray): C x H x W array
        angle (float): degrees, counter-clockwise
        order (int, optional): spline order, 1 is bilinear. Defaults to 1.

    Returns:
        np.ndarray: rotated array
    """
    if angle == 0:
        return arr.copy()
    out = ndimage.rotate(arr, angle, axes=(2, 1), reshape=False, order=order, mode="reflect")
    return np.clip(out, arr.min(), arr.max())

def pad_to_min_size(arr: np.ndarray, size: int) -> np.ndarray:
    """Reflect-pad bottom/right so both sides are at least size"""
    ph, pw = max(0, size - arr.shape[1]), max(0, size - arr.shape[2])
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode="reflect")
