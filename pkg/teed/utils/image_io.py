"""
Conversion of image files to channels-major float arrays in [0, 1] and back to 8-bit PNG
"""
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

_SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I;16N", "I")


class Converter(object):
    """Converter holding one input image file"""

    def __init__(self, input_file=None):

        if not input_file:
            raise DataError("You need to provide an input file!")

        input_file_abs_path = os.path.abspath(input_file)
        if not os.path.isfile(input_file_abs_path):
            raise DataError(f"The file {input_file} does not exist.")

        self.input_file = input_file_abs_path
        self.input_extension = os.path.splitext(input_file)[1].lower()
        if self.input_extension not in IMAGE_EXTENSIONS:
            raise DataError(f"Unsupported image extension {self.input_extension!r} for {input_file}")

    def _open(self) -> Image.Image:
        try:
            img = Image.open(self.input_file)
            img.load()
        except (UnidentifiedImageError, OSError) as e:
            raise DataError(f"Cannot read image {self.input_file}: {e}") from e
        return img

    @staticmethod
    def _scale(arr: np.ndarray, mode: str) -> np.ndarray:
        if mode in _SIXTEEN_BIT_MODES or arr.dtype == np.uint16:
            return arr.astype(np.float64) / 65535.0
        if mode == "F":
            return np.clip(arr.astype(np.float64), 0.0, 1.0)
        return arr.astype(np.float64) / 255.0

    def image_to_array(self) -> np.ndarray:
        """
        convert an 8/16-bit colour or grayscale image to a 3 x H x W float array in [0, 1]
        grayscale inputs are replicated to 3 channels
        """
        img = self._open()
        if img.mode in ("L", "F") or img.mode in _SIXTEEN_BIT_MODES:
            gray = self._scale(np.asarray(img), img.mode)
            return np.repeat(gray[None], 3, axis=0)
        rgb = img.convert("RGB")
        return (np.asarray(rgb).astype(np.float64) / 255.0).transpose(2, 0, 1)

    def edge_map_to_array(self) -> np.ndarray:
        """
        convert a single-channel edge map to a 1 x H x W float array in [0, 1]
        colour edge maps are reduced to their luminance
        """
        img = self._open()
        if img.mode in ("L", "F") or img.mode in _SIXTEEN_BIT_MODES:
            return self._scale(np.asarray(img), img.mode)[None]
        return (np.asarray(img.convert("L")).astype(np.float64) / 255.0)[None]

    def size(self) -> tuple:
        """(height, width) without decoding pixel data"""
        try:
            with Image.open(self.input_file) as img:
                return img.height, img.width
        except (UnidentifiedImageError, OSError) as e:
            raise DataError(f"Cannot read image {self.input_file}: {e}") from e


def quantize(edge: np.ndarray) -> np.ndarray:
    """map [0, 1] values to uint8 with round(255 * v)"""
    return np.clip(np.round(np.asarray(edge, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)

def write_edge_png(edge: np.ndarray, fn: str) -> None:
    """Save an edge map (H x W or 1 x H x W, values in [0, 1]) as an 8-bit grayscale PNG

    Args:
        edge (np.ndarray): edge map
        fn (str): output filename
    """
    edge = np.asarray(edge)
    if edge.ndim == 3:
        edge = edge[0]
    os.makedirs(os.path.dirname(os.path.abspath(fn)), exist_ok=True)
    Image.fromarray(quantize(edge)).save(fn)

def list_images(folder: str) -> list:
    """Sorted image paths directly inside folder"""
    if not os.path.isdir(folder):
        raise DataError(f"Not a directory: {folder}")
    return sorted(os.path.join(folder, f) for f in os.listdir(folder) if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS)
