"""
Module for loading image / ground truth pairs, the ground truth transform, training augmentation,
batching and the IQR-based curation of evaluation images.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from .numerics import Tensor, get_default_dtype
from .utils.config import AugmentConfig
from .utils.errors import ContractError, DataError
from .utils.image_io import IMAGE_EXTENSIONS, Converter, list_images
from .utils.resample import pad_to_min_size, rotate_reflect
from .utils.utils import GT_OFFSET, GT_THRESHOLD, LUMA_WEIGHTS, MAX_CURATION_SIDE, derive_rng, num_threads, round_half_up


@dataclass(frozen=True)
class Sample:
    """Image (3 x H x W) and optional ground truth (1 x H x W), both in [0, 1]"""
    image: Tensor
    gt: Tensor = None
    id: str = ""
    source: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ContractError(f"Sample image must be 3 x H x W, got {self.image.shape}")
        if self.gt is not None and self.gt.shape != (1, *self.image.shape[1:]):
            raise DataError(f"Sample '{self.id}': gt shape {self.gt.shape} does not match image {self.image.shape}")


@dataclass(frozen=True)
class Batch:
    images: Tensor # N x 3 x H x W
    gts: Tensor # N x 1 x H x W
    ids: list


@dataclass(frozen=True)
class DatasetManifest:
    """List of (image path, gt path) pairs of one split"""
    root: str
    pairs: list
    split: str = "train"

    def __len__(self):
        return len(self.pairs)

    def check(self) -> "DatasetManifest":
        missing = [p for pair in self.pairs for p in pair if p and not os.path.isfile(p)]
        if missing:
            raise DataError(f"{len(missing)} manifest files do not exist, e.g. {missing[:3]}")
        return self

    @classmethod
    def from_directory(cls, root: str, split: str = "train") -> "DatasetManifest":
        """Pair <root>/imgs/<split>/<name>.png|jpg with <root>/edge_maps/<split>/<name>.png

        Args:
            root (str): dataset root
            split (str, optional): Defaults to "train".

        Returns:
            DatasetManifest: checked manifest
        """
        img_dir = os.path.join(root, "imgs", split)
        gt_dir = os.path.join(root, "edge_maps", split)
        gts = {Path(p).stem: p for p in list_images(gt_dir)}
        pairs, unmatched = [], []
        for img in list_images(img_dir):
            stem = Path(img).stem
            if stem in gts:
                pairs.append((img, gts[stem]))
            else:
                unmatched.append(stem)
        if unmatched:
            print(f"{len(unmatched)} images in {img_dir} have no edge map, skipping them")
        return cls(root=root, pairs=pairs, split=split).check()

    @classmethod
    def from_csv(cls, fn: str, split: str = "train") -> "DatasetManifest":
        """Read a two-column CSV (image_path, gt_path); relative paths are relative to the CSV"""
        df = pd.read_csv(fn)
        if list(df.columns[:2]) != ["image_path", "gt_path"]:
            raise DataError(f"Manifest {fn} must have columns image_path,gt_path, got {list(df.columns)}")
        base = os.path.dirname(os.path.abspath(fn))
        pairs = [(os.path.join(base, i), os.path.join(base, g)) for i, g in zip(df["image_path"], df["gt_path"])]
        return cls(root=base, pairs=pairs, split=split).check()


def load_sample(image_path: str, gt_path: str = None, source: str = "") -> Sample:
    """Read an image and optionally its edge map, scaled to [0, 1]

    Args:
        image_path (str): 8/16-bit PNG or JPEG, colour or grayscale
        gt_path (str, optional): single-channel edge map. Defaults to None.
        source (str, optional): dataset tag. Defaults to "".

    Returns:
        Sample: with id = image file stem
    """
    dtype = get_default_dtype()
    image = Tensor(Converter(image_path).image_to_array(), dtype=dtype)
    gt = None
    if gt_path:
        gt = Tensor(Converter(gt_path).edge_map_to_array(), dtype=dtype)
        if gt.shape[1:] != image.shape[1:]:
            raise DataError(f"Image {image_path} is {image.shape[1:]} but its edge map {gt_path} is {gt.shape[1:]}")
    return Sample(image=image, gt=gt, id=Path(image_path).stem, source=source)


def transform_gt(gt):
    """g' = clip(g + 0.2 * [g > 0.1], 0, 1). Returns the type it is given (Tensor or array)."""
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    out = np.clip(arr + GT_OFFSET * (arr > GT_THRESHOLD), 0.0, 1.0)
    return Tensor(out, dtype=gt.dtype) if isinstance(gt, Tensor) else out


def hflip(sample: Sample) -> Sample:
    return replace(sample, image=Tensor(sample.image.data[:, :, ::-1]),
                   gt=None if sample.gt is None else Tensor(sample.gt.data[:, :, ::-1]))

def augment(sample: Sample, seed, config: AugmentConfig = None) -> Sample:
    """Random training transform: horizontal flip, quarter turn, small rotation with reflective fill,
    random crop (reflect-padding small images first) and random gamma on the image. The same geometry is
    applied to image and gt; gt values <= 0.1 are then zeroed and transform_gt applied.

    Args:
        sample (Sample): training sample with gt
        seed (int or tuple): seed, or (seed, epoch, index) key
        config (AugmentConfig, optional): Defaults to AugmentConfig().

    Returns:
        Sample: crop_size x crop_size sample
    """
    config = (config or AugmentConfig()).validate()
    if sample.gt is None:
        raise ContractError(f"augment: sample '{sample.id}' has no gt")
    rng = derive_rng(*seed) if isinstance(seed, (tuple, list)) else derive_rng(seed)

    # draw every random number up front so the stream never depends on image content
    flip = rng.random() < config.hflip_p
    turns = int(rng.integers(4)) if config.rot90 else 0
    angle = float(rng.uniform(-config.max_angle, config.max_angle)) if config.max_angle > 0 else 0.0
    crop_u, crop_v = rng.random(), rng.random()
    gamma = float(rng.uniform(*config.gamma_range))

    img = sample.image.data.astype(np.float64)
    gt = sample.gt.data.astype(np.float64)
    if flip:
        img, gt = img[:, :, ::-1], gt[:, :, ::-1]
    img, gt = np.rot90(img, turns, axes=(1, 2)), np.rot90(gt, turns, axes=(1, 2))
    img, gt = rotate_reflect(img, angle), rotate_reflect(gt, angle)

    cs = config.crop_size
    img, gt = pad_to_min_size(img, cs), pad_to_min_size(gt, cs)
    H, W = img.shape[1:]
    if cs > H or cs > W:
        raise ContractError(f"augment: crop {cs} larger than padded image {H}x{W}")
    top, left = int(crop_u * (H - cs + 1)), int(crop_v * (W - cs + 1))
    img = img[:, top:top + cs, left:left + cs]
    gt = gt[:, top:top + cs, left:left + cs].copy()

    img = np.clip(img, 0.0, 1.0) ** gamma
    gt[gt <= GT_THRESHOLD] = 0.0
    gt = transform_gt(np.clip(gt, 0.0, 1.0))

    dtype = sample.image.dtype
    return replace(sample, image=Tensor(img, dtype=dtype), gt=Tensor(gt, dtype=dtype))


def batches(manifest: DatasetManifest, batch_size: int = 8, seed: int = 0, epoch: int = 0, config: AugmentConfig = None,
            augment_samples: bool = True):
    """Stream of batches for one epoch. The order is a permutation drawn from (seed, epoch) and every
    sample's augmentation from (seed, epoch, index), so results do not depend on the worker count.
    The last batch is kept even if smaller.

    Args:
        manifest (DatasetManifest): training pairs
        batch_size (int, optional): Defaults to 8.
        seed (int, optional): Defaults to 0.
        epoch (int, optional): Defaults to 0.
        config (AugmentConfig, optional): Defaults to AugmentConfig().
        augment_samples (bool, optional): if False only transform_gt is applied. Defaults to True.

    Yields:
        Batch: stacked images and transformed gts
    """
    if len(manifest) == 0:
        raise DataError("Cannot batch an empty manifest")
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = [int(i) for i in derive_rng(seed, epoch).permutation(len(manifest))]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    def prepare(idx):
        img_fn, gt_fn = manifest.pairs[idx]
        sample = load_sample(img_fn, gt_fn, source=manifest.split)
        if augment_samples:
            return augment(sample, (seed, epoch, idx), config)
        return replace(sample, gt=transform_gt(sample.gt))

    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        pending = [pool.submit(prepare, i) for i in chunks[0]]
        for c in range(len(chunks)):
            samples = [f.result() for f in pending]
            if c + 1 < len(chunks):
                pending = [pool.submit(prepare, i) for i in chunks[c + 1]]
            yield _stack(samples)

def _stack(samples: list) -> Batch:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"Cannot stack samples of different sizes {sorted(shapes)}; enable augmentation cropping")
    dtype = samples[0].image.dtype
    return Batch(images=Tensor(np.stack([s.image.data for s in samples]), dtype=dtype),
                 gts=Tensor(np.stack([s.gt.data for s in samples]), dtype=dtype),
                 ids=[s.id for s in samples])


def image_iqr(image: np.ndarray) -> float:
    """Inter-quartile range (linear-interpolated quartiles) of the 0-255 luma of a 3 x H x W [0, 1] image"""
    arr = np.asarray(image, dtype=np.float64)
    luma = np.tensordot(np.asarray(LUMA_WEIGHTS), arr, axes=(0, 0)) * 255.0
    q1, q3 = np.percentile(luma, [25, 75])
    return float(q3 - q1)

def iqr_select(images: list, k: int, max_side: int = MAX_CURATION_SIDE, quiet: bool = False) -> pd.DataFrame:
    """Select k images spread uniformly over the IQR-sorted list of eligible images.

    Images with a side above max_side are discarded; the rest are sorted ascending by luma IQR
    (ties keep input order) and indices round(j * (n - 1) / (k - 1)), j = 0..k-1 are picked
    (index round((n - 1) / 2) when k = 1).

    Args:
        images (list): (id, 3 x H x W array) pairs or Samples
        k (int): number of images to select
        max_side (int, optional): Defaults to 720.
        quiet (bool, optional): disable the progress bar. Defaults to False.

    Returns:
        pd.DataFrame: columns id, iqr, rank (position in the sorted eligible list)
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    rows = []
    for item in tqdm(images, disable=quiet):
        image_id, arr = (item.id, item.image.data) if isinstance(item, Sample) else item
        if arr.shape[-2] > max_side or arr.shape[-1] > max_side:
            continue
        rows.append({"id": image_id, "iqr": image_iqr(arr)})
    if not rows:
        raise DataError(f"No image has both sides <= {max_side}")
    if k > len(rows):
        raise DataError(f"Asked for {k} images but only {len(rows)} are eligible")

    ranked = pd.DataFrame(rows).sort_values("iqr", kind="stable").reset_index(drop=True)
    n = len(ranked)
    picks = [round_half_up((n - 1) / 2)] if k == 1 else [round_half_up(j * (n - 1) / (k - 1)) for j in range(k)]
    out = ranked.iloc[picks].copy()
    out["rank"] = picks
    return out.reset_index(drop=True)[["id", "iqr", "rank"]]

def curate_directory(folder: str, k: int, max_side: int = MAX_CURATION_SIDE, quiet: bool = False) -> pd.DataFrame:
    """iqr_select over the images of a folder, skipping oversized files before decoding them"""
    paths = list_images(folder)
    if not paths:
        raise DataError(f"No {'/'.join(IMAGE_EXTENSIONS)} images in {folder}")
    eligible = []
    for p in paths:
        h, w = Converter(p).size()
        if h <= max_side and w <= max_side:
            eligible.append(p)
    print(f"{len(eligible)} of {len(paths)} images are at most {max_side}x{max_side}")
    if k > len(eligible):
        raise DataError(f"Asked for {k} images but only {len(eligible)} are eligible")
    loaded = ((Path(p).stem, Converter(p).image_to_array()) for p in eligible)
    return iqr_select(list(loaded), k, max_side=max_side, quiet=quiet)
