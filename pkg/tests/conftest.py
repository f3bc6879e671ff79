import os

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from teed import numerics as nx
from teed.numerics import GradTape, Tensor, backward
from teed.utils import utils


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")

def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test, needs --runslow")

def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

@pytest.fixture
def float64():
    """Tensors built from non-float data are stored as float64 for the duration of a test"""
    previous = nx.get_default_dtype()
    nx.set_default_dtype(np.float64)
    yield
    nx.set_default_dtype(previous)


#########################
### GRADIENT CHECKING ###
#########################

def check_gradients(fn, inputs: dict, rng, n_samples=6, h=1e-6, rtol=1e-4):
    """Compare backward() with central differences on a random projection of fn's output.

    fn(inputs: dict name -> Tensor, tape) -> Tensor. A few random entries of every input are checked.
    """
    weights = rng.standard_normal(fn(inputs, None).shape)

    def loss_value(values):
        out = fn({k: Tensor(v, dtype=np.float64) for k, v in values.items()}, None)
        return float(np.sum(out.data.astype(np.float64) * weights))

    tape = GradTape()
    tape.watch(inputs)
    out = fn(inputs, tape)
    loss = nx.sum(nx.mul(out, Tensor(weights, dtype=out.dtype), tape=tape), tape=tape)
    grads = backward(tape, loss)

    for name, t in inputs.items():
        base = t.numpy()
        picks = rng.choice(base.size, size=min(n_samples, base.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, base.shape)
            values = {k: v.numpy() for k, v in inputs.items()}
            values[name] = base.copy()
            values[name][idx] += h
            f_plus = loss_value(values)
            values[name][idx] -= 2 * h
            f_minus = loss_value(values)
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(grads[name].data[idx])
            assert abs(numeric - analytic) <= rtol * max(1.0, abs(numeric), abs(analytic)), \
                f"{name}{idx}: analytic {analytic} vs numeric {numeric}"
    return grads


######################
### SYNTHETIC DATA ###
######################

def write_png(fn: str, arr: np.ndarray) -> None:
    """Save a [0, 1] array (H x W or 3 x H x W) as an 8-bit PNG"""
    arr = np.asarray(arr)
    os.makedirs(os.path.dirname(fn), exist_ok=True)
    pixels = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    if pixels.ndim == 3:
        Image.fromarray(pixels.transpose(1, 2, 0)).save(fn)
    else:
        Image.fromarray(pixels).save(fn)

def rectangle_sample(size: int, rng) -> tuple:
    """(3 x size x size image with a filled rectangle, size x size gt with its closed 1-px outline)"""
    h, w = rng.integers(size // 4, size // 2, size=2)
    top, left = rng.integers(2, size - max(h, w) - 2, size=2)
    fill = rng.uniform(0.6, 0.9, size=3)
    image = np.full((3, size, size), 0.1)
    image[:, top:top + h, left:left + w] = fill[:, None, None]
    gt = np.zeros((size, size))
    gt[top, left:left + w] = gt[top + h - 1, left:left + w] = 1.0
    gt[top:top + h, left] = gt[top:top + h, left + w - 1] = 1.0
    return image, gt

def ellipse_sample(size: int, rng) -> tuple:
    """(3 x size x size image with an anti-aliased filled ellipse, size x size gt with its closed 1-px outline)"""
    cy, cx = rng.uniform(0.4 * size, 0.6 * size, size=2)
    ry, rx = rng.uniform(size / 8, size / 4, size=2)
    fill = rng.uniform(0.6, 0.9, size=3)
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    # 4 x 4 supersampling per pixel
    offsets = (np.arange(4) + 0.5) / 4 - 0.5
    coverage = np.zeros((size, size))
    for dy in offsets:
        for dx in offsets:
            coverage += ((rows + dy - cy) / ry) ** 2 + ((cols + dx - cx) / rx) ** 2 <= 1.0
    coverage /= offsets.size ** 2
    image = 0.1 + (fill[:, None, None] - 0.1) * coverage[None]
    inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    gt = (inside & ~ndimage.binary_erosion(inside)).astype(float)
    return image, gt

@pytest.fixture
def make_dataset(tmp_path):
    """Factory writing n rectangle images + outlines under <root>/imgs/<split> and <root>/edge_maps/<split>"""

    def make(n=4, size=32, split="train", seed=0, name="data"):
        root = tmp_path / name
        gen = np.random.default_rng(seed)
        for i in range(n):
            image, gt = rectangle_sample(size, gen)
            write_png(str(root / "imgs" / split / f"img_{i:02d}.png"), image)
            write_png(str(root / "edge_maps" / split / f"img_{i:02d}.png"), gt)
        return str(root)

    return make


@pytest.fixture(autouse=True)
def _parallel_mode():
    yield
    utils.set_deterministic(False)
