"""
Module for the edge detection network: parameter store, initialisation and the forward pass of the
three-block backbone, the three upsampling heads and the double fusion head.
"""
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import GradTape, Tensor
from .utils.config import ModelConfig
from .utils.errors import ContractError
from .utils.layer_table import layer_table, param_shapes
from .utils.resample import resize_bilinear, scaled_size
from .utils.utils import INPUT_MULTIPLE, MIN_INPUT_SIDE


class ParamStore(Mapping):
    """Ordered, immutable map parameter name -> Tensor for one ModelConfig.
    Names and shapes always equal the pinned layer table.

    Args:
        tensors (dict): name -> Tensor
        config (ModelConfig, optional): Defaults to ModelConfig().
    """

    def __init__(self, tensors: dict, config: ModelConfig = None):
        self.config = (config or ModelConfig()).validate()
        shapes = param_shapes(self.config)
        missing = [n for n in shapes if n not in tensors]
        extra = [n for n in tensors if n not in shapes]
        if missing or extra:
            raise ContractError(f"ParamStore names differ from the layer table: missing {missing}, unexpected {extra}")
        self._tensors = {}
        for name, shape in shapes.items():
            t = tensors[name]
            t = t if isinstance(t, Tensor) else Tensor(t)
            if t.shape != shape:
                raise ContractError(f"Parameter '{name}' has shape {t.shape}, expected {shape}")
            self._tensors[name] = t
        if len({t.dtype for t in self._tensors.values()}) != 1:
            raise ContractError("All parameters must share one storage dtype")

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._tensors.values())).dtype

    def count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def replace(self, updates: dict) -> "ParamStore":
        """New store with some tensors swapped out"""
        merged = dict(self._tensors)
        merged.update(updates)
        return ParamStore(merged, self.config)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: t.astype(dtype) for n, t in self._tensors.items()}, self.config)

    def equals(self, other: "ParamStore") -> bool:
        """bit-exact comparison"""
        return (self.config == other.config and list(self) == list(other) and
                all(self[n].dtype == other[n].dtype and np.array_equal(self[n].data, other[n].data) for n in self))


@dataclass(frozen=True)
class EdgeMapSet:
    """The three upsampler maps and the fused map, each 1 x H x W (or N x 1 x H x W) in (0, 1)"""
    y1: Tensor
    y2: Tensor
    y3: Tensor
    dfuse: Tensor

    @property
    def maps(self) -> tuple:
        return (self.y1, self.y2, self.y3, self.dfuse)

    @property
    def height(self) -> int:
        return self.dfuse.shape[-2]

    @property
    def width(self) -> int:
        return self.dfuse.shape[-1]

    def average(self) -> np.ndarray:
        """mean of the four maps"""
        return np.mean([m.data.astype(np.float64) for m in self.maps], axis=0)


def build(config: ModelConfig = None, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Initialise all kernels Xavier-uniform and all biases to zero.

    Args:
        config (ModelConfig, optional): Defaults to ModelConfig().
        seed (int, optional): Defaults to 0.
        dtype (optional): storage precision. Defaults to np.float32.

    Returns:
        ParamStore: deterministic given (config, seed, dtype)
    """
    config = (config or ModelConfig()).validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for spec in layer_table(config):
        fan_in, fan_out = spec.fans()
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{spec.name}.weight"] = Tensor(rng.uniform(-bound, bound, size=spec.weight_shape), dtype=dtype)
        tensors[f"{spec.name}.bias"] = Tensor(np.zeros(spec.bias_shape), dtype=dtype)
    return ParamStore(tensors, config)

def count_params(params: ParamStore) -> int:
    return params.count()


def dfuse_head(params: ParamStore, maps: list, tape: GradTape = None) -> Tensor:
    """Double fusion of the three upsampler maps.

    Args:
        params (ParamStore): parameters
        maps (list): three N x 1 x H x W sigmoid maps
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: N x 1 x H x W fused map
    """
    def dwconv(name, t):
        return nx.depthwise_conv2d(t, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, padding=1, tape=tape)

    stacked = nx.smish(nx.concat(maps, tape=tape), tape=tape)
    a = dwconv("dfuse.dwconv1", stacked)
    b = dwconv("dfuse.dwconv2", nx.smish(a, tape=tape))
    fused = nx.smish(nx.channel_sum(nx.add(a, b, tape=tape), tape=tape), tape=tape)
    return nx.sigmoid(fused, tape=tape)


def forward(params: ParamStore, image: Tensor, tape: GradTape = None) -> EdgeMapSet:
    """Run the network on one image (3 x H x W) or a batch (N x 3 x H x W).
    Inputs whose sides are not multiples of 4 are reflect-padded and the maps cropped back.

    Args:
        params (ParamStore): parameters
        image (Tensor): input in [0, 1]
        tape (GradTape, optional): records the pass for backward() and watches params. Defaults to None.

    Returns:
        EdgeMapSet: four maps with the input's height and width
    """
    single = image.ndim == 3
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ContractError(f"forward: expected a 3-channel image (3 x H x W or N x 3 x H x W), got shape {image.shape}")
    H, W = image.shape[-2:]
    if H < MIN_INPUT_SIDE or W < MIN_INPUT_SIDE:
        raise ContractError(f"forward: input sides must be >= {MIN_INPUT_SIDE}, got {H}x{W}")
    if tape is not None:
        tape.watch(params)

    def conv(name, t, stride=1, padding=0):
        return nx.conv2d(t, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding, tape=tape)

    def deconv(name, t):
        return nx.conv_transpose2d(t, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, tape=tape)

    def act(t):
        return nx.smish(t, tape=tape)

    x = nx.reshape(image, (1, *image.shape), tape=tape) if single else image
    pad_h, pad_w = (-H) % INPUT_MULTIPLE, (-W) % INPUT_MULTIPLE
    if pad_h or pad_w:
        x = nx.pad_reflect(x, pad_h, pad_w, tape=tape)

    # Block 1 (H/2)
    h = act(conv("block1.conv1", x, stride=2, padding=1))
    h1 = act(conv("block1.conv2", h, padding=1))

    # Block 2 (H/2)
    h = act(conv("block2.conv1", h1, padding=1))
    h2 = act(conv("block2.conv2", h, padding=1))

    # skip1: project h1, add, pool (H/4)
    s1 = nx.maxpool2d(nx.add(conv("skip1.proj", h1), h2, tape=tape), 2, 2, tape=tape)

    # Block 3 (H/4), block3.2 input is the mean of block3.1 and the projected pooled h2
    b31 = act(conv("block3.conv1", s1, padding=1))
    s2 = conv("skip2.proj", nx.maxpool2d(h2, 2, 2, tape=tape))
    h3 = act(conv("block3.conv2", nx.scale(nx.add(b31, s2, tape=tape), 0.5, tape=tape), padding=1))

    # Upsamplers
    y1 = nx.sigmoid(deconv("usnet1.deconv", act(conv("usnet1.conv", h1))), tape=tape)
    y2 = nx.sigmoid(deconv("usnet2.deconv", act(conv("usnet2.conv", h2))), tape=tape)
    u = deconv("usnet3.deconv1", act(conv("usnet3.conv1", h3)))
    y3 = nx.sigmoid(deconv("usnet3.deconv2", act(conv("usnet3.conv2", u))), tape=tape)

    yd = dfuse_head(params, [y1, y2, y3], tape=tape)

    maps = []
    for y in (y1, y2, y3, yd):
        if pad_h or pad_w:
            y = nx.crop(y, H, W, tape=tape)
        if single:
            y = nx.reshape(y, (1, H, W), tape=tape)
        maps.append(y)
    return EdgeMapSet(*maps)


def predict_maps(params: ParamStore, image, input_scale: float = None) -> EdgeMapSet:
    """Inference at the configured input scale: the image is bilinearly resized by input_scale
    (1.5 for TEEDup), run through the network and every map resized back to the original size.

    Args:
        params (ParamStore): parameters
        image (np.ndarray or Tensor): 3 x H x W image in [0, 1]
        input_scale (float, optional): Defaults to params.config.input_scale.

    Returns:
        EdgeMapSet: 1 x H x W maps
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    factor = params.config.input_scale if input_scale is None else input_scale
    H, W = arr.shape[-2:]
    if factor == 1.0:
        return forward(params, Tensor(arr, dtype=params.dtype))

    sh, sw = scaled_size(H, W, factor)
    out = forward(params, Tensor(resize_bilinear(arr, sh, sw), dtype=params.dtype))
    return EdgeMapSet(*[Tensor(resize_bilinear(m.data, H, W), dtype=params.dtype) for m in out.maps])
