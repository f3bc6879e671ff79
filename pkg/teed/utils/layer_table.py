"""
Pinned list of the network's layers with their kernel and bias shapes
"""
from typing import NamedTuple

import numpy as np
import pandas as pd

from .config import ModelConfig
from .errors import ContractError


class LayerSpec(NamedTuple):
    name: str
    kind: str # "conv", "deconv" or "dwconv"
    weight_shape: tuple
    bias_shape: tuple

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape) + np.prod(self.bias_shape))

    def fans(self) -> tuple:
        """(fan_in, fan_out) used by Xavier initialisation"""
        rf = int(np.prod(self.weight_shape[2:]))
        if self.kind in ("conv", "deconv"):
            return self.weight_shape[1] * rf, self.weight_shape[0] * rf
        # depthwise: one input channel per filter
        return rf, self.weight_shape[0] * self.weight_shape[1] * rf


def layer_table(config: ModelConfig = None) -> list:
    """Layers of the network in forward order

    Args:
        config (ModelConfig, optional): Defaults to ModelConfig().

    Returns:
        list: LayerSpec per layer
    """
    config = (config or ModelConfig()).validate()
    c1, c2, c3 = (int(c) for c in config.block_channels)
    u3 = config.usnet3_width
    m = config.dfuse_multiplier

    def conv(name, cin, cout, k):
        return LayerSpec(name, "conv", (cout, cin, k, k), (cout,))

    def deconv(name, cin, cout, k=2):
        return LayerSpec(name, "deconv", (cin, cout, k, k), (cout,))

    def dwconv(name, cin, mult, k=3):
        return LayerSpec(name, "dwconv", (cin, mult, k, k), (cin * mult,))

    return [
        conv("block1.conv1", 3, c1, 3),
        conv("block1.conv2", c1, c1, 3),
        conv("block2.conv1", c1, c2, 3),
        conv("block2.conv2", c2, c2, 3),
        conv("skip1.proj", c1, c2, 1),
        conv("block3.conv1", c2, c3, 3),
        conv("skip2.proj", c2, c3, 1),
        conv("block3.conv2", c3, c3, 3),
        conv("usnet1.conv", c1, 1, 1),
        deconv("usnet1.deconv", 1, 1),
        conv("usnet2.conv", c2, 1, 1),
        deconv("usnet2.deconv", 1, 1),
        conv("usnet3.conv1", c3, u3, 1),
        deconv("usnet3.deconv1", u3, u3),
        conv("usnet3.conv2", u3, 1, 1),
        deconv("usnet3.deconv2", 1, 1),
        dwconv("dfuse.dwconv1", 3, m),
        dwconv("dfuse.dwconv2", 3 * m, 1),
    ]

def param_names(config: ModelConfig = None) -> list:
    """Parameter names in forward order: '<layer>.weight', '<layer>.bias'"""
    return [f"{spec.name}.{suffix}" for spec in layer_table(config) for suffix in ("weight", "bias")]

def param_shapes(config: ModelConfig = None) -> dict:
    shapes = {}
    for spec in layer_table(config):
        shapes[f"{spec.name}.weight"] = spec.weight_shape
        shapes[f"{spec.name}.bias"] = spec.bias_shape
    return shapes

def reverse_search(param_name: str, config: ModelConfig = None) -> LayerSpec:
    """Return the layer a parameter name belongs to e.g. 'block1.conv1.bias' -> LayerSpec of block1.conv1

    Args:
        param_name (str): parameter name

    Returns:
        LayerSpec: owning layer
    """
    layer = param_name.rsplit(".", 1)[0]
    for spec in layer_table(config):
        if spec.name == layer:
            return spec
    raise ContractError(f"Unknown parameter name {param_name!r}")

def layer_frame(config: ModelConfig = None) -> pd.DataFrame:
    """Layer table as a dataframe with name, kind, weight shape, bias shape and parameter count columns"""
    rows = [{"name": s.name, "kind": s.kind, "weight_shape": "x".join(map(str, s.weight_shape)),
             "bias_shape": "x".join(map(str, s.bias_shape)), "params": s.param_count} for s in layer_table(config)]
    return pd.DataFrame(rows, columns=["name", "kind", "weight_shape", "bias_shape", "params"])
