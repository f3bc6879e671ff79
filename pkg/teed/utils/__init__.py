from .config import ModelConfig, LossConfig, AdamConfig, AugmentConfig, RunConfig
from .errors import *
from .layer_table import layer_table, param_names, reverse_search
