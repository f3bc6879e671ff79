"""
Adam with decoupled weight decay and the two-stage learning rate schedule
"""
from dataclasses import dataclass, replace

import numpy as np

from .architecture import ParamStore
from .numerics import Tensor
from .utils.config import AdamConfig
from .utils.errors import ContractError, NonFiniteError
from .utils.layer_table import reverse_search


@dataclass(frozen=True)
class OptimState:
    """First/second moments (float64, parameter shaped), step counter and hyperparameters"""
    m: dict
    v: dict
    step: int = 0
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-4

    def with_lr(self, lr: float) -> "OptimState":
        return replace(self, lr=float(lr))


def init_state(params: ParamStore, config: AdamConfig = None) -> OptimState:
    """Zero moments for every parameter

    Args:
        params (ParamStore): parameters to optimise
        config (AdamConfig, optional): Defaults to AdamConfig().

    Returns:
        OptimState: state at step 0
    """
    config = (config or AdamConfig()).validate()
    zeros = {n: Tensor(np.zeros(t.shape), dtype=np.float64) for n, t in params.items()}
    return OptimState(m=zeros, v=dict(zeros), step=0, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                      eps=config.eps, weight_decay=config.weight_decay)


def adam_step(params: ParamStore, grads: dict, state: OptimState) -> tuple:
    """One bias-corrected Adam update with decoupled weight decay:
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta

    Args:
        params (ParamStore): current parameters
        grads (dict): name -> gradient Tensor, one per parameter
        state (OptimState): current state

    Returns:
        tuple: (updated ParamStore, updated OptimState)
    """
    missing = [n for n in params if n not in grads]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].data.astype(np.float64)
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            layer = reverse_search(name, params.config)
            raise NonFiniteError(f"adam_step: non-finite gradient for '{name}' of {layer.kind} layer {layer.name}", where=name)
        theta = p.data.astype(np.float64)
        m = b1 * state.m[name].data + (1.0 - b1) * g
        v = b2 * state.v[name].data + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = Tensor(theta - state.lr * update - state.lr * state.weight_decay * theta, dtype=p.dtype)
        new_m[name] = Tensor(m, dtype=np.float64)
        new_v[name] = Tensor(v, dtype=np.float64)

    return ParamStore(new_params, params.config), replace(state, m=new_m, v=new_v, step=t)


def lr_at_epoch(epoch: int, config: AdamConfig = None) -> float:
    """Step schedule, epochs counted from 0: lr before config.decay_epoch, lr_decayed from it on.
    Defaults give 8e-4 for epochs 0-4 and 8e-5 afterwards.
    """
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    config = config or AdamConfig()
    return config.lr if epoch < config.decay_epoch else config.lr_decayed
