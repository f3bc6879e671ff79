"""
Module for the training losses: class-balanced weighted cross entropy on the upsampler maps and the
tracing loss (weighted cross entropy + boundary overlap + texture suppression) on the fused map.

All losses take predictions shaped N x 1 x H x W, 1 x H x W or H x W, treat the leading axis as the
batch, sum over pixels and average over the batch.
"""
import numpy as np
from scipy import ndimage

from . import numerics as nx
from .architecture import EdgeMapSet
from .numerics import GradTape, Tensor
from .utils.config import LossConfig
from .utils.errors import ContractError


def _as_batch(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ContractError(f"{what} must have one channel, got shape {arr.shape}")
        return arr[:, 0]
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ContractError(f"{what} must have one channel, got shape {arr.shape}")
        return arr
    if arr.ndim == 2:
        return arr[None]
    raise ContractError(f"{what} must be H x W, 1 x H x W or N x 1 x H x W, got shape {arr.shape}")

def _prepare(pred: Tensor, gt, config: LossConfig) -> tuple:
    """Clamped predictions, gt and the in-range mask, all N x H x W float64"""
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"Prediction shape {pred.shape} differs from gt shape {gt.shape}")
    g = _as_batch(gt.astype(np.float64), "gt")
    if g.size and (g.min() < 0.0 or g.max() > 1.0):
        raise ContractError(f"gt values must lie in [0, 1], got range [{g.min()}, {g.max()}]")
    raw = _as_batch(pred.data.astype(np.float64), "prediction")
    p = np.clip(raw, config.eps, 1.0 - config.eps)
    inside = (raw > config.eps) & (raw < 1.0 - config.eps)
    return p, g, inside

def _class_weights(g: np.ndarray, config: LossConfig) -> tuple:
    """Per-sample (valid mask, positive weight, negative weight)"""
    pos = g >= config.gamma_hi
    neg = g <= config.gamma_lo
    valid = pos | neg
    n_valid = valid.sum(axis=(1, 2)).astype(np.float64)
    safe = np.maximum(n_valid, 1.0)
    w_pos = np.where(n_valid > 0, config.pos_weight * neg.sum(axis=(1, 2)) / safe, 0.0)
    w_neg = np.where(n_valid > 0, config.neg_weight * pos.sum(axis=(1, 2)) / safe, 0.0)
    return valid, w_pos[:, None, None], w_neg[:, None, None]

def _wce(p: np.ndarray, g: np.ndarray, config: LossConfig) -> tuple:
    """(per-sample loss, d loss_n / d p) of the weighted cross entropy"""
    valid, w_pos, w_neg = _class_weights(g, config)
    per_pixel = -(valid * (w_pos * g * np.log(p) + w_neg * (1.0 - g) * np.log(1.0 - p)))
    grad = -(valid * (w_pos * g / p - w_neg * (1.0 - g) / (1.0 - p)))
    return per_pixel.sum(axis=(1, 2)), grad

def band_masks(g: np.ndarray, config: LossConfig) -> tuple:
    """Split pixels of a N x H x W gt into edge, confusing (within Chebyshev radius of an edge) and non-edge masks"""
    edge = g >= config.gamma_hi
    size = (1, 2 * config.radius + 1, 2 * config.radius + 1)
    band = ndimage.maximum_filter(edge.astype(np.uint8), size=size, mode="constant", cval=0).astype(bool)
    return edge, band & ~edge, ~band

def _boundary(p: np.ndarray, g: np.ndarray, band: np.ndarray, eps: float) -> tuple:
    a = 2.0 * (band * p * g).sum(axis=(1, 2)) + eps
    b = (band * p).sum(axis=(1, 2)) + (band * g).sum(axis=(1, 2)) + eps
    loss = -np.log(a / b)
    grad = band * (-2.0 * g / a[:, None, None] + 1.0 / b[:, None, None])
    return loss, grad

def _texture(p: np.ndarray, non_edge: np.ndarray) -> tuple:
    count = non_edge.sum(axis=(1, 2)).astype(np.float64)
    safe = np.maximum(count, 1.0)[:, None, None]
    loss = (-(non_edge * np.log(1.0 - p))).sum(axis=(1, 2)) / safe[:, 0, 0]
    grad = non_edge / ((1.0 - p) * safe)
    return loss, grad

def _scalar_loss(op: str, pred: Tensor, per_sample: np.ndarray, grad: np.ndarray, inside: np.ndarray, tape: GradTape) -> Tensor:
    n = per_sample.shape[0]

    def vjp(g):
        return ((float(g) / n * grad * inside).reshape(pred.shape),)

    return nx.custom_op(op, (pred,), np.asarray(per_sample.mean()), vjp, tape)


def wce_loss(pred: Tensor, gt, config: LossConfig = None, tape: GradTape = None) -> Tensor:
    """Weighted cross entropy with an ignore band.

    Pixels with gamma_lo < gt < gamma_hi are ignored. Positives (gt >= gamma_hi) get weight
    pos_weight * #neg / #valid, negatives (gt <= gamma_lo) neg_weight * #pos / #valid, and the loss
    is the sum over valid pixels of -[w+ * gt * log p + w- * (1 - gt) * log(1 - p)] with p clamped
    to [eps, 1 - eps].

    Args:
        pred (Tensor): predictions in (0, 1)
        gt (Tensor or np.ndarray): ground truth in [0, 1], same shape
        config (LossConfig, optional): Defaults to LossConfig().
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: scalar, batch mean of the per-sample sums
    """
    config = (config or LossConfig()).validate()
    p, g, inside = _prepare(pred, gt, config)
    loss, grad = _wce(p, g, config)
    return _scalar_loss("wce_loss", pred, loss, grad, inside, tape)


def tracing_loss(pred: Tensor, gt, config: LossConfig = None, tape: GradTape = None) -> Tensor:
    """Weighted cross entropy plus w_bdr * boundary term plus w_tex * texture term.

    The boundary term is -log((2 * sum p*g + eps) / (sum p + sum g + eps)) over edge and confusing
    pixels; the texture term is the mean of -log(1 - p) over non-edge pixels.

    Args:
        pred (Tensor): fused predictions in (0, 1)
        gt (Tensor or np.ndarray): ground truth in [0, 1], same shape
        config (LossConfig, optional): Defaults to LossConfig().
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: scalar
    """
    config = (config or LossConfig()).validate()
    p, g, inside = _prepare(pred, gt, config)
    edge, confusing, non_edge = band_masks(g, config)

    loss, grad = _wce(p, g, config)
    if config.w_bdr:
        l_bdr, g_bdr = _boundary(p, g, edge | confusing, config.eps)
        loss, grad = loss + config.w_bdr * l_bdr, grad + config.w_bdr * g_bdr
    if config.w_tex:
        l_tex, g_tex = _texture(p, non_edge)
        loss, grad = loss + config.w_tex * l_tex, grad + config.w_tex * g_tex
    return _scalar_loss("tracing_loss", pred, loss, grad, inside, tape)


def dloss_terms(maps: EdgeMapSet, gt, config: LossConfig = None, tape: GradTape = None) -> tuple:
    """Double loss and its four terms

    Returns:
        tuple: (scalar Tensor, dict with float entries wce1, wce2, wce3, trcg)
    """
    config = (config or LossConfig()).validate()
    terms = [wce_loss(y, gt, config, tape=tape) for y in (maps.y1, maps.y2, maps.y3)]
    terms.append(tracing_loss(maps.dfuse, gt, config, tape=tape))
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t, tape=tape)
    return total, dict(zip(("wce1", "wce2", "wce3", "trcg"), (t.item() for t in terms)))

def dloss(maps: EdgeMapSet, gt, config: LossConfig = None, tape: GradTape = None) -> Tensor:
    """Sum of the weighted cross entropy of the three upsampler maps and the tracing loss of the fused map"""
    return dloss_terms(maps, gt, config, tape=tape)[0]
