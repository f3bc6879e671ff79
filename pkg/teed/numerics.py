"""
Module with the dense tensor type, the gradient tape and the forward/backward kernels
of every operation the edge detector uses.
"""
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .utils.errors import ContractError, NonFiniteError

ACC_DTYPE = np.float64 # accumulation precision of every kernel
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    """Storage precision for tensors built from non-float data (float32 for training, float64 for checks)"""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"Storage dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype

def get_default_dtype() -> np.dtype:
    return _default_dtype


class Tensor(object):
    """Immutable dense float array. Layout is channels-major: C x H x W, optionally with a leading batch axis N.

    Args:
        data (array-like): values
        dtype (optional): float32 or float64. Float input keeps its precision, anything else
            gets the default storage dtype.

    Raises:
        NonFiniteError: if any value is NaN or Inf
    """
    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        arr = np.array(arr, dtype=dtype, copy=True)
        self._data = _freeze(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out._data = _freeze(arr)
        return out

    @property
    def data(self) -> np.ndarray:
        """read-only view of the values"""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """writable copy of the values"""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in (np.float32, np.float64):
        raise ContractError(f"Tensor storage must be float32 or float64, got {arr.dtype}")
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"Non-finite value in tensor of shape {arr.shape}")
    if arr.flags.writeable:
        arr.setflags(write=False)
    return arr


class _Node(object):
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradTape(object):
    """Ordered record of the operations of one forward pass. Replayed once, in reverse, by backward().
    Tensors registered with watch() are the leaves gradients are reported for.
    """

    def __init__(self):
        self._nodes = []
        self._watched = {}
        self._consumed = False

    def watch(self, tensors: Mapping) -> None:
        """Register named leaf tensors (e.g. a ParamStore)"""
        for name, t in tensors.items():
            self._watched[name] = t

    def record(self, op: str, inputs: Sequence, output: Tensor, vjp: Callable) -> None:
        if self._consumed:
            raise ContractError("Cannot record on a consumed tape")
        self._nodes.append(_Node(op, tuple(inputs), output, vjp))

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def ops(self) -> list:
        return [n.op for n in self._nodes]

    def __len__(self):
        return len(self._nodes)


def custom_op(op: str, inputs: Sequence, value: np.ndarray, vjp: Callable, tape: GradTape = None) -> Tensor:
    """Wrap a value computed outside this module as the output of a recorded operation.

    Args:
        op (str): op name kept on the tape
        inputs (Sequence): input Tensors, in the order vjp returns their gradients
        value (np.ndarray): output values, stored in the dtype of the first input
        vjp (Callable): maps the output gradient to a tuple of input gradients (None for no gradient)
        tape (GradTape, optional): tape to record on. Defaults to None (no recording).

    Returns:
        Tensor: output tensor
    """
    out = Tensor._wrap(np.asarray(value, dtype=ACC_DTYPE).astype(inputs[0].dtype))
    if tape is not None:
        tape.record(op, inputs, out, vjp)
    return out


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Reverse replay of the tape.

    Args:
        tape (GradTape): tape of a single forward pass
        loss (Tensor): scalar output of that pass

    Returns:
        dict: name -> gradient Tensor for every watched tensor, zeros for ones the loss does not use
    """
    if tape.consumed:
        raise ContractError("backward: tape already consumed")
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape._consumed = True

    grads = {id(loss): np.ones(loss.shape, dtype=ACC_DTYPE)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if gi.shape != t.shape:
                raise ContractError(f"backward: '{node.op}' produced gradient {gi.shape} for input {t.shape}")
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    out = {}
    for name, t in tape._watched.items():
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=ACC_DTYPE)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"Non-finite gradient for '{name}'", where=name)
        out[name] = Tensor._wrap(g.astype(t.dtype))
    return out


########################
### HELPER FUNCTIONS ###
########################

def _acc(t: Tensor) -> np.ndarray:
    return t.data.astype(ACC_DTYPE, copy=False)

def _check_4d(t: Tensor, op: str, what="input") -> None:
    if t.ndim != 4:
        raise ContractError(f"{op}: {what} must be N x C x H x W, got shape {t.shape}")

def _check_bias(bias: Tensor, n: int, op: str) -> None:
    if bias.shape != (n,):
        raise ContractError(f"{op}: bias must have shape ({n},), got {bias.shape}")

def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """N x C x H' x W' x kh x kw view of all kernel windows"""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

def _check_geometry(H: int, W: int, kh: int, kw: int, stride: int, padding: int, op: str) -> None:
    if kh < 1 or kw < 1:
        raise ContractError(f"{op}: kernel size must be >= 1, got {kh}x{kw}")
    if stride < 1:
        raise ContractError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"{op}: padding must be >= 0, got {padding}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ContractError(f"{op}: padded input {H + 2 * padding}x{W + 2 * padding} smaller than kernel {kh}x{kw}")


###########################
### CONVOLUTION KERNELS ###
###########################

def conv2d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, tape: GradTape = None) -> Tensor:
    """2D cross-correlation (no kernel flip) with zero padding.

    Args:
        input (Tensor): N x C x H x W
        kernel (Tensor): F x C x k x k
        bias (Tensor): F
        stride (int, optional): Defaults to 1.
        padding (int, optional): zero padding on every side. Defaults to 0.
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: N x F x H' x W' with H' = floor((H + 2p - k) / stride) + 1
    """
    _check_4d(input, "conv2d")
    _check_4d(kernel, "conv2d", "kernel")
    N, C, H, W = input.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ContractError(f"conv2d: input {input.shape} has {C} channels but kernel {kernel.shape} expects {Ck}")
    _check_bias(bias, F, "conv2d")
    _check_geometry(H, W, kh, kw, stride, padding, "conv2d")

    k = _acc(kernel)
    xp = _pad(_acc(input), padding)
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) + _acc(bias)[None, :, None, None]

    def vjp(g):
        dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        db = g.sum(axis=(0, 2, 3))
        dxp = np.zeros(xp.shape, dtype=ACC_DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.einsum("nfhw,fc->nchw", g, k[:, :, i, j], optimize=True)
        dx = dxp[:, :, padding:padding + H, padding:padding + W]
        return dx, dk, db

    return custom_op("conv2d", (input, kernel, bias), out, vjp, tape)


def conv_transpose2d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, tape: GradTape = None) -> Tensor:
    """Transposed convolution, the adjoint of conv2d with the same geometry. No output padding.

    Args:
        input (Tensor): N x C x H x W
        kernel (Tensor): C x F x k x k
        bias (Tensor): F
        stride (int, optional): Defaults to 1.
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: N x F x H' x W' with H' = (H - 1) * stride + k
    """
    _check_4d(input, "conv_transpose2d")
    _check_4d(kernel, "conv_transpose2d", "kernel")
    N, C, H, W = input.shape
    Ck, F, kh, kw = kernel.shape
    if Ck != C:
        raise ContractError(f"conv_transpose2d: input {input.shape} has {C} channels but kernel {kernel.shape} expects {Ck}")
    _check_bias(bias, F, "conv_transpose2d")
    _check_geometry(H, W, kh, kw, stride, 0, "conv_transpose2d")

    x = _acc(input)
    k = _acc(kernel)
    Ho, Wo = (H - 1) * stride + kh, (W - 1) * stride + kw
    out = np.zeros((N, F, Ho, Wo), dtype=ACC_DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += np.einsum("nchw,cf->nfhw", x, k[:, :, i, j], optimize=True)
    out += _acc(bias)[None, :, None, None]

    def vjp(g):
        dx = np.zeros(x.shape, dtype=ACC_DTYPE)
        dk = np.zeros(k.shape, dtype=ACC_DTYPE)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, :, i:i + stride * H:stride, j:j + stride * W:stride]
                dx += np.einsum("nfhw,cf->nchw", gs, k[:, :, i, j], optimize=True)
                dk[:, :, i, j] = np.einsum("nchw,nfhw->cf", x, gs, optimize=True)
        return dx, dk, g.sum(axis=(0, 2, 3))

    return custom_op("conv_transpose2d", (input, kernel, bias), out, vjp, tape)


def depthwise_conv2d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, tape: GradTape = None) -> Tensor:
    """Depthwise convolution: every input channel is convolved with its own m filters.
    Output channel c * m + j is input channel c convolved with kernel[c, j].

    Args:
        input (Tensor): N x C x H x W
        kernel (Tensor): C x m x k x k
        bias (Tensor): C * m
        stride (int, optional): Defaults to 1.
        padding (int, optional): Defaults to 0.
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: N x (C * m) x H' x W'
    """
    _check_4d(input, "depthwise_conv2d")
    _check_4d(kernel, "depthwise_conv2d", "kernel")
    N, C, H, W = input.shape
    Ck, m, kh, kw = kernel.shape
    if Ck != C:
        raise ContractError(f"depthwise_conv2d: input {input.shape} has {C} channels but kernel {kernel.shape} has {Ck}")
    _check_bias(bias, C * m, "depthwise_conv2d")
    _check_geometry(H, W, kh, kw, stride, padding, "depthwise_conv2d")

    k = _acc(kernel)
    xp = _pad(_acc(input), padding)
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.einsum("nchwij,cmij->ncmhw", win, k, optimize=True).reshape(N, C * m, Ho, Wo)
    out += _acc(bias)[None, :, None, None]

    def vjp(g):
        g5 = g.reshape(N, C, m, Ho, Wo)
        dk = np.einsum("ncmhw,nchwij->cmij", g5, win, optimize=True)
        dxp = np.zeros(xp.shape, dtype=ACC_DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.einsum("ncmhw,cm->nchw", g5, k[:, :, i, j], optimize=True)
        dx = dxp[:, :, padding:padding + H, padding:padding + W]
        return dx, dk, g.sum(axis=(0, 2, 3))

    return custom_op("depthwise_conv2d", (input, kernel, bias), out, vjp, tape)


def maxpool2d(input: Tensor, window: int = 2, stride: int = 2, tape: GradTape = None) -> Tensor:
    """Max pooling, incomplete border windows dropped. Gradient goes to the first (row-major) maximum.

    Args:
        input (Tensor): N x C x H x W
        window (int, optional): Defaults to 2.
        stride (int, optional): Defaults to 2.
        tape (GradTape, optional): Defaults to None.

    Returns:
        Tensor: N x C x floor((H - window) / stride) + 1 x ...
    """
    _check_4d(input, "maxpool2d")
    N, C, H, W = input.shape
    if window < 1 or stride < 1:
        raise ContractError(f"maxpool2d: window and stride must be >= 1, got {window}, {stride}")
    if window > H or window > W:
        raise ContractError(f"maxpool2d: window {window} larger than input {H}x{W}")

    x = _acc(input)
    win = _windows(x, window, window, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        rows = np.arange(Ho)[:, None] * stride + arg // window
        cols = np.arange(Wo)[None, :] * stride + arg % window
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        dx = np.zeros(x.shape, dtype=ACC_DTYPE)
        np.add.at(dx, (n_idx, c_idx, rows, cols), g)
        return (dx,)

    return custom_op("maxpool2d", (input,), out, vjp, tape)


###########################
### ELEMENTWISE KERNELS ###
###########################

def _smish_parts(h: np.ndarray) -> tuple:
    s = expit(h)
    u = s * (s + 2.0)
    # tanh(ln(1 + s)) == ((1+s)^2 - 1) / ((1+s)^2 + 1)
    return s, u, u / (u + 2.0)

def smish(input: Tensor, tape: GradTape = None) -> Tensor:
    """Elementwise smish(h) = h * tanh(ln(1 + sigmoid(h)))"""
    h = _acc(input)
    s, u, t = _smish_parts(h)

    def vjp(g):
        dt = 2.0 * (2.0 * s + 2.0) / (u + 2.0) ** 2 * s * (1.0 - s)
        return (g * (t + h * dt),)

    return custom_op("smish", (input,), h * t, vjp, tape)


def sigmoid(input: Tensor, tape: GradTape = None) -> Tensor:
    """Numerically stable logistic function. Outputs are kept strictly inside (0, 1) at the storage precision."""
    dt = input.dtype.type
    s = np.clip(expit(_acc(input)), np.finfo(input.dtype).tiny, np.nextafter(dt(1), dt(0)))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return custom_op("sigmoid", (input,), s, vjp, tape)


def add(a: Tensor, b: Tensor, tape: GradTape = None) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return custom_op("add", (a, b), _acc(a) + _acc(b), lambda g: (g, g), tape)

def mul(a: Tensor, b: Tensor, tape: GradTape = None) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    x, y = _acc(a), _acc(b)
    return custom_op("mul", (a, b), x * y, lambda g: (g * y, g * x), tape)

def scale(a: Tensor, c: float, tape: GradTape = None) -> Tensor:
    return custom_op("scale", (a,), _acc(a) * c, lambda g: (g * c,), tape)

def sum(a: Tensor, tape: GradTape = None) -> Tensor:
    return custom_op("sum", (a,), np.asarray(_acc(a).sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),), tape)

def mean(a: Tensor, tape: GradTape = None) -> Tensor:
    n = a.size
    return custom_op("mean", (a,), np.asarray(_acc(a).mean()), lambda g: (np.full(a.shape, float(g) / n),), tape)


##########################
### STRUCTURAL KERNELS ###
##########################

def concat(tensors: Sequence, tape: GradTape = None) -> Tensor:
    """Concatenate N x C_i x H x W tensors along the channel axis"""
    for t in tensors:
        _check_4d(t, "concat")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([_acc(t) for t in tensors], axis=1)

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return custom_op("concat", tuple(tensors), out, vjp, tape)

def channel_sum(a: Tensor, tape: GradTape = None) -> Tensor:
    """Sum over the channel axis: N x C x H x W -> N x 1 x H x W"""
    _check_4d(a, "channel_sum")
    return custom_op("channel_sum", (a,), _acc(a).sum(axis=1, keepdims=True), lambda g: (np.broadcast_to(g, a.shape).copy(),), tape)

def reshape(a: Tensor, shape: tuple, tape: GradTape = None) -> Tensor:
    return custom_op("reshape", (a,), _acc(a).reshape(shape), lambda g: (g.reshape(a.shape),), tape)

def _reflect_matrix(n: int, pad: int) -> np.ndarray:
    idx = np.pad(np.arange(n), (0, pad), mode="reflect")
    m = np.zeros((n + pad, n), dtype=ACC_DTYPE)
    m[np.arange(n + pad), idx] = 1.0
    return m

def pad_reflect(a: Tensor, pad_h: int, pad_w: int, tape: GradTape = None) -> Tensor:
    """Reflective padding at the bottom and right edges"""
    _check_4d(a, "pad_reflect")
    H, W = a.shape[2], a.shape[3]
    if pad_h >= H or pad_w >= W:
        raise ContractError(f"pad_reflect: padding ({pad_h}, {pad_w}) must be smaller than input {H}x{W}")
    R, Cm = _reflect_matrix(H, pad_h), _reflect_matrix(W, pad_w)
    out = np.einsum("ah,nchw,bw->ncab", R, _acc(a), Cm, optimize=True)

    def vjp(g):
        return (np.einsum("ah,ncab,bw->nchw", R, g, Cm, optimize=True),)

    return custom_op("pad_reflect", (a,), out, vjp, tape)

def crop(a: Tensor, height: int, width: int, tape: GradTape = None) -> Tensor:
    """Keep the top-left height x width window"""
    _check_4d(a, "crop")
    if height > a.shape[2] or width > a.shape[3]:
        raise ContractError(f"crop: {height}x{width} larger than input {a.shape}")

    def vjp(g):
        dx = np.zeros(a.shape, dtype=ACC_DTYPE)
        dx[:, :, :height, :width] = g
        return (dx,)

    return custom_op("crop", (a,), _acc(a)[:, :, :height, :width], vjp, tape)
