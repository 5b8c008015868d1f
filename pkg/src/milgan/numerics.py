"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every forward
function has a matching ``*_backward`` that the calling module wires up by
hand; there is no tape.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, EmptySupportError, LengthError, NumericalFault

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    check_finite(arr, "tensor")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalFault(f"non-finite values in {what}")
    return x


# -- matmul -----------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def matmul_backward(a: np.ndarray, b: np.ndarray, dout: np.ndarray):
    """Gradients of ``a @ b`` with respect to ``a`` and ``b``."""
    return dout @ b.T, a.T @ dout


# -- pointwise --------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {"tanh", "sigmoid", "exp"}
_BINARY = {"add", "sub", "mul"}


def elementwise(op: str, *args: np.ndarray) -> np.ndarray:
    """Apply one of add, sub, mul, tanh, sigmoid, exp pointwise."""
    args = tuple(np.asarray(a, dtype=DTYPE) for a in args)
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two arguments")
        a, b = args
        if a.shape != b.shape:
            raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    elif op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one argument")
        (a,) = args
        if op == "tanh":
            out = np.tanh(a)
        elif op == "sigmoid":
            out = sigmoid(a)
        else:
            out = np.exp(a)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out, f"{op} output")


def elementwise_backward(op: str, args: Sequence[np.ndarray], out: np.ndarray,
                         dout: np.ndarray) -> tuple[np.ndarray, ...]:
    """Gradients for each argument of ``elementwise(op, *args)``."""
    if op == "add":
        return dout, dout
    if op == "sub":
        return dout, -dout
    if op == "mul":
        a, b = args
        return dout * b, dout * a
    if op == "tanh":
        return (dout * (1.0 - out * out),)
    if op == "sigmoid":
        return (dout * out * (1.0 - out),)
    if op == "exp":
        return (dout * out,)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- softmax ----------------------------------------------------------------

def _check_mask(logits: np.ndarray, mask):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise DimensionError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not np.all(mask.any(axis=-1)):
        raise EmptySupportError("softmax: every entry of a row is masked")
    return mask


def softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis. ``mask`` keeps entries where True."""
    z = np.asarray(logits, dtype=DTYPE)
    mask = _check_mask(z, mask)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return check_finite(p, "softmax output")


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Log-probabilities; masked entries come back as -inf, not finite."""
    z = np.asarray(logits, dtype=DTYPE)
    mask = _check_mask(z, mask)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))


# -- convolution + max-over-time --------------------------------------------

def conv1d_maxpool(seq: np.ndarray, filters: Sequence[np.ndarray],
                   biases: Sequence[np.ndarray] | None = None):
    """Valid 1-D convolution along time followed by max-over-time pooling.

    ``seq`` is ``(T, d)`` or a batch ``(B, T, d)``; each filter is ``(w, d, f)``.
    Returns the concatenated pooled features and a cache for the backward.
    Ties in the max go to the lowest time index.
    """
    x = np.asarray(seq, dtype=DTYPE)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"conv1d_maxpool expects (T, d) or (B, T, d), got {seq.shape}")
    T, d = x.shape[1], x.shape[2]
    widths = [f.shape[0] for f in filters]
    if T < max(widths):
        raise LengthError(f"sequence length {T} shorter than filter width {max(widths)}")
    if biases is None:
        biases = [np.zeros(f.shape[2]) for f in filters]
    pooled, argmaxes, windows = [], [], []
    for F, bias in zip(filters, biases):
        w = F.shape[0]
        if F.shape[1] != d:
            raise DimensionError(f"filter {F.shape} does not match input width {d}")
        win = np.lib.stride_tricks.sliding_window_view(x, w, axis=1)  # (B, L, d, w)
        resp = np.einsum("bldw,wdf->blf", win, F) + bias
        idx = resp.argmax(axis=1)  # (B, f)
        pooled.append(np.take_along_axis(resp, idx[:, None, :], axis=1)[:, 0, :])
        argmaxes.append(idx)
        windows.append(win)
    out = np.concatenate(pooled, axis=1)
    check_finite(out, "conv1d_maxpool output")
    cache = (x, tuple(filters), tuple(argmaxes), tuple(windows), single)
    return (out[0] if single else out), cache


def conv1d_maxpool_backward(cache, dout: np.ndarray):
    """Returns ``(dseq, [dfilter...], [dbias...])``; gradient flows only
    through the argmax window of each feature map."""
    x, filters, argmaxes, windows, single = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if single:
        dout = dout[None]
    B, T, _ = x.shape
    dx = np.zeros_like(x)
    dfs, dbs = [], []
    col = 0
    rows = np.arange(B)[:, None]
    for F, idx, win in zip(filters, argmaxes, windows):
        w, _, f = F.shape
        L = T - w + 1
        g = dout[:, col:col + f]
        col += f
        dresp = np.zeros((B, L, f))
        dresp[rows, idx, np.arange(f)[None, :]] = g
        dfs.append(np.einsum("bldw,blf->wdf", win, dresp))
        dbs.append(g.sum(axis=0))
        for o in range(w):
            dx[:, o:o + L, :] += dresp @ F[o].T
    return (dx[0] if single else dx), dfs, dbs


# -- parameters -------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with same-shape gradient accumulators."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=DTYPE, copy=True, order="C")
        check_finite(arr, f"parameter {name}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def copy(self):
        new = self.__class__.__new__(self.__class__)
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.grads = {k: v.copy() for k, v in self.grads.items()}
        return new

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def sgd_step(store: ParamStore, rate: float, ascent: bool = False,
             names: Iterable[str] | None = None) -> None:
    """``p -= rate * g`` (or ``+=`` when ``ascent``). Gradients are left in place."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    names = list(store.params) if names is None else list(names)
    for name in names:
        if not np.all(np.isfinite(store.grads[name])):
            raise NumericalFault(f"non-finite gradient for parameter {name!r}")
    sign = 1.0 if ascent else -1.0
    for name in names:
        store.params[name] += sign * rate * store.grads[name]


def grad_check(loss_fn: Callable[[ParamStore], float], store: ParamStore,
               step: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(store)`` must return the scalar loss and add its analytic
    gradient into ``store.grads``.  The relative error of one entry is
    ``|a - n| / max(|a| + |n|, floor)``.
    """
    store.zero_grads()
    loss_fn(store)
    analytic = {k: g.copy() for k, g in store.grads.items()}
    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn(store)
            flat[i] = orig - step
            fm = loss_fn(store)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a) + abs(num), floor)
            worst = max(worst, err)
    store.zero_grads()
    loss_fn(store)
    return worst
