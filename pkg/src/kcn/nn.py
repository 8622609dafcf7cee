"""Small double-precision numeric kernel with hand-written backward passes.

Every layer here exposes a forward function and a matching backward function.
There is no autodiff graph; correctness of each backward is established by
:func:`grad_check` in the test-suite.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64
INIT_RANGE = 0.25

CHECKPOINT_MAGIC = "kcn-checkpoint"
CHECKPOINT_VERSION = 1


class GradCheckError(ValueError):
    pass


class Param:
    """A trainable tensor together with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param(shape={self.value.shape})"


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_RANGE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# activations


def tanh(x):
    return np.tanh(x)


def tanh_grad(y):
    """Derivative of tanh expressed through its output ``y = tanh(x)``."""
    return 1.0 - y * y


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # derivative at exactly 0 is taken as 0
    return (np.asarray(x) > 0.0).astype(DTYPE)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(y):
    """Derivative of the logistic function through its output ``y``."""
    return y * (1.0 - y)


# ---------------------------------------------------------------------------
# convolution


def same_padding(h: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the sequence length for width ``h``.

    Even widths put the extra pad on the left.
    """
    return (h // 2, (h - 1) // 2)


@functools.lru_cache(maxsize=1024)
def _window_index(n: int, h: int) -> np.ndarray:
    return np.arange(n)[:, None] + np.arange(h)[None, :]


def unfold(X: np.ndarray, h: int) -> np.ndarray:
    """Zero-padded width-``h`` windows of ``X`` (d x n) as an (n, d*h) matrix."""
    d, n = X.shape
    left, right = same_padding(h)
    Xp = np.zeros((d, n + left + right), dtype=DTYPE)
    Xp[:, left:left + n] = X
    return Xp[:, _window_index(n, h)].transpose(1, 0, 2).reshape(n, d * h)


def conv1d(X: np.ndarray, W: np.ndarray, b, windows: np.ndarray | None = None) -> np.ndarray:
    """Length-preserving linear convolution.

    ``W`` is either a single ``d x h`` filter (returns a length-n vector) or a
    bank of ``l`` filters shaped ``l x d x h`` with ``b`` of length ``l``
    (returns ``l x n``). ``windows`` may carry a precomputed :func:`unfold`.
    """
    X = np.asarray(X, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    single = W.ndim == 2
    if single:
        W = W[None]
    if X.ndim != 2 or W.ndim != 3 or W.shape[1] != X.shape[0]:
        raise ValueError(f"conv1d shape mismatch: X {X.shape}, W {W.shape}")
    d, n = X.shape
    h = W.shape[2]
    if h < 1 or n < 1:
        raise ValueError("conv1d needs h >= 1 and n >= 1")
    if h > 2 * n + 1:
        raise ValueError(f"filter width {h} too large for sequence length {n}")
    win = unfold(X, h) if windows is None else windows
    out = (win @ W.reshape(W.shape[0], d * h).T + np.asarray(b, dtype=DTYPE)).T
    return out[0] if single else out


def conv1d_backward(X: np.ndarray, W: np.ndarray, dout: np.ndarray, windows: np.ndarray | None = None):
    """Gradients of :func:`conv1d` (filter-bank form) w.r.t. X, W and b."""
    d, n = X.shape
    l, _, h = W.shape
    win = unfold(X, h) if windows is None else windows
    dW = (dout @ win).reshape(l, d, h)
    db = dout.sum(axis=1)
    dwin = (dout.T @ W.reshape(l, d * h)).reshape(n, d, h)
    left, _ = same_padding(h)
    dXp = np.zeros((d, n + h - 1), dtype=DTYPE)
    for j in range(h):
        dXp[:, j:j + n] += dwin[:, :, j].T
    return dXp[:, left:left + n], dW, db


# ---------------------------------------------------------------------------
# dense layers and the classifier head


def linear(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if W.shape[1] != x.shape[0] or np.shape(b) != (W.shape[0],):
        raise ValueError(f"linear shape mismatch: W {W.shape}, x {x.shape}, b {np.shape(b)}")
    return W @ x + b


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    z = np.exp(v - v.max())
    return z / z.sum()


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.dot(p, dp))


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    shifted = v - v.max()
    return shifted - math.log(np.exp(shifted).sum())


def cross_entropy(p, label: int) -> float:
    p = np.asarray(p, dtype=DTYPE)
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return float(-math.log(p[label])) if p[label] > 0 else math.inf


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], float], params: Mapping[str, Param], eps: float = 1e-6,
               report: dict | None = None) -> float:
    """Compare ``Param.grad`` against central differences of ``f``.

    ``f`` must recompute the scalar objective from the current parameter values
    without touching the gradients. For each parameter tensor the error is
    ``max|a - n| / max(1e-12, max|a| + max|n|)`` over its coordinates; the
    worst tensor's error is returned. Scaling by the tensor's magnitude keeps
    the measure above the finite-difference noise floor (about 1e-16 |f| / eps)
    for coordinates whose own gradient is tiny. ``report``, when given, receives
    the error per parameter name.
    """
    worst = 0.0
    for name, param in params.items():
        flat = param.value.reshape(-1)
        analytic = param.grad.reshape(-1)
        numeric = np.empty_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"objective not finite while perturbing {name}[{i}]")
            numeric[i] = (fp - fm) / (2.0 * eps)
        if flat.size:
            scale = np.abs(analytic).max() + np.abs(numeric).max()
            err = float(np.abs(analytic - numeric).max() / max(1e-12, scale))
        else:
            err = 0.0
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Param], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if lr != 0.0:
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints
#
# Text container, version 1:
#   line 1   "kcn-checkpoint 1"
#   line 2   "meta <json>"
#   then per tensor, in insertion order:
#            "tensor <name> <ndim> <dim_1> ... <dim_ndim>"
#            one line of space-separated float64 values (row-major, repr form)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        fh.write("meta " + json.dumps(meta or {}, sort_keys=True, ensure_ascii=False) + "\n")
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"tensor name may not contain whitespace: {name!r}")
            arr = np.asarray(arr, dtype=DTYPE)
            dims = " ".join(str(s) for s in arr.shape)
            fh.write(f"tensor {name} {arr.ndim} {dims}".rstrip() + "\n")
            fh.write(" ".join(repr(float(x)) for x in arr.reshape(-1)) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")
    if not lines[1].startswith("meta "):
        raise ValueError(f"{path}: missing meta line")
    meta = json.loads(lines[1][5:])
    tensors = {}
    i = 2
    while i < len(lines) and lines[i]:
        parts = lines[i].split()
        if parts[0] != "tensor":
            raise ValueError(f"{path}:{i + 1}: expected tensor header")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(s) for s in parts[3:3 + ndim])
        values = lines[i + 1].split()
        arr = np.array([float(v) for v in values], dtype=DTYPE)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path}:{i + 2}: tensor {name} has {arr.size} values, expected shape {shape}")
        tensors[name] = arr.reshape(shape)
        i += 2
    return tensors, meta
