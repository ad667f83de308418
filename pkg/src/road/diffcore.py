"""Small reverse-mode autodiff engine over dense numpy arrays.

Only the handful of primitives the octree decoder needs are provided. A
:class:`Tape` records each primitive as it runs (define-by-run); calling
:meth:`Tape.backward` sweeps the record in reverse and accumulates ``.grad``
on every tensor that requires it. A tape created with ``record=False`` runs
the same primitives without keeping anything, which is what inference uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from road.errors import ConfigError, TrainingError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    # never accumulate in place: ``g`` may be shared with another input
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of primitive ops; ops are methods on the tape."""

    def __init__(self, record: bool = True):
        self.record = record
        self.ops: list[_Op] = []

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, name, inputs, out_data, backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            self.ops.append(_Op(name, tuple(inputs), out, backward))
        return out

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Reverse sweep from ``loss``; each recorded op is visited once."""
        if not self.record:
            raise TrainingError("backward called on a non-recording tape")
        if seed is None:
            if loss.data.size != 1:
                raise TrainingError("backward from a non-scalar needs an explicit seed")
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=loss.data.dtype).reshape(loss.shape)
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None:
                continue
            op.backward(g)
            # intermediate grads are no longer needed once propagated
            op.output.grad = None if op.output is not loss else op.output.grad
        self.ops.clear()

    # -- dense layers ------------------------------------------------------

    def linear(self, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
        if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
            raise ConfigError(f"linear expects 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
        if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
            raise ConfigError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
        out = x.data @ W.data
        out += b.data

        def backward(g):
            if x.requires_grad:
                _accumulate(x, g @ W.data.T)
            if W.requires_grad:
                _accumulate(W, x.data.T @ g)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0))

        return self._emit("linear", (x, W, b), out, backward)

    def sine(self, x: Tensor, omega0: float) -> Tensor:
        if omega0 <= 0:
            raise ConfigError("omega0 must be positive")
        arg = x.data * x.data.dtype.type(omega0)
        out = np.sin(arg)

        def backward(g):
            d = np.cos(arg)
            d *= d.dtype.type(omega0)
            d *= g
            _accumulate(x, d)

        return self._emit("sine", (x,), out, backward)

    def tanh(self, x: Tensor) -> Tensor:
        out = np.tanh(x.data)

        def backward(g):
            _accumulate(x, g * (1 - out * out))

        return self._emit("tanh", (x,), out, backward)

    def normalize(self, x: Tensor, eps: float = 1e-12) -> Tensor:
        """Row-wise unit normalization of a (B, k) tensor."""
        norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
        out = x.data / norm

        def backward(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            _accumulate(x, (g - out * dot) / norm)

        return self._emit("normalize", (x,), out, backward)

    def softmax2(self, logits: Tensor) -> Tensor:
        """Softmax over the last axis of (B, 2) logits."""
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            _accumulate(logits, out * (g - dot))

        return self._emit("softmax2", (logits,), out, backward)

    # -- losses --------------------------------------------------------------

    def cross_entropy2(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        """Mean two-class cross-entropy; ``labels`` holds 0/1 class ids."""
        labels = np.asarray(labels, dtype=np.int64)
        if logits.data.ndim != 2 or logits.shape[1] != 2 or labels.shape != (logits.shape[0],):
            raise ConfigError(f"cross_entropy2 expects (B,2) logits and (B,) labels; got {logits.shape}, {labels.shape}")
        n = logits.shape[0]
        mx = logits.data.max(axis=1, keepdims=True)
        shifted = logits.data - mx
        lse = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(n), labels]
        value = np.asarray((lse - picked).mean(), dtype=logits.dtype)

        def backward(g):
            p = np.exp(shifted - lse[:, None])
            p[np.arange(n), labels] -= 1
            _accumulate(logits, p * (g / n))

        return self._emit("cross_entropy2", (logits,), value, backward)

    def l2_loss(self, pred: Tensor, target: np.ndarray) -> Tensor:
        """Mean over rows of the squared L2 distance to ``target``."""
        target = np.asarray(target, dtype=pred.dtype)
        if target.shape != pred.shape:
            raise ConfigError(f"l2_loss shape mismatch: {pred.shape} vs {target.shape}")
        diff = pred.data - target
        n = max(pred.shape[0], 1)
        value = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

        def backward(g):
            _accumulate(pred, diff * (2 * g / n))

        return self._emit("l2_loss", (pred,), value, backward)

    # -- structural ----------------------------------------------------------

    def gather_rows(self, x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
        """Rows ``x[idx]``; pass ``unique=True`` when ``idx`` has no repeats."""
        idx = np.asarray(idx, dtype=np.int64)
        out = x.data[idx]

        def backward(g):
            full = np.zeros_like(x.data)
            if unique:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            _accumulate(x, full)

        return self._emit("gather_rows", (x,), out, backward)

    def stack_rows(self, rows: Sequence[Tensor]) -> Tensor:
        """Stack 1-D tensors into a (len(rows), D) matrix."""
        out = np.stack([r.data for r in rows])

        def backward(g):
            for i, r in enumerate(rows):
                _accumulate(r, g[i])

        return self._emit("stack_rows", tuple(rows), out, backward)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        out = x.data.reshape(shape)

        def backward(g):
            _accumulate(x, g.reshape(x.shape))

        return self._emit("reshape", (x,), out, backward)

    def repeat_rows(self, x: Tensor, k: int) -> Tensor:
        """Each row repeated ``k`` times consecutively: (B, D) -> (B*k, D)."""
        out = np.repeat(x.data, k, axis=0)

        def backward(g):
            _accumulate(x, g.reshape(x.shape[0], k, *x.shape[1:]).sum(axis=1))

        return self._emit("repeat_rows", (x,), out, backward)

    def concat(self, a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
        out = np.concatenate([a.data, b.data], axis=axis)
        split = a.shape[axis]

        def backward(g):
            ga, gb = np.split(g, [split], axis=axis)
            _accumulate(a, ga)
            _accumulate(b, gb)

        return self._emit("concat", (a, b), out, backward)

    def slice_cols(self, x: Tensor, start: int, stop: int) -> Tensor:
        out = x.data[:, start:stop]

        def backward(g):
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            _accumulate(x, full)

        return self._emit("slice_cols", (x,), out, backward)

    # -- elementwise arithmetic (broadcasting) ------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        out = a.data + b.data

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return self._emit("add", (a, b), out, backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        out = a.data - b.data

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        return self._emit("sub", (a, b), out, backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        out = a.data * b.data

        def backward(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

        return self._emit("mul", (a, b), out, backward)

    def scale(self, x: Tensor, c: float) -> Tensor:
        out = x.data * x.data.dtype.type(c)

        def backward(g):
            _accumulate(x, g * c)

        return self._emit("scale", (x,), out, backward)

    def weighted_sum(self, terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        """Scalar ``sum_i w_i * t_i`` over scalar tensors."""
        if len(terms) != len(weights):
            raise ConfigError("weighted_sum needs one weight per term")
        dtype = terms[0].dtype if terms else np.float32
        out = np.asarray(sum(float(w) * t.data for t, w in zip(terms, weights)), dtype=dtype)

        def backward(g):
            for t, w in zip(terms, weights):
                _accumulate(t, g * w)

        return self._emit("weighted_sum", tuple(terms), out, backward)

    def sum(self, x: Tensor) -> Tensor:
        out = np.asarray(x.data.sum(), dtype=x.dtype)

        def backward(g):
            _accumulate(x, np.broadcast_to(g, x.shape))

        return self._emit("sum", (x,), out, backward)


# ---------------------------------------------------------------------------
# parameters and Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named parameters plus their per-parameter Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def remove(self, name: str) -> None:
        self.params.pop(name)
        self.state.pop(name, None)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad for n, p in self.params.items() if p.grad is not None}


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, applied in place to parameters in ``grads``.

    Only parameters that received a gradient are touched, and each keeps its
    own step count, so rarely-visited latents are not decayed by steps in
    which they took no part.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = store.params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m *= beta1
        st.m += (1 - beta1) * g
        st.v *= beta2
        st.v += (1 - beta2) * (g * g)
        m_hat = st.m / (1 - beta1**st.step)
        v_hat = st.v / (1 - beta2**st.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
