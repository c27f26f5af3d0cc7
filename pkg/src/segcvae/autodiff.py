"""Reverse-mode differentiable tensors on top of numpy.

Every operation records a backward closure on the output tensor; calling
``backward()`` on a scalar result replays the closures in reverse
topological order and accumulates gradients into ``.grad`` of every
tensor that requires them.  All math is float64 by default so that the
finite-difference checker in :func:`grad_check` is meaningful.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVector, DomainError, SegcvaeError, ShapeError

EPS_NORM = 1e-8

_mode = threading.local()  # a computation record is confined to one thread


def _grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    prev = _grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def _as_array(values, dtype=None):
    arr = np.asarray(values)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """A dense nd-array plus an optional gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise DomainError(f"item() needs a single element, shape is {self.values.shape}")
        return float(self.values.reshape(-1)[0])

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- autograd ------------------------------------------------------
    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.values.size != 1:
                raise DomainError("backward() without gradient needs a scalar output")
            grad = np.ones_like(self.values)
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.values.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, parents: Iterable[Tensor], make_backward) -> Tensor:
    """Build an output tensor; attach the closure only when grads can flow."""
    out = Tensor(values)
    if _grad_enabled():
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = make_backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values + b.values

    def make(out):
        def bw():
            if a.requires_grad or a._backward:
                a._accum(_unbroadcast(out.grad, a.values.shape))
            if b.requires_grad or b._backward:
                b._accum(_unbroadcast(out.grad, b.values.shape))
        return bw

    return _node(values, (a, b), make)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values - b.values

    def make(out):
        def bw():
            if a.requires_grad or a._backward:
                a._accum(_unbroadcast(out.grad, a.values.shape))
            if b.requires_grad or b._backward:
                b._accum(_unbroadcast(-out.grad, b.values.shape))
        return bw

    return _node(values, (a, b), make)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values * b.values

    def make(out):
        def bw():
            if a.requires_grad or a._backward:
                a._accum(_unbroadcast(out.grad * b.values, a.values.shape))
            if b.requires_grad or b._backward:
                b._accum(_unbroadcast(out.grad * a.values, b.values.shape))
        return bw

    return _node(values, (a, b), make)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values / b.values

    def make(out):
        def bw():
            if a.requires_grad or a._backward:
                a._accum(_unbroadcast(out.grad / b.values, a.values.shape))
            if b.requires_grad or b._backward:
                b._accum(_unbroadcast(-out.grad * a.values / (b.values * b.values), b.values.shape))
        return bw

    return _node(values, (a, b), make)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    values = a.values ** exponent

    def make(out):
        def bw():
            a._accum(out.grad * exponent * a.values ** (exponent - 1))
        return bw

    return _node(values, (a,), make)


def exp(a) -> Tensor:
    a = as_tensor(a)
    values = np.exp(a.values)

    def make(out):
        def bw():
            a._accum(out.grad * out.values)
        return bw

    return _node(values, (a,), make)


def log(a) -> Tensor:
    a = as_tensor(a)
    values = np.log(a.values)

    def make(out):
        def bw():
            a._accum(out.grad / a.values)
        return bw

    return _node(values, (a,), make)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    values = np.sqrt(a.values)

    def make(out):
        def bw():
            a._accum(out.grad * 0.5 / out.values)
        return bw

    return _node(values, (a,), make)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    values = np.tanh(a.values)

    def make(out):
        def bw():
            a._accum(out.grad * (1.0 - out.values * out.values))
        return bw

    return _node(values, (a,), make)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # exp form is stable on both tails
    values = np.where(a.values >= 0,
                      1.0 / (1.0 + np.exp(-np.abs(a.values))),
                      np.exp(-np.abs(a.values)) / (1.0 + np.exp(-np.abs(a.values))))

    def make(out):
        def bw():
            a._accum(out.grad * out.values * (1.0 - out.values))
        return bw

    return _node(values, (a,), make)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    values = np.abs(a.values)

    def make(out):
        def bw():
            a._accum(out.grad * np.sign(a.values))
        return bw

    return _node(values, (a,), make)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    values = np.clip(a.values, lo, hi)

    def make(out):
        def bw():
            inside = (a.values >= lo) & (a.values <= hi)
            a._accum(out.grad * inside)
        return bw

    return _node(values, (a,), make)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def make(out):
        def bw():
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.values.shape).copy())
        return bw

    return _node(values, (a,), make)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.values.shape[axis]

    def make(out):
        def bw():
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.values.shape) / count)
        return bw

    return _node(values, (a,), make)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    values = a.values.reshape(shape)

    def make(out):
        def bw():
            a._accum(out.grad.reshape(a.values.shape))
        return bw

    return _node(values, (a,), make)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    values = a.values.transpose(axes)
    inverse = None if axes is None else np.argsort(axes)

    def make(out):
        def bw():
            a._accum(out.grad.transpose(inverse))
        return bw

    return _node(values, (a,), make)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make(out):
        def bw():
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if not (t.requires_grad or t._backward):
                    continue
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(start, stop)
                t._accum(out.grad[tuple(index)])
        return bw

    return _node(values, tensors, make)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack M tensors of shape (..., H) into (..., M, H)."""
    expanded = [reshape(t, t.shape[:-1] + (1, t.shape[-1])) for t in tensors]
    return concat(expanded, axis=-2)


def take(a, index) -> Tensor:
    a = as_tensor(a)
    values = a.values[index]

    def make(out):
        def bw():
            g = np.zeros_like(a.values)
            np.add.at(g, index, out.grad)
            a._accum(g)
        return bw

    return _node(values, (a,), make)


def take_rows(a, ids) -> Tensor:
    """Row gather, e.g. embedding lookup: a[(V, E)], ids (B,) -> (B, E)."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    values = a.values[ids]

    def make(out):
        def bw():
            g = np.zeros_like(a.values)
            np.add.at(g, ids, out.grad)
            a._accum(g)
        return bw

    return _node(values, (a,), make)


def gather_last(a, ids) -> Tensor:
    """Pick one entry per row: a (B, V), ids (B,) -> (B,)."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    rows = np.arange(a.values.shape[0])
    values = a.values[rows, ids]

    def make(out):
        def bw():
            g = np.zeros_like(a.values)
            np.add.at(g, (rows, ids), out.grad)
            a._accum(g)
        return bw

    return _node(values, (a,), make)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    values = np.matmul(a.values, b.values)

    def make(out):
        def bw():
            if a.requires_grad or a._backward:
                ga = np.matmul(out.grad, b.values.swapaxes(-1, -2))
                a._accum(_unbroadcast(ga, a.values.shape))
            if b.requires_grad or b._backward:
                gb = np.matmul(a.values.swapaxes(-1, -2), out.grad)
                b._accum(_unbroadcast(gb, b.values.shape))
        return bw

    return _node(values, (a, b), make)


def softmax_rows(a) -> Tensor:
    """Row softmax over the last axis, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def make(out):
        def bw():
            y = out.values
            dot = (out.grad * y).sum(axis=-1, keepdims=True)
            a._accum(y * (out.grad - dot))
        return bw

    return _node(values, (a,), make)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    values = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def make(out):
        def bw():
            soft = np.exp(out.values)
            total = out.grad.sum(axis=-1, keepdims=True)
            a._accum(out.grad - soft * total)
        return bw

    return _node(values, (a,), make)


def gumbel_softmax(logits, tau: float, rng: "Rng" = None, noise: bool = False) -> Tensor:
    """Temperature-scaled row softmax, optionally perturbed by Gumbel draws.

    With ``noise`` the logits receive i.i.d. Gumbel(0, 1) samples before the
    division by ``tau``; the relaxation is soft (no hard one-hot pass), so
    gradients flow through the softmax as usual.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if noise:
        if rng is None:
            raise DomainError("noise=True needs an Rng")
        logits = add(logits, Tensor(rng.gumbel(logits.shape)))
    return softmax_rows(mul(logits, 1.0 / tau))


def conv_seq(c, kernel) -> Tensor:
    """Valid 1-d convolution over the sequence axis, full embedding width.

    ``c`` is (seq_len, emb) or batched (B, seq_len, emb); ``kernel`` is
    (width, emb, 1, channels).  The result is squeezed and transposed to
    (channels, seq_len - width + 1), batched accordingly.
    """
    c, kernel = as_tensor(c), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != 1:
        raise ShapeError(f"kernel must be (width, emb, 1, channels), got {kernel.shape}")
    squeeze = c.ndim == 2
    cv = c.values[None] if squeeze else c.values
    if cv.ndim != 3:
        raise ShapeError(f"input must be (seq, emb) or (batch, seq, emb), got {c.shape}")
    width, emb, _, channels = kernel.shape
    if cv.shape[-1] != emb:
        raise ShapeError(f"embedding width mismatch: input {cv.shape[-1]}, kernel {emb}")
    seq_len = cv.shape[1]
    if seq_len < width:
        raise ShapeError(f"sequence length {seq_len} shorter than kernel width {width}")
    out_len = seq_len - width + 1
    km = kernel.values[:, :, 0, :]
    acc = np.zeros((cv.shape[0], out_len, channels), dtype=cv.dtype)
    for i in range(width):
        acc += np.matmul(cv[:, i:i + out_len, :], km[i])
    values = acc.swapaxes(-1, -2)
    if squeeze:
        values = values[0]

    def make(out):
        def bw():
            g = out.grad[None] if squeeze else out.grad
            gt = g.swapaxes(-1, -2)  # (B, out_len, channels)
            if c.requires_grad or c._backward:
                gc = np.zeros_like(cv)
                for i in range(width):
                    gc[:, i:i + out_len, :] += np.matmul(gt, km[i].T)
                c._accum(gc[0] if squeeze else gc)
            if kernel.requires_grad or kernel._backward:
                gk = np.zeros_like(kernel.values)
                for i in range(width):
                    gk[i, :, 0, :] = np.matmul(cv[:, i:i + out_len, :].swapaxes(-1, -2), gt).sum(axis=0)
                kernel._accum(gk)
        return bw

    return _node(values, (c, kernel), make)


# ---------------------------------------------------------------------------
# recurrent cells
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    """Fused gate parameters of one gated recurrent cell.

    ``wx``/``wh`` are (in_dim, 3*hidden) and (hidden, 3*hidden); the three
    column blocks are the reset, update and candidate gates in that order.
    """
    wx: Tensor
    wh: Tensor
    bx: Tensor
    bh: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.wh.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh,
                f"{prefix}.bx": self.bx, f"{prefix}.bh": self.bh}


def gru_params(in_dim: int, hidden_dim: int, rng: "Rng") -> GruParams:
    return GruParams(
        wx=glorot((in_dim, 3 * hidden_dim), rng),
        wh=glorot((hidden_dim, 3 * hidden_dim), rng),
        bx=Tensor(np.zeros(3 * hidden_dim), requires_grad=True),
        bh=Tensor(np.zeros(3 * hidden_dim), requires_grad=True),
    )


def gru_cell(params: GruParams, x: Tensor, h: Tensor) -> Tensor:
    hd = params.hidden_dim
    gx = add(matmul(x, params.wx), params.bx)
    gh = add(matmul(h, params.wh), params.bh)
    r = sigmoid(add(gx[:, :hd], gh[:, :hd]))
    u = sigmoid(add(gx[:, hd:2 * hd], gh[:, hd:2 * hd]))
    n = tanh(add(gx[:, 2 * hd:], mul(r, gh[:, 2 * hd:])))
    return add(mul(sub(1.0, u), n), mul(u, h))


def gru_encode(params: GruParams, steps: Sequence[Tensor], mask: np.ndarray = None) -> Tensor:
    """Scan a sequence of (B, in_dim) steps; return the final (B, hidden) state.

    ``mask`` is (B, T) with zeros on positions whose step must not update the
    state (padding); omitted means every step counts.
    """
    steps = list(steps)
    if not steps:
        raise DomainError("cannot encode an empty sequence")
    batch = steps[0].shape[0]
    h = Tensor(np.zeros((batch, params.hidden_dim)))
    for t, x in enumerate(steps):
        h_next = gru_cell(params, x, h)
        if mask is not None:
            keep = mask[:, t:t + 1].astype(h.values.dtype)
            h = add(mul(h_next, Tensor(keep)), mul(h, Tensor(1.0 - keep)))
        else:
            h = h_next
    return h


def gru_decode_step(params: GruParams, out_w: Tensor, out_b: Tensor,
                    state: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrent step plus the projection to vocabulary logits."""
    if state.ndim != 2 or state.shape[1] != params.hidden_dim:
        raise ShapeError(f"state must be (batch, {params.hidden_dim}), got {state.shape}")
    next_state = gru_cell(params, x, state)
    logits = add(matmul(next_state, out_w), out_b)
    return logits, next_state


# ---------------------------------------------------------------------------
# stochastic pieces
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic counter-based generator (Philox) with exact state capture."""

    STATE_WORDS = 13  # counter(4) + key(2) + buffer(4) + buffer_pos + has_uint32 + uinteger

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def gumbel(self, shape=()) -> np.ndarray:
        return self._gen.gumbel(0.0, 1.0, shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> np.ndarray:
        s = self._gen.bit_generator.state
        flat = np.concatenate([
            np.asarray(s["state"]["counter"], dtype=np.uint64),
            np.asarray(s["state"]["key"], dtype=np.uint64),
            np.asarray(s["buffer"], dtype=np.uint64),
            np.asarray([s["buffer_pos"], s["has_uint32"], s["uinteger"]], dtype=np.uint64),
        ])
        assert flat.size == self.STATE_WORDS
        return flat

    def set_state(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.uint64)
        if flat.size != self.STATE_WORDS:
            raise DomainError(f"rng state must have {self.STATE_WORDS} words, got {flat.size}")
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": flat[0:4], "key": flat[4:6]},
            "buffer": flat[6:10],
            "buffer_pos": int(flat[10]),
            "has_uint32": int(flat[11]),
            "uinteger": int(flat[12]),
        }


def glorot(shape: tuple[int, ...], rng: Rng) -> Tensor:
    """Fan-balanced uniform initialization for weight matrices."""
    fan_in = int(np.prod(shape[:-1]))
    fan_out = int(shape[-1])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def reparameterize(mu: Tensor, logvar: Tensor, rng: Rng) -> Tensor:
    """Draw z = mu + exp(logvar/2) * eps with eps ~ N(0, 1) from ``rng``.

    The noise is a constant of the graph: gradients reach only mu and logvar.
    """
    eps = Tensor(rng.normal(mu.shape))
    return add(mu, mul(exp(mul(logvar, 0.5)), eps))


def gaussian_kl(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """KL(N(mu_q, diag exp(logvar_q)) || N(mu_p, diag exp(logvar_p))), summed
    over the last axis.  Non-negative by construction."""
    diff = sub(mu_q, mu_p)
    ratio = exp(sub(logvar_q, logvar_p))
    term = add(ratio, mul(mul(diff, diff), exp(mul(logvar_p, -1.0))))
    per_dim = sub(add(term, sub(logvar_p, logvar_q)), 1.0)
    return mul(tsum(per_dim, axis=-1), 0.5)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity over the last axis; rejects near-zero vectors."""
    u, v = as_tensor(u), as_tensor(v)
    nu = np.sqrt((u.values * u.values).sum(axis=-1))
    nv = np.sqrt((v.values * v.values).sum(axis=-1))
    if np.any(nu <= EPS_NORM) or np.any(nv <= EPS_NORM):
        raise DegenerateVector("cosine of a near-zero vector is undefined")
    dot = tsum(mul(u, v), axis=-1)
    denom = mul(sqrt(tsum(mul(u, u), axis=-1)), sqrt(tsum(mul(v, v), axis=-1)))
    return div(dot, denom)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, inputs: Sequence[Tensor], h: float = 1e-5,
               max_coords: int = None, rng: Rng = None) -> float:
    """Compare reverse-mode gradients of ``f(*inputs)`` against central
    differences; return the maximum elementwise relative error.

    ``f`` must be deterministic and return a scalar tensor.  With
    ``max_coords`` only a random subset of coordinates per input is probed
    (useful for large parameter sets).
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            picker = rng if rng is not None else Rng(0)
            coords = sorted(set(int(i) for i in picker.integers(0, flat.size, max_coords)))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f(*inputs).item()
            flat[i] = orig - h
            with no_grad():
                fm = f(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            ref = a.reshape(-1)[i]
            rel = abs(ref - numeric) / (abs(ref) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_TAG = "segcvae-ckpt-1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, str] = None):
    """Write named arrays as one flat binary container with a text index.

    Layout: the version tag line, ``meta <key> <value>`` lines, one
    ``array <name> <dtype> <shape> <offset>`` line per array, a blank line,
    then the concatenated raw bytes.  Entries are sorted so identical inputs
    produce identical bytes.
    """
    lines = [CHECKPOINT_TAG]
    for key in sorted(meta or {}):
        lines.append(f"meta {key} {meta[key]}")
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"array {name} {arr.dtype.name} {shape} {offset}")
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    split = data.find(b"\n\n")
    if split < 0:
        raise SegcvaeError(f"{path}: missing checkpoint header terminator")
    header = data[:split].decode("utf-8").splitlines()
    body = data[split + 2:]
    if not header or header[0] != CHECKPOINT_TAG:
        raise SegcvaeError(f"{path}: not a {CHECKPOINT_TAG} file")
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "array":
            name, dtype, shape_s, offset_s = rest.split(" ")
            shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            offset = int(offset_s)
            flat = np.frombuffer(body, dtype=np.dtype(dtype), count=count, offset=offset)
            arrays[name] = flat.reshape(shape).copy()
        else:
            raise SegcvaeError(f"{path}: unknown index entry '{kind}'")
    return arrays, meta
