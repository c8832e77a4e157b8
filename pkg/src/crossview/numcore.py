"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the blocks the pipeline needs are here: linear algebra, GELU MLP,
multi-head attention with key masking, layer norm, L2 normalisation,
log-softmax, plus AdamW with a cosine schedule, a central-difference gradient
checker and the flat-binary parameter store.
"""
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, GradCheckError

logger = logging.getLogger(__name__)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5
MASK_FILL = -1e9
NORM_EPS = 1e-12


class Tensor:
    """A float64 array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _backward=backward if req else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _op(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def reciprocal(a):
    out = 1.0 / a.data
    return _op(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    return _op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    on = a.data > 0
    return _op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def gelu(a):
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _op(out, (a,), back)


# ---------------------------------------------------------------- structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner mismatch: {a.name or 'lhs'} {a.shape} @ {b.name or 'rhs'} {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op(a.data @ b.data, (a, b), back)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = np.argsort(axes)
    return _op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx):
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _op(a.data[idx], (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
               lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
               lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum_(a, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ------------------------------------------------------------------ softmax


def _sorted_logsumexp(x):
    # summation in sorted order keeps the result independent of element order
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sort(np.exp(x - m), axis=-1).sum(axis=-1, keepdims=True)
    return m + np.log(s)


def log_softmax(a):
    out = a.data - _sorted_logsumexp(a.data)
    p = np.exp(out)
    return _op(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def masked_softmax(scores, valid=None):
    """Softmax on the last axis; entries with ``valid == False`` get exactly 0.

    Rows with no valid entry come out all-zero.
    """
    x = scores.data
    if valid is not None:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
        x = x + np.where(valid, 0.0, MASK_FILL)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)
    if valid is not None:
        p = np.where(valid, p, 0.0)
        p = np.where(valid.any(axis=-1, keepdims=True), p, 0.0)
    return _op(p, (scores,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


# --------------------------------------------------------------- normalizers


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Per-row standardisation over the last axis followed by an affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _op(xhat * gain.data + bias.data, (x, gain, bias), back)


def l2_normalize(a, eps=NORM_EPS):
    x = a.data
    sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(sq < eps * eps):
        logger.warning("l2_normalize: %d near-zero vectors stabilised with eps=%g",
                    int((sq < eps * eps).sum()), eps)
    n = np.sqrt(sq + eps * eps)
    y = x / n

    def back(g):
        return (g / n - x * (x * g).sum(axis=-1, keepdims=True) / n ** 3,)

    return _op(y, (a,), back)


# ------------------------------------------------------------------ params


class ParamSet:
    """Named trainable tensors; each carries its own ``grad`` buffer."""

    def __init__(self):
        self.tensors = {}
        self.step = 0

    def add(self, name, value):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def scope(self, prefix):
        """Dict of the parameters under ``prefix.`` with the prefix stripped."""
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}

    def num_elements(self):
        return sum(t.data.size for t in self.tensors.values())


def glorot(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def add_linear(ps, prefix, din, dout, rng, bias=True):
    ps.add(f"{prefix}.w", glorot(rng, din, dout))
    if bias:
        ps.add(f"{prefix}.b", np.zeros(dout))


def add_mlp(ps, prefix, din, hidden, dout, rng):
    ps.add(f"{prefix}.w1", glorot(rng, din, hidden))
    ps.add(f"{prefix}.b1", np.zeros(hidden))
    ps.add(f"{prefix}.w2", glorot(rng, hidden, dout))
    ps.add(f"{prefix}.b2", np.zeros(dout))


def add_mha(ps, prefix, d, rng):
    # no key bias: it shifts every score of a query equally and so never reaches the output
    for k in ("q", "k", "v", "o"):
        ps.add(f"{prefix}.w{k}", glorot(rng, d, d))
        if k != "k":
            ps.add(f"{prefix}.b{k}", np.zeros(d))


def add_layer_norm(ps, prefix, d):
    ps.add(f"{prefix}.gain", np.ones(d))
    ps.add(f"{prefix}.bias", np.zeros(d))


# ------------------------------------------------------------------- blocks


def linear(x, p):
    y = matmul(x, p["w"])
    return y + p["b"] if "b" in p else y


def mlp_forward(x, p, hidden=None):
    """``W2 gelu(W1 x + b1) + b2`` applied to each row of ``x``."""
    x = as_tensor(x)
    w1, b1, w2, b2 = p["w1"], p["b1"], p["w2"], p["b2"]
    if hidden is not None and w1.shape[1] != hidden:
        raise DimensionError(f"w1 has hidden width {w1.shape[1]}, expected {hidden}")
    if x.shape[-1] != w1.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match w1 {w1.shape}")
    if b1.shape != (w1.shape[1],):
        raise DimensionError(f"b1 shape {b1.shape} does not match w1 {w1.shape}")
    if w2.shape[0] != w1.shape[1]:
        raise DimensionError(f"w2 {w2.shape} does not follow w1 {w1.shape}")
    if b2.shape != (w2.shape[1],):
        raise DimensionError(f"b2 shape {b2.shape} does not match w2 {w2.shape}")
    return matmul(gelu(matmul(x, w1) + b1), w2) + b2


def mha_forward(q, k, v, p, heads, key_validity=None):
    """Multi-head scaled dot-product attention with output projection.

    ``q`` is (..., Lq, D), ``k``/``v`` are (..., Lk, D). Invalid keys get an
    attention weight of exactly zero; a query with no valid key yields a zero
    output row.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[-2] == 0:
        return Tensor(np.zeros(q.shape))
    dh = d // heads
    lead = q.shape[:-2]

    def split(t):
        # (..., L, D) -> (..., H, L, dh)
        t = reshape(t, t.shape[:-1] + (heads, dh))
        nd = t.data.ndim
        return transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    qh = split(linear(q, {"w": p["wq"], "b": p["bq"]}))
    kh = split(matmul(k, p["wk"]))
    vh = split(linear(v, {"w": p["wv"], "b": p["bv"]}))
    scores = matmul(qh, transpose(kh)) * (1.0 / math.sqrt(dh))
    valid = None
    if key_validity is not None:
        kv = np.asarray(key_validity, dtype=bool)
        valid = kv[..., None, None, :]
    attn = masked_softmax(scores, valid)
    ctx = matmul(attn, vh)
    nd = ctx.data.ndim
    ctx = transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    ctx = reshape(ctx, lead + (q.shape[-2], d))
    out = linear(ctx, {"w": p["wo"], "b": p["bo"]})
    if key_validity is not None:
        any_valid = np.asarray(key_validity, dtype=bool).any(axis=-1)
        out = out * any_valid.astype(np.float64)[..., None, None]
    return out


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    total_steps: int = 1
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


def cosine_lr(base, t, total):
    if t >= total:
        return 0.0
    return base * 0.5 * (1.0 + math.cos(math.pi * t / total))


def adamw_step(params, opt):
    """One AdamW update with decoupled weight decay on matrices; lr from the cosine schedule."""
    lr = cosine_lr(opt.lr, opt.t, opt.total_steps)
    b1, b2 = opt.betas
    opt.t += 1
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if p.data.ndim >= 2 and opt.weight_decay:
            p.data -= lr * opt.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    params.step += 1
    return params


# ------------------------------------------------------------ gradient check


def grad_check(loss_fn, params, eps=1e-5, max_elements=10_000, seed=0, floor=1e-6):
    """Largest relative gap between backprop and central differences.

    ``loss_fn()`` must rebuild the graph from ``params`` on each call. Above
    ``max_elements`` parameter entries, a seeded sample is checked. Entries
    whose gradients are both below ``floor`` are compared on an absolute scale
    of ``floor``.
    """
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"non-finite loss {loss.data}")
    loss.backward()
    analytic = params.grads()

    coords = [(name, i) for name, t in params.items() for i in range(t.data.size)]
    if len(coords) > max_elements:
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in np.sort(rng.choice(len(coords), max_elements, replace=False))]
    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = float(loss_fn().data)
        flat[i] = old - eps
        down = float(loss_fn().data)
        flat[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
        num = (up - down) / (2 * eps)
        ana = analytic[name].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    params.zero_grad()
    return worst


# ------------------------------------------------------------- binary store

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def write_tensor_store(directory, arrays, header=()):
    """Write ``arrays`` (name -> ndarray) as one little-endian float64 blob plus a text manifest.

    ``header`` is a sequence of ``(key, value)`` lines placed before the tensor table.
    """
    os.makedirs(directory, exist_ok=True)
    lines = [f"{k} {v}" for k, v in header]
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor {name} shape={shape} offset={offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    with open(os.path.join(directory, BLOB), "wb") as fh:
        for c in chunks:
            fh.write(c)
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tensor_store(directory):
    """Inverse of :func:`write_tensor_store`; returns ``(header dict, arrays)``."""
    with open(os.path.join(directory, MANIFEST), encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    with open(os.path.join(directory, BLOB), "rb") as fh:
        blob = fh.read()
    header, arrays = {}, {}
    for ln in lines:
        if not ln.strip():
            continue
        key, _, rest = ln.partition(" ")
        if key != "tensor":
            header[key] = rest
            continue
        name, shape_s, off_s = rest.split(" ")
        if not (shape_s.startswith("shape=") and off_s.startswith("offset=")):
            raise ValueError(f"bad manifest line: {ln!r}")
        shape_s = shape_s[len("shape="):]
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        off = int(off_s[len("offset="):])
        n = int(np.prod(shape)) if shape else 1
        if off < 0 or off + 8 * n > len(blob):
            raise ValueError(f"tensor {name} runs past the end of the blob")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
    return header, arrays
