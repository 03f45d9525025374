"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the NTP networks need are provided. Each op records a
closure that maps the output gradient to parent gradients; ``backward`` runs
them in reverse topological order.
"""
from __future__ import annotations

import contextlib
import json
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from ntp.errors import CheckpointError, NonFiniteError, ShapeError, TrainingDivergenceError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a tensor op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def one_minus(a: Tensor) -> Tensor:
    return _node(1.0 - a.data, (a,), lambda g: (-g,))


# ----------------------------------------------------------------------------- structural


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a[..., n] @ w[n, m]``."""
    if w.data.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {w.shape}")

    def back(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, w.shape[1])
        return ga, gw

    return _node(a.data @ w.data, (a, w), back)


def dense(x: Tensor, w: Tensor, b: Tensor, relu_out: bool = False) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` of shape [in, out]; optional relu."""
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias {b.shape} does not match weights {w.shape}")
    y = add(matmul(x, w), b)
    return relu(y) if relu_out else y


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; idx may have any shape."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        flat = idx.reshape(-1)
        if flat.size:
            order = np.argsort(flat, kind="stable")
            srt = flat[order]
            starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
            gflat = g.reshape((-1,) + a.shape[1:])[order]
            out[srt[starts]] = np.add.reduceat(gflat, starts, axis=0)
        return (out,)

    return _node(a.data[idx], (a,), back)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a [H] vector (or [B, H] batch along a new axis 1) n times."""
    if a.data.ndim == 1:
        return _node(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,), lambda g: (g.sum(axis=0),))
    return _node(np.repeat(a.data[:, None, :], n, axis=1), (a,), lambda g: (g.sum(axis=1),))


def segment_sum(x: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Sum rows of x [R, H] into n buckets given by ``seg`` [R]."""
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:])
    if len(seg) and np.all(seg[1:] >= seg[:-1]):
        # sorted segments: reduceat is much faster than add.at
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        out[seg[starts]] = np.add.reduceat(x.data, starts, axis=0)
    else:
        np.add.at(out, seg, x.data)
    return _node(out, (x,), lambda g: (g[seg],))


def segment_max(x: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Elementwise max of the rows of x [R, H] in each of n non-empty buckets; ``seg`` must be sorted.

    The gradient goes to the first maximising row of each bucket.
    """
    seg = np.asarray(seg, dtype=np.int64)
    if len(seg) == 0 or np.any(seg[1:] < seg[:-1]):
        raise ShapeError("segment_max needs sorted, non-empty segments")
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    if len(starts) != n or seg[0] != 0 or seg[-1] != n - 1:
        raise ShapeError("segment_max needs every bucket to be non-empty")
    out = np.maximum.reduceat(x.data, starts, axis=0)
    hit = (x.data == out[seg]).astype(np.int64)
    csum = np.cumsum(hit, axis=0)
    before = np.where(starts[:, None] > 0, csum[np.maximum(starts - 1, 0)], 0)
    first = (hit == 1) & ((csum - before[seg]) == 1)

    def back(g):
        return (np.where(first, g[seg], 0.0),)

    return _node(out, (x,), back)


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    def back(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        return (out,)

    return _node(a.data[..., start:stop].copy(), (a,), back)


def tsum(a: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), back)


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(a * w)`` for a constant weight array."""
    w = np.asarray(w, dtype=np.float64)
    return _node(np.asarray((a.data * w).sum()), (a,), lambda g: (g * w,))


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    """Max over axis 1 of x [B, L, H] restricted to mask [B, L] (each row needs one valid entry)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ShapeError("masked_max over an empty sequence")
    filled = np.where(mask[:, :, None], x.data, -np.inf)
    arg = filled.argmax(axis=1)  # [B, H]
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _node(out, (x,), back)


def conv1d_temporal(seq: Tensor, w: Tensor, b: Tensor, width: int, mask: np.ndarray | None = None) -> Tensor:
    """Temporal convolution with zero padding so every position gets an output.

    seq: [N, d] or [B, L, d]; w: [m, d*width]; b: [m]. Row j of the output is
    ``w @ concat(frames j-width//2 .. j+width//2) + b``. With ``mask`` [B, L],
    positions past each sequence's end act as padding.
    """
    if width % 2 != 1:
        raise ShapeError("conv width must be odd")
    squeeze = seq.data.ndim == 2
    x = seq.data[None] if squeeze else seq.data
    B, L, d = x.shape
    m = w.shape[0]
    if w.shape != (m, d * width) or b.shape != (m,):
        raise ShapeError(f"conv weights {w.shape}/{b.shape} do not fit input dim {d} width {width}")
    if L < 1:
        raise ShapeError("conv over an empty sequence")
    mk = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(B, L)
    xm = x * mk[:, :, None]
    half = width // 2
    pad = np.zeros((B, L + 2 * half, d))
    pad[:, half:half + L] = xm
    cols = np.concatenate([pad[:, o:o + L] for o in range(width)], axis=2)  # [B, L, width*d]
    out = cols @ w.data.T + b.data

    def back(g):
        g3 = g[None] if squeeze else g
        gcols = g3 @ w.data  # [B, L, width*d]
        gpad = np.zeros_like(pad)
        for o in range(width):
            gpad[:, o:o + L] += gcols[:, :, o * d:(o + 1) * d]
        gx = gpad[:, half:half + L] * mk[:, :, None]
        gw = g3.reshape(-1, m).T @ cols.reshape(-1, width * d)
        gb = g3.reshape(-1, m).sum(axis=0)
        return (gx[0] if squeeze else gx), gw, gb

    return _node(out[0] if squeeze else out, (seq, w, b), back)


# ----------------------------------------------------------------------------- losses


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


NEG_BIG = -1e9


def softmax_cross_entropy(logits: Tensor, target, class_mask: np.ndarray | None = None) -> Tensor:
    """Per-row cross entropy, numerically stabilised by max subtraction.

    ``target`` is an int array [B] (or int for a single row) or a soft
    distribution [B, C]. ``class_mask`` [B, C] excludes classes (their
    probability is forced to zero).
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    if class_mask is not None:
        cm = np.asarray(class_mask, dtype=bool).reshape(z2.shape)
        z2 = np.where(cm, z2, NEG_BIG)
    C = z2.shape[1]
    tarr = np.asarray(target)
    if np.issubdtype(tarr.dtype, np.integer):
        t_idx = np.atleast_1d(tarr).astype(np.int64)
        if t_idx.shape[0] != z2.shape[0] or (t_idx < 0).any() or (t_idx >= C).any():
            raise ShapeError("target index outside the class range")
        tgt = np.zeros_like(z2)
        tgt[np.arange(len(t_idx)), t_idx] = 1.0
    else:
        tgt = tarr.astype(np.float64).reshape(z2.shape)
    zmax = z2.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z2 - zmax).sum(axis=1))
    p = np.exp(z2 - lse[:, None])
    safe = np.where(tgt > 0, z2, 0.0)
    loss = (tgt * (lse[:, None] - safe)).sum(axis=1)

    def back(g):
        gz = (p * tgt.sum(axis=1, keepdims=True) - tgt) * np.asarray(g).reshape(-1, 1)
        return (gz[0] if single else gz,)

    return _node(loss[0] if single else loss, (logits,), back)


def sigmoid_bce(logit: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy on logits (log-sum-exp form)."""
    x = logit.data
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), x.shape)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(np.asarray(x, dtype=np.float64))
    return _node(loss, (logit,), lambda g: (g * (s - t),))


# ----------------------------------------------------------------------------- recurrent cell


GRU_PARAMS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_cell(x: Tensor, h_prev: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Gated recurrent update: h = (1-z) * h_prev + z * tanh(W_h x + U_h (r * h_prev) + b_h)."""
    p = params
    if x.shape[-1] != p["W_z"].shape[0] or h_prev.shape[-1] != p["U_z"].shape[0]:
        raise ShapeError(f"gru input {x.shape} / state {h_prev.shape} mismatch")
    z = sigmoid(add(add(matmul(x, p["W_z"]), matmul(h_prev, p["U_z"])), p["b_z"]))
    r = sigmoid(add(add(matmul(x, p["W_r"]), matmul(h_prev, p["U_r"])), p["b_r"]))
    cand = tanh(add(add(matmul(x, p["W_h"]), matmul(mul(r, h_prev), p["U_h"])), p["b_h"]))
    return add(mul(one_minus(z), h_prev), mul(z, cand))


# ----------------------------------------------------------------------------- parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


class ParamStore:
    """Named parameters with Adam moment buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.params):
            missing = set(self.params) ^ set(values)
            raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
        for k, v in values.items():
            self.params[k].data = np.array(v, dtype=np.float64)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter, then zero the gradients."""
    for name, p in store.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}")
    store.t += 1
    c1 = 1.0 - beta1 ** store.t
    c2 = 1.0 - beta2 ** store.t
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


# ----------------------------------------------------------------------------- gradient oracle


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor] | ParamStore, tolerance: float = 1e-4, *,
               h: float = 1e-5, n_coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6, refine: int = 2) -> dict:
    """Compare backward() against central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``. With
    ``n_coords`` only that many randomly chosen coordinates (over all
    parameters) are probed. A coordinate that misses the tolerance is probed
    again with steps h/10, h/100 (``refine`` times): a step that straddles a
    relu or max kink stops doing so once it is small enough, whereas a wrong
    analytic gradient disagrees at every step. ``n_refined`` counts the
    coordinates that needed a smaller step.
    """
    plist = list(params.params.values()) if isinstance(params, ParamStore) else list(params)
    for p in plist:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in plist]
    coords = [(i, j) for i, p in enumerate(plist) for j in range(p.data.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        coords = [coords[k] for k in rng.choice(len(coords), size=n_coords, replace=False)]

    def central(flat, j, step):
        orig = flat[j]
        flat[j] = orig + step
        fp = float(fn().data)
        flat[j] = orig - step
        fm = float(fn().data)
        flat[j] = orig
        return (fp - fm) / (2 * step)

    worst, worst_at, refined = 0.0, None, 0
    with no_grad():
        for i, j in coords:
            flat = plist[i].data.reshape(-1)
            ana = float(analytic[i].reshape(-1)[j])
            for k in range(refine + 1):
                num = central(flat, j, h * 10.0 ** -k)
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                if rel < tolerance:
                    refined += k > 0
                    break
            if rel > worst:
                worst, worst_at = rel, (i, j, ana, num)
    for p in plist:
        p.grad = None
    return {"max_rel_err": worst, "worst": worst_at, "n_checked": len(coords), "n_refined": refined,
            "passed": worst < tolerance, "tolerance": tolerance}


# ----------------------------------------------------------------------------- checkpoint container


def dump_params(values: "OrderedDict[str, np.ndarray]", meta: dict) -> str:
    """JSON text; floats use repr so values round-trip bit-exactly."""
    doc = {"meta": meta, "params": [
        {"name": k, "shape": list(v.shape), "values": [float(x) for x in np.asarray(v).reshape(-1)]}
        for k, v in values.items()
    ]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def parse_params(text: str) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    try:
        doc = json.loads(text)
        out = OrderedDict()
        for rec in doc["params"]:
            arr = np.asarray(rec["values"], dtype=np.float64)
            shape = tuple(rec["shape"])
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"value count mismatch for {rec['name']}")
            out[rec["name"]] = arr.reshape(shape)
        return doc["meta"], out
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
