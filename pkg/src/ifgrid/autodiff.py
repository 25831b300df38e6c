"""Minimal dense-tensor reverse-mode autodiff.

Covers exactly the ops the agent needs: matmul, add (with bias broadcast),
elementwise multiply, concat, softmax, sigmoid, tanh, relu, sum, embedding
lookup, dropout, cross-entropy and binary cross-entropy.  Training runs in
float32; the finite-difference checker runs the same graph in float64.
"""

from __future__ import annotations

import struct

import numpy as np

_LOG_EPS = 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        elif isinstance(data, np.floating):
            # 0-d results of numpy ops collapse to scalar types; keep their
            # precision instead of forcing float32
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward):
    out = Tensor(data)
    track = any(p.requires_grad or p._parents for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.requires_grad or t._parents:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype)
        else:
            t.grad += g


def matmul(a, b):
    """Matrix product for 2D@2D, 2D@1D and 1D@2D operand shapes."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def back(g):
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def back(g):
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def back(g):
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    return _result(out, (a, b), back)


def add(a, b):
    """Elementwise add; also supports a 1D bias broadcast over 2D rows."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def back(g):
            _accum(a, g)
            _accum(b, g)
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        def back(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    else:
        raise ShapeError(f"add: {ad.shape} vs {bd.shape}")
    return _result(ad + bd, (a, b), back)


def mul(a, b):
    """Elementwise multiply; either operand may be a scalar (size-1) tensor."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape and ad.size != 1 and bd.size != 1:
        raise ShapeError(f"mul: {ad.shape} vs {bd.shape}")
    out = ad * bd

    def back(g):
        ga = g * bd
        gb = g * ad
        if ad.size == 1 and ga.shape != ad.shape:
            ga = ga.sum().reshape(ad.shape)
        if bd.size == 1 and gb.shape != bd.shape:
            gb = gb.sum().reshape(bd.shape)
        _accum(a, ga)
        _accum(b, gb)

    return _result(out, (a, b), back)


def scale(a, c):
    """Multiply by a python constant."""
    def back(g):
        _accum(a, g * c)
    return _result(a.data * c, (a,), back)


def concat(parts, axis=0):
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def back(g):
        ofs = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(ofs, ofs + s)
            _accum(p, g[tuple(idx)])
            ofs += s

    return _result(out, tuple(parts), back)


def stack_rows(parts):
    """Stack 1D tensors into a 2D tensor, one per row."""
    out = np.stack([p.data for p in parts])

    def back(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _result(out, tuple(parts), back)


def narrow(a, start, stop):
    """Contiguous slice along the last axis."""
    out = a.data[..., start:stop]

    def back(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)

    return _result(out, (a,), back)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2D, got {a.data.shape}")

    def back(g):
        _accum(a, g.T)
    return _result(a.data.T, (a,), back)


def softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out)

    return _result(out, (a,), back)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accum(a, g * out * (1.0 - out))
    return _result(out, (a,), back)


def tanh(a):
    out = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out * out))
    return _result(out, (a,), back)


def relu(a):
    out = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))
    return _result(out, (a,), back)


def tsum(a):
    def back(g):
        _accum(a, np.full_like(a.data, float(g)))
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), back)


def embedding(table, indices):
    """Row lookup: int index -> 1D row, list of ints -> 2D rows."""
    single = isinstance(indices, (int, np.integer))
    idx = [int(indices)] if single else [int(i) for i in indices]
    out = table.data[idx]
    if single:
        out = out[0]

    def back(g):
        full = np.zeros_like(table.data)
        g2 = g[None, :] if single else g
        np.add.at(full, idx, g2)
        _accum(table, full)

    return _result(out, (table,), back)


def dropout(a, keep_prob, rng, train):
    """Inverted dropout; exact identity when not training."""
    if not train or keep_prob >= 1.0:
        return a
    mask = (rng.random(a.data.shape) < keep_prob).astype(a.data.dtype) / keep_prob

    def back(g):
        _accum(a, g * mask)
    return _result(a.data * mask, (a,), back)


def cross_entropy(p, target):
    """-log p[target] for a probability vector p."""
    pt = max(float(p.data[target]), _LOG_EPS)
    out = np.asarray(-np.log(pt), dtype=p.data.dtype)

    def back(g):
        full = np.zeros_like(p.data)
        full[target] = -float(g) / pt
        _accum(p, full)

    return _result(out, (p,), back)


def binary_cross_entropy(p, targets):
    """Summed BCE between probabilities p in [0,1] and a 0/1 target array."""
    pd = p.data
    if pd.min() < 0.0 or pd.max() > 1.0:
        raise ValueError(f"binary_cross_entropy: probabilities outside [0,1]: "
                         f"min={pd.min()}, max={pd.max()}")
    t = np.asarray(targets, dtype=pd.dtype)
    if t.shape != pd.shape:
        raise ShapeError(f"binary_cross_entropy: {pd.shape} vs {t.shape}")
    pc = np.clip(pd, _LOG_EPS, 1.0 - _LOG_EPS)
    out = np.asarray(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)).sum(),
                     dtype=pd.dtype)

    def back(g):
        inside = (pd > _LOG_EPS) & (pd < 1.0 - _LOG_EPS)
        _accum(p, float(g) * inside * (-(t / pc) + (1 - t) / (1 - pc)))

    return _result(out, (p,), back)


def backward(loss):
    """Accumulate d loss / d leaf into .grad for all requires_grad leaves."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Parameters, optimizer, schedule


class ParamStore:
    """Named parameters plus Adam moment state."""

    def __init__(self):
        self.params = {}
        self._m = {}
        self._v = {}
        self.step_count = 0

    def add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def zero_grads(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        for name, t in self.params.items():
            if t.grad is None:
                raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        self.step_count += 1
        t_ = self.step_count
        bc1 = 1.0 - beta1 ** t_
        bc2 = 1.0 - beta2 ** t_
        for name, p in self.params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
            p.grad = None


class Schedule:
    """Step-decay learning rate: halved at each listed epoch."""

    def __init__(self, base_lr, halve_epochs):
        self.base_lr = base_lr
        self.halve_epochs = sorted(halve_epochs)

    def lr(self, epoch):
        n = sum(1 for e in self.halve_epochs if e <= epoch)
        return self.base_lr * (0.5 ** n)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(fn, tensors, tolerance=1e-4, step=1e-5):
    """Compare reverse-mode grads of scalar fn(tensors) to central differences.

    Tensors are promoted to float64 for the check.  Returns a report dict
    with per-tensor max relative error and an overall pass flag.
    """
    t64 = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in tensors]
    loss = fn(t64)
    backward(loss)
    report = {"per_tensor": [], "pass": True, "tolerance": tolerance}
    for i, t in enumerate(t64):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(fn(t64).data)
            flat[j] = orig - step
            dn = float(fn(t64).data)
            flat[j] = orig
            nflat[j] = (up - dn) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        err = float((np.abs(analytic - numeric) / denom).max()) if flat.size else 0.0
        report["per_tensor"].append({"index": i, "max_rel_err": err})
        if err > tolerance:
            report["pass"] = False
    return report


# ---------------------------------------------------------------------------
# Checkpoint I/O
#
# Layout: u32 format version, u64 param count, then per record:
# u32 name length, UTF-8 name, u64 rank, u64 dims..., f32 values (row-major).
# Adam state is optionally appended with the same record layout.

_CKPT_VERSION = 1
_ADAM_M = "__adam_m__"
_ADAM_V = "__adam_v__"
_ADAM_T = "__adam_t__"


def _write_record(f, name, arr):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<Q", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(f):
    head = f.read(4)
    if len(head) < 4:
        return None
    (nlen,) = struct.unpack("<I", head)
    name = f.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<Q", f.read(8))
    dims = [struct.unpack("<Q", f.read(8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    vals = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
    return name, vals.astype(np.float32)


def save_checkpoint(store, path, include_adam=False):
    with open(path, "wb") as f:
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<Q", len(store.params)))
        for name, p in store.params.items():
            _write_record(f, name, p.data)
        if include_adam:
            _write_record(f, _ADAM_T, np.array([store.step_count], dtype=np.float32))
            for name in store.params:
                _write_record(f, _ADAM_M + name, store._m[name])
                _write_record(f, _ADAM_V + name, store._v[name])


def load_checkpoint(path):
    """Returns a ParamStore rebuilt from a checkpoint file."""
    store = ParamStore()
    with open(path, "rb") as f:
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", f.read(8))
        for _ in range(count):
            name, vals = _read_record(f)
            store.add(name, vals)
        while True:
            rec = _read_record(f)
            if rec is None:
                break
            name, vals = rec
            if name == _ADAM_T:
                store.step_count = int(vals[0])
            elif name.startswith(_ADAM_M):
                store._m[name[len(_ADAM_M):]] = vals.astype(np.float32)
            elif name.startswith(_ADAM_V):
                store._v[name[len(_ADAM_V):]] = vals.astype(np.float32)
    return store
