"""Small layer helpers on top of the autodiff primitives."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_linear(store, name, in_dim, out_dim, rng):
    s = 1.0 / np.sqrt(in_dim)
    store.add(f"{name}.W", rng.uniform(-s, s, (out_dim, in_dim)))
    store.add(f"{name}.b", np.zeros(out_dim))


def linear(store, name, x):
    """y = W x + b for 1D x, or x W^T + b row-wise for 2D x."""
    W = store[f"{name}.W"]
    b = store[f"{name}.b"]
    if x.data.ndim == 1:
        return ad.add(ad.matmul(W, x), b)
    return ad.add(ad.matmul(x, ad.transpose(W)), b)


def init_lstm(store, name, in_dim, hid_dim, rng):
    s = 1.0 / np.sqrt(hid_dim + in_dim)
    store.add(f"{name}.W", rng.uniform(-s, s, (4 * hid_dim, in_dim + hid_dim)))
    b = np.zeros(4 * hid_dim)
    b[hid_dim:2 * hid_dim] = 1.0   # forget-gate bias
    store.add(f"{name}.b", b)


def lstm_step(store, name, x, h, c):
    """One recurrent cell step; returns (h', c')."""
    hid = h.data.shape[0]
    z = ad.add(ad.matmul(store[f"{name}.W"], ad.concat([x, h])),
               store[f"{name}.b"])
    i = ad.sigmoid(ad.narrow(z, 0, hid))
    f = ad.sigmoid(ad.narrow(z, hid, 2 * hid))
    g = ad.tanh(ad.narrow(z, 2 * hid, 3 * hid))
    o = ad.sigmoid(ad.narrow(z, 3 * hid, 4 * hid))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    h2 = ad.mul(o, ad.tanh(c2))
    return h2, c2


def zeros(dim):
    return ad.Tensor(np.zeros(dim, dtype=np.float32))


def dot(a, b):
    return ad.tsum(ad.mul(a, b))
