"""Object-feature projection and hierarchical multi-view attention.

Per view: instruction-guided soft attention over the N detection features,
confidence-weighted sum into one vector per view.  Across views: a gate
(sigmoid by default, softmax as an ablation) conditioned on the instruction
merges the view summaries into a single visual feature.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .sim import FEATURE_DIM


def init_fusion_params(store, d, k_views, rng):
    nn.init_linear(store, "vis_proj", FEATURE_DIM, d, rng)
    for k in range(k_views):
        s = 1.0 / np.sqrt(d)
        store.add(f"W_s.{k}", rng.uniform(-s, s, (d, d)))
    s = 1.0 / np.sqrt(d)
    store.add("W_g", rng.uniform(-s, s, (d, d)))


def project_detections(store, raw_feats, valid, dropout_p=0.0, train=False,
                       rng=None):
    """Project (N, d_in) raw features to (N, d): linear, ReLU, dropout.

    `valid` is a 0/1 vector; null slots come out as exact zero rows.
    """
    if raw_feats.shape[1] != FEATURE_DIM:
        raise ValueError(
            f"project_detections: expected feature dim {FEATURE_DIM}, "
            f"got {raw_feats.shape[1]}")
    x = ad.Tensor(np.asarray(raw_feats, dtype=np.float32))
    proj = ad.relu(nn.linear(store, "vis_proj", x))
    if train and dropout_p > 0.0:
        proj = ad.dropout(proj, 1.0 - dropout_p, rng, train)
    gate = np.repeat(np.asarray(valid, dtype=np.float32)[:, None],
                     proj.data.shape[1], axis=1)
    return ad.mul(proj, ad.Tensor(gate))


def fuse_hierarchical(store, views, s_m, gate_kind="sigmoid"):
    """Fuse K views into one vector.

    `views` is a list of (V, rho): V an (N, d) tensor of projected features,
    rho an (N,) confidence array.  Returns (v_t, diagnostics).
    """
    if gate_kind not in ("sigmoid", "softmax"):
        raise ValueError(f"unknown gate kind {gate_kind!r}")
    summaries = []
    diag = {"alpha_s": [], "alpha_g": []}
    gate_logits = []
    for k, (V, rho) in enumerate(views):
        logits = ad.matmul(V, ad.matmul(store[f"W_s.{k}"], s_m))
        alpha = ad.softmax(logits)
        diag["alpha_s"].append(alpha.data.copy())
        weights = ad.mul(alpha, ad.Tensor(np.asarray(rho, dtype=np.float32)))
        v_k = ad.matmul(ad.transpose(V), weights)
        summaries.append(v_k)
        gate_logits.append(nn.dot(v_k, ad.matmul(store["W_g"], s_m)))

    if gate_kind == "sigmoid":
        gates = [ad.sigmoid(gl) for gl in gate_logits]
    else:
        stacked = ad.concat([_as1d(gl) for gl in gate_logits])
        sm = ad.softmax(stacked)
        gates = [ad.narrow(sm, k, k + 1) for k in range(len(summaries))]

    v_t = None
    for g, v_k in zip(gates, summaries):
        term = ad.mul(g, v_k)
        v_t = term if v_t is None else ad.add(v_t, term)
        diag["alpha_g"].append(float(g.data.reshape(-1)[0]))
    return v_t, diag


def _as1d(scalar_tensor):
    # tsum yields a 0-d tensor; give it shape (1,) so concat/softmax work
    def back(g):
        ad._accum(scalar_tensor, g.reshape(scalar_tensor.data.shape))
    out = ad.Tensor(scalar_tensor.data.reshape(1))
    if scalar_tensor.requires_grad or scalar_tensor._parents:
        out.requires_grad = True
        out._parents = (scalar_tensor,)
        out._backward = back
    return out
