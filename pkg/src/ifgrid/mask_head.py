"""Stage-two object specification: single-head self-attention over the
center-view candidates and per-candidate selection probabilities."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .instruction import N_OBJ, N_PAIR_ACTIONS
from .sim import mask_iou


def init_mask_params(store, d, rng):
    s = 1.0 / np.sqrt(d)
    store.add("att_q", rng.uniform(-s, s, (d, d)))
    store.add("att_k", rng.uniform(-s, s, (d, d)))
    store.add("att_v", rng.uniform(-s, s, (d, d)))
    nn.init_linear(store, "mask_ff", d, d, rng)
    store.add("W_m", rng.uniform(-s, s, (d + N_PAIR_ACTIONS + N_OBJ, d)))


def select_mask(store, v_center, s_m, q_ia, q_io):
    """Candidate probabilities and the chosen slot.

    v_center: (N, d) tensor of projected center-view features.  Returns
    (p_m tensor of N sigmoid scores, chosen index; ties to the lowest slot).
    """
    d = v_center.data.shape[1]
    q = ad.matmul(v_center, ad.transpose(store["att_q"]))
    k = ad.matmul(v_center, ad.transpose(store["att_k"]))
    val = ad.matmul(v_center, ad.transpose(store["att_v"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    att = ad.matmul(ad.softmax(scores, axis=-1), val)
    hidden = ad.add(ad.relu(nn.linear(store, "mask_ff", att)), v_center)
    g = ad.concat([s_m, q_ia, q_io])
    p_m = ad.sigmoid(ad.matmul(hidden, ad.matmul(g, store["W_m"])))
    chosen = int(np.argmax(p_m.data))
    return p_m, chosen


def match_gt_mask(gt_mask, candidate_masks):
    """(index, IoU) of the candidate with highest IoU; (None, 0.0) if all empty."""
    if not np.asarray(gt_mask).any():
        raise ValueError("match_gt_mask: ground-truth mask is empty")
    best_i, best = None, 0.0
    for i, cand in enumerate(candidate_masks):
        iou = mask_iou(gt_mask, cand)
        if iou > best:
            best_i, best = i, iou
    return best_i, best


def mask_loss(p_m, matched_index):
    """Summed BCE against a one-hot target at the matched slot."""
    target = np.zeros(p_m.data.shape, dtype=np.float32)
    target[matched_index] = 1.0
    return ad.binary_cross_entropy(p_m, target)
