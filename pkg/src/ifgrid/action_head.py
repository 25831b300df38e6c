"""Stage-two action prediction: recurrent decoder over the fused visual
feature, the selected instruction, and the tentative pair predictions."""

from __future__ import annotations

from . import autodiff as ad
from . import nn
from .instruction import N_OBJ, N_PAIR_ACTIONS
from .sim import N_ACTIONS


def init_action_params(store, d, rng):
    in_dim = d + d + N_PAIR_ACTIONS + N_OBJ
    nn.init_lstm(store, "act", in_dim, d, rng)
    nn.init_linear(store, "head_a", d, N_ACTIONS + 1, rng)


class ActionState:
    def __init__(self, h_g, d):
        self.h = h_g                # initialized from the goal encoding
        self.c = nn.zeros(d)


def decode_action_step(store, state, v_t, s_m, q_ia, q_io):
    """One recurrent step; returns p_a over the 12 actions + COMPLETE."""
    x = ad.concat([v_t, s_m, q_ia, q_io])
    state.h, state.c = nn.lstm_step(store, "act", x, state.h, state.c)
    return ad.softmax(nn.linear(store, "head_a", state.h))


def action_loss(p_a_seq, target_ids):
    """Mean cross-entropy over timesteps."""
    if len(p_a_seq) != len(target_ids):
        raise ValueError(
            f"action_loss: {len(p_a_seq)} predictions vs "
            f"{len(target_ids)} targets")
    total = None
    for p, t in zip(p_a_seq, target_ids):
        term = ad.cross_entropy(p, t)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(target_ids))
