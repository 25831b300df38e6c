"""Stage-one interpretation: instruction selector and the visual-input-free
pair decoder that maps the selected instruction feature to a tentative
(action, object-class) sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .sim import ACTIONS, N_ACTIONS, N_CLASSES, NAV_ACTIONS

N_PAIR_ACTIONS = N_ACTIONS              # the 12 env actions; no COMPLETE here
N_OBJ = N_CLASSES + 1                   # object classes + None
NONE_OBJ_ID = N_CLASSES
COMPLETE_ID = N_ACTIONS                 # index in the action decoder's output
START_A = N_PAIR_ACTIONS                # extra embedding row: start symbol
START_O = N_OBJ


@dataclass
class SelectorState:
    m: int = 1            # 1-based instruction index
    L: int = 1
    done: bool = False
    advanced: bool = False  # true right after an increment (triggers reinit)


def advance_selector(state, p_a_prev):
    """Increment m iff the previous action distribution argmaxes to COMPLETE."""
    arr = p_a_prev.data if isinstance(p_a_prev, ad.Tensor) else np.asarray(p_a_prev)
    if int(np.argmax(arr)) != COMPLETE_ID:
        return SelectorState(state.m, state.L, state.done, advanced=False)
    if state.m >= state.L:
        return SelectorState(state.m, state.L, done=True, advanced=False)
    return SelectorState(state.m + 1, state.L, state.done, advanced=True)


class PairDecoderState:
    """Recurrent state of the two autoregressive pair-decoder streams."""

    def __init__(self, d):
        self.d = d
        self.h_a = nn.zeros(d)
        self.c_a = nn.zeros(d)
        self.h_o = nn.zeros(d)
        self.c_o = nn.zeros(d)
        self.prev_a = START_A
        self.prev_o = START_O

    def reinit(self, s_m):
        self.h_a = s_m
        self.c_a = nn.zeros(self.d)
        self.h_o = s_m
        self.c_o = nn.zeros(self.d)
        self.prev_a = START_A
        self.prev_o = START_O


def init_pair_params(store, d, rng):
    store.add("E_a", rng.normal(0, 0.1, (N_PAIR_ACTIONS + 1, d)))
    store.add("E_o", rng.normal(0, 0.1, (N_OBJ + 1, d)))
    nn.init_lstm(store, "pair_a", d, d, rng)
    nn.init_lstm(store, "pair_o", d, d, rng)
    nn.init_linear(store, "head_ia", d, N_PAIR_ACTIONS, rng)
    nn.init_linear(store, "head_io", d, N_OBJ, rng)
    store.add("p_nav_ia", rng.normal(0, 0.1, N_PAIR_ACTIONS))
    store.add("p_nav_io", rng.normal(0, 0.1, N_OBJ))


def decode_pair_step(store, state, teacher_a=None, teacher_o=None):
    """One autoregressive step; returns (p_ia, p_io).

    The argmax of each output becomes the next input unless a teacher-forced
    index is supplied.
    """
    x_a = ad.embedding(store["E_a"], state.prev_a)
    state.h_a, state.c_a = nn.lstm_step(store, "pair_a", x_a,
                                        state.h_a, state.c_a)
    p_ia = ad.softmax(nn.linear(store, "head_ia", state.h_a))

    x_o = ad.embedding(store["E_o"], state.prev_o)
    state.h_o, state.c_o = nn.lstm_step(store, "pair_o", x_o,
                                        state.h_o, state.c_o)
    p_io = ad.softmax(nn.linear(store, "head_io", state.h_o))

    state.prev_a = int(np.argmax(p_ia.data)) if teacher_a is None else teacher_a
    state.prev_o = int(np.argmax(p_io.data)) if teacher_o is None else teacher_o
    return p_ia, p_io


def downstream_feed(p_ia, p_io, store):
    """Pass-through for manipulation predictions; learned constants for nav."""
    if ACTIONS[int(np.argmax(p_ia.data))] in NAV_ACTIONS:
        return store["p_nav_ia"], store["p_nav_io"]
    return p_ia, p_io


def pair_targets(segment):
    """Ground-truth (action-id, object-id) pairs for one demo segment.

    Navigation segments are collapsed to minimum length with None objects;
    COMPLETE is excluded from the pair decoder's vocabulary.
    """
    from .tasks import minimize_navigation
    from .sim import CLASS_IDS, COMPLETE
    if segment["category"] == "Goto":
        acts = minimize_navigation(
            [a for a, _, _ in segment["steps"] if a != COMPLETE])
        return [(ACTIONS.index(a), NONE_OBJ_ID) for a in acts]
    out = []
    for action, cls, _oid in segment["steps"]:
        if action == COMPLETE:
            continue
        out.append((ACTIONS.index(action), CLASS_IDS[cls]))
    return out


def aux_loss(store, s_list, segments, d):
    """Teacher-forced cross-entropy of both pair-decoder streams.

    Returns (loss tensor averaged per position, number of positions).
    """
    terms = []
    count = 0
    for s_m, seg in zip(s_list, segments):
        targets = pair_targets(seg)
        if not targets:
            continue
        state = PairDecoderState(d)
        state.reinit(s_m)
        for a_id, o_id in targets:
            p_ia, p_io = decode_pair_step(store, state,
                                          teacher_a=a_id, teacher_o=o_id)
            terms.append(ad.cross_entropy(p_ia, a_id))
            terms.append(ad.cross_entropy(p_io, o_id))
            count += 1
    if not terms:
        return nn.zeros(1), 0
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / count), count
