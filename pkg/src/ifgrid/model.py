"""Agent glue: parameter construction and the per-timestep forward pass."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .action_head import ActionState, decode_action_step, init_action_params
from .fusion import fuse_hierarchical, init_fusion_params, project_detections
from .instruction import (N_OBJ, N_PAIR_ACTIONS, PairDecoderState,
                          SelectorState, downstream_feed, init_pair_params)
from .lang import encode_directive, init_encoder_params
from .mask_head import init_mask_params, select_mask


def init_agent_params(cfg, vocab_size, rng=None):
    rng = rng or np.random.default_rng(cfg.seed)
    store = ad.ParamStore()
    init_encoder_params(store, vocab_size, cfg.d, rng)
    init_pair_params(store, cfg.d, rng)
    init_fusion_params(store, cfg.d, cfg.k_views, rng)
    init_action_params(store, cfg.d, rng)
    init_mask_params(store, cfg.d, rng)
    if not cfg.selection:
        s = 1.0 / np.sqrt(cfg.d)
        store.add("W_sel", rng.uniform(-s, s, (cfg.d, cfg.d)))
    return store


def obs_arrays(views):
    """Detections -> (feats (K,N,d_in), rho (K,N), valid (K,N), masks, classes)."""
    feats = np.stack([[det.feature for det in view] for view in views])
    rho = np.array([[det.confidence for det in view] for view in views],
                   dtype=np.float32)
    valid = (rho > 0.0).astype(np.float32)
    center_masks = [det.mask for det in views[0]]
    center_classes = [det.class_id for det in views[0]]
    return feats, rho, valid, center_masks, center_classes


class EpisodeState:
    """All recurrent state the agent carries within one episode."""

    def __init__(self, store, cfg, s_list, h_g):
        self.cfg = cfg
        self.s_list = s_list
        self.h_g = h_g
        self.L = len(s_list)
        self.selector = SelectorState(m=1, L=self.L)
        self.pair = PairDecoderState(cfg.d)
        self.action = ActionState(h_g, cfg.d)
        self.pending_reinit = True      # selecting s_1 counts as a selection
        self.complete_count = 0         # used when selection is off


def encode_episode(store, cfg, vocab, directive, train=False, rng=None):
    return encode_directive(store, vocab, directive, cfg.d,
                            dropout_p=cfg.dropout, train=train, rng=rng)


def _soft_attended_instruction(store, state):
    S = ad.stack_rows(state.s_list)
    logits = ad.matmul(S, ad.matmul(store["W_sel"], state.action.h))
    alpha = ad.softmax(logits)
    return ad.matmul(ad.transpose(S), alpha)


def step_forward(store, cfg, state, feats, rho, valid, train=False, rng=None):
    """One model timestep given the current observation arrays.

    Returns a dict with p_a, p_m, chosen mask slot, and the fed s_m / q's.
    The caller drives the selector (rollout: from the previous p_a; training:
    from the expert's COMPLETE positions) before calling this.
    """
    from .instruction import decode_pair_step

    if cfg.selection:
        s_m = state.s_list[state.selector.m - 1]
    else:
        s_m = _soft_attended_instruction(store, state)

    if cfg.two_stage:
        if state.pending_reinit and cfg.selection:
            state.pair.reinit(s_m)
        state.pending_reinit = False
        p_ia, p_io = decode_pair_step(store, state.pair)
        q_ia, q_io = downstream_feed(p_ia, p_io, store)
    else:
        state.pending_reinit = False
        p_ia = p_io = None
        q_ia = nn.zeros(N_PAIR_ACTIONS)
        q_io = nn.zeros(N_OBJ)

    views = []
    for k in range(cfg.k_views):
        V = project_detections(store, feats[k], valid[k],
                               dropout_p=cfg.dropout, train=train, rng=rng)
        views.append((V, rho[k]))
    v_t, diag = fuse_hierarchical(store, views, s_m, gate_kind=cfg.gate)
    diag["v_t"] = v_t.data

    p_a = decode_action_step(store, state.action, v_t, s_m, q_ia, q_io)
    p_m, chosen = select_mask(store, views[0][0], s_m, q_ia, q_io)
    return {"p_a": p_a, "p_m": p_m, "chosen": chosen, "s_m": s_m,
            "p_ia": p_ia, "p_io": p_io, "diag": diag}
