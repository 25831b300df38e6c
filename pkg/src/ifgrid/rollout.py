"""Greedy rollout, ensemble inference, metric evaluation, sub-goal protocol."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .instruction import COMPLETE_ID, SelectorState, advance_selector
from .metrics import EpisodeRecord, compute_metrics
from .model import EpisodeState, encode_episode, obs_arrays, step_forward
from .sim import (ACTIONS, COMPLETE, MANIP_ACTIONS, check_goal_conditions,
                  observe, step)
from .tasks import expert_length, task_scene, visible_slot


def _advance(cfg, state, prev_p_a):
    """Selector transition between timesteps; returns True when done."""
    if prev_p_a is None:
        return False
    if cfg.selection:
        nxt = advance_selector(state.selector, prev_p_a)
        if nxt.done:
            return True
        if nxt.advanced:
            state.pending_reinit = True
        state.selector = nxt
        return False
    if int(np.argmax(prev_p_a.data)) == COMPLETE_ID:
        state.complete_count += 1
        if state.complete_count >= state.L:
            return True
    return False


def _observe_arrays(scene, pose, cfg, rng=None):
    views = observe(scene, pose, k_views=cfg.k_views, n_slots=cfg.n_slots,
                    noise=cfg.detector_noise, rng=rng)
    return obs_arrays(views)


def rollout(store, cfg, vocab, episode, collect_diag=False):
    """Run the agent on one episode; returns an EpisodeRecord."""
    task = episode["task"]
    scene = task_scene(task)
    pose = scene.start_pose
    s_list, h_g = encode_episode(store, cfg, vocab, episode["directive"])
    state = EpisodeState(store, cfg, s_list, h_g)
    rec = EpisodeRecord(task_type=task["type"],
                        expert_len=expert_length(episode))
    noise_rng = np.random.default_rng(episode["seed"] + 555)
    prev_p_a = None
    fails = 0
    while rec.pred_len < cfg.max_steps and fails < cfg.max_fails:
        if _advance(cfg, state, prev_p_a):
            break
        feats, rho, valid, masks, _ = _observe_arrays(scene, pose, cfg,
                                                      noise_rng)
        out = step_forward(store, cfg, state, feats, rho, valid)
        a_idx = int(np.argmax(out["p_a"].data))
        action = COMPLETE if a_idx == COMPLETE_ID else ACTIONS[a_idx]
        slot = None
        success = True
        if action != COMPLETE:
            mask = None
            if action in MANIP_ACTIONS:
                slot = out["chosen"]
                if valid[0][slot] > 0:
                    mask = masks[slot]
            if action in MANIP_ACTIONS and mask is None:
                success = False
            else:
                pose, success = step(scene, pose, action, mask)
            if not success:
                fails += 1
        m_now = state.selector.m if cfg.selection else state.complete_count + 1
        entry = {"m": m_now, "action": action, "success": success,
                 "mask_slot": slot}
        if collect_diag:
            entry["alpha_g"] = out["diag"]["alpha_g"]
            if slot is not None and valid[0][slot] > 0:
                entry["mask_hex"] = sim_mask_hex(masks[slot])
        rec.timesteps.append(entry)
        rec.pred_len += 1
        prev_p_a = out["p_a"]
    rec.failures = fails
    rec.satisfied, rec.total = check_goal_conditions(scene, task)
    return rec


def sim_mask_hex(mask):
    return ["%04x" % int("".join("1" if b else "0" for b in row), 2)
            for row in mask]


def evaluate(store, cfg, vocab, episodes):
    records = [rollout(store, cfg, vocab, ep) for ep in episodes]
    return compute_metrics(records), records


# ---------------------------------------------------------------------------
# Ensemble inference

def _check_same_architecture(stores):
    ref = {n: p.data.shape for n, p in stores[0].params.items()}
    for s in stores[1:]:
        other = {n: p.data.shape for n, p in s.params.items()}
        if other != ref:
            raise ValueError("ensemble members have mismatched architectures")


def ensemble_rollout(stores, cfg, vocab, episode):
    """Average p_a and p_m across models; argmax drives a shared trajectory."""
    if not stores:
        raise ValueError("ensemble needs at least one checkpoint")
    _check_same_architecture(stores)
    task = episode["task"]
    scene = task_scene(task)
    pose = scene.start_pose
    states = []
    for store in stores:
        s_list, h_g = encode_episode(store, cfg, vocab, episode["directive"])
        states.append(EpisodeState(store, cfg, s_list, h_g))
    rec = EpisodeRecord(task_type=task["type"],
                        expert_len=expert_length(episode))
    noise_rng = np.random.default_rng(episode["seed"] + 555)
    prev_avg = None
    fails = 0
    while rec.pred_len < cfg.max_steps and fails < cfg.max_fails:
        done = False
        for state in states:
            done = _advance(cfg, state, prev_avg) or done
        if done:
            break
        feats, rho, valid, masks, _ = _observe_arrays(scene, pose, cfg,
                                                      noise_rng)
        outs = [step_forward(store, cfg, state, feats, rho, valid)
                for store, state in zip(stores, states)]
        avg_pa = np.mean([o["p_a"].data for o in outs], axis=0)
        avg_pm = np.mean([o["p_m"].data for o in outs], axis=0)
        a_idx = int(np.argmax(avg_pa))
        action = COMPLETE if a_idx == COMPLETE_ID else ACTIONS[a_idx]
        slot = None
        success = True
        if action != COMPLETE:
            mask = None
            if action in MANIP_ACTIONS:
                slot = int(np.argmax(avg_pm))
                if valid[0][slot] > 0:
                    mask = masks[slot]
            if action in MANIP_ACTIONS and mask is None:
                success = False
            else:
                pose, success = step(scene, pose, action, mask)
            if not success:
                fails += 1
        m_now = (states[0].selector.m if cfg.selection
                 else states[0].complete_count + 1)
        rec.timesteps.append({"m": m_now, "action": action,
                              "success": success, "mask_slot": slot})
        rec.pred_len += 1
        prev_avg = ad.Tensor(avg_pa)
    rec.failures = fails
    rec.satisfied, rec.total = check_goal_conditions(scene, task)
    return rec


# ---------------------------------------------------------------------------
# Sub-goal evaluation

def subgoal_postcondition(scene, pose, seg, cfg):
    cat = seg["category"]
    obj = scene.obj(seg["target_oid"])
    if cat == "Goto":
        return visible_slot(scene, pose, obj.oid, cfg.n_slots) is not None
    if cat == "Pickup":
        return obj.held
    if cat == "Put":
        return obj.parent == seg["recep_oid"]
    if cat == "Slice":
        return obj.sliced
    if cat == "Clean":
        return obj.clean
    if cat == "Heat":
        return obj.hot
    if cat == "Cool":
        return obj.cold
    if cat == "Toggle":
        return obj.on
    raise ValueError(f"unknown sub-goal category {cat}")


def _expert_step(scene, pose, action, oid):
    if action == COMPLETE:
        return pose
    mask = None
    if action in MANIP_ACTIONS:
        from .tasks import _mask_for
        mask = _mask_for(scene, pose, oid)
    pose, ok = step(scene, pose, action, mask)
    if not ok:
        raise RuntimeError(f"expert action {action} failed during replay")
    return pose


def evaluate_subgoals(store, cfg, vocab, episodes):
    """Replay the expert prefix, hand control over for one segment each.

    Returns {category: {"success": count, "n": count, "rate": pct}}.
    """
    table = {}
    for episode in episodes:
        task = episode["task"]
        segments = episode["segments"]
        for j, seg in enumerate(segments):
            scene = task_scene(task)
            pose = scene.start_pose
            s_list, h_g = encode_episode(store, cfg, vocab,
                                         episode["directive"])
            state = EpisodeState(store, cfg, s_list, h_g)
            # teacher-forced prefix: model state evolves along expert steps
            for pj in range(j):
                state.selector = SelectorState(m=pj + 1, L=state.L)
                state.pending_reinit = True
                for action, _cls, oid in segments[pj]["steps"]:
                    feats, rho, valid, _, _ = _observe_arrays(scene, pose, cfg)
                    step_forward(store, cfg, state, feats, rho, valid)
                    pose = _expert_step(scene, pose, action, oid)
            state.selector = SelectorState(m=j + 1, L=state.L)
            state.pending_reinit = True
            cap = 2 * len(seg["steps"])
            success = False
            for _ in range(cap):
                feats, rho, valid, masks, _ = _observe_arrays(scene, pose, cfg)
                out = step_forward(store, cfg, state, feats, rho, valid)
                a_idx = int(np.argmax(out["p_a"].data))
                if a_idx == COMPLETE_ID:
                    break
                action = ACTIONS[a_idx]
                mask = None
                if action in MANIP_ACTIONS:
                    slot = out["chosen"]
                    if valid[0][slot] > 0:
                        mask = masks[slot]
                if action in MANIP_ACTIONS and mask is None:
                    continue
                pose, _ok = step(scene, pose, action, mask)
                if subgoal_postcondition(scene, pose, seg, cfg):
                    success = True
                    break
            if not success:
                success = subgoal_postcondition(scene, pose, seg, cfg)
            row = table.setdefault(seg["category"], {"success": 0, "n": 0})
            row["n"] += 1
            row["success"] += int(success)
    for row in table.values():
        row["rate"] = 100.0 * row["success"] / row["n"]
    return table


def expert_subgoal_scores(episodes, cfg):
    """Upper bound: the expert executes each segment itself."""
    table = {}
    for episode in episodes:
        task = episode["task"]
        segments = episode["segments"]
        for j, seg in enumerate(segments):
            scene = task_scene(task)
            pose = scene.start_pose
            for pj in range(j):
                for action, _cls, oid in segments[pj]["steps"]:
                    pose = _expert_step(scene, pose, action, oid)
            for action, _cls, oid in seg["steps"]:
                pose = _expert_step(scene, pose, action, oid)
            success = subgoal_postcondition(scene, pose, seg, cfg)
            row = table.setdefault(seg["category"], {"success": 0, "n": 0})
            row["n"] += 1
            row["success"] += int(success)
    for row in table.values():
        row["rate"] = 100.0 * row["success"] / row["n"]
    return table
