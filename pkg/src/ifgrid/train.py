"""Teacher-forced training loop with Adam, step-decay LR, and checkpointing."""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import autodiff as ad
from .action_head import action_loss
from .config import RunConfig
from .instruction import COMPLETE_ID, SelectorState, aux_loss
from .lang import Vocab, build_vocab
from .mask_head import mask_loss, match_gt_mask
from .model import (EpisodeState, encode_episode, init_agent_params,
                    obs_arrays, step_forward)
from .sim import ACTIONS, COMPLETE, MANIP_ACTIONS, observe, step
from .tasks import _mask_for, task_scene


def episode_cache(episode, cfg):
    """Replay the expert once and record per-timestep observation arrays,
    action targets, matched mask slots, and selector bookkeeping."""
    task = episode["task"]
    scene = task_scene(task)
    pose = scene.start_pose
    steps = []
    for j, seg in enumerate(episode["segments"]):
        first = True
        for action, _cls, oid in seg["steps"]:
            views = observe(scene, pose, k_views=cfg.k_views,
                            n_slots=cfg.n_slots)
            feats, rho, valid, masks, _ = obs_arrays(views)
            entry = {
                "feats": feats, "rho": rho, "valid": valid,
                "m": j + 1, "reinit": first,
                "action_id": (COMPLETE_ID if action == COMPLETE
                              else ACTIONS.index(action)),
                "gt_slot": None,
            }
            first = False
            if action in MANIP_ACTIONS:
                gt_mask = _mask_for(scene, pose, oid)
                idx, _iou = match_gt_mask(gt_mask, masks)
                entry["gt_slot"] = idx
            steps.append(entry)
            if action != COMPLETE:
                mask = _mask_for(scene, pose, oid) \
                    if action in MANIP_ACTIONS else None
                pose, ok = step(scene, pose, action, mask)
                if not ok:
                    raise RuntimeError(
                        f"expert action {action} failed while caching "
                        f"episode {episode['seed']}")
    return steps


def episode_loss(store, cfg, vocab, episode, cache, rng):
    """Total teacher-forced loss for one episode (action + mask + auxiliary)."""
    s_list, h_g = encode_episode(store, cfg, vocab, episode["directive"],
                                 train=True, rng=rng)
    state = EpisodeState(store, cfg, s_list, h_g)
    p_a_seq, targets, mask_terms = [], [], []
    for ts in cache:
        if cfg.selection:
            state.selector = SelectorState(m=min(ts["m"], state.L), L=state.L)
        if ts["reinit"]:
            state.pending_reinit = True
        out = step_forward(store, cfg, state, ts["feats"], ts["rho"],
                           ts["valid"], train=True, rng=rng)
        p_a_seq.append(out["p_a"])
        targets.append(ts["action_id"])
        if ts["gt_slot"] is not None:
            mask_terms.append(mask_loss(out["p_m"], ts["gt_slot"]))
    loss = action_loss(p_a_seq, targets)
    if mask_terms:
        total = mask_terms[0]
        for t in mask_terms[1:]:
            total = ad.add(total, t)
        loss = ad.add(loss, ad.scale(total, 1.0 / len(mask_terms)))
    if cfg.two_stage:
        aux, count = aux_loss(store, s_list, episode["segments"], cfg.d)
        if count > 0:
            loss = ad.add(loss, aux)
    return loss


def _episode_rng(cfg, epoch, index):
    return np.random.default_rng(
        (cfg.seed * 1_000_003 + epoch * 10_007 + index) % (2 ** 63))


def save_agent(store, cfg, vocab, path, include_adam=True, meta=None):
    ad.save_checkpoint(store, path, include_adam=include_adam)
    side = dict(meta or {})
    side["config"] = cfg.to_dict()
    side["vocab"] = vocab.tokens
    with open(path + ".json", "w") as f:
        json.dump(side, f, sort_keys=True)


def load_agent(path):
    """Returns (store, cfg, vocab, meta) from a checkpoint and its sidecar."""
    store = ad.load_checkpoint(path)
    with open(path + ".json") as f:
        side = json.load(f)
    cfg = RunConfig.from_dict(side["config"])
    vocab = Vocab(side["vocab"])
    return store, cfg, vocab, side


def train(cfg, splits, out_dir=None, log=None, resume_from=None,
          eval_every=1):
    """Full training run.  Returns (store, vocab, history).

    Per-episode RNG streams are keyed by (seed, epoch, episode index) so a
    run resumed from an epoch checkpoint reproduces the original trajectory.
    """
    from .rollout import evaluate

    def say(msg):
        if log:
            log(msg)

    vocab = build_vocab(splits["train"])
    store = init_agent_params(cfg, len(vocab))
    start_epoch = 1
    if resume_from is not None:
        store, _cfg, vocab, side = load_agent(resume_from)
        start_epoch = side.get("epoch", 0) + 1
    say(f"caching {len(splits['train'])} expert demos")
    caches = [episode_cache(ep, cfg) for ep in splits["train"]]
    sched = ad.Schedule(cfg.lr, cfg.halve_epochs)
    n = len(splits["train"])
    history = []
    best = (-1.0, None)
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.time()
        lr = sched.lr(epoch)
        order = np.random.default_rng(
            cfg.seed * 100_003 + epoch).permutation(n)
        epoch_loss = 0.0
        # a batch holds cfg.batch_size decision steps (the sample unit of
        # every loss term); whole episodes are kept contiguous for the
        # recurrent state
        batches = []
        current, step_count = [], 0
        for ei in order:
            current.append(int(ei))
            step_count += len(caches[int(ei)])
            if step_count >= cfg.batch_size:
                batches.append(current)
                current, step_count = [], 0
        if current:
            batches.append(current)
        for bi, batch in enumerate(batches):
            store.zero_grads()
            for ei in batch:
                rng = _episode_rng(cfg, epoch, ei)
                loss = episode_loss(store, cfg, vocab, splits["train"][ei],
                                    caches[ei], rng)
                val = float(loss.data)
                if not np.isfinite(val):
                    raise RuntimeError(
                        f"non-finite loss in epoch {epoch}, batch {bi} "
                        f"(episode index {ei})")
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
                epoch_loss += val / n
            store.adam_step(lr)
        entry = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss,
                 "seconds": time.time() - t0}
        if eval_every and (epoch % eval_every == 0 or epoch == cfg.epochs):
            report, _ = evaluate(store, cfg, vocab, splits["valid_seen"])
            entry["valid_seen_task"] = report.task
            entry["valid_seen_goal_cond"] = report.goal_cond
            if report.task >= best[0]:
                best = (report.task, epoch)
        history.append(entry)
        say(f"epoch {epoch:2d}  lr {lr:.2e}  loss {epoch_loss:8.4f}"
            + (f"  valid Task {entry['valid_seen_task']:5.1f}%"
               if "valid_seen_task" in entry else "")
            + f"  ({entry['seconds']:.0f}s)")
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            save_agent(store, cfg, vocab,
                       os.path.join(out_dir, f"epoch{epoch:03d}.ckpt"),
                       meta={"epoch": epoch, "history": history})
            if best[1] == epoch:
                save_agent(store, cfg, vocab,
                           os.path.join(out_dir, "best.ckpt"),
                           meta={"epoch": epoch, "history": history})
    return store, vocab, history
