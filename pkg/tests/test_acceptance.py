"""End-to-end acceptance suite.

Each test here states a contract the package must honor: gradient
correctness, conformance of the fusion / mask equations to direct
recomputation, selector semantics, dataset soundness, desk-scale learning
targets, ablation orderings, sub-goal patterns, metric identities,
ensemble semantics, and bitwise determinism.  Oracles are written as
straight-line numpy, independent of the model code.
"""

import dataclasses
import time

import numpy as np
import pytest

from ifgrid import autodiff as ad
from ifgrid import nn, rollout, train
from ifgrid.action_head import ActionState, decode_action_step
from ifgrid.config import RunConfig
from ifgrid.fusion import fuse_hierarchical, project_detections
from ifgrid.instruction import (COMPLETE_ID, N_OBJ, N_PAIR_ACTIONS,
                                PairDecoderState, SelectorState,
                                advance_selector, decode_pair_step)
from ifgrid.mask_head import select_mask
from ifgrid.metrics import EpisodeRecord, compute_metrics
from ifgrid.sim import FEATURE_DIM, N_ACTIONS
from ifgrid.tasks import TASK_TYPES, build_episode, make_dataset, replay_demo


# ---------------------------------------------------------------------------
# 1. Gradient suite

def _rand(rng, *shape):
    # half-unit scale keeps the saturating nonlinearities well-conditioned
    # for central differences
    return ad.Tensor(0.5 * rng.normal(size=shape), requires_grad=True)


def _check(fn, tensors):
    report = ad.grad_check(fn, tensors, tolerance=1e-4)
    assert report["pass"], report


N_SEEDS = 20


def test_gradient_suite():
    start = time.time()
    d, n = 4, 3
    for seed in range(N_SEEDS):
        rng = np.random.default_rng(seed)

        # linear layer
        _check(lambda ts: ad.tsum(ad.sigmoid(nn.linear(
            {"lin.W": ts[0], "lin.b": ts[1]}, "lin", ts[2]))),
            [_rand(rng, d, d), _rand(rng, d), _rand(rng, d)])

        # LSTM cell
        def lstm_fn(ts):
            h, c = nn.lstm_step({"l.W": ts[0], "l.b": ts[1]}, "l",
                                ts[2], ts[3], ts[4])
            return ad.add(ad.tsum(h), ad.tsum(c))
        _check(lstm_fn, [_rand(rng, 4 * d, 2 * d), _rand(rng, 4 * d),
                         _rand(rng, d), _rand(rng, d), _rand(rng, d)])

        # embedding lookup
        _check(lambda ts: ad.tsum(ad.mul(ad.embedding(ts[0], 1),
                                         ad.embedding(ts[0], 1))),
               [_rand(rng, 3, d)])

        # full fusion head
        def fuse_fn(ts):
            views = [(ts[2], np.ones(n)), (ts[3], np.ones(n))]
            v_t, _ = fuse_hierarchical(
                {"W_s.0": ts[0], "W_s.1": ts[0], "W_g": ts[1]}, views, ts[4])
            return ad.tsum(ad.mul(v_t, v_t))
        _check(fuse_fn, [_rand(rng, d, d), _rand(rng, d, d),
                         _rand(rng, n, d), _rand(rng, n, d), _rand(rng, d)])

        # full mask-selection head
        def mask_fn(ts):
            store = {"att_q": ts[0], "att_k": ts[1], "att_v": ts[2],
                     "mask_ff.W": ts[3], "mask_ff.b": ts[4], "W_m": ts[5]}
            p_m, _ = select_mask(store, ts[6], ts[7], ts[8], ts[9])
            return ad.tsum(p_m)
        _check(mask_fn, [_rand(rng, d, d), _rand(rng, d, d), _rand(rng, d, d),
                         _rand(rng, d, d), _rand(rng, d),
                         _rand(rng, d + N_PAIR_ACTIONS + N_OBJ, d),
                         _rand(rng, n, d), _rand(rng, d),
                         _rand(rng, N_PAIR_ACTIONS),
                         _rand(rng, N_OBJ)])

        # full action-decoder step
        def act_fn(ts):
            store = {"act.W": ts[0], "act.b": ts[1],
                     "head_a.W": ts[2], "head_a.b": ts[3]}
            state = ActionState(ts[4], d)
            p_a = decode_action_step(store, state, ts[5], ts[6], ts[7], ts[8])
            return ad.cross_entropy(p_a, 2)
        in_dim = 2 * d + N_PAIR_ACTIONS + N_OBJ + d
        _check(act_fn, [_rand(rng, 4 * d, in_dim),
                        _rand(rng, 4 * d),
                        _rand(rng, N_ACTIONS + 1, d), _rand(rng, N_ACTIONS + 1),
                        _rand(rng, d), _rand(rng, d),
                        _rand(rng, d),
                        _rand(rng, N_PAIR_ACTIONS),
                        _rand(rng, N_OBJ)])

        # full pair-decoder step
        def pair_fn(ts):
            store = {"E_a": ts[0], "E_o": ts[1],
                     "pair_a.W": ts[2], "pair_a.b": ts[3],
                     "pair_o.W": ts[4], "pair_o.b": ts[5],
                     "head_ia.W": ts[6], "head_ia.b": ts[7],
                     "head_io.W": ts[8], "head_io.b": ts[9]}
            state = PairDecoderState(d)
            state.reinit(ts[10])
            p_ia, p_io = decode_pair_step(store, state)
            return ad.add(ad.cross_entropy(p_ia, 0), ad.cross_entropy(p_io, 0))
        _check(pair_fn, [
            _rand(rng, N_PAIR_ACTIONS + 1, d), _rand(rng, N_OBJ + 1, d),
            _rand(rng, 4 * d, 2 * d), _rand(rng, 4 * d),
            _rand(rng, 4 * d, 2 * d), _rand(rng, 4 * d),
            _rand(rng, N_PAIR_ACTIONS, d), _rand(rng, N_PAIR_ACTIONS),
            _rand(rng, N_OBJ, d), _rand(rng, N_OBJ), _rand(rng, d)])

    assert time.time() - start < 60.0


# ---------------------------------------------------------------------------
# 2. Equation conformance (direct-formula recomputation, 1e-6)

def _softmax64(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def test_fusion_matches_direct_recomputation():
    for case in range(100):
        rng = np.random.default_rng(1000 + case)
        d = int(rng.choice([4, 8]))
        k = int(rng.choice([1, 3, 5]))
        n = int(rng.integers(2, 7))
        store = {"W_g": _rand(rng, d, d)}
        views = []
        for kk in range(k):
            store[f"W_s.{kk}"] = _rand(rng, d, d)
            V = _rand(rng, n, d)
            rho = rng.uniform(0.1, 1.0, n).astype(np.float32)
            views.append((V, rho))
        s_m = _rand(rng, d)
        v_t, diag = fuse_hierarchical(store, views, s_m)

        s64 = s_m.data.astype(np.float64)
        expected = np.zeros(d)
        for kk, (V, rho) in enumerate(views):
            V64 = V.data.astype(np.float64)
            alpha = _softmax64(V64 @ (store[f"W_s.{kk}"].data @ s64))
            v_k = V64.T @ (alpha * rho)
            gate = 1.0 / (1.0 + np.exp(-(v_k @ (store["W_g"].data @ s64))))
            expected += gate * v_k
            assert np.allclose(diag["alpha_s"][kk], alpha, atol=1e-6)
            assert abs(diag["alpha_g"][kk] - gate) < 1e-6
        assert np.allclose(v_t.data, expected, atol=1e-6)


def test_mask_head_matches_direct_recomputation():
    for case in range(100):
        rng = np.random.default_rng(2000 + case)
        d = int(rng.choice([4, 8]))
        n = int(rng.integers(2, 7))
        store = {"att_q": _rand(rng, d, d), "att_k": _rand(rng, d, d),
                 "att_v": _rand(rng, d, d), "mask_ff.W": _rand(rng, d, d),
                 "mask_ff.b": _rand(rng, d),
                 "W_m": _rand(rng, d + N_PAIR_ACTIONS + N_OBJ, d)}
        V = _rand(rng, n, d)
        s_m = _rand(rng, d)
        q_ia = _rand(rng, N_PAIR_ACTIONS)
        q_io = _rand(rng, N_OBJ)
        p_m, chosen = select_mask(store, V, s_m, q_ia, q_io)

        V64 = V.data.astype(np.float64)
        Q = V64 @ store["att_q"].data.T
        K = V64 @ store["att_k"].data.T
        Val = V64 @ store["att_v"].data.T
        scores = Q @ K.T / np.sqrt(d)
        att = np.stack([_softmax64(row) for row in scores]) @ Val
        hidden = np.maximum(att @ store["mask_ff.W"].data.T
                            + store["mask_ff.b"].data, 0.0) + V64
        g = np.concatenate([s_m.data, q_ia.data, q_io.data])
        expected = 1.0 / (1.0 + np.exp(-(hidden @ (g @ store["W_m"].data))))
        assert np.allclose(p_m.data, expected, atol=1e-6)
        assert chosen == int(np.argmax(expected))


# ---------------------------------------------------------------------------
# 3. Selector state machine

def test_selector_state_machine():
    rng = np.random.default_rng(33)
    for _ in range(10_000):
        L = int(rng.integers(1, 7))
        state = SelectorState(m=1, L=L)
        steps = int(rng.integers(1, 12))
        for _ in range(steps):
            p = rng.dirichlet(np.ones(N_ACTIONS + 1)).astype(np.float32)
            prev = state
            state = advance_selector(prev, ad.Tensor(p))
            is_complete = int(np.argmax(p)) == COMPLETE_ID
            assert state.m >= prev.m                      # nondecreasing
            if is_complete and prev.m < prev.L:
                assert state.m == prev.m + 1 and state.advanced
            else:
                assert state.m == prev.m and not state.advanced
            if state.done and not prev.done:
                assert is_complete and prev.m == prev.L
            if prev.done:
                assert state.done                     # done is sticky
            if is_complete and prev.m == prev.L:
                assert state.done


# ---------------------------------------------------------------------------
# 4. Dataset soundness

def test_dataset_soundness_700_episodes():
    start = time.time()
    for seed in range(100):
        for ttype in TASK_TYPES:
            episode = build_episode(seed * 7 + TASK_TYPES.index(ttype), ttype)
            _, failures, sat, tot = replay_demo(episode)
            assert failures == 0, (seed, ttype)
            assert sat == tot, (seed, ttype)
    assert time.time() - start < 120.0


# ---------------------------------------------------------------------------
# 5 & 7. Desk-scale learning and the sub-goal pattern (shared trained model)

@pytest.fixture(scope="module")
def trained_default():
    cfg = RunConfig()
    splits = make_dataset(cfg.n_train, cfg.n_valid_seen, cfg.n_valid_unseen)
    start = time.time()
    store, vocab, _ = train.train(cfg, splits)
    minutes = (time.time() - start) / 60.0
    return cfg, splits, store, vocab, minutes


def test_desk_scale_learning(trained_default):
    cfg, splits, store, vocab, minutes = trained_default
    assert minutes <= 30.0
    seen, _ = rollout.evaluate(store, cfg, vocab, splits["valid_seen"])
    unseen, _ = rollout.evaluate(store, cfg, vocab, splits["valid_unseen"])
    assert seen.task >= 80.0, seen.to_dict()
    assert unseen.task >= 30.0, unseen.to_dict()


def test_subgoal_pattern(trained_default):
    cfg, splits, store, vocab, _ = trained_default
    table = rollout.evaluate_subgoals(store, cfg, vocab, splits["valid_seen"])
    goto = table["Goto"]["rate"]
    for category, row in table.items():
        if category != "Goto":
            assert goto < row["rate"], table
    expert = rollout.expert_subgoal_scores(splits["valid_seen"], cfg)
    for category, row in expert.items():
        assert row["rate"] == 100.0, expert


# ---------------------------------------------------------------------------
# 6. Ablation orderings (3 seeds, median seen Task)

ABLATION_OVERRIDES = {
    "full": {},
    "k3": {"k_views": 3},
    "k1": {"k_views": 1},
    "k1_single_stage": {"k_views": 1, "two_stage": False},
    "no_selection": {"selection": False},
    "softmax_gate": {"gate": "softmax"},
}


def _median_seen_task(base_cfg, overrides, splits, seeds=(0, 1, 2)):
    scores = []
    for seed in seeds:
        cfg = dataclasses.replace(base_cfg, seed=seed, **overrides)
        store, vocab, _ = train.train(cfg, splits)
        report, _ = rollout.evaluate(store, cfg, vocab, splits["valid_seen"])
        scores.append(report.task)
    return float(np.median(scores))


def test_ablation_orderings():
    base = RunConfig(n_train=150, n_valid_seen=35, n_valid_unseen=7)
    splits = make_dataset(base.n_train, base.n_valid_seen, base.n_valid_unseen)
    med = {name: _median_seen_task(base, ov, splits)
           for name, ov in ABLATION_OVERRIDES.items()}
    assert med["full"] > med["k1"] > med["k1_single_stage"] \
        > med["no_selection"], med
    assert med["full"] > med["softmax_gate"], med
    assert med["full"] >= med["k3"] >= med["k1"], med


# ---------------------------------------------------------------------------
# 8. Metric identities on synthetic records

def test_metric_identities_1000_records():
    rng = np.random.default_rng(88)
    for _ in range(1000):
        total = int(rng.integers(1, 6))
        expert_len = int(rng.integers(1, 60))
        rec = EpisodeRecord(
            task_type=str(rng.choice(TASK_TYPES)),
            satisfied=int(rng.integers(0, total + 1)), total=total,
            pred_len=int(rng.integers(0, 120)), expert_len=expert_len,
            failures=int(rng.integers(0, 10)))
        for score in (rec.task_success, rec.goal_cond):
            assert 0.0 <= rec.plw(score) <= score <= 1.0
            if rec.pred_len <= rec.expert_len:
                assert rec.plw(score) == score       # equality at L-hat = L*
            elif score > 0:
                assert rec.plw(score) < score
        assert rec.goal_cond >= rec.task_success
    # aggregation keeps the identities
    records = [EpisodeRecord(task_type="Examine", satisfied=1, total=2,
                             pred_len=10, expert_len=10)]
    report = compute_metrics(records)
    assert report.goal_cond >= report.task
    assert report.plw_task <= report.task
    assert report.plw_goal_cond <= report.goal_cond


# ---------------------------------------------------------------------------
# 9. Ensemble semantics

def _record_tuple(rec):
    return (rec.task_type, tuple((t["m"], t["action"], t["success"],
                                  t["mask_slot"]) for t in rec.timesteps),
            rec.satisfied, rec.total, rec.pred_len, rec.failures)


def test_ensemble_of_one_and_duplicates_bit_identical():
    cfg = RunConfig(d=16)
    episodes = [build_episode(s, TASK_TYPES[s % 7]) for s in range(6)]
    vocab = train.build_vocab(episodes)
    from ifgrid.model import init_agent_params
    store = init_agent_params(cfg, len(vocab))
    for ep in episodes:
        single = rollout.rollout(store, cfg, vocab, ep)
        one = rollout.ensemble_rollout([store], cfg, vocab, ep)
        two = rollout.ensemble_rollout([store, store], cfg, vocab, ep)
        assert _record_tuple(single) == _record_tuple(one)
        assert _record_tuple(single) == _record_tuple(two)


def test_ensemble_averaged_argmax_divergence():
    """Two hand-built models whose averaged argmax differs from both members.

    Zeroing the action head's weight matrix makes p_a = softmax(bias)
    exactly, so the three action distributions are fully controlled:
    member 1 always argmaxes to action 1, member 2 to action 2, but the
    average of the two distributions argmaxes to action 0.
    """
    cfg = RunConfig(d=16, max_steps=5)
    episodes = [build_episode(s, "PickPlace") for s in range(2)]
    vocab = train.build_vocab(episodes)
    from ifgrid.model import init_agent_params
    stores = [init_agent_params(cfg, len(vocab)) for _ in range(2)]
    base = np.full(N_ACTIONS + 1, 1e-3)
    p1, p2 = base.copy(), base.copy()
    p1[[0, 1, 2]] = [0.41, 0.46, 0.13]
    p2[[0, 1, 2]] = [0.45, 0.08, 0.47]
    for store, p in zip(stores, (p1, p2)):
        store["head_a.W"].data[:] = 0.0
        store["head_a.b"].data[:] = np.log(p / p.sum())
    avg = (p1 / p1.sum() + p2 / p2.sum()) / 2
    assert int(np.argmax(avg)) == 0 != int(np.argmax(p1)) != int(np.argmax(p2))

    ep = episodes[0]
    act1 = rollout.rollout(stores[0], cfg, vocab, ep).timesteps[0]["action"]
    act2 = rollout.rollout(stores[1], cfg, vocab, ep).timesteps[0]["action"]
    both = rollout.ensemble_rollout(stores, cfg, vocab, ep)
    act_ens = both.timesteps[0]["action"]
    assert act_ens != act1 and act_ens != act2


# ---------------------------------------------------------------------------
# 10. Determinism of full train + evaluate runs

def test_train_evaluate_determinism():
    cfg = RunConfig(d=16, n_train=12, n_valid_seen=6, n_valid_unseen=6,
                    epochs=2, batch_size=8)
    reports = []
    for _ in range(2):
        splits = make_dataset(cfg.n_train, cfg.n_valid_seen,
                              cfg.n_valid_unseen)
        store, vocab, _ = train.train(cfg, splits)
        seen, _ = rollout.evaluate(store, cfg, vocab, splits["valid_seen"])
        unseen, _ = rollout.evaluate(store, cfg, vocab, splits["valid_unseen"])
        reports.append((seen.to_json(), unseen.to_json()))
    assert reports[0] == reports[1]
