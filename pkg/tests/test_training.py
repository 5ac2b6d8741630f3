import math

import numpy as np
import pytest

from adspoi import model
from adspoi.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from adspoi.ingest import CheckIn, Trajectory, split_leave_one_out
from adspoi.params import ParameterSet, count_params, init_params, param_shapes
from adspoi.training import (TrainState, TrainingError, adam_step, compute_gradients, forward_trajectory,
                             grad_check, toy_trajectories, train)

from conftest import small_config


# --- parameters ----------------------------------------------------------------


def test_init_deterministic_and_decay_nonnegative(cfg):
    a, b = init_params(cfg.model, 30, 3), init_params(cfg.model, 30, 3)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, init_params(cfg.model, 30, 4).flat)
    lam = np.logaddexp(0, a["raw_lambda"])
    assert np.all(lam >= 0) and np.allclose(lam, [0.5, 0.75])
    assert np.all(a["poi_bias"] == 0) and np.all(a["bz"] == 0)
    bound = 1 / math.sqrt(cfg.model.d_s)
    assert np.all(np.abs(a["Uz"]) <= bound)


def test_parameter_count_by_shape_accounting():
    cfg = small_config(d_e=16, K=2, d_s=8, d_slot=4, d_dist=4, d_spatial=16)
    L, d_e, K, ds = 50, 16, 2, 8
    d_x = d_e + (4 + 4) + 16
    d_ctx = (4 + 4) + 16
    expected = (
        L * d_e + L                      # POI embeddings and biases
        + 48 * 4 + 10 * 4                # slot and distance-bucket embeddings
        + 16 * (1 + 4 + 2) + 16          # spatial mixing and the step-0 vector
        + ds * d_x + ds                  # input projection
        + K * (6 * ds * ds + 3 * ds + 2)  # gates, candidate, decay raws
        + ds * ds + ds * d_ctx + ds + ds  # aggregation scorer
        + d_e * K * ds + d_e             # decision projection
    )
    assert count_params(cfg.model, L) == expected == init_params(cfg.model, L, 0).size


def test_flat_and_named_views_alias(cfg):
    p = init_params(cfg.model, 10, 0)
    p["Wz"][1, 2, 3] = 42.0
    lo, _ = p.offsets["Wz"]
    assert p.flat[lo + 1 * 36 + 2 * 6 + 3] == 42.0
    p.flat[:] = np.arange(p.size)
    assert p["poi_emb"][0, 1] == 1.0
    q = ParameterSet(param_shapes(cfg.model, 10), p.flat.copy())
    assert np.array_equal(np.concatenate([v.ravel() for _, v in q.items()]), p.flat)


# --- passes -------------------------------------------------------------------


def test_length_two_trajectory_has_one_step(cfg):
    tr = toy_trajectories(20, 1, 2, 0)[0]
    out = forward_trajectory(init_params(cfg.model, 20, 0), tr, np.random.default_rng(0), cfg, "eval")
    assert len(out.steps) == 1


def test_eval_mode_is_deterministic(cfg):
    c = cfg.replace(optim={"dropout": 0.5})
    p = init_params(c.model, 20, 0)
    tr = toy_trajectories(20, 1, 6, 1)[0]
    a = forward_trajectory(p, tr, np.random.default_rng(5), c, "eval")
    b = forward_trajectory(p, tr, np.random.default_rng(5), c, "eval")
    assert a.loss == b.loss and np.array_equal(a.final_states, b.final_states)


def oracle_loss(params, traj, slates, cfg):
    """From-scratch recomputation of the model equations for one trajectory (no dropout)."""
    m, o = cfg.model, cfg.objective
    P = {k: np.array(v) for k, v in params.items()}
    sig = lambda a: 1 / (1 + np.exp(-a))  # noqa: E731
    edges = [0.0] + list(m.bucket_edges)
    states = [np.zeros(m.d_s) for _ in range(m.K)]
    total = 0.0
    for i in range(len(traj) - 1):
        t = int(traj.timestamp[i])
        hour = (t % 86400) / 3600
        wday = (t // 86400 + 3) % 7
        slot = int(hour) + (24 if wday >= 5 else 0)
        p = np.concatenate([[math.sin(2 * math.pi * hour / 24), math.cos(2 * math.pi * hour / 24),
                             math.sin(2 * math.pi * wday / 7), math.cos(2 * math.pi * wday / 7)], P["slot_emb"][slot]])
        if i == 0:
            d, dt, dd = P["spatial_start"], 0.0, 0.0
        else:
            la1, lo1, la2, lo2 = map(math.radians, (traj.lat[i - 1], traj.lon[i - 1], traj.lat[i], traj.lon[i]))
            dd = 2 * 6371.0 * math.asin(math.sqrt(math.sin((la2 - la1) / 2) ** 2
                                                  + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2) ** 2))
            bucket = max(j for j, e in enumerate(edges) if dd >= e)
            d = P["spatial_W"] @ np.concatenate([[math.log(1 + dd)], P["dist_emb"][bucket],
                                                 [traj.lat[i] - traj.lat[i - 1], traj.lon[i] - traj.lon[i - 1]]])
            dt = float(traj.timestamp[i] - traj.timestamp[i - 1])
        x = np.concatenate([P["poi_emb"][traj.poi[i]], p, d])
        xh = P["in_W"] @ x + P["in_b"]
        for k in range(m.K):
            lam, mu = math.log1p(math.exp(P["raw_lambda"][k])), math.log1p(math.exp(P["raw_mu"][k]))
            gamma = math.exp(-lam * dt / m.tau_t) * math.exp(-mu * dd / m.tau_d)
            s = states[k]
            z = sig(P["Wz"][k] @ xh + P["Uz"][k] @ s + P["bz"][k])
            r = sig(P["Wr"][k] @ xh + P["Ur"][k] @ s + P["br"][k])
            cand = np.tanh(P["Wc"][k] @ xh + P["Uc"][k] @ (r * s) + P["bc"][k])
            states[k] = gamma * (1 - z) * s + z * cand
        c = np.concatenate([p, d])
        g = np.array([P["g_v"] @ np.tanh(P["g_Ws"] @ s + P["g_Wc"] @ c + P["g_b"]) for s in states]) / m.temperature
        alpha = np.exp(g - g.max()) / np.exp(g - g.max()).sum()
        h = np.concatenate([a * s for a, s in zip(alpha, states)])
        hp = P["out_W"] @ h + P["out_b"]
        slate = slates[i]
        assert slate[0] == traj.poi[i + 1]
        z = np.array([hp @ P["poi_emb"][l] + P["poi_bias"][l] for l in slate])
        C = len(z)
        y = np.full(C, o.epsilon / C)
        y[0] = 1 - o.epsilon + o.epsilon / C
        lse = z.max() + math.log(np.exp(z - z.max()).sum())
        ce = -float(np.sum(y * (z - lse)))
        neg = sorted(range(1, C), key=lambda j: (-z[j], j))[:o.k_hard]
        bpr = sum(max(0.0, o.margin - (z[0] - z[j])) for j in neg) / o.k_hard
        total += ce + o.beta * bpr
    return total


def test_three_step_loss_matches_independent_recomputation(cfg):
    p = init_params(cfg.model, 20, 0)
    p.flat += np.random.default_rng(1).normal(0, 0.2, p.size)
    tr = Trajectory(0, [3, 7, 1, 12], [1_333_238_400, 1_333_245_000, 1_333_300_123, 1_333_500_000],
                    [40.75, 40.76, 40.70, 40.80], [-73.98, -73.99, -73.90, -74.05])
    out = forward_trajectory(p, tr, np.random.default_rng(2), cfg, "eval")
    assert len(out.steps) == 3
    want = oracle_loss(p, tr, [s.slate for s in out.steps], cfg)
    assert out.loss == pytest.approx(want, rel=1e-12)


def test_saturated_optimum_has_zero_gradient():
    # two POIs, one negative per step, target POI 1 carries an overwhelming bias:
    # the softmax already puts mass 1 on the positive, so no parameter can move the loss
    cfg = small_config().replace(objective={"beta": 0.0, "epsilon": 0.0, "n_neg": 1, "k_hard": 1})
    p = init_params(cfg.model, 2, 0)
    p["poi_bias"] = [-400.0, 400.0]
    tr = Trajectory(0, [0, 1], [1_333_238_400, 1_333_240_000], [40.7, 40.71], [-74.0, -74.01])
    loss, g = compute_gradients(p, [tr], cfg, np.random.default_rng(0))
    assert loss <= 1e-12
    assert np.linalg.norm(g) <= 1e-6


def test_unused_poi_embeddings_get_zero_gradient(cfg):
    p = init_params(cfg.model, 200, 0)
    trs = toy_trajectories(10, 3, 5, 0)   # only POIs 0..9 appear
    batch = model.make_batch(trs, cfg, train=True)
    noise = model.sample_noise(np.random.default_rng(0), batch, 200, cfg)
    _, g = model.forward_backward(p, batch, noise, cfg)
    used = set(np.concatenate([t.poi for t in trs]).tolist()) | set(noise.negatives.ravel().tolist())
    unused = sorted(set(range(200)) - used)
    assert unused
    assert np.all(g["poi_emb"][unused] == 0.0) and np.all(g["poi_bias"][unused] == 0.0)


def test_gradient_keystone_and_mutation(cfg):
    rep = grad_check(cfg, seed=0, fd_step=1e-4)
    assert rep.n_checked == rep.n_params
    assert rep.max_rel_error <= 1e-4
    for block in ("Uz", "g_Wc", "raw_mu"):
        bad = grad_check(cfg, seed=0, fd_step=1e-4, corrupt=block)
        assert bad.max_rel_error > 1e-2 and bad.worst_block == block


def test_fd_step_halving_does_not_blow_up(cfg):
    a = grad_check(cfg, seed=1, fd_step=1e-4).max_rel_error
    b = grad_check(cfg, seed=1, fd_step=5e-5).max_rel_error
    assert b <= max(a * 1.5, 1e-4)


@pytest.mark.parametrize("variant", ["uniform_agg", "homogeneous", "single_small"])
def test_variants_pass_gradient_check(variant):
    cfg = small_config(variant=variant)
    if variant == "single_small":
        cfg = small_config(K=1)
    assert grad_check(cfg, seed=2, fd_step=1e-4).max_rel_error <= 1e-4


def test_homogeneous_blocks_stay_tied_after_one_batch():
    cfg = small_config(variant="homogeneous")
    p = init_params(cfg.model, 20, 0)
    for name in ("Wz", "Uc", "bz", "raw_lambda", "raw_mu"):
        assert np.array_equal(p[name][0], p[name][1])
    state = TrainState.fresh(p, 0)
    loss, g = compute_gradients(p, toy_trajectories(20, 3, 6, 0), cfg, np.random.default_rng(0))
    G = ParameterSet(p.shapes, g)
    for name in ("Wz", "Wr", "Wc", "Uz", "Ur", "Uc", "bz", "br", "bc", "raw_lambda", "raw_mu"):
        assert np.array_equal(G[name][0], G[name][1])
    adam_step(state, g, lr=1e-2)
    for name in ("Wz", "Uc", "raw_mu"):
        assert np.array_equal(state.params[name][0], state.params[name][1])


# --- Adam ---------------------------------------------------------------------


def scalar_state(theta):
    return TrainState(ParameterSet({"w": (1,)}, np.array([theta])), np.zeros(1), np.zeros(1))


def test_adam_zero_gradient_is_noop():
    s = scalar_state(0.7)
    adam_step(s, np.zeros(1))
    assert s.params.flat[0] == 0.7 and s.step == 1


def test_adam_three_steps_by_hand():
    lr, b1, b2, eps, g = 0.1, 0.9, 0.999, 1e-8, 0.5
    s = scalar_state(1.0)
    theta, m, v = 1.0, 0.0, 0.0
    for t in (1, 2, 3):
        adam_step(s, np.array([g]), lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert s.params.flat[0] == pytest.approx(theta, abs=1e-15)
    # with a constant gradient every bias-corrected step has magnitude ~lr
    assert 1.0 - theta == pytest.approx(3 * lr, rel=1e-6)


def test_adam_coupled_weight_decay_and_mask():
    s = TrainState(ParameterSet({"w": (2,)}, np.array([2.0, 2.0])), np.zeros(2), np.zeros(2))
    adam_step(s, np.zeros(2), lr=0.1, weight_decay=0.5, wd_mask=np.array([1.0, 0.0]))
    assert s.params.flat[0] == pytest.approx(2.0 - 0.1 / (1.0 + 1e-8), abs=1e-15) and s.params.flat[1] == 2.0


def test_adam_moments_bounded():
    rng = np.random.default_rng(0)
    s = TrainState(ParameterSet({"w": (5,)}), np.zeros(5), np.zeros(5))
    for _ in range(10_000):
        adam_step(s, rng.uniform(-1, 1, 5), lr=1e-3)
    assert np.all(np.isfinite(s.m)) and np.all(np.abs(s.m) <= 1) and np.all(s.v <= 1)


# --- epoch loop ------------------------------------------------------------------


def tiny_split(n_users=6, length=8, n_pois=15, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for u in range(n_users):
        pois = [int(p) for p in rng.permutation(n_pois)[:length]]
        for i, poi in enumerate(pois):
            data.append(CheckIn(u, poi, 1_333_238_400 + 3600 * i + u, 40.7 + 0.01 * poi, -74.0 + 0.01 * poi))
    return split_leave_one_out(data)


def test_constant_validation_stops_after_eleven_epochs(cfg):
    c = cfg.replace(optim={"epochs": 100, "patience": 10})
    ck = train(tiny_split(), c, 0, val_metric=lambda p: 0.25)
    assert ck.state.epoch == 11 and len(ck.history) == 11 and ck.state.stopped
    assert [h["epoch"] for h in ck.history] == list(range(1, 12))


def test_patience_zero_disables_early_stopping(cfg):
    c = cfg.replace(optim={"epochs": 14, "patience": 0})
    assert train(tiny_split(), c, 0, val_metric=lambda p: 0.25).state.epoch == 14


def test_best_parameters_are_kept(cfg):
    c = cfg.replace(optim={"epochs": 6, "patience": 0})
    seq = iter([0.1, 0.3, 0.2, 0.3, 0.05, 0.29])
    snapshots = []

    def metric(p):
        snapshots.append(p.flat.copy())
        return next(seq)

    ck = train(tiny_split(), c, 0, val_metric=metric)
    assert np.array_equal(ck.params.flat, snapshots[1])   # first epoch reaching 0.3; ties do not replace
    assert ck.state.best_mrr == max(h["val_mrr"] for h in ck.history)


def test_same_seed_same_history(cfg):
    c = cfg.replace(optim={"epochs": 3, "dropout": 0.2})
    a = train(tiny_split(), c, 7)
    b = train(tiny_split(), c, 7)
    assert a.history == b.history and np.array_equal(a.params.flat, b.params.flat)


def test_empty_training_set_is_fatal(cfg):
    split = tiny_split()
    split.train = []
    with pytest.raises(TrainingError):
        train(split, cfg, 0)


def test_resume_continues_identically(cfg, tmp_path):
    c4 = cfg.replace(optim={"epochs": 4, "patience": 0, "dropout": 0.2})
    c2 = cfg.replace(optim={"epochs": 2, "patience": 0, "dropout": 0.2})
    split = tiny_split()
    straight = train(split, c4, 3)
    half = train(split, c2, 3)
    save_checkpoint(tmp_path / "h.ckpt", half)
    resumed_ck = load_checkpoint(tmp_path / "h.ckpt")
    resumed_ck.config = c4
    rest = train(split, c4, 3, resume=resumed_ck)
    assert [h["epoch"] for h in rest.history] == [1, 2, 3, 4]
    assert rest.history == straight.history
    assert np.array_equal(rest.state.params.flat, straight.state.params.flat)


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_byte_identical(cfg, tmp_path):
    ck = train(tiny_split(), cfg.replace(optim={"epochs": 2}), 0)
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt", cfg.replace(optim={"epochs": 2}))
    assert np.array_equal(back.params.flat, ck.params.flat)
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_refuses_other_config_and_corruption(cfg, tmp_path):
    c = cfg.replace(optim={"epochs": 1})
    ck = train(tiny_split(), c, 0)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, ck)
    with pytest.raises(CheckpointError, match="hash mismatch"):
        load_checkpoint(path, c.replace(model={"K": 3}))
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
