import numpy as np
import pytest
import scipy.stats

from gfnpool.envs import GridEnv, MultisetEnv, SequenceEnv, StateSpace
from gfnpool.errors import FingerprintMismatchError, SnapshotError
from gfnpool.policy import (
    MlpPolicy,
    TabularPolicy,
    action_distribution,
    balanced_tabular_policy,
    batch_to_trajectories,
    load_snapshot,
    masked_log_softmax,
    replay_log_pb,
    replay_log_pf,
    sample_batch,
    sample_trajectory,
    save_snapshot,
    traj_log_pb,
    traj_log_pf,
    trajectories_to_batch,
)
from gfnpool.nn import mlp_forward
from tests.conftest import random_tabular


def test_uniform_softmax_three_actions(grid3, grid3_space):
    pol = TabularPolicy(grid3_space)  # zero logits
    p = action_distribution(pol, grid3_space, (0, 0))
    assert np.allclose(p, [1 / 3, 1 / 3, 1 / 3])


def test_mask_forces_single_action(grid3, grid3_space, rng):
    pol = random_tabular(grid3_space, rng, scale=5.0)
    p = action_distribution(pol, grid3_space, (2, 2))  # corner: stop only
    assert p[2] == 1.0 and p[0] == 0.0 and p[1] == 0.0


def test_mlp_backend_matches_nn_oracle(rng):
    env = GridEnv(side=9, beacons=((0, 0),))
    space = StateSpace.enumerated(env)
    pol = MlpPolicy.create(env, (16,), rng)
    pol.params = rng.normal(0, 0.7, pol.n_params)
    out, _ = mlp_forward(pol.spec, pol.params, env.featurize((0, 0)))
    expected = np.exp(out) / np.exp(out).sum()  # all three actions legal at (0,0)
    assert np.allclose(action_distribution(pol, space, (0, 0)), expected, atol=1e-12)


@pytest.mark.parametrize("backend", ["tabular", "mlp"])
def test_normalization_and_exact_zero_support(backend, rng):
    env = MultisetEnv(values=tuple(rng.uniform(0, 1, 4)), target_size=3)
    space = StateSpace.enumerated(env)
    if backend == "tabular":
        pol = random_tabular(space, rng, scale=3.0)
    else:
        pol = MlpPolicy.create(env, (8, 8), rng)
        pol.params = rng.normal(0, 1, pol.n_params)
    idx = rng.integers(0, space.n_states, size=1000)
    rows = space.children_rows(idx)
    legal = rows != -1
    logp, p = masked_log_softmax(pol.logits_rows(space, idx), legal)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12
    assert np.all(p[~legal] == 0.0)
    assert np.all(np.isneginf(logp[~legal]))


def test_epsilon_one_uniform_trajectory_chisquare():
    # S=2, |U|=2: seven trajectories with closed-form uniform-policy probs
    env = SequenceEnv(pos_scores=(0.0, 0.0), token_scores=(0.0, 0.0))
    space = StateSpace.enumerated(env)
    pol = TabularPolicy(space, np.random.default_rng(1).normal(0, 2, (space.n_states, space.arity)))
    n = 100_000
    tb = sample_batch(pol, space, n, epsilon=1.0, rng=np.random.default_rng(7))
    # trajectory identity: the terminal key (sequences have unique paths)
    counts: dict = {}
    for i in tb.terminal_idx():
        counts[space.keys[i]] = counts.get(space.keys[i], 0) + 1
    expected = {
        (): 1 / 3,
        (0,): 1 / 9,
        (1,): 1 / 9,
        (0, 0): 1 / 9,
        (0, 1): 1 / 9,
        (1, 0): 1 / 9,
        (1, 1): 1 / 9,
    }
    stat = sum(
        (counts.get(k, 0) - n * q) ** 2 / (n * q) for k, q in expected.items()
    )
    assert stat <= scipy.stats.chi2.ppf(0.999, df=6)


def test_epsilon_zero_deterministic_policy(grid3, grid3_space):
    table = np.zeros((grid3_space.n_states, 3))
    table[:, 0] = 50.0  # push right when legal
    table[:, 2] = 25.0  # otherwise stop
    pol = TabularPolicy(grid3_space, table)
    rng = np.random.default_rng(0)
    paths = {tuple(sample_trajectory(pol, grid3_space, 0.0, rng).states) for _ in range(20)}
    assert paths == {((0, 0), (1, 0), (2, 0))}


def test_sampled_paths_validate_against_children(grid3, grid3_space, rng):
    pol = random_tabular(grid3_space, rng)
    tb = sample_batch(pol, grid3_space, 64, 0.3, rng)
    for traj in batch_to_trajectories(grid3_space, tb):
        assert np.isfinite(sum(traj.log_pf_steps))
        for s, s2, a in zip(traj.states, traj.states[1:], traj.actions):
            assert (a, s2, False) in grid3.children(s)
        assert (traj.actions[-1], None, True) in grid3.children(traj.states[-1])


def test_mixture_frequencies_at_root(grid3, grid3_space):
    pol = random_tabular(grid3_space, np.random.default_rng(3))
    n = 100_000
    tb = sample_batch(pol, grid3_space, n, epsilon=0.5, rng=np.random.default_rng(5))
    first = tb.actions[:, 0]
    p = action_distribution(pol, grid3_space, (0, 0))
    expected = 0.5 * p + 0.5 / 3
    for a in range(3):
        freq = float(np.mean(first == a))
        sigma = np.sqrt(expected[a] * (1 - expected[a]) / n)
        assert abs(freq - expected[a]) <= 4 * sigma


def test_uniform_backward_normalizes(grid3, grid3_space):
    for i in range(grid3_space.n_states):
        if i == grid3_space.root:
            continue
        npar = grid3_space.nparents(i)
        assert npar >= 1
        assert npar * (1.0 / npar) == 1.0


def test_recorded_vs_recomputed_log_pf(grid3, grid3_space, rng):
    pol = random_tabular(grid3_space, rng)
    tb = sample_batch(pol, grid3_space, 32, 0.4, rng)
    recomputed = replay_log_pf(pol, grid3_space, tb)
    assert np.max(np.abs(recomputed - tb.recorded_log_pf_sums())) <= 1e-12
    trajs = batch_to_trajectories(grid3_space, tb)
    for k in (0, 7, 31):
        assert traj_log_pf(pol, grid3_space, trajs[k]) == pytest.approx(
            float(recomputed[k]), abs=1e-12
        )


def test_forced_single_path_log_pf_zero():
    env = MultisetEnv(values=(0.5,), target_size=1)
    space = StateSpace.enumerated(env)
    pol = random_tabular(space, np.random.default_rng(0), scale=4.0)
    traj = sample_trajectory(pol, space, 0.0, np.random.default_rng(0))
    assert traj_log_pf(pol, space, traj) == 0.0  # every step forced
    assert traj_log_pb(space, traj) == 0.0


def test_multiset_repeat_item_backward_zero():
    env = MultisetEnv(values=(0.5, 0.1), target_size=2)
    space = StateSpace.enumerated(env)
    pol = TabularPolicy(space)
    from gfnpool.policy import Trajectory

    traj = Trajectory(
        states=[(0, 0), (1, 0), (2, 0)],
        actions=[0, 0, 2],
        log_pf_steps=[0.0, 0.0, 0.0],
        log_pb_steps=[0.0, 0.0, 0.0],
        log_reward=1.0,
    )
    # each intermediate state has exactly one distinct removable item
    assert traj_log_pb(space, traj) == 0.0


def test_batch_roundtrip_through_trajectories(grid3, grid3_space, rng):
    pol = random_tabular(grid3_space, rng)
    tb = sample_batch(pol, grid3_space, 16, 0.2, rng)
    back = trajectories_to_batch(grid3_space, batch_to_trajectories(grid3_space, tb))
    assert np.array_equal(back.states, tb.states)
    assert np.array_equal(back.actions, tb.actions)
    assert np.array_equal(back.lengths, tb.lengths)
    assert np.allclose(back.log_pf, tb.log_pf)
    assert np.allclose(replay_log_pb(grid3_space, back), tb.recorded_log_pb_sums())


# -- snapshots ----------------------------------------------------------------


def test_snapshot_roundtrip_idempotent(grid3, grid3_space, rng):
    pol = random_tabular(grid3_space, rng)
    blob = save_snapshot(pol, grid3, meta={"loss": "CB"})
    loaded, backward, meta = load_snapshot(blob, grid3, grid3_space)
    assert save_snapshot(loaded, grid3, meta=meta) == blob
    assert backward.mode == "uniform" and meta["loss"] == "CB"


def test_snapshot_distributions_bit_exact(rng):
    env = GridEnv(side=4, beacons=((1, 2),))
    space = StateSpace.enumerated(env)
    pol = MlpPolicy.create(env, (8, 8), rng)
    pol.params = rng.normal(0, 1, pol.n_params)
    loaded, _, _ = load_snapshot(save_snapshot(pol, env), env, space)
    for _ in range(10):
        key = space.keys[rng.integers(space.n_states)]
        a = action_distribution(pol, space, key)
        b = action_distribution(loaded, space, key)
        assert np.array_equal(a, b)


def test_snapshot_fingerprint_mismatch(grid3, grid3_space, rng, mset33):
    blob = save_snapshot(random_tabular(grid3_space, rng), grid3)
    with pytest.raises(FingerprintMismatchError):
        load_snapshot(blob, mset33)


def test_snapshot_corruption_detected(grid3, grid3_space, rng):
    import json

    blob = save_snapshot(random_tabular(grid3_space, rng), grid3)
    with pytest.raises(SnapshotError):
        load_snapshot(blob[: len(blob) // 2], grid3, grid3_space)
    doc = json.loads(blob)
    doc["version"] = 99
    with pytest.raises(SnapshotError):
        load_snapshot(json.dumps(doc).encode(), grid3, grid3_space)
    doc = json.loads(blob)
    doc["params_b64"] = doc["params_b64"][: len(doc["params_b64"]) // 2]
    with pytest.raises(SnapshotError):
        load_snapshot(json.dumps(doc).encode(), grid3, grid3_space)


def test_balanced_policy_satisfies_trajectory_balance(mset33, mset33_space, rng):
    pol = balanced_tabular_policy(mset33_space)
    tb = sample_batch(pol, mset33_space, 64, 0.5, rng)
    pf = replay_log_pf(pol, mset33_space, tb)
    pb = replay_log_pb(mset33_space, tb)
    v = pf - pb - tb.log_reward  # should be constant -log Z across trajectories
    assert np.max(v) - np.min(v) <= 1e-10
