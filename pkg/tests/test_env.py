import math

import numpy as np
import pytest

from clusterbandits.env import (
    ArmOutOfRangeError,
    Environment,
    InvalidDimensionsError,
    InvalidEpsilonError,
    NoiseModel,
    RowDistribution,
    RunHistory,
    SeparationUnsatisfiableError,
    env_step,
    generate_cs_instance,
    generate_hard_instance,
    generate_rcs_instance,
    load_instance,
    save_instance,
    validate_instance,
)


def test_cs_benchmark_scale_shape_and_clusters():
    inst = generate_cs_instance(200, 200, 4, RowDistribution.gaussian(0, 1), seed=7)
    assert inst.P.shape == (200, 200)
    # 4 distinct rows, each cluster of size 50
    assert len({tuple(row) for row in inst.P}) == 4
    sizes = np.bincount(inst.cluster_of)
    assert list(sizes) == [50, 50, 50, 50]
    validate_instance(inst)


def test_cs_degenerate_uniform_all_ones():
    inst = generate_cs_instance(3, 2, 1, RowDistribution.uniform(1, 1), seed=0)
    assert np.array_equal(inst.P, np.ones((3, 2)))
    assert np.all(inst.cluster_of == 0)


def test_cs_rank_matches_cluster_count():
    inst = generate_cs_instance(8, 5, 2, RowDistribution.gaussian(0, 1), seed=42)
    # independent SVD oracle: count singular values above 1e-9
    svals = np.linalg.svd(inst.P, compute_uv=False)
    assert int(np.sum(svals > 1e-9)) == 2


def test_cs_invalid_dimensions():
    with pytest.raises(InvalidDimensionsError):
        generate_cs_instance(3, 2, 4, RowDistribution.gaussian(0, 1), seed=0)
    with pytest.raises(InvalidDimensionsError):
        generate_cs_instance(0, 2, 1, RowDistribution.gaussian(0, 1), seed=0)


def test_rcs_nu_zero_equals_cs():
    dist = RowDistribution.gaussian(0, 1)
    a = generate_rcs_instance(6, 4, 2, 0.0, dist, seed=5)
    b = generate_cs_instance(6, 4, 2, dist, seed=5)
    assert np.array_equal(a.P, b.P)
    assert np.array_equal(a.cluster_of, b.cluster_of)


def test_rcs_invariants_hold():
    inst = generate_rcs_instance(6, 4, 2, 0.01, RowDistribution.gaussian(0, 1), seed=3)
    validate_instance(inst)
    assert inst.nu == 0.01


def test_rcs_separation_unsatisfiable():
    # 20*nu = 200 dwarfs the achievable range of N(0, 0.1) rows
    with pytest.raises(SeparationUnsatisfiableError):
        generate_rcs_instance(4, 2, 2, 10.0, RowDistribution.gaussian(0, 0.1), seed=1)


def test_hard_instance_reward_table():
    inst = generate_hard_instance(4, 3, 2, 0.2, [0, 2], seed=0)
    expected = np.array([[0.6, 0.4, 0.4], [0.4, 0.4, 0.6]])
    assert np.allclose(inst.X, expected)
    assert inst.default_noise.kind == "bernoulli-reward"


def test_hard_instance_single_arm_zero_regret():
    inst = generate_hard_instance(3, 1, 1, 0.5, [0], seed=0)
    assert np.allclose(inst.X, [[0.75]])
    env = Environment(inst, NoiseModel("none"), seed=0, horizon=50)
    while not env.done:
        env.step(lambda u: 0)
    assert env.history.final_regret == 0.0


def test_hard_instance_shared_best_arm_gaps():
    inst = generate_hard_instance(6, 5, 3, 0.1, [0, 0, 0], seed=0)
    for c in range(3):
        assert inst.gaps[c, 0] == 0.0
        assert np.allclose(inst.gaps[c, 1:], 0.1)


def test_hard_instance_invalid_epsilon():
    for eps in (0.0, 1.0, -0.3, 2.0):
        with pytest.raises(InvalidEpsilonError):
            generate_hard_instance(2, 2, 1, eps, [0], seed=0)


def test_env_step_optimal_policy_zero_regret():
    inst = generate_cs_instance(4, 3, 2, RowDistribution.gaussian(0, 1), seed=1)
    state = RunHistory()
    rng_u = np.random.default_rng(0)
    rng_n = np.random.default_rng(1)
    for _ in range(20):
        env_step(inst, NoiseModel("none"), lambda u: inst.best_arm[u], state, rng_u, rng_n)
    assert state.final_regret == 0.0
    assert np.all(state.inst_regret[:20] == 0.0)


def test_env_step_worst_policy_matches_hand_sum():
    inst = generate_cs_instance(2, 2, 2, RowDistribution.gaussian(0, 1), seed=9)
    worst = np.argmin(inst.P, axis=1)
    state = RunHistory()
    rng_u = np.random.default_rng(123)
    rng_n = np.random.default_rng(5)
    for _ in range(10):
        env_step(inst, NoiseModel("none"), lambda u: worst[u], state, rng_u, rng_n)
    # oracle: replay the same seeded user stream and sum per-user max gaps
    replay = np.random.default_rng(123)
    expected = 0.0
    for _ in range(10):
        u = int(replay.integers(0, 2))
        expected += inst.P[u].max() - inst.P[u].min()
    assert state.final_regret == pytest.approx(expected, abs=1e-12)


def test_env_reward_mean_concentrates():
    inst = generate_cs_instance(2, 2, 1, RowDistribution.uniform(0.3, 0.3), seed=0)
    n = 10**5
    env = Environment(inst, NoiseModel("gaussian", 0.5), seed=77, horizon=n)
    while not env.done:
        env.step(lambda u: 1)
    mean = env.history.rewards.mean()
    assert abs(mean - 0.3) <= 3 * 0.5 / math.sqrt(n)


def test_policy_arm_out_of_range():
    inst = generate_cs_instance(2, 2, 1, RowDistribution.gaussian(0, 1), seed=0)
    env = Environment(inst, NoiseModel("none"), seed=0, horizon=5)
    with pytest.raises(ArmOutOfRangeError):
        env.step(lambda u: 2)


def test_run_determinism_bit_identical():
    inst = generate_cs_instance(5, 4, 2, RowDistribution.gaussian(0, 1), seed=3)
    outs = []
    for _ in range(2):
        env = Environment(inst, NoiseModel("gaussian", 0.3), seed=42, horizon=500)
        rng = np.random.default_rng(7)
        while not env.done:
            env.step(lambda u: int(rng.integers(0, 4)))
        outs.append(env.history)
    a, b = outs
    assert np.array_equal(a.users[:500], b.users[:500])
    assert np.array_equal(a.arms[:500], b.arms[:500])
    assert np.array_equal(a.rewards[:500], b.rewards[:500])
    assert np.array_equal(a.cumulative_regret[:500], b.cumulative_regret[:500])


def test_user_frequency_binomial():
    inst = generate_cs_instance(10, 2, 1, RowDistribution.gaussian(0, 1), seed=0)
    n = 10**5
    env = Environment(inst, NoiseModel("none"), seed=11, horizon=n)
    while not env.done:
        env.step(lambda u: 0)
    counts = np.bincount(env.history.users, minlength=10)
    p = 1 / 10
    std = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 5 * std)


def test_cumulative_regret_monotone_nonneg():
    inst = generate_cs_instance(6, 5, 3, RowDistribution.gaussian(0, 1), seed=2)
    env = Environment(inst, NoiseModel("gaussian", 1.0), seed=8, horizon=2000)
    rng = np.random.default_rng(1)
    while not env.done:
        env.step(lambda u: int(rng.integers(0, 5)))
    h = env.history
    assert np.all(h.inst_regret[:2000] >= 0.0)
    assert np.all(np.diff(h.cumulative_regret[:2000]) >= 0.0)
    assert h.cumulative_regret[1999] == pytest.approx(h.inst_regret[:2000].sum())


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_cs_rank_at_most_c(seed):
    inst = generate_cs_instance(30, 20, 5, RowDistribution.gaussian(0, 1), seed=seed)
    svals = np.linalg.svd(inst.P, compute_uv=False)
    assert np.all(svals[5:] <= 1e-9 * svals[0])


@pytest.mark.parametrize("kind", ["gaussian", "uniform"])
def test_noise_zero_mean_and_variance(kind):
    noise = NoiseModel(kind, sigma=0.7)
    draws = noise.draw_block(np.random.default_rng(0), 10**5)
    rewards = draws  # zero-mean additive part
    assert abs(rewards.mean()) < 0.02
    assert abs(rewards.var() - 0.49) <= 0.1 * 0.49


def test_bernoulli_reward_draws():
    noise = NoiseModel("bernoulli-reward", sigma=0.5)
    draws = noise.draw_block(np.random.default_rng(0), 10**5)
    rewards = np.array([noise.reward(0.3, d) for d in draws[:10000]])
    assert set(np.unique(rewards)) <= {0.0, 1.0}
    assert abs(rewards.mean() - 0.3) < 0.02


def test_bernoulli_requires_unit_interval():
    inst = generate_cs_instance(2, 2, 1, RowDistribution.gaussian(0, 5), seed=0)
    with pytest.raises(ValueError):
        Environment(inst, NoiseModel("bernoulli-reward", 0.5), seed=0, horizon=10)


def test_instance_roundtrip_exact(tmp_path):
    inst = generate_rcs_instance(6, 4, 2, 0.05, RowDistribution.gaussian(0, 1), seed=13)
    path = tmp_path / "inst.txt"
    save_instance(inst, path)
    back = load_instance(path)
    assert np.array_equal(back.P, inst.P)
    assert np.array_equal(back.X, inst.X)
    assert np.array_equal(back.cluster_of, inst.cluster_of)
    assert back.nu == inst.nu
    assert np.array_equal(back.best_arm, inst.best_arm)


def test_row_distribution_parse_roundtrip():
    for text in ["gaussian(0,1)", "uniform(0,5)", "gaussian(-1.5,0.25)"]:
        dist = RowDistribution.parse(text)
        again = RowDistribution.parse(str(dist))
        assert dist == again
