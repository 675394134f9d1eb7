import numpy as np
import pytest

from mqme import demogen, rl
from mqme.demogen import DegradedOracle
from mqme.errors import ResourceError, UsageError
from mqme.sim import EnvConfig, Kind, gt_return, reset

CORRIDOR = EnvConfig(width=3, height=5, goal_depth=1, num_blocks=1, layout_pool=1,
                     max_steps={k: 12 for k in Kind})


def test_corridor_optimum_is_push_distance():
    st = reset(CORRIDOR, Kind.SHORTSTICK, 0)
    (br, bc), = st.block_positions
    # walk to the block column, then every Up either approaches or pushes
    n_star = abs(st.agent_col - bc) + (st.agent_row - 1)
    vi = rl.value_iteration(CORRIDOR, Kind.SHORTSTICK)
    horizon = CORRIDOR.max_steps[Kind.SHORTSTICK] + 1
    # rewards 0 until the success frame n*, which then pays to the horizon
    assert vi.optimal_return == pytest.approx(horizon - n_star)


def test_gamma_zero_values_are_immediate_rewards():
    mdp = rl.tabulate(CORRIDOR, Kind.SHORTSTICK)
    vi = rl.value_iteration(CORRIDOR, Kind.SHORTSTICK, gamma=0.0)
    expected = mdp.gt[mdp.nxt].max(axis=1)
    np.testing.assert_allclose(vi.values, expected)


def test_value_iteration_contracts(config):
    vi = rl.value_iteration(config, Kind.LONGSTICK, gamma=0.95)
    res = vi.residuals[vi.residuals > 0]
    assert len(res) > 3
    assert np.all(np.diff(res) <= 1e-12)


def test_unrestricted_layouts_and_budget():
    with pytest.raises(ResourceError):
        rl.tabulate(EnvConfig(layout_pool=0), Kind.SHORTSTICK)
    with pytest.raises(ResourceError, match="smaller EnvConfig"):
        rl.tabulate(EnvConfig(layout_pool=3), Kind.SHORTSTICK, key_budget=100)


def test_greedy_table_matches_optimum(config):
    vi = rl.value_iteration(config, Kind.MEDIUMSTICK)
    table = rl.greedy_table(vi)
    assert rl.evaluate_policy(table, episodes=50) == pytest.approx(vi.optimal_return, rel=0.01)


def test_evaluate_episode_counts(config):
    vi = rl.value_iteration(config, Kind.MEDIUMSTICK)
    table = rl.greedy_table(vi)
    one = rl.episode_returns(table, 1, seed=3)
    assert one.shape == (1,) and rl.evaluate_policy(table, episodes=1, seed=3) == one[0]
    spec = rl.RlSpec(total_steps=0)
    untrained, _ = rl.q_learning_train(config, Kind.MEDIUMSTICK, spec=spec)
    many = rl.episode_returns(untrained, 50, seed=0)
    assert many.min() <= rl.evaluate_policy(untrained, episodes=50) <= many.max()
    with pytest.raises(UsageError):
        rl.evaluate_policy(table, embodiment=Kind.GRIPPER)


def test_untrained_policy_is_random(config):
    table, _ = rl.q_learning_train(config, Kind.SHORTSTICK, spec=rl.RlSpec(total_steps=0))
    greedy = rl.episode_returns(table, 400, seed=1)
    rand = np.array([gt_return(demogen.rollout(DegradedOracle(1.0), config, Kind.SHORTSTICK, s))
                     for s in range(400)])
    se = np.sqrt(greedy.var() / 400 + rand.var() / 400)
    assert abs(greedy.mean() - rand.mean()) < 4 * se


def test_q_learning_determinism(config):
    spec = rl.RlSpec(total_steps=10_000, eval_every=2_000)
    _, a = rl.q_learning_train(config, Kind.LONGSTICK, spec=spec, seed=2)
    _, b = rl.q_learning_train(config, Kind.LONGSTICK, spec=spec, seed=2)
    assert np.array_equal(a.returns, b.returns)
    np.testing.assert_array_equal(a.steps, [2000, 4000, 6000, 8000, 10000])


def test_train_seeds_independent_of_workers(config):
    spec = rl.RlSpec(total_steps=5_000, eval_every=2_500, seeds=(0, 1, 2))
    a = rl.train_seeds(config, Kind.LONGSTICK, spec=spec, workers=1)
    b = rl.train_seeds(config, Kind.LONGSTICK, spec=spec, workers=2)
    assert np.array_equal(a.returns, b.returns)


def test_curve_round_trip(config, tmp_path):
    spec = rl.RlSpec(total_steps=4_000, eval_every=2_000, seeds=(0, 1))
    c = rl.train_seeds(config, Kind.LONGSTICK, spec=spec)
    rl.write_curve(c, tmp_path / "c.tsv", header="method=x")
    back = rl.read_curve(tmp_path / "c.tsv")
    assert np.array_equal(back.returns, c.returns) and back.seeds == (0, 1)
    np.testing.assert_array_equal(back.steps, c.steps)


def test_spec_validation():
    with pytest.raises(UsageError):
        rl.RlSpec(gamma=1.0)
    with pytest.raises(UsageError):
        rl.RlSpec(optimism_quantile=1.5)
