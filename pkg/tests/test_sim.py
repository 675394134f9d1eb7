import itertools

import numpy as np
import pytest

from mqme import sim
from mqme.demogen import Trajectory
from mqme.errors import ConfigError, UsageError
from mqme.sim import Action, EnvConfig, Kind


def test_reset_is_deterministic(config):
    a = sim.reset(config, Kind.MEDIUMSTICK, 7)
    b = sim.reset(config, Kind.MEDIUMSTICK, 7)
    assert a == b


def test_seeds_give_different_layouts_on_9x8_grid():
    cfg = EnvConfig(width=9, height=8, layout_pool=0)
    cols = {sim.reset(cfg, Kind.SHORTSTICK, s).block_positions for s in range(20)}
    assert len({tuple(c for _, c in b) for b in cols}) > 1


def test_layout_pool_limits_distinct_starts():
    cfg = EnvConfig(layout_pool=2)
    starts = {sim.reset(cfg, Kind.SHORTSTICK, s).block_positions for s in range(200)}
    assert len(starts) == 2


def test_placement_rule(config):
    for s in range(50):
        st = sim.reset(config, Kind.SHORTSTICK, s)
        cols = [c for _, c in st.block_positions]
        assert len(set(cols)) == 3
        assert all(r >= config.goal_depth for r, _ in st.block_positions)
        assert st.agent_row == config.height - 1


@pytest.mark.parametrize("kw", [dict(width=6), dict(height=4), dict(goal_depth=0), dict(num_blocks=0)])
def test_invalid_config_raises(kw):
    with pytest.raises(ConfigError):
        EnvConfig(**kw).validate()


def _state(config, kind, agent, blocks, held=None):
    emb = config.embodiment(kind)
    return sim.EnvState(config, emb, agent[0], agent[1], tuple(blocks), held)


def test_reward_is_fraction_in_zone(config):
    st = _state(config, Kind.SHORTSTICK, (3, 4), [(0, 0), (1, 2), (3, 3)])
    st2 = _state(config, Kind.SHORTSTICK, (4, 3), [(0, 0), (1, 2), (3, 3)])
    _, _, r = sim.step(st2, Action.UP)
    assert r == pytest.approx(2 / 3)
    assert st.blocks_in_zone == 2


def test_push_up_moves_block_and_agent(config):
    st = _state(config, Kind.SHORTSTICK, (6, 4), [(5, 4), (8, 0), (8, 8)])
    nxt, _, _ = sim.step(st, Action.UP)
    assert nxt.block_positions[0] == (4, 4)
    assert nxt.agent_row == 5


def test_longstick_pushes_three_blocks_at_once(config):
    st = _state(config, Kind.LONGSTICK, (6, 3), [(5, 3), (5, 4), (5, 5)])
    nxt, _, _ = sim.step(st, Action.UP)
    assert [r for r, _ in nxt.block_positions] == [4, 4, 4]


def test_blocked_push_is_noop(config):
    st = _state(config, Kind.SHORTSTICK, (2, 4), [(1, 4), (0, 4), (8, 0)])
    nxt, _, _ = sim.step(st, Action.UP)
    assert nxt.block_positions == st.block_positions and nxt.agent_row == 2


def test_gripper_carries_block(config):
    st = _state(config, Kind.GRIPPER, (6, 4), [(5, 4), (8, 0), (8, 8)])
    st, _, _ = sim.step(st, Action.TOGGLE_GRIP)
    assert st.gripped_block == 0
    st, _, _ = sim.step(st, Action.LEFT)
    assert st.block_positions[0] == (5, 3)


def test_illegal_action_and_terminal_step(config):
    st = sim.reset(config, Kind.SHORTSTICK, 0)
    with pytest.raises(UsageError):
        sim.step(st, Action.TOGGLE_GRIP)
    done = _state(config, Kind.SHORTSTICK, (5, 0), [(0, 0), (0, 4), (1, 8)])
    done = sim.EnvState(config, done.embodiment, 5, 0, done.block_positions, terminal=True)
    with pytest.raises(UsageError):
        sim.step(done, Action.UP)


def test_full_success_terminates(config):
    st = _state(config, Kind.SHORTSTICK, (3, 8), [(0, 0), (0, 4), (2, 8)])
    nxt, _, r = sim.step(st, Action.UP)
    assert nxt.terminal and r == 1.0


def test_render_properties(config):
    hw = config.width * config.height
    for s in range(20):
        st = sim.reset(config, Kind.LONGSTICK, s)
        f = sim.render_frame(st)
        assert f.shape == (3 * hw,)
        assert not np.any(f[:hw] & f[hw:2 * hw])
        assert f[hw:2 * hw].sum() == config.num_blocks
        assert f[:hw].sum() == 3


def test_render_locality(config):
    a = _state(config, Kind.SHORTSTICK, (8, 2), [(5, 0), (5, 4), (6, 8)])
    b = _state(config, Kind.SHORTSTICK, (8, 3), [(5, 0), (5, 4), (6, 8)])
    diff = np.flatnonzero(sim.render_frame(a) != sim.render_frame(b))
    assert diff.size and np.all(diff < config.width * config.height)


def test_gt_return_examples():
    assert sim.gt_return(Trajectory.from_rewards([0, 0, 0])) == 0
    t = Trajectory.from_rewards([0, 1 / 3, 1 / 3, 2 / 3])
    assert sim.gt_return(t) == pytest.approx(4 / 3)
    assert sim.gt_step_mean(t) == pytest.approx(1 / 3)


def test_gt_return_empty_raises():
    with pytest.raises(UsageError):
        sim.gt_return(Trajectory.from_rewards([]))


def test_success_is_absorbing_to_horizon():
    t = Trajectory.from_rewards([0, 2 / 3, 1], horizon=10)
    assert t.gt_rewards[-1] == 1
    assert sim.gt_return(t) == pytest.approx(2 / 3 + 8)


def test_apply_action_matches_jit_free_semantics(config):
    # every action from a few states keeps blocks on distinct in-bounds cells
    for seed, a in itertools.product(range(10), range(5)):
        s = sim.reset(config, Kind.GRIPPER, seed).to_array()
        out = sim.apply_action(s, a, config.width, config.height, 1)
        cells = {(out[3 + 2 * k], out[4 + 2 * k]) for k in range(3)}
        assert len(cells) == 3
        assert all(0 <= r < config.height and 0 <= c < config.width for r, c in cells)
