import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softq_pretrain.mdp import (
    FIXTURE_GRID_5X5,
    FIXTURE_OPEN_5X5,
    RIGHT,
    GridWorldSpec,
    TabularMDP,
    build_gridworld,
    build_layered_mdp,
    fnv1a_64,
    grid_move,
    make_env,
    rollout,
)
from softq_pretrain.soft import exact_soft_policy_eval, uniform_policy


def corridor(slip=0.0):
    return build_gridworld(GridWorldSpec(width=2, height=1, goal=(1, 0), slip_prob=slip))


def assert_mdp_invariants(mdp):
    P, R = mdp.transition, mdp.reward
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-12)
    assert abs(mdp.initial_dist.sum() - 1) <= 1e-12
    assert np.all(mdp.initial_dist[mdp.terminal] == 0)
    for s in np.flatnonzero(mdp.terminal):
        assert np.all(P[s, :, s] == 1.0)
        assert np.all(R[s] == 0.0)


def test_corridor_has_three_states_and_right_pays_one():
    mdp = corridor()
    assert mdp.n_states == 3
    start = int(np.argmax(mdp.initial_dist))
    assert mdp.reward[start, RIGHT] == 1.0
    assert mdp.terminal[np.argmax(mdp.transition[start, RIGHT])]


@pytest.mark.parametrize("spec", [FIXTURE_GRID_5X5, GridWorldSpec(4, 3, (3, 2), frozenset({(1, 1)}))])
def test_no_slip_rows_are_one_hot(spec):
    spec = GridWorldSpec(**{**spec.__dict__, "slip_prob": 0.0})
    P = build_gridworld(spec).transition
    assert np.all(np.isin(P, [0.0, 1.0]))
    assert np.all((P == 1.0).sum(axis=2) == 1)


def test_open_grid_matches_independent_slip_enumeration():
    spec = FIXTURE_OPEN_5X5
    mdp = build_gridworld(spec)
    cells = [(x, y) for y in range(5) for x in range(5)]
    term = mdp.n_states - 1
    p = spec.slip_prob
    for s, cell in enumerate(cells):
        for a in range(4):
            expect = np.zeros(mdp.n_states)
            r = 0.0
            # the chosen action once with prob 1 - p, every action with prob p / 4
            outcomes = [(a, 1 - p)] + [(b, p / 4) for b in range(4)]
            for b, w in outcomes:
                nxt = cell if cell == spec.goal else grid_move(spec, cell, b)
                if cell == spec.goal or nxt == spec.goal:
                    expect[term] += w
                    r += w * spec.goal_reward
                else:
                    expect[cells.index(nxt)] += w
                    r += w * spec.step_reward
            np.testing.assert_allclose(mdp.transition[s, a], expect, atol=1e-15)
            assert mdp.reward[s, a] == pytest.approx(r, abs=1e-15)
    assert_mdp_invariants(mdp)


def test_unreachable_goal_is_rejected():
    walled = GridWorldSpec(3, 1, goal=(2, 0), walls=frozenset({(1, 0)}))
    with pytest.raises(ValueError, match="unreachable"):
        build_gridworld(walled)


def test_spec_invariants():
    with pytest.raises(ValueError):
        GridWorldSpec(2, 2, goal=(1, 1), walls=frozenset({(1, 1)}))
    with pytest.raises(ValueError):
        GridWorldSpec(2, 2, goal=(1, 1), slip_prob=1.5)


@settings(max_examples=40, deadline=None)
@given(
    w=st.integers(1, 5),
    h=st.integers(1, 5),
    slip=st.floats(0, 1),
    data=st.data(),
)
def test_gridworld_builder_invariants(w, h, slip, data):
    goal = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    free = [c for c in itertools.product(range(w), range(h)) if c != goal]
    walls = frozenset(data.draw(st.lists(st.sampled_from(free), max_size=3))) if free else frozenset()
    spec = GridWorldSpec(w, h, goal, walls, step_reward=-0.1, slip_prob=slip)
    try:
        mdp = build_gridworld(spec)
    except ValueError as exc:
        assert "unreachable" in str(exc) or "no start" in str(exc)
        return
    assert_mdp_invariants(mdp)


@settings(max_examples=40, deadline=None)
@given(L=st.integers(1, 4), W=st.integers(1, 4), A=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_layered_builder_invariants(L, W, A, seed):
    mdp = build_layered_mdp(L, W, A, seed)
    assert_mdp_invariants(mdp)
    assert mdp.is_acyclic()
    live = mdp.reward[~mdp.terminal]
    assert np.all((live >= -1) & (live <= 1))


def test_layered_single_decision():
    mdp = build_layered_mdp(1, 1, 1, seed=3)
    rep = exact_soft_policy_eval(mdp, np.ones((2, 1)), 0.5, 1.0)
    assert rep.eta == pytest.approx(mdp.reward[0, 0], abs=1e-15)


def test_layered_is_deterministic_in_seed():
    a, b = build_layered_mdp(3, 2, 2, 11), build_layered_mdp(3, 2, 2, 11)
    assert np.array_equal(a.transition, b.transition) and np.array_equal(a.reward, b.reward)
    assert a.content_hash() == b.content_hash()


def test_layered_trajectories_all_have_length_four():
    mdp = build_layered_mdp(4, 3, 2, seed=7)
    term = np.flatnonzero(mdp.terminal)[0]
    total = 0.0
    # every action sequence times every stochastic branch
    for actions in itertools.product(range(2), repeat=4):
        frontier = [(s, mdp.initial_dist[s]) for s in np.flatnonzero(mdp.initial_dist)]
        for a in actions:
            nxt = []
            for s, p in frontier:
                assert s != term
                for s2 in np.flatnonzero(mdp.transition[s, a]):
                    nxt.append((s2, p * mdp.transition[s, a, s2]))
            frontier = nxt
        assert all(s == term for s, _ in frontier)
        # after exactly four decisions all probability mass is absorbed
        total += sum(p for _, p in frontier)
    assert total / 16 == pytest.approx(1.0, abs=1e-12)


def test_rollout_always_right_on_corridor():
    mdp = corridor()
    traj = rollout(mdp, lambda s: np.array([0.0, 1.0, 0.0, 0.0]), max_steps=10, rng_seed=0)
    assert len(traj) == 1
    t = traj.transitions[0]
    assert t.reward == 1.0 and t.done


def test_rollout_zero_steps_is_empty():
    assert len(rollout(corridor(), uniform_policy(corridor()), 0, 1)) == 0


def test_rollout_rejects_bad_distributions():
    mdp = corridor()
    with pytest.raises(ValueError, match="invalid distribution"):
        rollout(mdp, lambda s: np.array([0.5, 0.6, 0.0, 0.0]), 5, 0)
    with pytest.raises(ValueError, match="invalid distribution"):
        rollout(mdp, lambda s: np.array([1.2, -0.2, 0.0, 0.0]), 5, 0)


def test_rollout_is_reproducible_and_consistent():
    mdp, _ = make_env("grid5x5")
    pol = uniform_policy(mdp)
    a, b = rollout(mdp, pol, 100, 42), rollout(mdp, pol, 100, 42)
    assert a.transitions == b.transitions
    for t0, t1 in zip(a.transitions, a.transitions[1:]):
        assert t0.next_state == t1.state and not t0.done
    for t in a.transitions:
        assert t.done == bool(mdp.terminal[t.next_state])


def test_uniform_rollouts_match_exact_evaluation():
    # a generous time limit so truncation does not bias the comparison
    mdp, _ = make_env("open5x5")
    pol = uniform_policy(mdp)
    exact = exact_soft_policy_eval(mdp, pol, 0.0, 1.0).return_only
    rng = np.random.default_rng(5)
    returns = np.array([rollout(mdp, pol, 5000, rng).total_reward for _ in range(10_000)])
    se = returns.std(ddof=1) / np.sqrt(len(returns))
    assert abs(returns.mean() - exact) <= 3 * se


def test_visit_frequencies_match_chain_occupancy():
    mdp = build_gridworld(GridWorldSpec(3, 3, (2, 2), slip_prob=0.2))
    pol = uniform_policy(mdp)
    live = ~mdp.terminal
    P_pi = np.einsum("sa,sat->st", pol, mdp.transition)[np.ix_(live, live)]
    occupancy = np.linalg.solve(np.eye(live.sum()) - P_pi.T, mdp.initial_dist[live])
    expected = occupancy / occupancy.sum()
    rng = np.random.default_rng(9)
    counts = np.zeros(live.sum())
    for _ in range(3000):
        for t in rollout(mdp, pol, 10_000, rng).transitions:
            counts[t.state] += 1
    # the goal cell is a state but is never occupied: entering it ends the episode
    seen = expected > 0
    assert np.all(counts[~seen] == 0)
    e = counts.sum() * expected[seen]
    chi2 = np.sum((counts[seen] - e) ** 2 / e)
    # 7 degrees of freedom; visits within an episode are correlated, so the bound is loose
    assert chi2 < 60


def test_json_round_trip_and_hash(tmp_path):
    mdp, _ = make_env("grid5x5")
    path = tmp_path / "grid.json"
    mdp.save(path)
    back = TabularMDP.load(path)
    assert np.array_equal(back.transition, mdp.transition)
    assert back.content_hash() == mdp.content_hash()
    assert len(mdp.content_hash()) == 16
    loaded, steps = make_env(f"{path}#37")
    assert steps == 37 and loaded.content_hash() == mdp.content_hash()


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_invalid_mdp_rejected():
    mdp = corridor()
    P = mdp.transition.copy()
    P[0, 0, 0] += 0.1
    with pytest.raises(ValueError):
        TabularMDP(P, mdp.reward, mdp.initial_dist, mdp.terminal)
    mu = mdp.initial_dist.copy()
    mu[:] = 0
    mu[-1] = 1
    with pytest.raises(ValueError):
        TabularMDP(mdp.transition, mdp.reward, mu, mdp.terminal)


def test_fixture_is_the_snake_maze():
    mdp, steps = make_env("grid5x5")
    assert mdp.n_states == 5 * 5 - 8 + 1 and steps == 100
    assert mdp.initial_dist[0] == 1.0
