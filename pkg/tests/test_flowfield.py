import dataclasses

import numpy as np
import pytest

from triflow import flowfield as ff
from triflow import toyworld as tw
from triflow.errors import ShapeError

# empirical roundtrip error is ~1e-7 of max_mag; the frozen bound below it
ROUNDTRIP_BOUND = 1.0 / 128.0


def _sim_pairs(n, gap=1):
    pairs = []
    s = 0
    while len(pairs) < n:
        env = tw.init_env(3000 + s, 0, 1 + s % 3)
        prev_state, prev_frame = env, tw.render(env)
        for t in range(14):
            env = tw.step(env, tw.expert_action(env, env.task_code))
            if (t + 1) % gap == 0:
                pairs.append((prev_state, prev_frame, env, tw.render(env)))
                prev_state, prev_frame = env, tw.render(env)
                if len(pairs) >= n:
                    break
        s += 1
    return pairs


def test_identical_frames_zero_flow():
    env = tw.init_env(1, 0, 1)
    frame = tw.render(env)
    flow = ff.block_match_flow(frame, frame)
    assert np.all(flow.vectors == 0)
    flow_a = ff.analytic_flow(env, env)
    assert np.all(flow_a.vectors == 0)


def test_analytic_translation():
    env = tw.init_env(1, 0, 1)
    moved = dataclasses.replace(env, object_pos=env.object_pos + np.array([2.0 / tw.FRAME_HW, 0.0]))
    flow = ff.analytic_flow(env, moved)
    mask = ff._disc_coverage(env.object_pos, tw.OBJECT_RADIUS) >= 0.5
    assert np.allclose(flow.vectors[mask], [2.0, 0.0])
    bg = ~(
        (ff._disc_coverage(env.object_pos, tw.OBJECT_RADIUS) >= 0.5)
        | (ff._disc_coverage(env.agent_pos, tw.AGENT_RADIUS) >= 0.5)
        | (ff._disc_coverage(env.goal_pos, tw.GOAL_RADIUS) >= 0.5)
    )
    assert np.all(flow.vectors[bg] == 0)


def test_block_match_vs_analytic_oracle():
    epes = []
    for state_a, frame_a, state_b, frame_b in _sim_pairs(100):
        oracle = ff.analytic_flow(state_a, state_b)
        est = ff.block_match_flow(frame_a, frame_b)
        epes.append(np.linalg.norm(oracle.vectors - est.vectors, axis=-1).mean())
    assert np.mean(epes) <= 1.0


def test_mismatched_dims_error():
    with pytest.raises(ShapeError):
        ff.estimate_flow(np.zeros((16, 16, 3)), np.zeros((8, 8, 3)))


def test_estimate_flow_analytic_requires_states():
    f = np.zeros((16, 16, 3))
    with pytest.raises(ShapeError):
        ff.estimate_flow(f, f, method="analytic")


# --- color encoding -----------------------------------------------------------

def test_zero_flow_white():
    flow = ff.FlowField(np.zeros((8, 8, 2)))
    assert np.all(ff.flow_to_rgb(flow) == 1.0)


def test_max_magnitude_hue_zero_is_red():
    flow = ff.FlowField(np.full((8, 8, 2), [3.0, 0.0]), max_mag=3.0)
    rgb = ff.flow_to_rgb(flow)
    assert np.allclose(rgb, [1.0, 0.0, 0.0], atol=1e-6)


def test_all_white_decodes_to_zero():
    flow = ff.rgb_to_flow(np.ones((8, 8, 3)), max_mag=2.0)
    assert np.all(flow.vectors == 0)


def test_roundtrip_bound():
    rng = np.random.default_rng(0)
    for _ in range(30):
        f = ff.FlowField(rng.uniform(-6, 6, size=(16, 16, 2)))
        back = ff.rgb_to_flow(ff.flow_to_rgb(f), f.max_mag)
        err = np.linalg.norm(back.vectors - f.vectors, axis=-1).max()
        assert err <= f.max_mag * ROUNDTRIP_BOUND


@pytest.mark.parametrize("quarter_turns", [1, 2, 3])
def test_rotation_equivariance(quarter_turns):
    rng = np.random.default_rng(3)
    v = rng.uniform(-4, 4, size=(8, 8, 2))
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    for _ in range(quarter_turns):
        v = v @ rot.T
    base = ff.FlowField(rng.uniform(-4, 4, size=(8, 8, 2)))  # fresh noise, reuse mags below
    f0 = ff.FlowField(rng.uniform(-4, 4, size=(8, 8, 2)), max_mag=6.0)
    vr = f0.vectors @ rot.T
    for _ in range(quarter_turns - 1):
        vr = vr @ rot.T
    f1 = ff.FlowField(vr, max_mag=6.0)
    h0, s0, _ = ff._rgb_to_hsv(ff.flow_to_rgb(f0).astype(np.float64))
    h1, s1, _ = ff._rgb_to_hsv(ff.flow_to_rgb(f1).astype(np.float64))
    shift = 0.25 * quarter_turns
    assert np.allclose((h0 + shift) % 1.0, h1 % 1.0, atol=1e-5)
    assert np.allclose(s0, s1, atol=1e-6)


def test_magnitude_monotonicity():
    mags = np.linspace(0, 5, 40)
    flow = ff.FlowField(np.stack([mags, np.zeros_like(mags)], axis=-1)[None, :, :], max_mag=4.0)
    rgb = ff.flow_to_rgb(flow)
    _, sat, _ = ff._rgb_to_hsv(rgb.astype(np.float64))
    sat = sat[0]
    assert np.all(np.diff(sat) >= -1e-12)


def test_dataset_max_mag_percentile():
    flows = [np.zeros((16, 16, 2)), np.full((16, 16, 2), [1.0, 0.0])]
    m = ff.dataset_max_mag(flows)
    assert m == pytest.approx(1.0)
    assert ff.dataset_max_mag([np.zeros((4, 4, 2))]) == 1.0
