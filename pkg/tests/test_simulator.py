from dataclasses import replace

import numpy as np
import pytest

from ctxmon.kinematics import GRASPER, N_PER_ARM, ConfigurationError, load_trajectory
from ctxmon.simulator import NOISE_FAMILIES, SimParams, add_noise, generate_block_transfer, write_demo
from ctxmon.task_model import BLOCK_TRANSFER_ORDER

from conftest import make_traj

R_GRASPER = N_PER_ARM + GRASPER


@pytest.fixture(scope="module")
def demo():
    return generate_block_transfer(SimParams(seed=7))


def test_segments_partition_the_demo(demo):
    segs = demo.segments
    assert tuple(s.gesture_id for s in segs) == BLOCK_TRANSFER_ORDER
    assert segs[0].start_index == 0 and segs[-1].end_index == len(demo) - 1
    for a, b in zip(segs[:-1], segs[1:]):
        assert b.start_index == a.end_index + 1


def test_grasper_schedule(demo):
    p = SimParams()
    tol = 5 * p.noise["grasper"]
    g6 = demo.segments[3]
    mid = (g6.start_index + g6.end_index) // 2
    assert abs(demo.data[mid, R_GRASPER] - p.grasper_closed) < tol
    assert abs(demo.data[demo.segments[4].end_index, R_GRASPER] - p.grasper_open) < tol


def test_same_seed_is_bit_identical(demo):
    again = generate_block_transfer(SimParams(seed=7))
    assert again.data.tobytes() == demo.data.tobytes()
    assert generate_block_transfer(SimParams(seed=8)).data.tobytes() != demo.data.tobytes()


def test_rotations_are_orthonormal(demo):
    for base in (0, N_PER_ARM):
        R = demo.data[:, base + 3:base + 12].reshape(-1, 3, 3)
        err = np.abs(R @ R.transpose(0, 2, 1) - np.eye(3)).max()
        assert err < 1e-6


def test_release_happens_over_the_receptacle():
    for seed in range(10):
        p = SimParams(seed=seed, noise={k: 0.0 for k in NOISE_FAMILIES})
        t = generate_block_transfer(p)
        g11 = t.segments[4]
        # first fully open sample inside the drop gesture
        ga = t.data[g11.start_index:g11.end_index + 1, R_GRASPER]
        k = g11.start_index + int(np.argmax(ga >= p.grasper_open - 1e-12))
        np.testing.assert_allclose(t.data[k, N_PER_ARM:N_PER_ARM + 3], t.meta["drop_point"], atol=1e-6)


def test_doubling_the_rate():
    a = generate_block_transfer(SimParams(seed=3, sample_rate_hz=100.0))
    b = generate_block_transfer(SimParams(seed=3, sample_rate_hz=200.0))
    assert abs(len(b) - 2 * len(a)) <= 1
    ta, tb = a.t_ms, b.t_ms
    for sa, sb in zip(a.segments, b.segments):
        assert abs(ta[sa.start_index] - tb[sb.start_index]) <= 10.0
        assert abs(ta[sa.end_index] - tb[sb.end_index]) <= 10.0


def test_operator_b_is_slower_on_average():
    la = [len(generate_block_transfer(SimParams(seed=s, operator="A"))) for s in range(6)]
    lb = [len(generate_block_transfer(SimParams(seed=s, operator="B"))) for s in range(6)]
    assert np.mean(lb) > np.mean(la)


@pytest.mark.parametrize("bad", [
    {"sample_rate_hz": 0.0},
    {"grasper_open": 0.2},
    {"durations_ms": {12: 300.0, 2: 0.0, 5: 1.0, 6: 1.0, 11: 1.0}},
    {"operator": "Z"},
    {"noise": {"position": -1.0}},
])
def test_invalid_params_raise(bad):
    with pytest.raises(ConfigurationError):
        generate_block_transfer(replace(SimParams(), **bad))


def test_add_noise_zero_is_identity(demo):
    out = add_noise(demo, {k: 0.0 for k in NOISE_FAMILIES}, seed=1)
    assert out.data.tobytes() == demo.data.tobytes()
    assert out.segments == demo.segments


def test_add_noise_variance():
    base = make_traj(50_000)
    out = add_noise(base, {"grasper": 0.3}, seed=4)
    added = out.data[:, [GRASPER, R_GRASPER]].ravel()
    assert len(added) == 100_000
    assert abs(added.var() / 0.09 - 1) < 0.05
    # other families untouched
    assert np.all(out.data[:, :GRASPER] == 0)


def test_add_noise_seeded(demo):
    s = {"position": 10.0, "angular_velocity": 0.1}
    a, b = add_noise(demo, s, 9), add_noise(demo, s, 9)
    assert a.data.tobytes() == b.data.tobytes()
    with pytest.raises(ConfigurationError):
        add_noise(demo, {"colour": 1.0}, 9)


def test_write_demo_round_trips(tmp_path, demo):
    p = write_demo(demo, SimParams(seed=7), tmp_path)
    back = load_trajectory(p)
    assert back.data.tobytes() == demo.data.tobytes()
    assert (tmp_path / f"{demo.name}.sim.json").exists()
    assert SimParams.from_dict(SimParams(seed=7).to_dict()) == SimParams(seed=7)
