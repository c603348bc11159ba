"""Smoke test for the dvxs Python module.

Build and install first:  pip install --no-build-isolation -e crates/py
Then run:                 python python/smoke_test.py   (or pytest python/)
"""

import math
import tempfile

import dvxs


def test_simulator_episode():
    sim = dvxs.Simulator("simple", seed=3)
    ranges = sim.reset()
    assert len(ranges) == dvxs.NUM_BEAMS == 360
    assert all(0.0 < r <= 5.0 for r in ranges)
    first = sim.explored_area
    assert first > 0.0
    total, done, steps = 0.0, False, 0
    while not done:
        ranges, reward, done, collided = sim.step(0.3, 0.2)
        total += reward
        steps += 1
    assert steps == sim.steps <= 500
    assert sim.explored_area >= first
    assert sim.explored_area <= sim.free_area + 1e-9
    x, y, heading = sim.pose
    assert 0.0 <= x <= 20.0 and 0.0 <= y <= 20.0
    assert math.isfinite(total)


def test_math_helpers():
    # lambda = 1 gives plain discounted sums bootstrapped from the last value.
    g = dvxs.lambda_returns([3.0, 2.0, 1.0], [0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0], gamma=1.0, lam=1.0)
    assert g == [6.0, 3.0, 1.0]
    kl = dvxs.kl_divergence([0.0], [2.0], [0.0], [1.0])
    assert abs(kl - (2.0 - 0.5 - math.log(2.0))) < 1e-6
    assert dvxs.kl_divergence([1.0, -1.0], [0.5, 0.5], [1.0, -1.0], [0.5, 0.5]) == 0.0
    try:
        dvxs.kl_divergence([0.0], [0.0], [0.0], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("zero std accepted")


def test_random_eval_and_tiny_training():
    a = dvxs.evaluate_random("simple", episodes=2, seed=1)
    assert a == dvxs.evaluate_random("simple", episodes=2, seed=1)
    assert a["episodes"] == 2 and a["eqs"] > 0.0
    assert "behavior.min_std" in dvxs.preset_config("desk")

    tiny = [
        ("train.batch_size", "2"),
        ("train.seq_len", "8"),
        ("model.d_z", "4"),
        ("model.d_h", "8"),
        ("model.hidden", "16"),
        ("model.enc_channels", "2,4,4"),
        ("behavior.hidden", "16"),
        ("behavior.horizon", "3"),
    ]
    with tempfile.TemporaryDirectory() as d:
        returns = dvxs.train(d, steps=600, seed=2, overrides=tiny)
        assert len(returns) >= 1
        r = dvxs.evaluate_checkpoint(d, episodes=1)
        assert r["environment"] == "simple"
        assert r == dvxs.evaluate_checkpoint(d, episodes=1)


if __name__ == "__main__":
    test_simulator_episode()
    test_math_helpers()
    test_random_eval_and_tiny_training()
    print("python smoke test ok")
