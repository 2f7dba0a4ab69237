import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdehnn import autodiff as ad
from sdehnn.autodiff import Tape, Tensor, backward
from sdehnn.errors import ConfigError, DimensionError, NumericError
from sdehnn.layers import DenseLayer
from sdehnn.sde import (BrownianSource, SdeConfig, euler_step, euler_step_bernoulli, solve,
                        write_trajectories_csv)

from oracles import central_difference, relative_error


def const(value):
    return lambda z: Tensor(np.full(z.shape, value))


def test_config_steps():
    assert SdeConfig(3.0, 0.5).steps == 6
    assert SdeConfig(3.0, 1.0).steps == 3
    assert SdeConfig(0.0, 0.5).steps == 0
    assert SdeConfig.from_steps(4, 0.25).terminal_time == 1.0


@pytest.mark.parametrize("kw", [dict(step_size=0.0), dict(terminal_time=-1.0), dict(mode="heun"),
                                dict(mask_probability=1.0), dict(terminal_time=1.0, step_size=0.3)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        SdeConfig(**kw)


def test_increment_deterministic():
    src = BrownianSource(5)
    a = src.increment(3, 2, 4, 0.5, batch=2)
    b = BrownianSource(5).increment(3, 2, 4, 0.5, batch=2)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, src.increment(3, 1, 4, 0.5, batch=2).data)


def test_streams_are_disjoint():
    a = BrownianSource(5, stream=0).increment(0, 0, 8, 1.0)
    b = BrownianSource(5, stream=1).increment(0, 0, 8, 1.0)
    assert not np.array_equal(a.data, b.data)


def test_increment_rejects_zero_dt():
    with pytest.raises(ConfigError):
        BrownianSource(0).increment(0, 0, 1, 0.0)


def test_increment_moments():
    # 10^6 draws at dt = 0.5 split over 1000 (sample, step) keys
    src = BrownianSource(11)
    draws = np.concatenate([src.increment(s, 0, 1, 0.5, batch=1000).data.ravel() for s in range(1000)])
    assert abs(draws.mean()) < 0.003
    assert abs(draws.var() - 0.5) < 0.01


def test_euler_identity_and_constant_drift():
    z = Tensor(np.array([[1.0], [-2.0]]))
    zero = Tensor(np.zeros((2, 1)))
    assert np.array_equal(euler_step(z, zero, zero, 0.5, zero).data, z.data)
    out, _ = solve(z, const(0.7), const(0.0), SdeConfig(3.0, 0.5), BrownianSource(0))
    assert np.allclose(out.data, z.data + 0.7 * 3.0, atol=1e-14)


def test_euler_shape_mismatch():
    z = Tensor(np.zeros((2, 1)))
    with pytest.raises(DimensionError):
        euler_step(z, Tensor(np.zeros((3, 1))), z, 0.5, z)


def test_linear_decay_closed_form():
    out, _ = solve(Tensor([[1.0]]), lambda z: -z, const(0.0), SdeConfig(3.0, 0.5), BrownianSource(0))
    assert out.item() == 0.015625


def test_single_step_equals_euler_step():
    src = BrownianSource(2)
    z = Tensor(np.array([[0.3], [0.1]]))
    cfg = SdeConfig.from_steps(1, 0.5)
    out, _ = solve(z, lambda v: v * 0.5, const(0.2), cfg, src, sample=4)
    manual = euler_step(z, z * 0.5, Tensor(np.full((2, 1), 0.2)), 0.5, src.increment(4, 0, 2, 0.5))
    assert np.array_equal(out.data, manual.data)


def test_trajectory_recorded():
    z0 = Tensor(np.array([[1.0], [2.0]]))
    cfg = SdeConfig(3.0, 0.5, record_trajectory=True)
    z_t, traj = solve(z0, const(0.1), const(0.3), cfg, BrownianSource(0))
    assert len(traj) == 7
    assert np.array_equal(traj[0], z0.data) and np.array_equal(traj[-1], z_t.data)


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_reports_step():
    calls = []

    def drift(z):
        calls.append(1)
        return z * 1e200 if len(calls) == 2 else z

    with pytest.raises(NumericError, match="step 1"):
        solve(Tensor([[1e200]]), drift, const(0.0), SdeConfig(3.0, 0.5), BrownianSource(0))


def _paths(mode, p, n=100_000, c=0.7):
    cfg = SdeConfig(3.0, 0.5, mode=mode, mask_probability=p)
    z, _ = solve(Tensor(np.zeros((1, n))), const(0.0), const(c), cfg, BrownianSource(3))
    return z.data.ravel()


@pytest.mark.parametrize("mode,p,expected", [("standard", 0.0, 0.49 * 3), ("bernoulli", 0.5, 2 * 0.49 * 3)])
def test_terminal_variance(mode, p, expected):
    z = _paths(mode, p)
    centred = z - z.mean()
    se = np.sqrt((np.mean(centred ** 4) - np.mean(centred ** 2) ** 2) / z.size)
    assert abs(z.var() - expected) < 3 * se


def test_bernoulli_p0_is_standard_bitwise(rng):
    layer_f = DenseLayer(4, 4, "tanh", rng=rng)
    layer_g = DenseLayer(4, 4, "softplus", rng=rng)
    z0 = Tensor(rng.standard_normal((4, 3)))
    a, _ = solve(z0, layer_f, layer_g, SdeConfig(3.0, 0.5), BrownianSource(9), sample=2)
    b, _ = solve(z0, layer_f, layer_g, SdeConfig(3.0, 0.5, mode="bernoulli"), BrownianSource(9), sample=2)
    assert np.array_equal(a.data, b.data)


def test_bernoulli_step_masks_only_diffusion(rng):
    z = Tensor(rng.standard_normal((3, 2)))
    f, g = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((3, 2)))
    inc = Tensor(rng.standard_normal((3, 2)))
    mask = BrownianSource(0).mask(0, 0, (3, 2), 0.5)
    out = euler_step_bernoulli(z, f, g, 0.5, inc, mask)
    assert np.allclose(out.data, z.data + 0.5 * f.data + mask.mask * g.data * inc.data)


def test_gradients_reach_drift_and_diffusion(rng):
    f = DenseLayer(3, 3, "tanh", rng=rng)
    g = DenseLayer(3, 3, "tanh", rng=rng)
    z0 = Tensor(rng.standard_normal((3, 2)))
    src = BrownianSource(4)
    cfg = SdeConfig(1.5, 0.5)

    def build():
        z, _ = solve(z0, f, g, cfg, src)
        return ad.square(z).sum()

    with Tape() as tape:
        loss = build()
    grads = backward(tape, loss)
    for p in (f.weight, f.bias, g.weight, g.bias):
        assert np.any(grads[p] != 0)
        numeric = central_difference(lambda: build().item(), p.data)
        assert relative_error(grads[p], numeric) < 1e-5


def test_trajectory_csv(tmp_path):
    cfg = SdeConfig(1.0, 0.5, record_trajectory=True)
    trajs = [solve(Tensor(np.zeros((2, 1))), const(0.0), const(1.0), cfg, BrownianSource(0), sample=s)[1]
             for s in range(3)]
    path = tmp_path / "t.csv"
    write_trajectories_csv(path, trajs)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["trajectory", "step", "component_0", "component_1"]
    assert len(rows) == 1 + 3 * 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 50), st.integers(0, 10))
def test_draw_independent_of_evaluation_order(seed, sample, step):
    src = BrownianSource(seed)
    first = src.increment(sample, step, 3, 1.0).data
    src.increment(sample + 1, step, 3, 1.0)
    again = src.increment(sample, step, 3, 1.0).data
    assert np.array_equal(first, again)
