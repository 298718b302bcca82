import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from spikeformer.autodiff import Parameter, Tensor, grad_check, ops, surrogate_spike
from spikeformer.neurons import (NeuronConfig, NeuronMode, NeuronState, SpikingNeuron, effective_tau,
                                 initial_state, neuron_sequence, neuron_sequence_unrolled, neuron_step,
                                 tau_param_for)

MODES = list(NeuronMode)


def step_scalar(v, x, cfg=NeuronConfig(mode=NeuronMode.LIF)):
    out, state = neuron_step(NeuronState(Tensor(np.array([v]))), Tensor(np.array([x])), cfg)
    return out.data[0], state.V.data[0]


def test_step_at_threshold_does_not_spike():
    # H = 0 + (2 - 0) / 2 = 1 and spike(1 - 1) = 0
    out, v = step_scalar(0.0, 2.0)
    assert out == 0.0 and v == 1.0


def test_step_above_threshold_spikes_and_resets():
    out, v = step_scalar(0.0, 3.0)
    assert out == 1.0 and v == 0.0


@pytest.mark.parametrize("mode", MODES)
def test_rest_state_is_fixed_point(mode):
    cfg = NeuronConfig(mode=mode)
    out = neuron_sequence(Tensor(np.zeros((6, 3))), cfg)
    np.testing.assert_array_equal(out.data, 0.0)
    o, state = neuron_step(initial_state((3,), cfg), Tensor(np.zeros(3)), cfg)
    np.testing.assert_array_equal(state.V.data, 0.0)


def test_subthreshold_drive_converges_without_spiking():
    cfg = NeuronConfig(mode=NeuronMode.LIF)
    x = Tensor(np.full((12, 1), 0.5))
    assert neuron_sequence(x, cfg).data.sum() == 0
    # V_t = 0.5 (1 - 2^-t) from the scalar recursion V <- V + (0.5 - V) / 2
    v, trace = 0.0, []
    state = initial_state((1,), cfg)
    for t in range(12):
        _, state = neuron_step(state, Tensor(np.array([0.5])), cfg)
        trace.append(state.V.data[0])
    np.testing.assert_allclose(trace, [0.5 * (1 - 2.0 ** -(t + 1)) for t in range(12)], rtol=0, atol=1e-15)
    assert all(b > a for a, b in zip(trace, trace[1:]))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-3, 5)), st.sampled_from(MODES))
def test_output_ranges(x, mode):
    out = neuron_sequence(Tensor(x), NeuronConfig(mode=mode)).data
    if mode.analog:
        assert (out >= 0).all()
    else:
        assert set(np.unique(out)) <= {0.0, 1.0}


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (6, 5), elements=st.floats(-3, 5)), st.floats(-2.0, 0.5))
def test_potential_after_spike_is_reset_exactly(x, v_reset):
    cfg = NeuronConfig(mode=NeuronMode.LIF, v_reset=v_reset)
    state = initial_state((5,), cfg)
    for t in range(6):
        h_expected = state.V.data + (x[t] - (state.V.data - v_reset)) / cfg.tau
        out, state = neuron_step(state, Tensor(x[t]), cfg)
        fired = out.data == 1.0
        assert (state.V.data[fired] == v_reset).all()
        np.testing.assert_allclose(state.V.data[~fired], h_expected[~fired], atol=1e-12)


def test_effective_tau_examples():
    assert effective_tau(NeuronConfig(mode=NeuronMode.LIF, tau=2.0)) == 2.0
    assert effective_tau(NeuronConfig(), math.log(math.e - 1)) == pytest.approx(2.0, abs=1e-15)
    taus = [effective_tau(NeuronConfig(), p) for p in (0.0, -5.0, -10.0, -20.0)]
    assert all(b < a for a, b in zip(taus, taus[1:]))
    assert 1.0 < taus[-1] < 1.0 + 1e-8
    assert tau_param_for(2.0) == pytest.approx(math.log(math.e - 1), abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        NeuronConfig(tau=1.0)
    with pytest.raises(ValueError):
        NeuronConfig(v_th=0.0, v_reset=0.0)


def test_errors():
    with pytest.raises(ValueError, match="at least one"):
        neuron_sequence(Tensor(np.zeros((0, 3))), NeuronConfig())
    with pytest.raises(ValueError, match="does not match"):
        neuron_step(initial_state((3,), NeuronConfig()), Tensor(np.zeros(4)), NeuronConfig())


def _surgery_unroll(x: Tensor, cfg: NeuronConfig, tau_param):
    """The step equations with the reset spike replaced by a plain constant copy."""
    inv_tau = 1.0 / (ops.softplus(tau_param) + 1.0)
    v = Tensor(np.full(x.shape[1:], cfg.v_reset))
    outs = []
    for t in range(x.shape[0]):
        h = v + (x[t] - (v - cfg.v_reset)) * inv_tau
        s = surrogate_spike(h - cfg.v_th)
        const = Tensor(s.data.copy())
        v = h * (1.0 - const) + const * cfg.v_reset
        outs.append(ops.relu(h) if cfg.mode.analog else s)
    return ops.stack(outs)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([NeuronMode.PLIF, NeuronMode.PLIAF]))
def test_reset_path_carries_no_gradient(seed, mode):
    rng = np.random.default_rng(seed)
    xv = rng.normal(1.0, 1.0, size=(5, 4))
    w = Tensor(rng.normal(size=(5, 4)))
    cfg = NeuronConfig(mode=mode)
    grads = []
    for fn in (lambda x, p: neuron_sequence_unrolled(x, cfg, p),
               lambda x, p: neuron_sequence(x, cfg, p),
               lambda x, p: _surgery_unroll(x, cfg, p)):
        x, p = Parameter(xv.copy()), Parameter(np.array([tau_param_for(2.0)]))
        (fn(x, p) * w).sum().backward()
        grads.append((x.grad, p.grad))
    for gx, gp in grads[1:]:
        np.testing.assert_allclose(gx, grads[0][0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(gp, grads[0][1], rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(MODES), st.integers(0, 2))
def test_fused_sequence_matches_step_unroll(seed, mode, axis):
    rng = np.random.default_rng(seed)
    shape = [3, 4, 2]
    shape.insert(axis, 5)
    xv = rng.normal(0.8, 1.2, size=shape)
    w = Tensor(rng.normal(size=shape))
    cfg = NeuronConfig(mode=mode, tau=rng.uniform(1.1, 4.0))
    pv = rng.normal(size=1)
    results = []
    for fn in (neuron_sequence, neuron_sequence_unrolled):
        x, p = Parameter(xv.copy()), Parameter(pv.copy())
        y = fn(x, cfg, p if mode.learnable_tau else None, time_axis=axis)
        (y * w).sum().backward()
        results.append((y.data, x.grad, p.grad))
    (ya, gxa, gpa), (yb, gxb, gpb) = results
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_allclose(gxa, gxb, rtol=0, atol=1e-12)
    if mode.learnable_tau:
        np.testing.assert_allclose(gpa, gpb, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_three_step_unroll_gradcheck(mode):
    rng = np.random.default_rng(3)
    cfg = NeuronConfig(mode=mode)
    x, p = Parameter(rng.normal(0.9, 0.8, size=(3, 6))), Parameter(np.array([tau_param_for(2.0)]))
    w = Tensor(rng.normal(size=(3, 6)))
    params = [x, p] if mode.learnable_tau else [x]
    err = grad_check(lambda *_: (neuron_sequence(x, cfg, p if mode.learnable_tau else None) * w).sum(), params)
    assert err < 1e-4


def test_tau_parameter_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    cfg = NeuronConfig()
    x, p = Tensor(rng.normal(0.9, 0.8, size=(3, 6))), Parameter(np.array([0.3]))
    w = Tensor(rng.normal(size=(3, 6)))
    assert grad_check(lambda p: (neuron_sequence(x, cfg, p) * w).sum(), p) < 1e-4


def test_layer_hooks_and_learnable_tau():
    layer = SpikingNeuron(NeuronConfig(), dtype=np.float64)
    seen = []
    layer.hooks.append(lambda out: seen.append(out.shape))
    layer(Tensor(np.ones((2, 3, 4))), time_axis=1)
    assert seen == [(2, 3, 4)]
    assert layer.tau == pytest.approx(2.0)
    assert [n for n, _ in layer.named_parameters()] == ["tau_param"]
    assert SpikingNeuron(NeuronConfig(mode=NeuronMode.LIF)).parameters() == []


def _non_leaky_if(x: np.ndarray, v_th: float) -> np.ndarray:
    """H = V + X with hard reset to 0: the dynamics that would let a plain residual pass spikes."""
    v = np.zeros(x.shape[1:])
    out = np.zeros_like(x)
    for t in range(len(x)):
        h = v + x[t]
        s = (h - v_th > 0).astype(x.dtype)
        v = h * (1 - s)
        out[t] = s
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_only_non_leaky_dynamics_pass_spike_trains_unchanged(seed):
    rng = np.random.default_rng(seed)
    spikes = (rng.random((8, 10)) < 0.4).astype(np.float64)
    np.testing.assert_array_equal(_non_leaky_if(spikes, v_th=0.5), spikes)
    leaky = neuron_sequence(Tensor(spikes), NeuronConfig(mode=NeuronMode.LIF)).data
    # a lone input spike only lifts a leaky neuron to H = 1/tau < v_th
    assert leaky.sum() < spikes.sum() or spikes.sum() == 0
