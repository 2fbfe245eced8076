import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from pd14bench.config import NeuronParams, parse_model_config
from pd14bench.connectome import build_connectome
from pd14bench.engine import (
    NumericAbort,
    Simulator,
    SpikeData,
    SpikeFormatError,
    apply_external_drive,
    compute_propagator,
    poisson_counts,
    psp_closed_form,
    read_spikes,
    run,
    write_spikes,
)

from conftest import toy_config, toy_spec

PARAMS = NeuronParams(250.0, 10.0, 0.5, -65.0, -65.0, -50.0, 2.0)


def lif_generator(p: NeuronParams) -> np.ndarray:
    # state (V - E_L, I_exc, I_inh, I_dc); the dc component is constant
    a = np.zeros((4, 4))
    a[0, 0] = -1 / p.membrane_time_constant
    a[0, 1] = a[0, 2] = a[0, 3] = 1 / p.membrane_capacitance
    a[1, 1] = a[2, 2] = -1 / p.synaptic_time_constant
    return a


@pytest.mark.parametrize("tau_s", [0.5, 2.0, 10.0])
def test_propagator_matches_matrix_exponential(tau_s):
    p = dataclasses.replace(PARAMS, synaptic_time_constant=tau_s)
    prop = compute_propagator(p, 0.1)
    ref = expm(lif_generator(p) * 0.1)
    assert np.allclose(prop.matrix, ref[:3, :3], rtol=1e-12, atol=1e-15)
    assert prop.p20 == pytest.approx(ref[0, 3], rel=1e-12)


def test_propagator_near_identity_for_tiny_step():
    prop = compute_propagator(PARAMS, 1e-6)
    assert np.max(np.abs(prop.matrix - np.eye(3))) < 1e-4
    assert prop.spectral_radius < 1.0


def test_propagator_rejects_bad_constants():
    with pytest.raises(ValueError):
        compute_propagator(dataclasses.replace(PARAMS, membrane_time_constant=0.0), 0.1)


def single_neuron(dc=0.0, ic=-65.0, tau_syn=0.5, t_model=100.0):
    doc = toy_config({"A": 1}, {}, dc=dc, ic=(ic, 0.0), t_model=t_model)
    return parse_model_config(doc.replace("tau_syn_ms = 0.5", f"tau_syn_ms = {tau_syn}"))


def test_one_step_decay_from_offset():
    sim = Simulator(single_neuron(ic=-60.0), 1, record=False)
    sim.advance(1)
    assert sim.v_rel[0] == pytest.approx(5.0 * np.exp(-0.1 / 10), rel=1e-14)


@pytest.mark.parametrize("tau_s", [0.5, 2.0, 10.0])
def test_single_spike_psp_exact(tau_s):
    # tau_s == tau_m exercises the degenerate propagator branch
    spec = single_neuron(tau_syn=tau_s)
    params = spec.params_of("A")
    sim = Simulator(spec, 1, record=False)
    sim.inject(0, 0, 87.8)
    trace = []
    for _ in range(400):
        sim.advance(1)
        trace.append(sim.v_rel[0])
    t = 0.1 * np.arange(1, 401)
    ref = psp_closed_form(t, 87.8, params)
    assert np.max(np.abs(np.array(trace) - ref) / np.abs(ref)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 300), st.floats(-200, 200)), min_size=1, max_size=8))
def test_spike_train_superposition_exact(train):
    # subthreshold spike trains: grid trajectories are sums of closed-form PSPs
    spec = single_neuron()
    params = spec.params_of("A")
    sim = Simulator(spec, 1, record=False)
    sim.refractory[:] = 0
    horizon = 400
    pending = sorted(train)
    trace = []
    for k in range(horizon):
        for s, w in pending:
            if s == k:
                sim.inject(0, k, w)
        sim.advance(1)
        trace.append(sim.v_rel[0])
    t = 0.1 * np.arange(1, horizon + 1)
    ref = np.zeros(horizon)
    for s, w in pending:
        ref += np.where(t > 0.1 * s, psp_closed_form(np.maximum(t - 0.1 * s, 0), w, params), 0.0)
    if np.max(ref) >= 15.0:
        return  # would cross threshold; superposition no longer applies
    # mixed signs can cancel, so the error is taken relative to the largest excursion
    assert np.max(np.abs(np.array(trace) - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_refractory_clamp_exactly_twenty_steps():
    spec = single_neuron(dc=1000.0)
    sim = Simulator(spec, 1, record=True)
    sim.set_potential(0, 100.0)
    sim.advance(1)
    assert sim.spike_data().total == 1
    vs = []
    for _ in range(21):
        sim.advance(1)
        vs.append(sim.v_m[0])
    assert vs[:20] == [-65.0] * 20
    assert vs[20] > -65.0


def test_minimum_isi_respects_refractory_period():
    spec = single_neuron(dc=3000.0, t_model=200.0)
    sim = Simulator(spec, 1, record=True)
    sim.advance(2000)
    steps = sim.spike_data().steps
    assert steps.size > 10
    assert np.diff(steps).min() >= 21


def test_delay_fifteen_steps():
    spec = toy_spec({"S": 1, "T": 1}, {("S", "T"): {"synapse_count": 1, "weight_mean_pA": 50,
                                                     "delay_mean_ms": 1.5}}, dc=0.0, ic=(-65.0, 0.0))
    sim = Simulator(spec, 1, record=True)
    sim.advance(99)
    sim.set_potential(0, 0.0)   # crosses threshold during step 99, stamped at step 100
    sim.advance(1)
    assert sim.spike_data().steps.tolist() == [100]
    pending = sim.ring_exc[:, 1]
    assert np.count_nonzero(pending) == 1
    assert pending[115 % sim.n_slots] == np.float32(50.0)
    sim.advance(15)                         # steps 100..114
    assert sim.i_exc[1] == 0.0
    sim.advance(1)                          # step 115 reads the slot
    assert sim.i_exc[1] == pytest.approx(50.0 * np.exp(-0.1 / 0.5))
    assert np.count_nonzero(sim.ring_exc[:, 1]) == 0


def test_dc_drive_is_constant():
    spec = toy_spec({"A": 7}, {}, dc=100.0)
    inc = apply_external_drive(spec, "A", np.arange(7), 42, seed=1)
    assert np.all(inc == pytest.approx(100.0, rel=1e-12))


def test_poisson_rate_zero():
    assert np.all(poisson_counts(3, np.arange(1000), 5, 0.0) == 0)


def test_poisson_event_count_moment():
    rate_hz = 8.0 * 2000
    lam = rate_hz * 0.1e-3
    ids = np.arange(1000)
    total = sum(int(poisson_counts(55, ids, k, lam).sum()) for k in range(1000))
    mean = lam * 1e6
    assert abs(total - mean) < 4 * np.sqrt(mean)


def test_poisson_drive_increments_scale_with_weight():
    spec = toy_spec({"A": 50}, {}, dc=400.0, drive="poisson")
    inc = apply_external_drive(spec, "A", np.arange(50), 7, seed=2)
    assert np.allclose(inc / 100.0, np.round(inc / 100.0))


def test_event_conservation(small_net):
    res = run(small_net, seed=4, record=True)
    c = build_connectome(small_net, 4)
    deg = c.out_degree
    assert res.spikes.total > 100
    assert res.counters["events_total"] == int(deg[res.spikes.senders].sum())
    assert res.counters["spikes_total"] == res.spikes.total
    warm = res.spikes.steps <= round(small_net.plan.t_warmup / 0.1)
    assert res.counters["spikes_warmup"] == int(warm.sum())


@pytest.mark.parametrize("mode", ["materialized", "procedural"])
def test_worker_count_independence(small_net, mode):
    spec = small_net.with_plan(connectivity_mode=mode)
    digests = {w: run(spec, seed=8, workers=w, record=True).spikes.digest() for w in (1, 2, 3, 8)}
    assert len(set(digests.values())) == 1


def test_modes_give_identical_dynamics(small_net):
    a = run(small_net, seed=5, record=True).spikes
    b = run(small_net.with_plan(connectivity_mode="procedural"), seed=5, record=True).spikes
    assert a.digest() == b.digest()


def test_poisson_mode_worker_independence(small_net):
    spec = small_net.with_drive_mode("poisson")
    a = run(spec, seed=2, workers=1, record=True).spikes
    b = run(spec, seed=2, workers=4, record=True).spikes
    assert a.total > 0 and a.digest() == b.digest()


def test_zero_duration_run():
    spec = toy_spec({"A": 5}, {}, t_model=0.0)
    res = run(spec, seed=1, record=True)
    assert res.spikes.total == 0
    assert res.timings.propagation < 0.05
    assert res.timings.construction >= 0.0


def test_numeric_abort_names_neuron():
    spec = toy_spec({"A": 3, "B": 4}, {})
    v0 = np.full(7, -65.0)
    v0[5] = np.nan
    sim = Simulator(spec, 1, initial_potentials=v0)
    with pytest.raises(NumericAbort) as exc:
        sim.advance(10)
    assert exc.value.neuron == 5 and exc.value.population == "B" and exc.value.step == 0


def test_recording_off_returns_no_spikes(small_net):
    res = run(small_net, seed=4, record=False)
    assert res.spikes is None
    assert res.counters["spikes_total"] > 0


def test_ring_buffer_growth_keeps_all_spikes(small_net):
    # recording buffers start small; a long run forces several regrowths
    res = run(small_net.with_plan(t_model=3000.0), seed=4, record=True)
    assert res.spikes.total == res.counters["spikes_total"]


# -- spike files -----------------------------------------------------------


@pytest.fixture
def spikes():
    return SpikeData(np.array([3, 3, 7, 12]), np.array([0, 4, 2, 1]), ("E", "I"), (4, 2),
                     0.1, 2.0, 0.5, seed=9, spec_digest="abc")


@pytest.mark.parametrize("binary", [False, True])
def test_spike_file_round_trip(tmp_path, spikes, binary):
    path = tmp_path / "s.dat"
    write_spikes(spikes, path, binary=binary)
    back = read_spikes(path)
    assert back.digest() == spikes.digest()
    assert back.names == ("E", "I") and back.sizes == (4, 2)
    assert back.seed == 9 and back.spec_digest == "abc"
    assert back.t_stop == pytest.approx(2.0) and back.warmup == pytest.approx(0.5)


def _text(tmp_path, spikes, body):
    path = tmp_path / "s.txt"
    write_spikes(spikes, path)
    head = [ln for ln in path.read_text().splitlines() if ln.startswith("#")]
    path.write_text("\n".join(head + body) + "\n")
    return path


@pytest.mark.parametrize("body, line_offset, what", [
    (["0.3\t0", "0.2\t1"], 2, "monotone"),
    (["0.3\t4", "0.3\t1"], 2, "sorted"),
    (["0.3\t0", "0.35\t1"], 2, "multiple"),
    (["0.3\t0", "0.4\t6"], 2, "outside"),
    (["0.3\t0", "0.4 1"], 2, "expected"),
])
def test_spike_file_errors(tmp_path, spikes, body, line_offset, what):
    path = _text(tmp_path, spikes, body)
    n_head = sum(1 for ln in path.read_text().splitlines() if ln.startswith("#"))
    with pytest.raises(SpikeFormatError, match=what) as exc:
        read_spikes(path)
    assert exc.value.line == n_head + line_offset


def test_spike_file_missing_header(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("0.1\t0\n")
    with pytest.raises(SpikeFormatError):
        read_spikes(path)


def test_shifted_moves_everything(spikes):
    s = spikes.shifted(1.0)
    assert np.array_equal(s.steps, spikes.steps + 10)
    assert s.t_start == pytest.approx(1.0) and s.warmup == pytest.approx(1.5)
