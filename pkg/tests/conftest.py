import numpy as np
import pytest

from pd14bench.config import parse_model_config

NEURON = """
[neuron_params.default]
C_m_pF = 250
tau_m_ms = 10
tau_syn_ms = 0.5
E_L_mV = -65
V_reset_mV = -65
V_th_mV = -50
t_ref_ms = 2
"""


def toy_config(sizes, pairs, *, dc=400.0, drive="dc", t_model=100.0, warmup=0.0,
               ic=(-58.0, 10.0), extra_plan="", neuron=NEURON):
    """INI text for a small network.

    ``pairs`` maps (src, tgt) to a dict of connectivity keys; ``dc`` is the
    per-population drive in pA, realised as a 8 Hz Poisson-equivalent with
    external weight 100 pA so the drive stays self-consistent.
    """
    lines = ["[populations]"] + [f"{n} = {s}" for n, s in sizes.items()]
    lines.append(neuron)
    for (s, t), kv in pairs.items():
        lines.append(f"[connectivity.{s}.{t}]")
        kv = {"weight_sd_pA": 0, "delay_sd_ms": 0, **kv}
        lines += [f"{k} = {v}" for k, v in kv.items()]
    k_ext = dc / (8 * 100 * 0.5e-3)
    lines += ["[drive]", f"mode = {drive}", "base_rate_Hz = 8", "external_weight_pA = 100"]
    for n in sizes:
        lines += [f"[drive.{n}]", f"external_in_degree = {k_ext!r}"]
    lines += ["[plan]", f"t_model_ms = {t_model}", f"warmup_ms = {warmup}",
              "initial_condition_mode = original", extra_plan,
              "[initial_conditions.original]", f"V_mean_mV = {ic[0]}", f"V_sd_mV = {ic[1]}"]
    return "\n".join(lines) + "\n"


def toy_spec(*args, **kw):
    return parse_model_config(toy_config(*args, **kw))


@pytest.fixture
def small_net():
    """Two populations with recurrent E and I connections and sustained activity."""
    return toy_spec(
        {"E": 40, "I": 10},
        {
            ("E", "E"): {"synapse_count": 400, "weight_mean_pA": 20, "weight_sd_pA": 2,
                         "delay_mean_ms": 1.5, "delay_sd_ms": 0.5},
            ("E", "I"): {"synapse_count": 100, "weight_mean_pA": 20, "weight_sd_pA": 2,
                         "delay_mean_ms": 1.5, "delay_sd_ms": 0.5},
            ("I", "E"): {"synapse_count": 200, "weight_mean_pA": -80, "weight_sd_pA": 8,
                         "delay_mean_ms": 0.8, "delay_sd_ms": 0.3},
        },
        t_model=500.0, warmup=100.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
