import json
import time

import numpy as np
import pytest

from pd14bench.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main, parse_duration
from pd14bench.engine import read_spikes
from pd14bench.perf import PowerTrace, integrate_energy, write_power_trace

from conftest import toy_config

NET = toy_config(
    {"E": 40, "I": 10},
    {
        ("E", "E"): {"synapse_count": 400, "weight_mean_pA": 20, "weight_sd_pA": 2,
                     "delay_mean_ms": 1.5, "delay_sd_ms": 0.5},
        ("E", "I"): {"synapse_count": 100, "weight_mean_pA": 20, "weight_sd_pA": 2,
                     "delay_mean_ms": 1.5, "delay_sd_ms": 0.5},
        ("I", "E"): {"synapse_count": 200, "weight_mean_pA": -80, "weight_sd_pA": 8,
                     "delay_mean_ms": 0.8, "delay_sd_ms": 0.3},
    },
    t_model=1000.0, warmup=100.0,
)


@pytest.fixture
def model(tmp_path):
    p = tmp_path / "net.ini"
    p.write_text(NET)
    return p


@pytest.mark.parametrize("text, ms", [("10s", 10000.0), ("500ms", 500.0), ("15min", 900000.0),
                                      ("250", 250.0), ("0", 0.0), ("1h", 3600000.0)])
def test_parse_duration(text, ms):
    assert parse_duration(text) == ms


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_run_writes_manifest_and_spikes(model, tmp_path):
    out = tmp_path / "r"
    assert run_cli("run", "--model", model, "--seed", 3, "--out", out) == EXIT_OK
    doc = json.loads((out / "run.json").read_text())
    assert doc["manifest"]["inputs"]["seed"] == 3
    spikes = read_spikes(out / "spikes.txt")
    assert spikes.seed == 3 and spikes.total == doc["result"]["counters"]["spikes_total"]
    assert spikes.meta["manifest_digest"] == doc["spike_file_manifest_digest"]


def test_run_is_deterministic(model, tmp_path):
    for name in ("a", "b"):
        assert run_cli("run", "--model", model, "--seed", 4, "--out", tmp_path / name) == EXIT_OK
    a = read_spikes(tmp_path / "a" / "spikes.txt")
    b = read_spikes(tmp_path / "b" / "spikes.txt")
    assert a.total > 0 and a.digest() == b.digest()


def test_run_no_record_notes_recipe(model, tmp_path):
    out = tmp_path / "r"
    assert run_cli("run", "--model", model, "--t-model", "10s", "--no-record", "--out", out) == EXIT_OK
    doc = json.loads((out / "run.json").read_text())
    assert doc["manifest"]["inputs"]["record_spikes"] is False
    assert any("recording disabled" in n for n in doc["manifest"]["notes"])
    assert not (out / "spikes.txt").exists()


def test_run_zero_duration(model, tmp_path):
    out = tmp_path / "r"
    assert run_cli("run", "--model", model, "--t-model", "0", "--out", out) == EXIT_OK
    assert read_spikes(out / "spikes.txt").total == 0
    doc = json.loads((out / "run.json").read_text())
    assert doc["manifest"]["inputs"]["t_model_ms"] == 0.0


def test_binary_spike_output(model, tmp_path):
    out = tmp_path / "r"
    assert run_cli("run", "--model", model, "--binary", "--out", out) == EXIT_OK
    assert read_spikes(out / "spikes.bin").total > 0


def test_bench_refuses_short_runs(model, tmp_path, capsys):
    assert run_cli("bench", "--model", model, "--t-model", "5s", "--out", tmp_path) == EXIT_INPUT
    assert "10 s" in capsys.readouterr().err


def test_bench_seeds_without_trace(model, tmp_path):
    out = tmp_path / "b"
    assert run_cli("bench", "--model", model, "--t-model", "10s", "--seeds", 3, "--out", out) == EXIT_OK
    doc = json.loads((out / "bench.json").read_text())
    assert len(doc["per_seed"]) == 3
    assert all("q_rtf" in e and "e_syn_measured_uJ" not in e for e in doc["per_seed"])
    assert "q_rtf" in doc["summary"] and "e_syn_measured_uJ" not in doc["summary"]
    assert doc["manifest"]["inputs"]["record_spikes"] is False


def test_bench_event_counts_reproducible(model, tmp_path):
    counts = []
    for name in ("a", "b"):
        assert run_cli("bench", "--model", model, "--t-model", "10s", "--seeds", 2,
                       "--out", tmp_path / name) == EXIT_OK
        doc = json.loads((tmp_path / name / "bench.json").read_text())
        counts.append([e["events_measured"] for e in doc["per_seed"]])
    assert counts[0] == counts[1]


def test_bench_constant_power_energy(model, tmp_path):
    now = time.time()
    trace = PowerTrace(np.arange(now - 60, now + 1800, 0.5), np.full(3720, 100.0), "synthetic")
    write_power_trace(trace, tmp_path / "p.tsv", note="2 Hz")
    out = tmp_path / "b"
    assert run_cli("bench", "--model", model, "--t-model", "10s", "--seeds", 1,
                   "--power-trace", tmp_path / "p.tsv", "--out", out) == EXIT_OK
    e = json.loads((out / "bench.json").read_text())["per_seed"][0]
    b = e["timings"]["boundaries_unix_s"]
    assert e["energy_propagation_J"] == pytest.approx(integrate_energy(trace, b[2], b[3]), rel=1e-9)
    assert e["energy_propagation_J"] == pytest.approx(100.0 * e["t_wall_s"], rel=1e-6)
    assert e["e_syn_measured_uJ"] == pytest.approx(1e6 * 100.0 * e["t_wall_s"] / e["events_measured"],
                                                   rel=1e-6)


def test_bench_trace_not_covering_run(model, tmp_path):
    trace = PowerTrace(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    write_power_trace(trace, tmp_path / "p.tsv")
    assert run_cli("bench", "--model", model, "--t-model", "10s", "--seeds", 1,
                   "--power-trace", tmp_path / "p.tsv", "--out", tmp_path / "b") == EXIT_INPUT


@pytest.fixture
def spike_file(model, tmp_path):
    out = tmp_path / "r"
    assert run_cli("run", "--model", model, "--seed", 5, "--out", out) == EXIT_OK
    return out / "spikes.txt"


def test_verify_self(spike_file, tmp_path, capsys):
    out = tmp_path / "v"
    assert run_cli("verify", spike_file, spike_file, "--out", out) == EXIT_OK
    doc = json.loads((out / "verify.json").read_text())
    assert doc["passed"]
    assert all(v["value"] in (0.0, None) for v in doc["verdicts"])
    assert any("15 min" in w for w in doc["warnings"])
    assert "15 min" in capsys.readouterr().err
    assert list((out / "overlays").glob("*.tsv"))


def test_verify_with_baseline(model, spike_file, tmp_path):
    files = []
    for seed in (6, 7, 8):
        out = tmp_path / f"s{seed}"
        assert run_cli("run", "--model", model, "--seed", seed, "--out", out) == EXIT_OK
        files.append(out / "spikes.txt")
    code = run_cli("verify", files[0], spike_file, "--baseline", files[1], files[2],
                   "--out", tmp_path / "v")
    doc = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert code == (EXIT_OK if doc["passed"] else EXIT_FAIL)
    assert all(v["threshold"] is not None or v["value"] is None for v in doc["verdicts"])


def test_verify_fails_on_difference(model, spike_file, tmp_path):
    out = tmp_path / "other"
    assert run_cli("run", "--model", model, "--seed", 9, "--out", out) == EXIT_OK
    assert run_cli("verify", out / "spikes.txt", spike_file, "--out", tmp_path / "v") == EXIT_FAIL


def test_verify_corrupted_file(spike_file, tmp_path, capsys):
    lines = spike_file.read_text().splitlines()
    body = [i for i, ln in enumerate(lines) if not ln.startswith("#")]
    i, j = body[3], body[10]
    lines[i], lines[j] = lines[j], lines[i]
    bad = tmp_path / "bad.txt"
    bad.write_text("\n".join(lines) + "\n")
    assert run_cli("verify", bad, spike_file, "--out", tmp_path / "v") == EXIT_INPUT
    # the later spike now sits on line i + 1; the next line goes back in time
    assert f"line {i + 2}: spike times not monotone" in capsys.readouterr().err


def test_verify_rejects_tampered_header(spike_file, tmp_path, capsys):
    text = spike_file.read_text().replace("# seed: 5", "# seed: 6")
    bad = tmp_path / "tampered.txt"
    bad.write_text(text)
    assert run_cli("verify", bad, spike_file, "--out", tmp_path / "v") == EXIT_INPUT
    assert "manifest digest" in capsys.readouterr().err


def test_verify_strict_duration(spike_file, tmp_path):
    assert run_cli("verify", spike_file, spike_file, "--strict-duration",
                   "--out", tmp_path / "v") == EXIT_INPUT


def test_bad_model_is_input_error(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text(NET.replace("V_th_mV = -50", "V_th_mV = -70"))
    assert run_cli("run", "--model", p, "--out", tmp_path / "r") == EXIT_INPUT
    assert run_cli("run", "--model", tmp_path / "missing.ini", "--out", tmp_path / "r") == EXIT_INPUT
    assert run_cli("frobnicate") == EXIT_INPUT


def test_ledger_commands(tmp_path, capsys):
    assert run_cli("ledger", "list") == EXIT_OK
    assert "Kau+23" in capsys.readouterr().out
    led = tmp_path / "mine.ledger"
    assert run_cli("ledger", "add", "--ledger", led, "--code", "Mine+26", "--q-rtf", 13,
                   "--e-syn", 2.0, "--simulator", "pd14bench", "--nodes", 1, "--system", "1 core",
                   "--process-node", 7, "--drive", "DC", "--year", 2026, "--arch", "CPU") == EXIT_OK
    assert run_cli("ledger", "plot", "--ledger", led, "--out", tmp_path / "fig") == EXIT_OK
    assert "15/14/15" in capsys.readouterr().out
    assert (tmp_path / "fig" / "performance.svg").exists()
    # duplicate study code
    assert run_cli("ledger", "add", "--ledger", led, "--code", "Mine+26", "--q-rtf", 13,
                   "--simulator", "pd14bench", "--nodes", 1, "--system", "1 core",
                   "--process-node", 7, "--drive", "DC", "--year", 2026) == EXIT_INPUT
