"""Time-driven propagation of the network on a fixed grid.

Step ``k`` advances every neuron from ``k*h`` to ``(k+1)*h``:

1. read ring-buffer slot ``k`` into the synaptic currents (plus Poisson drive
   events keyed per neuron and step),
2. propagate ``(V, I_exc, I_inh)`` exactly over ``h``; refractory neurons keep
   ``V`` clamped at reset while their currents keep decaying,
3. threshold test ``V >= V_th``: spike at time ``(k+1)*h``, reset, start the
   refractory count,
4. deliver each spike through delay ``d`` into slot ``k+1+d``.

Neurons are split into contiguous worker partitions.  With more than one
worker, deliveries are staged per worker and merged in worker order, which
reproduces the single-worker summation order exactly, so results do not
depend on the worker count.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .config import ModelSpec, NeuronParams
from .connectome import Connectome, _gen_source, build_connectome, init_membrane_potentials
from .perf import PhaseTimings
from .rng import Purpose, draw_uniform, poisson_from

POISSON = int(Purpose.POISSON_DRIVE)
CHUNK_STEPS = 5000


class EngineError(RuntimeError):
    """Runtime abort; ``phase`` names the phase reached."""

    def __init__(self, message: str, phase: str = "propagation"):
        self.phase = phase
        super().__init__(f"[{phase}] {message}")


class NumericAbort(EngineError):
    def __init__(self, population: str, neuron: int, step: int):
        self.population, self.neuron, self.step = population, neuron, step
        super().__init__(f"non-finite membrane potential in {population}, neuron {neuron}, step {step}")


@dataclass(frozen=True)
class Propagator:
    """Exact one-step update of ``(V - E_L, I_exc, I_inh)`` plus the DC input gain."""

    p11: float   # current decay
    p21: float   # current -> voltage
    p22: float   # voltage decay
    p20: float   # constant current -> voltage

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.p22, self.p21, self.p21],
                         [0.0, self.p11, 0.0],
                         [0.0, 0.0, self.p11]])

    @property
    def spectral_radius(self) -> float:
        return max(abs(self.p11), abs(self.p22))


def compute_propagator(params: NeuronParams, h: float) -> Propagator:
    tau_m = params.membrane_time_constant
    tau_s = params.synaptic_time_constant
    c = params.membrane_capacitance
    if not (tau_m > 0 and tau_s > 0 and c > 0):
        raise ValueError("time constants and capacitance must be positive")
    if not h > 0:
        raise ValueError("timestep must be positive")
    p22 = math.exp(-h / tau_m)
    p11 = math.exp(-h / tau_s)
    # tau_m tau_s / (C (tau_m - tau_s)) (e^{-h/tau_m} - e^{-h/tau_s}), in a
    # form that is stable near tau_m == tau_s and exact at the limit
    delta = 1.0 / tau_s - 1.0 / tau_m
    if delta == 0.0:
        p21 = h / c * p22
    else:
        p21 = p22 * -math.expm1(-h * delta) / (c * delta)
    p20 = -tau_m / c * math.expm1(-h / tau_m)
    return Propagator(p11, p21, p22, p20)


def psp_closed_form(t: np.ndarray, weight: float, params: NeuronParams) -> np.ndarray:
    """Membrane deviation from rest after one current jump of ``weight`` pA at t=0."""
    tau_m = params.membrane_time_constant
    tau_s = params.synaptic_time_constant
    c = params.membrane_capacitance
    t = np.asarray(t, dtype=float)
    if tau_m == tau_s:
        return weight * t / c * np.exp(-t / tau_m)
    return weight * tau_m * tau_s / (c * (tau_m - tau_s)) * (np.exp(-t / tau_m) - np.exp(-t / tau_s))


# ---------------------------------------------------------------------------
# kernel


@numba.njit(cache=True)
def _deliver(src, k1, lmod, ring_e, ring_i, edge_offsets, targets, weights, delays,
             procedural, seed, offsets, out_counts, w_mean, w_sd, d_mean, d_sd, autapses,
             multapses, h, collapsed, mark, t_buf, w_buf, d_buf):
    if procedural:
        n = _gen_source(src, seed, offsets, out_counts, w_mean, w_sd, d_mean, d_sd, autapses,
                        multapses, h, collapsed, mark, t_buf, w_buf, d_buf, 0)
        for j in range(n):
            s = k1 + d_buf[j]
            if s >= lmod:
                s -= lmod
            w = np.float64(w_buf[j])
            if w >= 0.0:
                ring_e[s, t_buf[j]] += w
            else:
                ring_i[s, t_buf[j]] += w
        return n
    a = edge_offsets[src]
    b = edge_offsets[src + 1]
    for j in range(a, b):
        s = k1 + np.int64(delays[j])
        if s >= lmod:
            s -= lmod
        w = np.float64(weights[j])
        if w >= 0.0:
            ring_e[s, targets[j]] += w
        else:
            ring_i[s, targets[j]] += w
    return b - a


@numba.njit(cache=True, parallel=True)
def _advance(step0, n_steps, warm_step, seed,
             v_rel, i_e, i_i, ref, ring_e, ring_i,
             offsets, part, p11, p21, p22, p20, v_th, v_reset, n_ref, i_dc, lam, w_ext,
             poisson_mode,
             edge_offsets, targets, weights, delays,
             procedural, out_counts, w_mean, w_sd, d_mean, d_sd, autapses, multapses, h, collapsed,
             record, rec_steps, rec_ids, counters, pop_counts, err, spikes, n_spk, marks):
    """Advance up to ``n_steps`` steps; returns the number completed.

    ``v_rel`` holds V - E_L; ``v_th`` and ``v_reset`` are relative to rest too.

    ``counters`` = [spikes before warm_step, spikes after, events before,
    events after, recorded].  Returns early when the record buffer might
    overflow or when a non-finite potential is met (``err`` is set).
    """
    n_neurons = offsets[-1]
    n_pop = offsets.size - 1
    n_work = part.size - 1
    lmod = ring_e.shape[0]
    max_nt = marks.shape[1]
    t_buf = np.empty(0, dtype=np.int64)
    w_buf = np.empty(0, dtype=np.float32)
    d_buf = np.empty(0, dtype=np.int64)
    if procedural:
        cap = 0
        for src in range(n_neurons):
            if edge_offsets[src + 1] - edge_offsets[src] > cap:
                cap = edge_offsets[src + 1] - edge_offsets[src]
        t_buf = np.empty(cap, dtype=np.int64)
        w_buf = np.empty(cap, dtype=np.float32)
        d_buf = np.empty(cap, dtype=np.int64)
    st_t = np.empty(0, dtype=np.int64)
    st_s = np.empty(0, dtype=np.int64)
    st_w = np.empty(0, dtype=np.float64)
    for k in range(step0, step0 + n_steps):
        if record and counters[4] + n_neurons > rec_steps.size:
            return k - step0
        slot = k % lmod
        after = 1 if k >= warm_step else 0
        # integrate and threshold, data-parallel over worker partitions
        for w in numba.prange(n_work):
            lo = part[w]
            hi = part[w + 1]
            cnt = 0
            for p in range(n_pop):
                a = max(lo, offsets[p])
                b = min(hi, offsets[p + 1])
                for i in range(a, b):
                    ie = i_e[i] + ring_e[slot, i]
                    ii = i_i[i] + ring_i[slot, i]
                    ring_e[slot, i] = 0.0
                    ring_i[slot, i] = 0.0
                    if poisson_mode and lam[p] > 0.0:
                        ie += w_ext * poisson_from(draw_uniform(seed, POISSON, i, k), lam[p])
                    if ref[i] > 0:
                        ref[i] -= 1
                        v = v_rel[i]
                    else:
                        v = p22[p] * v_rel[i] + p21[p] * (ie + ii) + p20[p] * i_dc[p]
                    i_e[i] = p11[p] * ie
                    i_i[i] = p11[p] * ii
                    if not np.isfinite(v):
                        err[0] = 1
                        err[1] = i
                        err[2] = k
                    elif v >= v_th[p]:
                        v = v_reset[p]
                        ref[i] = n_ref[p]
                        spikes[lo + cnt] = i
                        cnt += 1
                    v_rel[i] = v
            n_spk[w] = cnt
        if err[0]:
            return k - step0
        k1 = (k + 1) % lmod
        # per-population counts and recording, in canonical (worker, id) order
        n_ev = 0
        for w in range(n_work):
            for j in range(n_spk[w]):
                src = spikes[part[w] + j]
                p = 0
                while offsets[p + 1] <= src:
                    p += 1
                pop_counts[after, p] += 1
                n_ev += edge_offsets[src + 1] - edge_offsets[src]
                if record:
                    r = counters[4]
                    rec_steps[r] = k + 1
                    rec_ids[r] = src
                    counters[4] = r + 1
                counters[after] += 1
        counters[2 + after] += n_ev
        if n_work == 1:
            for j in range(n_spk[0]):
                _deliver(spikes[j], k1, lmod, ring_e, ring_i, edge_offsets, targets, weights,
                         delays, procedural, seed, offsets, out_counts, w_mean, w_sd, d_mean,
                         d_sd, autapses, multapses, h, collapsed, marks[0], t_buf, w_buf, d_buf)
            continue
        # staged delivery: each worker writes (target, slot, weight) into its
        # own region, then a single pass merges regions in worker order
        base = np.zeros(n_work + 1, dtype=np.int64)
        for w in range(n_work):
            tot = 0
            for j in range(n_spk[w]):
                src = spikes[part[w] + j]
                tot += edge_offsets[src + 1] - edge_offsets[src]
            base[w + 1] = base[w] + tot
        if base[n_work] > st_t.size:
            st_t = np.empty(2 * base[n_work], dtype=np.int64)
            st_s = np.empty(2 * base[n_work], dtype=np.int64)
            st_w = np.empty(2 * base[n_work], dtype=np.float64)
        for w in numba.prange(n_work):
            pos = base[w]
            lt = np.empty(max_nt if procedural else 0, dtype=np.int64)
            lw = np.empty(max_nt if procedural else 0, dtype=np.float32)
            ld = np.empty(max_nt if procedural else 0, dtype=np.int64)
            for j in range(n_spk[w]):
                src = spikes[part[w] + j]
                a = edge_offsets[src]
                n = edge_offsets[src + 1] - a
                if procedural:
                    if n > lt.size:
                        lt = np.empty(n, dtype=np.int64)
                        lw = np.empty(n, dtype=np.float32)
                        ld = np.empty(n, dtype=np.int64)
                    _gen_source(src, seed, offsets, out_counts, w_mean, w_sd, d_mean, d_sd,
                                autapses, multapses, h, collapsed, marks[w], lt, lw, ld, 0)
                    for e in range(n):
                        s = k1 + ld[e]
                        if s >= lmod:
                            s -= lmod
                        st_t[pos + e] = lt[e]
                        st_s[pos + e] = s
                        st_w[pos + e] = np.float64(lw[e])
                else:
                    for e in range(n):
                        s = k1 + np.int64(delays[a + e])
                        if s >= lmod:
                            s -= lmod
                        st_t[pos + e] = targets[a + e]
                        st_s[pos + e] = s
                        st_w[pos + e] = np.float64(weights[a + e])
                pos += n
        for j in range(base[n_work]):
            wt = st_w[j]
            if wt >= 0.0:
                ring_e[st_s[j], st_t[j]] += wt
            else:
                ring_i[st_s[j], st_t[j]] += wt
    return n_steps


# ---------------------------------------------------------------------------
# spike data


class SpikeFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class SpikeData:
    """Recorded spikes as integer steps and global ids, sorted by (time, id).

    Spike times are ``steps * timestep`` (ms).  ``warmup`` marks the end of
    the warm-up period (ms); ``t_stop`` is the end of the simulated span.
    """

    steps: np.ndarray
    senders: np.ndarray
    names: tuple[str, ...]
    sizes: tuple[int, ...]
    timestep: float
    t_stop: float
    warmup: float
    seed: int | None = None
    spec_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.senders = np.asarray(self.senders, dtype=np.int64)

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.timestep

    @property
    def total(self) -> int:
        return int(self.steps.size)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sizes))).astype(np.int64)

    @property
    def n_neurons(self) -> int:
        return int(sum(self.sizes))

    def population_of(self, ids) -> np.ndarray:
        return np.searchsorted(self.offsets, ids, side="right") - 1

    def digest(self) -> str:
        hsh = hashlib.sha256()
        hsh.update(self.steps.astype("<i8").tobytes())
        hsh.update(self.senders.astype("<i8").tobytes())
        return hsh.hexdigest()

    def shifted(self, delta_ms: float) -> "SpikeData":
        """Copy with every spike and both boundaries moved by ``delta_ms``."""
        ds = int(round(delta_ms / self.timestep))
        return SpikeData(self.steps + ds, self.senders.copy(), self.names, self.sizes,
                         self.timestep, self.t_stop + ds * self.timestep,
                         self.warmup + ds * self.timestep, self.seed, self.spec_digest,
                         dict(self.meta, t_start=self.t_start + ds * self.timestep))

    @property
    def t_start(self) -> float:
        return float(self.meta.get("t_start", 0.0))

    def header(self) -> dict:
        return {
            "seed": self.seed,
            "spec_digest": self.spec_digest,
            "timestep_ms": self.timestep,
            "t_start_ms": self.t_start,
            "t_model_ms": self.t_stop,
            "warmup_ms": self.warmup,
            "populations": ",".join(f"{n}:{s}" for n, s in zip(self.names, self.sizes)),
            **{k: v for k, v in self.meta.items() if k != "t_start"},
        }


def _decimals(h: float) -> int:
    for d in range(12):
        if abs(round(h, d) - h) < 1e-12 * max(1.0, h):
            return d
    return 12


def write_spikes(data: SpikeData, path: str | Path, binary: bool = False) -> None:
    hdr = data.header()
    if binary:
        blob = json.dumps(hdr, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(b"PD14SPK\0")
            fh.write(struct.pack("<IIQ", 1, len(blob), data.total))
            fh.write(blob)
            fh.write(data.steps.astype("<i8").tobytes())
            fh.write(data.senders.astype("<i8").tobytes())
        return
    dec = _decimals(data.timestep)
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in hdr.items():
            fh.write(f"# {k}: {v}\n")
        fh.write("# time_ms\tneuron_id\n")
        times = data.times
        fh.writelines(f"{t:.{dec}f}\t{i}\n" for t, i in zip(times.tolist(), data.senders.tolist()))


def _from_header(hdr: dict, steps, senders) -> SpikeData:
    try:
        pops = [p.rsplit(":", 1) for p in str(hdr["populations"]).split(",") if p]
        names = tuple(p[0] for p in pops)
        sizes = tuple(int(p[1]) for p in pops)
        h = float(hdr["timestep_ms"])
        t_stop = float(hdr["t_model_ms"])
        warm = float(hdr["warmup_ms"])
    except (KeyError, ValueError, IndexError) as exc:
        raise SpikeFormatError(f"incomplete or malformed header ({exc})") from None
    seed = hdr.get("seed")
    seed = None if seed in (None, "None", "") else int(seed)
    known = {"seed", "spec_digest", "timestep_ms", "t_model_ms", "warmup_ms", "populations", "t_start_ms"}
    meta = {k: v for k, v in hdr.items() if k not in known}
    meta["t_start"] = float(hdr.get("t_start_ms", 0.0))
    return SpikeData(steps, senders, names, sizes, h, t_stop, warm, seed,
                     str(hdr.get("spec_digest", "")), meta)


def read_spikes(path: str | Path) -> SpikeData:
    """Read a spike file in either the text or the binary layout."""
    raw = Path(path).read_bytes()
    if raw[:8] == b"PD14SPK\0":
        version, hlen, n = struct.unpack_from("<IIQ", raw, 8)
        if version != 1:
            raise SpikeFormatError(f"unsupported binary version {version}")
        pos = 8 + struct.calcsize("<IIQ")
        hdr = json.loads(raw[pos:pos + hlen])
        pos += hlen
        if len(raw) != pos + 16 * n:
            raise SpikeFormatError("truncated binary spike file")
        steps = np.frombuffer(raw, "<i8", n, pos).astype(np.int64)
        senders = np.frombuffer(raw, "<i8", n, pos + 8 * n).astype(np.int64)
        data = _from_header(hdr, steps, senders)
        _check_sorted(steps, senders, None)
        return data
    hdr: dict = {}
    times, ids, lines = [], [], []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, sep, val = s[1:].partition(":")
            if sep:
                hdr[key.strip()] = val.strip()
            continue
        parts = s.split("\t")
        if len(parts) != 2:
            raise SpikeFormatError("expected 'time_ms<TAB>neuron_id'", lineno)
        try:
            times.append(float(parts[0]))
            ids.append(int(parts[1]))
        except ValueError:
            raise SpikeFormatError("non-numeric field", lineno) from None
        lines.append(lineno)
    probe = _from_header(hdr, np.empty(0), np.empty(0))
    t = np.array(times, dtype=float)
    steps = np.rint(t / probe.timestep).astype(np.int64)
    off = np.abs(steps * probe.timestep - t) > 1e-6 * max(1.0, probe.timestep)
    if off.any():
        raise SpikeFormatError("spike time is not a multiple of the timestep", lines[int(np.argmax(off))])
    senders = np.array(ids, dtype=np.int64)
    _check_sorted(steps, senders, lines)
    if senders.size and (senders.min() < 0 or senders.max() >= probe.n_neurons):
        bad = int(np.argmax((senders < 0) | (senders >= probe.n_neurons)))
        raise SpikeFormatError("neuron id outside the population table", lines[bad])
    probe.steps, probe.senders = steps, senders
    return probe


def _check_sorted(steps, senders, lines):
    if steps.size < 2:
        return
    ds = np.diff(steps)
    bad = (ds < 0) | ((ds == 0) & (np.diff(senders) <= 0))
    if bad.any():
        j = int(np.argmax(bad)) + 1
        where = lines[j] if lines is not None else None
        what = "spike times not monotone" if ds[j - 1] < 0 else "spikes not sorted by neuron id"
        raise SpikeFormatError(what, where)


# ---------------------------------------------------------------------------
# simulator


def _partitions(n: int, workers: int) -> np.ndarray:
    return np.array([w * n // workers for w in range(workers + 1)], dtype=np.int64)


@dataclass
class RunResult:
    spikes: SpikeData | None
    timings: PhaseTimings
    counters: dict
    pop_spikes: dict          # per population: spikes after the warm-up boundary
    pop_spikes_total: dict
    k_out: dict
    sizes: dict
    seed: int
    spec_digest: str
    workers: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "spec_digest": self.spec_digest,
            "workers": self.workers,
            "timings": self.timings.to_dict(),
            "counters": dict(self.counters),
            "population_spikes_after_warmup": dict(self.pop_spikes),
            "population_spikes_total": dict(self.pop_spikes_total),
            "k_out": dict(self.k_out),
            "spike_digest": None if self.spikes is None else self.spikes.digest(),
        }


class Simulator:
    """One network instance: connectome, neuron state and delay buffers."""

    def __init__(self, spec: ModelSpec, seed: int | None = None, workers: int = 1,
                 connectome: Connectome | None = None, record: bool | None = None,
                 initial_potentials: np.ndarray | None = None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.spec = spec
        self.seed = spec.plan.master_seed if seed is None else int(seed)
        self.workers = workers
        self.record = spec.plan.record_spikes if record is None else record
        h = spec.plan.timestep
        self.h = h
        names = spec.names
        self.connectome = connectome if connectome is not None else build_connectome(spec, self.seed)
        c = self.connectome
        n = c.n_neurons
        props = [compute_propagator(spec.params_of(p), h) for p in names]
        params = [spec.params_of(p) for p in names]
        self._pop = dict(
            p11=np.array([q.p11 for q in props]),
            p21=np.array([q.p21 for q in props]),
            p22=np.array([q.p22 for q in props]),
            p20=np.array([q.p20 for q in props]),
            v_th=np.array([q.threshold_potential - q.resting_potential for q in params]),
            v_reset=np.array([q.reset_potential - q.resting_potential for q in params]),
            n_ref=np.array([int(round(q.refractory_period / h)) for q in params], dtype=np.int64),
        )
        drive = spec.drive
        self.poisson = drive.mode == "poisson"
        if self.poisson:
            self._i_dc = np.zeros(len(names))
            self._lam = np.array([drive.rate_per_neuron(p) * h * 1e-3 for p in names])
        else:
            self._i_dc = np.array([drive.dc_current.get(p, 0.0) for p in names])
            self._lam = np.zeros(len(names))
        self._w_ext = float(drive.external_weight)
        self.n_slots = c.max_delay + 1
        if initial_potentials is None:
            initial_potentials = init_membrane_potentials(spec, self.seed)
        # potentials are held relative to rest, so small deviations keep full
        # relative precision however far they have decayed
        self._e_l = np.repeat([q.resting_potential for q in params], spec.sizes).astype(float)
        self.v_rel = np.array(initial_potentials, dtype=float) - self._e_l
        self.i_exc = np.zeros(n)
        self.i_inh = np.zeros(n)
        self.refractory = np.zeros(n, dtype=np.int64)
        self.ring_exc = np.zeros((self.n_slots, n))
        self.ring_inh = np.zeros((self.n_slots, n))
        self.step = 0
        self.warm_step = int(round(spec.plan.t_warmup / h))
        self.counters = np.zeros(5, dtype=np.int64)
        self.pop_counts = np.zeros((2, len(names)), dtype=np.int64)
        self._err = np.zeros(3, dtype=np.int64)
        self._spikes = np.zeros(n, dtype=np.int64)
        self._n_spk = np.zeros(workers, dtype=np.int64)
        self._part = _partitions(n, workers)
        max_nt = int(c.layout.sizes.max()) if n else 1
        self._marks = np.zeros((workers, max_nt), dtype=np.bool_)
        self._rec_steps = np.zeros(max(1024, 4 * n) if self.record else 0, dtype=np.int64)
        self._rec_ids = np.zeros_like(self._rec_steps)
        if c.mode == "materialized":
            self._edges = (c.targets, c.weights, c.delays)
        else:
            self._edges = (np.empty(0, np.int32), np.empty(0, np.float32), np.empty(0, np.uint8))
        lay = c.layout
        self._gen = (c.out_counts, lay.w_mean, lay.w_sd, lay.d_mean,
                     lay.d_sd, lay.autapses, lay.multapses, lay.timestep, lay.collapsed)

    # -- low level ---------------------------------------------------------

    @property
    def v_m(self) -> np.ndarray:
        """Membrane potentials in mV (a copy; use ``set_potential`` to change)."""
        return self.v_rel + self._e_l

    def set_potential(self, neuron: int, value: float) -> None:
        self.v_rel[neuron] = value - self._e_l[neuron]

    def inject(self, neuron: int, step: int, weight: float) -> None:
        """Schedule a current jump of ``weight`` pA read at the start of ``step``."""
        if not self.step <= step < self.step + self.n_slots:
            raise ValueError("injection step outside the ring-buffer horizon")
        ring = self.ring_exc if weight >= 0 else self.ring_inh
        ring[step % self.n_slots, neuron] += weight

    def advance(self, n_steps: int) -> int:
        """Run ``n_steps`` steps; returns steps done (grows buffers as needed)."""
        if self.workers > 1:
            numba.set_num_threads(min(self.workers, numba.config.NUMBA_NUM_THREADS))
        c = self.connectome
        out_counts, wm, ws, dm, dsd, aut, mul, hh, col = self._gen
        pp = self._pop
        done = 0
        while done < n_steps:
            k = _advance(self.step, n_steps - done, self.warm_step, np.uint64(self.seed),
                         self.v_rel, self.i_exc, self.i_inh, self.refractory,
                         self.ring_exc, self.ring_inh,
                         c.layout.offsets, self._part, pp["p11"], pp["p21"], pp["p22"],
                         pp["p20"], pp["v_th"], pp["v_reset"], pp["n_ref"], self._i_dc, self._lam,
                         self._w_ext, self.poisson,
                         c.edge_offsets, *self._edges,
                         c.mode == "procedural", out_counts, wm, ws, dm, dsd, aut, mul, hh, col,
                         self.record, self._rec_steps, self._rec_ids, self.counters,
                         self.pop_counts, self._err, self._spikes, self._n_spk, self._marks)
            self.step += k
            done += k
            if self._err[0]:
                i, s = int(self._err[1]), int(self._err[2])
                pop = c.layout.names[int(np.searchsorted(c.layout.offsets, i, side="right") - 1)]
                raise NumericAbort(pop, i, s)
            if done < n_steps:
                grow = max(2 * self._rec_steps.size, self.counters[4] + 4 * c.n_neurons)
                self._rec_steps = np.resize(self._rec_steps, grow)
                self._rec_ids = np.resize(self._rec_ids, grow)
        return done

    @property
    def time(self) -> float:
        return self.step * self.h

    def spike_data(self) -> SpikeData | None:
        if not self.record:
            return None
        r = int(self.counters[4])
        # spikes are recorded in (step, id) order already
        return SpikeData(self._rec_steps[:r].copy(), self._rec_ids[:r].copy(), self.spec.names,
                         self.spec.sizes, self.h, self.spec.plan.t_model, self.spec.plan.t_warmup,
                         self.seed, self.spec.digest())

    def counter_dict(self) -> dict:
        c = self.counters
        return {
            "spikes_warmup": int(c[0]),
            "spikes_propagation": int(c[1]),
            "spikes_total": int(c[0] + c[1]),
            "events_warmup": int(c[2]),
            "events_propagation": int(c[3]),
            "events_total": int(c[2] + c[3]),
        }


def warm_kernels() -> None:
    """Compile the step kernel outside any timed phase (cached on disk afterwards)."""
    from .config import parse_model_config
    from .connectome import build_materialized, build_procedural

    spec = parse_model_config(_TINY)
    for build in (build_materialized, build_procedural):
        for workers in (1, 2):
            Simulator(spec, 1, workers=workers, connectome=build(spec, 1)).advance(2)


_TINY = """
[populations]
A = 3
[neuron_params.default]
C_m_pF = 250
tau_m_ms = 10
tau_syn_ms = 0.5
E_L_mV = -65
V_reset_mV = -65
V_th_mV = -50
t_ref_ms = 2
[connectivity.A.A]
synapse_count = 3
weight_mean_pA = 10
weight_sd_pA = 1
delay_mean_ms = 1
delay_sd_ms = 0
[drive]
mode = dc
base_rate_Hz = 8
external_weight_pA = 100
[drive.A]
external_in_degree = 1000
dc_current_pA = 400
[plan]
t_model_ms = 1
warmup_ms = 0
initial_condition_mode = original
[initial_conditions.original]
V_mean_mV = -58
V_sd_mV = 10
"""


def run(spec: ModelSpec, seed: int | None = None, workers: int = 1, record: bool | None = None,
        connectome: Connectome | None = None) -> RunResult:
    """Construct the network and simulate ``T_model``; phases are timed separately."""
    seed = spec.plan.master_seed if seed is None else int(seed)
    h = spec.plan.timestep
    n_total = int(round(spec.plan.t_model / h))
    n_warm = min(n_total, int(round(spec.plan.t_warmup / h)))
    warm_kernels()
    t0 = time.time()
    p0 = time.perf_counter()
    try:
        sim = Simulator(spec, seed, workers=workers, connectome=connectome, record=record)
    except MemoryError:
        raise EngineError("out of memory while building the network", "construction") from None
    p1 = time.perf_counter()
    phase = "warm-up"
    try:
        sim.advance(n_warm)
        p2 = time.perf_counter()
        phase = "propagation"
        sim.advance(n_total - n_warm)
        p3 = time.perf_counter()
    except MemoryError:
        raise EngineError("out of memory while simulating", phase) from None
    timings = PhaseTimings(p1 - p0, p2 - p1, p3 - p2,
                           (t0, t0 + (p1 - p0), t0 + (p2 - p0), t0 + (p3 - p0)))
    names = spec.names
    cnt = sim.counter_dict()
    deg = np.diff(sim.connectome.edge_offsets)
    offs = sim.connectome.layout.offsets
    k_out = {p: float(deg[offs[i]:offs[i + 1]].mean()) if offs[i + 1] > offs[i] else 0.0
             for i, p in enumerate(names)}
    return RunResult(
        spikes=sim.spike_data(),
        timings=timings,
        counters=cnt,
        pop_spikes={p: int(sim.pop_counts[1, i]) for i, p in enumerate(names)},
        pop_spikes_total={p: int(sim.pop_counts[:, i].sum()) for i, p in enumerate(names)},
        k_out=k_out,
        sizes=dict(zip(names, spec.sizes)),
        seed=seed,
        spec_digest=spec.digest(),
        workers=workers,
    )


def apply_external_drive(spec: ModelSpec, population: str, neuron_ids, step: int, seed: int) -> np.ndarray:
    """Input increments (pA) the drive contributes to ``neuron_ids`` at ``step``.

    DC mode returns the constant current (entering through the membrane);
    Poisson mode returns ``external_weight`` times the per-(neuron, step)
    event count (entering the excitatory synaptic current).
    """
    ids = np.asarray(neuron_ids, dtype=np.int64)
    drive = spec.drive
    if drive.mode == "dc":
        return np.full(ids.shape, float(drive.dc_current.get(population, 0.0)))
    lam = drive.rate_per_neuron(population) * spec.plan.timestep * 1e-3
    return drive.external_weight * poisson_counts(seed, ids, step, lam).astype(float)


@numba.njit(cache=True)
def _poisson_counts(seed, ids, step, lam):
    out = np.zeros(ids.size, dtype=np.int64)
    if lam <= 0.0:
        return out
    for j in range(ids.size):
        out[j] = poisson_from(draw_uniform(seed, POISSON, ids[j], step), lam)
    return out


def poisson_counts(seed: int, ids, step: int, lam: float) -> np.ndarray:
    return _poisson_counts(np.uint64(seed), np.asarray(ids, dtype=np.int64), step, lam)
