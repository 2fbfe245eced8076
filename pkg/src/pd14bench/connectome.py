"""Synapse store: materialized adjacency or procedural regeneration.

Both modes run the same per-source generator, so for a given (spec, seed) the
edge lists are bit-identical.  Construction happens in two stages:

1. For every population pair the fixed total synapse count is split over the
   source neurons by sequential conditional binomial draws (hypergeometric
   when multapses are forbidden).  This yields a small ``(N, P)`` table of
   per-source out-counts and reproduces the multinomial statistics of drawing
   every synapse's source and target uniformly with replacement.
2. Each source neuron then draws its edges from its own stream, in per-target-
   population blocks, consuming exactly three values per edge in the order
   (target, weight, delay).

Weights are held in single precision (both modes round identically); delays
are integer timesteps, rounded half-to-even and clipped to at least one step.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .config import ModelSpec
from .rng import (
    Purpose,
    binomial_from,
    draw_uniform,
    hypergeometric_from,
    ndtri,
    uniform_int_from,
)

CONN = int(Purpose.CONNECTIVITY)
IC = int(Purpose.INITIAL_CONDITIONS)
# entity ids of the per-pair out-count streams sit above every neuron id
SPLIT_ENTITY_BASE = 1 << 40

DUMP_MAGIC = b"PD14CONN"
DUMP_VERSION = 1


class ConnectomeError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Array view of a ModelSpec as consumed by the numba kernels."""

    names: tuple[str, ...]
    offsets: np.ndarray      # (P+1,) int64 global index of each population start
    counts: np.ndarray       # (P, P) int64 synapse count, [source, target]
    w_mean: np.ndarray       # (P, P) float64 pA
    w_sd: np.ndarray
    d_mean: np.ndarray       # (P, P) float64 ms
    d_sd: np.ndarray
    autapses: np.ndarray     # (P, P) bool
    multapses: np.ndarray
    timestep: float
    collapsed: bool

    @property
    def n_neurons(self) -> int:
        return int(self.offsets[-1])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def max_delay_steps(self) -> int:
        # ndtri of the extreme 53-bit uniform is below 8.3
        with np.errstate(invalid="ignore"):
            bound = np.where(self.counts > 0, (self.d_mean + 8.3 * self.d_sd) / self.timestep, 0.0)
        return max(1, int(np.ceil(bound.max())) + 1)


def make_layout(spec: ModelSpec) -> Layout:
    names = spec.names
    p = len(names)
    offsets = np.zeros(p + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(spec.sizes)
    counts = np.zeros((p, p), dtype=np.int64)
    arrs = {k: np.zeros((p, p)) for k in ("w_mean", "w_sd", "d_mean", "d_sd")}
    aut = np.ones((p, p), dtype=np.bool_)
    mul = np.ones((p, p), dtype=np.bool_)
    for (src, tgt), c in spec.connectivity.items():
        i, j = names.index(src), names.index(tgt)
        counts[i, j] = c.total(spec.population(tgt).size)
        arrs["w_mean"][i, j] = c.weight_mean
        arrs["w_sd"][i, j] = c.weight_sd
        arrs["d_mean"][i, j] = c.delay_mean
        arrs["d_sd"][i, j] = c.delay_sd
        aut[i, j] = c.autapses
        mul[i, j] = c.multapses
    return Layout(names, offsets, counts, autapses=aut, multapses=mul,
                  timestep=spec.plan.timestep, collapsed=spec.plan.weight_mode == "collapsed",
                  **arrs)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _split_counts(seed, offsets, counts, autapses, multapses):
    n = offsets[-1]
    p = offsets.size - 1
    out = np.zeros((n, p), dtype=np.int64)
    for s in range(p):
        n_s = offsets[s + 1] - offsets[s]
        for t in range(p):
            remaining = counts[s, t]
            if remaining == 0:
                continue
            entity = SPLIT_ENTITY_BASE + s * p + t
            n_t = offsets[t + 1] - offsets[t]
            row_cells = n_t - (1 if (s == t and not autapses[s, t]) else 0)
            for i in range(n_s):
                u = draw_uniform(seed, CONN, entity, i)
                rest = n_s - i
                if multapses[s, t]:
                    k = binomial_from(u, remaining, 1.0 / rest)
                else:
                    k = hypergeometric_from(u, rest * row_cells, row_cells, remaining)
                out[offsets[s] + i, t] = k
                remaining -= k
                if remaining == 0:
                    break
    return out


@numba.njit(cache=True)
def _pop_of(offsets, gid):
    p = 0
    while offsets[p + 1] <= gid:
        p += 1
    return p


@numba.njit(cache=True)
def _gen_source(src, seed, offsets, out_counts, w_mean, w_sd, d_mean, d_sd,
                autapses, multapses, h, collapsed, mark, tgt_out, w_out, d_out, start):
    """Write the out-edges of ``src`` at ``start``; returns the number written."""
    p = offsets.size - 1
    s = _pop_of(offsets, src)
    e = 0
    for t in range(p):
        n = out_counts[src, t]
        if n == 0:
            continue
        toff = offsets[t]
        n_t = offsets[t + 1] - toff
        skip = -1
        if s == t and not autapses[s, t]:
            skip = src - toff
        m = n_t - (1 if skip >= 0 else 0)
        wm = w_mean[s, t]
        ws = w_sd[s, t]
        dm = d_mean[s, t]
        ds = d_sd[s, t]
        floyd_lo = m - n
        for j in range(n):
            u_t = draw_uniform(seed, CONN, src, 3 * e)
            u_w = draw_uniform(seed, CONN, src, 3 * e + 1)
            u_d = draw_uniform(seed, CONN, src, 3 * e + 2)
            if multapses[s, t]:
                r = uniform_int_from(u_t, 0, m - 1)
            else:
                # Floyd's sampling of n distinct cells out of m, one draw per edge
                top = floyd_lo + j
                r = uniform_int_from(u_t, 0, top)
                if mark[r]:
                    r = top
                mark[r] = True
            if skip >= 0 and r >= skip:
                r += 1
            if collapsed:
                w = wm
            else:
                w = wm + ws * ndtri(u_w)
            if wm >= 0.0:
                if w < 0.0:
                    w = 0.0
            elif w > 0.0:
                w = 0.0
            d = np.rint((dm + ds * ndtri(u_d)) / h)
            if d < 1.0:
                d = 1.0
            tgt_out[start + e] = toff + r
            w_out[start + e] = np.float32(w)
            d_out[start + e] = np.int64(d)
            e += 1
        if not multapses[s, t]:
            for j in range(n):
                r = tgt_out[start + e - n + j] - toff
                if skip >= 0 and r > skip:
                    r -= 1
                mark[r] = False
    return e


@numba.njit(cache=True, parallel=True)
def _build_materialized(seed, offsets, out_counts, edge_offsets, w_mean, w_sd, d_mean, d_sd,
                        autapses, multapses, h, collapsed, max_nt, targets, weights, delays):
    n = offsets[-1]
    nchunk = 64
    for c in numba.prange(nchunk):
        mark = np.zeros(max_nt, dtype=np.bool_)
        lo = c * n // nchunk
        hi = (c + 1) * n // nchunk
        cap = 0
        for src in range(lo, hi):
            k = edge_offsets[src + 1] - edge_offsets[src]
            if k > cap:
                cap = k
        t_buf = np.empty(cap, dtype=np.int64)
        w_buf = np.empty(cap, dtype=np.float32)
        d_buf = np.empty(cap, dtype=np.int64)
        for src in range(lo, hi):
            k = _gen_source(src, seed, offsets, out_counts, w_mean, w_sd, d_mean, d_sd,
                            autapses, multapses, h, collapsed, mark, t_buf, w_buf, d_buf, 0)
            base = edge_offsets[src]
            for j in range(k):
                targets[base + j] = t_buf[j]
                weights[base + j] = w_buf[j]
                delays[base + j] = d_buf[j]


@numba.njit(cache=True)
def _pair_moments(offsets, out_counts, edge_offsets, weights, delays):
    p = offsets.size - 1
    acc = np.zeros((p, p, 4))
    for s in range(p):
        for src in range(offsets[s], offsets[s + 1]):
            pos = edge_offsets[src]
            for t in range(p):
                n = out_counts[src, t]
                for j in range(pos, pos + n):
                    w = np.float64(weights[j])
                    d = np.float64(delays[j])
                    acc[s, t, 0] += w
                    acc[s, t, 1] += w * w
                    acc[s, t, 2] += d
                    acc[s, t, 3] += d * d
                pos += n
    return acc


@numba.njit(cache=True)
def _init_potentials(seed, offsets, mean, sd):
    n = offsets[-1]
    out = np.empty(n)
    for p in range(offsets.size - 1):
        for i in range(offsets[p], offsets[p + 1]):
            if sd[p] == 0.0:
                out[i] = mean[p]
            else:
                out[i] = mean[p] + sd[p] * ndtri(draw_uniform(seed, IC, i, 0))
    return out


# ---------------------------------------------------------------------------
# public API


@dataclass
class Connectome:
    """Outgoing synapses per source neuron.

    ``targets``/``weights``/``delays`` hold contiguous per-source blocks located
    by ``edge_offsets`` in materialized mode and are ``None`` in procedural
    mode, where :meth:`out_edges` regenerates a block on demand.
    """

    mode: str
    layout: Layout
    seed: int
    out_counts: np.ndarray
    edge_offsets: np.ndarray
    targets: np.ndarray | None = None
    weights: np.ndarray | None = None
    delays: np.ndarray | None = None
    _inbox: tuple | None = None

    @property
    def n_neurons(self) -> int:
        return self.layout.n_neurons

    @property
    def n_edges(self) -> int:
        return int(self.edge_offsets[-1])

    @property
    def out_degree(self) -> np.ndarray:
        return np.diff(self.edge_offsets)

    @property
    def max_delay(self) -> int:
        if self.delays is not None and self.delays.size:
            return int(self.delays.max())
        return self.layout.max_delay_steps()

    def out_edges(self, source_id: int):
        if not 0 <= source_id < self.n_neurons:
            raise ConnectomeError(f"source id {source_id} out of range [0, {self.n_neurons})")
        if self.mode == "materialized":
            a, b = self.edge_offsets[source_id], self.edge_offsets[source_id + 1]
            return (self.targets[a:b].astype(np.int64), self.weights[a:b].copy(),
                    self.delays[a:b].astype(np.int64))
        return _regenerate(self, source_id)

    def iter_blocks(self, chunk: int = 4096):
        """Yield (first_source, targets, weights, delays) in source order."""
        n = self.n_neurons
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            if self.mode == "materialized":
                a, b = self.edge_offsets[lo], self.edge_offsets[hi]
                yield lo, self.targets[a:b], self.weights[a:b], self.delays[a:b]
            else:
                parts = [_regenerate(self, s) for s in range(lo, hi)]
                yield (lo, np.concatenate([q[0] for q in parts]).astype(np.int32),
                       np.concatenate([q[1] for q in parts]),
                       np.concatenate([q[2] for q in parts]))

    def digest(self) -> str:
        """SHA-256 over all edges in (source, generation order)."""
        hsh = hashlib.sha256()
        hsh.update(self.edge_offsets.astype("<i8").tobytes())
        for _, t, w, d in self.iter_blocks():
            hsh.update(np.asarray(t, dtype="<i4").tobytes())
            hsh.update(np.asarray(w, dtype="<f4").tobytes())
            hsh.update(np.asarray(d, dtype="<u2").tobytes())
        return hsh.hexdigest()

    def inbox(self):
        """Per-target index of incoming edges: (indptr, edge positions).

        Built on first use; at full scale this roughly doubles the index memory,
        so the engine does not require it.
        """
        if self.mode != "materialized":
            raise ConnectomeError("inbox index requires a materialized connectome")
        if self._inbox is None:
            order = np.argsort(self.targets, kind="stable")
            indptr = np.zeros(self.n_neurons + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.targets, minlength=self.n_neurons), out=indptr[1:])
            self._inbox = (indptr, order)
        return self._inbox

    def dump(self, path: str | Path) -> None:
        """Binary little-endian dump: header, then one edge block per source."""
        with open(path, "wb") as fh:
            fh.write(DUMP_MAGIC)
            fh.write(struct.pack("<IQQQ", DUMP_VERSION, self.seed, self.n_neurons, self.n_edges))
            for lo, t, w, d in self.iter_blocks():
                deg = self.out_degree[lo:lo + 4096]
                pos = 0
                for k in deg:
                    fh.write(struct.pack("<I", int(k)))
                    fh.write(np.asarray(t[pos:pos + k], dtype="<i4").tobytes())
                    fh.write(np.asarray(w[pos:pos + k], dtype="<f8").tobytes())
                    fh.write(np.asarray(d[pos:pos + k], dtype="<u2").tobytes())
                    pos += k


def read_dump(path: str | Path):
    """Inverse of :meth:`Connectome.dump`: (seed, list of (targets, weights, delays))."""
    data = Path(path).read_bytes()
    if data[:8] != DUMP_MAGIC:
        raise ConnectomeError("not a connectome dump")
    version, seed, n, _ = struct.unpack_from("<IQQQ", data, 8)
    if version != DUMP_VERSION:
        raise ConnectomeError(f"unsupported dump version {version}")
    pos = 8 + struct.calcsize("<IQQQ")
    blocks = []
    for _ in range(n):
        (k,) = struct.unpack_from("<I", data, pos)
        pos += 4
        t = np.frombuffer(data, "<i4", k, pos)
        pos += 4 * k
        w = np.frombuffer(data, "<f8", k, pos)
        pos += 8 * k
        d = np.frombuffer(data, "<u2", k, pos)
        pos += 2 * k
        blocks.append((t, w, d))
    return seed, blocks


def _kernel_args(layout: Layout):
    return (layout.offsets, layout.w_mean, layout.w_sd, layout.d_mean, layout.d_sd,
            layout.autapses, layout.multapses, layout.timestep, layout.collapsed)


def _check_feasible(layout: Layout) -> None:
    sizes = layout.sizes
    for s in range(len(sizes)):
        for t in range(len(sizes)):
            if layout.multapses[s, t]:
                continue
            cells = sizes[s] * sizes[t] - (sizes[s] if s == t and not layout.autapses[s, t] else 0)
            if layout.counts[s, t] > cells:
                raise ConnectomeError(
                    f"pair {layout.names[s]}->{layout.names[t]}: {layout.counts[s, t]} synapses "
                    f"exceed {cells} available pairs with multapses forbidden")


def _prepare(spec: ModelSpec, seed: int):
    layout = make_layout(spec)
    _check_feasible(layout)
    out_counts = _split_counts(np.uint64(seed), layout.offsets, layout.counts,
                               layout.autapses, layout.multapses)
    edge_offsets = np.zeros(layout.n_neurons + 1, dtype=np.int64)
    np.cumsum(out_counts.sum(axis=1), out=edge_offsets[1:])
    return layout, out_counts, edge_offsets


def _regenerate(c: Connectome, source_id: int):
    k = int(c.edge_offsets[source_id + 1] - c.edge_offsets[source_id])
    t = np.empty(k, dtype=np.int64)
    w = np.empty(k, dtype=np.float32)
    d = np.empty(k, dtype=np.int64)
    mark = np.zeros(int(c.layout.sizes.max()), dtype=np.bool_)
    o, wm, ws, dm, dsd, aut, mul, h, col = _kernel_args(c.layout)
    _gen_source(source_id, np.uint64(c.seed), o, c.out_counts, wm, ws, dm, dsd, aut, mul,
                h, col, mark, t, w, d, 0)
    return t, w, d


def build_materialized(spec: ModelSpec, seed: int) -> Connectome:
    layout, out_counts, edge_offsets = _prepare(spec, seed)
    n_edges = int(edge_offsets[-1])
    if layout.n_neurons >= 2**31:
        raise ConnectomeError("more than 2**31 neurons are not supported")
    dtype_d = np.uint8 if layout.max_delay_steps() < 256 else np.uint16
    targets = np.empty(n_edges, dtype=np.int32)
    weights = np.empty(n_edges, dtype=np.float32)
    delays = np.empty(n_edges, dtype=dtype_d)
    o, wm, ws, dm, dsd, aut, mul, h, col = _kernel_args(layout)
    _build_materialized(np.uint64(seed), o, out_counts, edge_offsets, wm, ws, dm, dsd, aut, mul,
                        h, col, int(layout.sizes.max()), targets, weights, delays)
    return Connectome("materialized", layout, seed, out_counts, edge_offsets,
                      targets, weights, delays)


def build_procedural(spec: ModelSpec, seed: int) -> Connectome:
    layout, out_counts, edge_offsets = _prepare(spec, seed)
    return Connectome("procedural", layout, seed, out_counts, edge_offsets)


def build_connectome(spec: ModelSpec, seed: int, mode: str | None = None) -> Connectome:
    mode = mode or spec.plan.connectivity_mode
    if mode == "materialized":
        return build_materialized(spec, seed)
    if mode == "procedural":
        return build_procedural(spec, seed)
    raise ConnectomeError(f"unknown connectivity mode {mode!r}")


_procedural_cache: dict[tuple[str, int], Connectome] = {}


def procedural_out_edges(spec: ModelSpec, seed: int, source_id: int):
    """Regenerate the out-edges of one source without any stored adjacency."""
    key = (spec.digest(), seed)
    c = _procedural_cache.get(key)
    if c is None:
        _procedural_cache.clear()
        c = _procedural_cache[key] = build_procedural(spec, seed)
    return c.out_edges(source_id)


@dataclass(frozen=True)
class ConnectomeSummary:
    names: tuple[str, ...]
    pair_counts: np.ndarray          # [source, target]
    k_out: np.ndarray                # per source population
    weight_mean: np.ndarray | None = None
    weight_sd: np.ndarray | None = None
    delay_mean: np.ndarray | None = None   # timesteps
    delay_sd: np.ndarray | None = None

    @property
    def total(self) -> int:
        return int(self.pair_counts.sum())

    def to_dict(self) -> dict:
        out = {
            "populations": list(self.names),
            "pair_counts": self.pair_counts.tolist(),
            "k_out": dict(zip(self.names, self.k_out.tolist())),
            "total_synapses": self.total,
        }
        if self.weight_mean is not None:
            out["weight_mean_pA"] = self.weight_mean.tolist()
            out["delay_mean_steps"] = self.delay_mean.tolist()
        return out


def connectome_summary(c: Connectome, moments: bool = True) -> ConnectomeSummary:
    layout = c.layout
    p = len(layout.names)
    pair = np.zeros((p, p), dtype=np.int64)
    for s in range(p):
        pair[s] = c.out_counts[layout.offsets[s]:layout.offsets[s + 1]].sum(axis=0)
    k_out = pair.sum(axis=1) / layout.sizes
    if not moments:
        return ConnectomeSummary(layout.names, pair, k_out)
    if c.mode == "materialized":
        weights, delays = c.weights, c.delays
    else:
        parts = [c.out_edges(s) for s in range(c.n_neurons)]
        weights = np.concatenate([q[1] for q in parts]) if parts else np.empty(0, np.float32)
        delays = np.concatenate([q[2] for q in parts]) if parts else np.empty(0, np.int64)
    acc = _pair_moments(layout.offsets, c.out_counts, c.edge_offsets, weights, delays)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = pair.astype(float)
        wm = acc[..., 0] / n
        dm = acc[..., 2] / n
        wsd = np.sqrt(np.maximum(acc[..., 1] / n - wm**2, 0.0) * n / np.maximum(n - 1, 1))
        dsd = np.sqrt(np.maximum(acc[..., 3] / n - dm**2, 0.0) * n / np.maximum(n - 1, 1))
    return ConnectomeSummary(layout.names, pair, k_out, wm, wsd, dm, dsd)


def init_membrane_potentials(spec: ModelSpec, seed: int, mode: str | None = None) -> np.ndarray:
    """Initial V_m per neuron (mV), keyed per neuron id."""
    mode = mode or spec.plan.initial_condition_mode
    if mode not in spec.initial_conditions:
        raise ConnectomeError(f"no initial conditions for mode {mode!r}")
    ic = spec.initial_conditions[mode]
    layout_offsets = np.zeros(len(spec.names) + 1, dtype=np.int64)
    layout_offsets[1:] = np.cumsum(spec.sizes)
    mean = np.array([ic.mean[n] for n in spec.names], dtype=float)
    sd = np.array([ic.sd[n] for n in spec.names], dtype=float)
    return _init_potentials(np.uint64(seed), layout_offsets, mean, sd)
