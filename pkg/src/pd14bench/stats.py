"""Activity statistics (FR, CV of ISI, spike-count CC) and distribution scores.

All statistics use the analysis window ``(warmup, t_stop]``.  A spike at
exactly the warm-up boundary was emitted by the last warm-up step and is
therefore excluded, which keeps rate sums consistent with the engine's
post-warm-up spike counter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .engine import SpikeData

STATISTICS = ("FR", "CV", "CC")
SCORES = ("KL", "KS", "EMD")
RECOMMENDED_ACCURACY_MS = 15 * 60 * 1000.0


class StatsError(ValueError):
    pass


class InsufficientDuration(StatsError):
    def __init__(self, required_ms: float, provided_ms: float):
        self.required_ms, self.provided_ms = required_ms, provided_ms
        super().__init__(f"analysis window too short: {provided_ms:g} ms provided, "
                         f"{required_ms:g} ms required")


def default_window(spikes: SpikeData) -> tuple[float, float]:
    return max(spikes.warmup, spikes.t_start), spikes.t_stop


def _window(spikes: SpikeData, window) -> tuple[float, float]:
    lo, hi = default_window(spikes) if window is None else window
    if not hi > lo:
        raise StatsError(f"empty analysis window ({lo}, {hi}]")
    if lo < spikes.t_start - 1e-9 or hi > spikes.t_stop + 1e-9:
        raise StatsError(f"window ({lo}, {hi}] outside recorded span "
                         f"[{spikes.t_start}, {spikes.t_stop}]")
    return lo, hi


def _select(spikes: SpikeData, lo: float, hi: float):
    h = spikes.timestep
    # compare on the integer grid to avoid float round-off at the edges
    s_lo, s_hi = int(round(lo / h)), int(round(hi / h))
    m = (spikes.steps > s_lo) & (spikes.steps <= s_hi)
    return spikes.steps[m], spikes.senders[m]


def firing_rates(spikes: SpikeData, window=None) -> np.ndarray:
    """Per-neuron rate (spikes/s) for every neuron id, silent ones included."""
    lo, hi = _window(spikes, window)
    _, ids = _select(spikes, lo, hi)
    counts = np.bincount(ids, minlength=spikes.n_neurons)
    return counts / ((hi - lo) * 1e-3)


@dataclass(frozen=True)
class CVResult:
    cv: np.ndarray          # per included neuron
    ids: np.ndarray         # neuron ids of ``cv``
    excluded: np.ndarray    # ids with fewer than ``min_spikes`` spikes in the window
    min_spikes: int = 3


def isi_cv(spikes: SpikeData, window=None, min_spikes: int = 3) -> CVResult:
    """Coefficient of variation of inter-spike intervals per neuron.

    Uses the population standard deviation of the ISIs.  Neurons with fewer
    than ``min_spikes`` spikes are excluded rather than given a value.
    """
    lo, hi = _window(spikes, window)
    steps, ids = _select(spikes, lo, hi)
    order = np.lexsort((steps, ids))
    steps, ids = steps[order], ids[order]
    n = spikes.n_neurons
    counts = np.bincount(ids, minlength=n)
    keep = counts >= min_spikes
    isi = np.diff(steps).astype(float)
    same = ids[1:] == ids[:-1]
    owner = ids[1:][same]
    isi = isi[same]
    k = np.bincount(owner, minlength=n).astype(float)
    s1 = np.bincount(owner, weights=isi, minlength=n)
    s2 = np.bincount(owner, weights=isi * isi, minlength=n)
    sel = np.flatnonzero(keep)
    mean = s1[sel] / k[sel]
    var = np.maximum(s2[sel] / k[sel] - mean**2, 0.0)
    cv = np.sqrt(var) / mean
    return CVResult(cv, sel, np.flatnonzero(~keep), min_spikes)


@dataclass(frozen=True)
class CCResult:
    population: str
    cc: np.ndarray            # one value per retained pair
    pairs: np.ndarray         # (n_pairs, 2) neuron ids
    neurons: np.ndarray       # selected subsample
    excluded_pairs: int       # pairs with a zero-variance train
    bin_width: float
    subsample_size: int
    pair_seed: int


def subsample(n: int, size: int, seed: int, stream: int = 0) -> np.ndarray:
    """Deterministic sorted sample of ``min(size, n)`` distinct indices in ``[0, n)``."""
    rng = np.random.default_rng([seed, stream])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def _binned(steps, ids, neurons, lo_step, n_bins, bin_steps):
    pos = np.searchsorted(neurons, ids)
    pos = np.minimum(pos, len(neurons) - 1)
    hit = neurons[pos] == ids
    b = (steps[hit] - lo_step - 1) // bin_steps
    out = np.zeros((len(neurons), n_bins), dtype=np.int32)
    np.add.at(out, (pos[hit], b), 1)
    return out


def count_correlation_matrix(counts: np.ndarray, chunk: int = 50000):
    """Pearson correlation between rows of an integer count matrix.

    Returns ``(cc, ok)`` where ``ok`` flags rows with non-zero variance;
    entries involving other rows are NaN.
    """
    n, nb = counts.shape
    s = np.zeros(n)
    c = np.zeros((n, n))
    for a in range(0, nb, chunk):
        x = counts[:, a:a + chunk].astype(float)
        s += x.sum(axis=1)
        c += x @ x.T
    mean = s / nb
    cov = c / nb - np.outer(mean, mean)
    var = np.diag(cov).copy()
    ok = var > 1e-12 * np.maximum(1.0, mean**2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sd = np.sqrt(np.where(ok, var, np.nan))
        cc = cov / np.outer(sd, sd)
    cc = np.clip(cc, -1.0, 1.0)
    np.fill_diagonal(cc, np.where(ok, 1.0, np.nan))
    return cc, ok


def spike_count_correlations(spikes: SpikeData, window=None, bin_width: float = 2.0,
                             subsample_size: int = 200, pair_seed: int = 0) -> dict[str, CCResult]:
    """Within-population pairwise spike-count correlations on a seeded subsample."""
    if not bin_width > 0:
        raise StatsError("bin width must be positive")
    if subsample_size < 2:
        raise StatsError("subsample size must be at least 2")
    lo, hi = _window(spikes, window)
    h = spikes.timestep
    bin_steps = int(round(bin_width / h))
    if bin_steps < 1 or abs(bin_steps * h - bin_width) > 1e-9:
        raise StatsError("bin width must be a positive multiple of the timestep")
    lo_step, hi_step = int(round(lo / h)), int(round(hi / h))
    n_bins = (hi_step - lo_step) // bin_steps
    if n_bins < 1:
        raise StatsError("window shorter than one bin")
    steps, ids = _select(spikes, lo, lo + n_bins * bin_steps * h)
    out = {}
    offs = spikes.offsets
    for p, name in enumerate(spikes.names):
        sel = offs[p] + subsample(spikes.sizes[p], subsample_size, pair_seed, p)
        counts = _binned(steps, ids, sel, lo_step, n_bins, bin_steps)
        cc, ok = count_correlation_matrix(counts)
        iu, ju = np.triu_indices(len(sel), k=1)
        good = ok[iu] & ok[ju]
        out[name] = CCResult(name, cc[iu[good], ju[good]],
                             np.column_stack((sel[iu[good]], sel[ju[good]])), sel,
                             int((~good).sum()), bin_width, subsample_size, pair_seed)
    return out


# ---------------------------------------------------------------------------
# distribution scores


@dataclass(frozen=True)
class DistanceScores:
    kl: float
    ks: float
    emd: float
    n_bins: int

    def as_dict(self) -> dict:
        return {"KL": self.kl, "KS": self.ks, "EMD": self.emd}


def fd_edges(pooled: np.ndarray, max_bins: int = 10000) -> np.ndarray:
    """Freedman-Diaconis bin edges over the pooled sample.

    Falls back to sqrt(n) bins when the IQR is zero and to a single bin when
    all values coincide.
    """
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        return np.array([lo - 0.5, hi + 0.5])
    q75, q25 = np.percentile(pooled, [75, 25])
    width = 2.0 * (q75 - q25) * pooled.size ** (-1.0 / 3.0)
    if width > 0:
        k = int(math.ceil((hi - lo) / width))
    else:
        k = int(math.ceil(math.sqrt(pooled.size)))
    k = max(1, min(k, max_bins))
    return np.linspace(lo, hi, k + 1)


def _smoothed(sample, edges):
    counts, _ = np.histogram(sample, bins=edges)
    p = counts / sample.size + 1.0 / (10.0 * sample.size)
    return p / p.sum()


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate((a, b))
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def emd_1d(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.sort(a), np.sort(b)
    grid = np.sort(np.concatenate((a, b)))
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * np.diff(grid)))


def compare_distributions(sample_a, sample_b) -> DistanceScores:
    """KL(a||b) on shared Freedman-Diaconis bins with additive smoothing, KS and EMD."""
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise StatsError("cannot compare an empty sample")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise StatsError("samples must be finite")
    edges = fd_edges(np.concatenate((a, b)))
    p, q = _smoothed(a, edges), _smoothed(b, edges)
    kl = float(np.sum(p * np.log(p / q)))
    return DistanceScores(max(kl, 0.0), ks_statistic(a, b), emd_1d(a, b), len(edges) - 1)


# ---------------------------------------------------------------------------
# reports


@dataclass
class StatisticsReport:
    names: tuple[str, ...]
    window: tuple[float, float]
    rates: dict[str, np.ndarray]
    cvs: dict[str, np.ndarray]
    ccs: dict[str, np.ndarray]
    cv_excluded: dict[str, int]
    cc_excluded: dict[str, int]
    bin_width: float
    subsample_size: int
    pair_seed: int

    @property
    def mean_rates(self) -> dict[str, float]:
        return {p: float(r.mean()) for p, r in self.rates.items()}

    def samples(self, stat: str) -> dict[str, np.ndarray]:
        return {"FR": self.rates, "CV": self.cvs, "CC": self.ccs}[stat]

    def summary(self) -> dict:
        return {
            "window_ms": list(self.window),
            "cc_parameters": {"bin_width_ms": self.bin_width, "subsample_size": self.subsample_size,
                              "pair_seed": self.pair_seed, "pairs": "within population"},
            "populations": {
                p: {
                    "mean_rate_Hz": float(self.rates[p].mean()),
                    "mean_cv": _nanmean(self.cvs[p]),
                    "mean_cc": _nanmean(self.ccs[p]),
                    "cv_excluded": self.cv_excluded[p],
                    "cc_pairs_excluded": self.cc_excluded[p],
                }
                for p in self.names
            },
        }


def _nanmean(x) -> float | None:
    return float(np.mean(x)) if len(x) else None


def compute_statistics(spikes: SpikeData, window=None, bin_width: float = 2.0,
                       subsample_size: int = 200, pair_seed: int = 0) -> StatisticsReport:
    win = _window(spikes, window)
    fr = firing_rates(spikes, win)
    cv = isi_cv(spikes, win)
    cc = spike_count_correlations(spikes, win, bin_width, subsample_size, pair_seed)
    offs = spikes.offsets
    pop_cv = spikes.population_of(cv.ids)
    pop_ex = spikes.population_of(cv.excluded)
    names = spikes.names
    return StatisticsReport(
        names, win,
        rates={p: fr[offs[i]:offs[i + 1]] for i, p in enumerate(names)},
        cvs={p: cv.cv[pop_cv == i] for i, p in enumerate(names)},
        ccs={p: cc[p].cc for p in names},
        cv_excluded={p: int((pop_ex == i).sum()) for i, p in enumerate(names)},
        cc_excluded={p: cc[p].excluded_pairs for p in names},
        bin_width=bin_width, subsample_size=subsample_size, pair_seed=pair_seed,
    )


def score_reports(a: StatisticsReport, b: StatisticsReport) -> dict[tuple[str, str, str], float]:
    """Scores for every (population, statistic, measure).

    NaN when both samples are empty (nothing to compare), infinite when only
    one of them is.
    """
    out = {}
    for p in a.names:
        for stat in STATISTICS:
            xa, xb = a.samples(stat)[p], b.samples(stat)[p]
            if len(xa) and len(xb):
                sc = compare_distributions(xa, xb).as_dict()
            else:
                sc = dict.fromkeys(SCORES, math.nan if len(xa) == len(xb) else math.inf)
            for m, v in sc.items():
                out[(p, stat, m)] = v
    return out


def baseline_thresholds(reports: list[StatisticsReport], factor: float = 3.0) -> dict:
    """``factor`` times the mean score over all pairs of same-simulator seeds."""
    if len(reports) < 2:
        raise StatsError("a seed-to-seed baseline needs at least two runs")
    acc: dict = {}
    for i in range(len(reports)):
        for j in range(i + 1, len(reports)):
            for key, v in score_reports(reports[i], reports[j]).items():
                acc.setdefault(key, []).append(v)
    return {k: factor * float(np.mean(v)) for k, v in acc.items()}


@dataclass
class Verdict:
    population: str
    statistic: str
    score: str
    value: float
    threshold: float | None

    @property
    def passed(self) -> bool:
        if self.threshold is None or math.isnan(self.value):
            return True
        return self.value <= self.threshold


@dataclass
class VerificationReport:
    verdicts: list[Verdict]
    run: StatisticsReport
    reference: StatisticsReport
    overlays: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def failures(self) -> list[Verdict]:
        return [v for v in self.verdicts if not v.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "warnings": list(self.warnings),
            "run": self.run.summary(),
            "reference": self.reference.summary(),
            "verdicts": [
                {"population": v.population, "statistic": v.statistic, "score": v.score,
                 "value": _json_float(v.value), "threshold": _json_float(v.threshold),
                 "pass": v.passed}
                for v in self.verdicts
            ],
        }

    def write_overlays(self, directory: str | Path) -> list[Path]:
        """One TSV per (population, statistic): bin edges and both densities."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for (pop, stat), (edges, da, db) in self.overlays.items():
            path = d / f"overlay_{pop.replace('/', '')}_{stat}.tsv"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("# bin_lo\tbin_hi\tdensity_run\tdensity_reference\n")
                for k in range(len(da)):
                    fh.write(f"{float(edges[k])!r}\t{float(edges[k + 1])!r}\t{float(da[k])!r}\t{float(db[k])!r}\n")
            paths.append(path)
        return paths


def _json_float(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return x


def verify_accuracy(run: SpikeData, reference: SpikeData,
                    thresholds: Mapping[tuple[str, str, str], float] | None = None,
                    *, min_duration_ms: float | None = None, bin_width: float = 2.0,
                    subsample_size: int = 200, pair_seed: int = 0) -> VerificationReport:
    """Score run against reference for every (population, statistic, measure).

    ``thresholds`` maps keys to the largest acceptable value (see
    :func:`baseline_thresholds`); keys without a threshold are reported only.
    Without any thresholds the comparison passes only where all scores are 0.
    """
    if run.names != reference.names or run.sizes != reference.sizes:
        raise StatsError("run and reference have different population tables")
    warnings = []
    for label, data in (("run", run), ("reference", reference)):
        lo, hi = default_window(data)
        if min_duration_ms is not None and hi - lo < min_duration_ms:
            raise InsufficientDuration(min_duration_ms, hi - lo)
        if data.t_stop - data.t_start < RECOMMENDED_ACCURACY_MS:
            warnings.append(f"{label} covers {data.t_stop - data.t_start:g} ms; accuracy "
                            f"checks are recommended on 15 min of model time")
    a = compute_statistics(run, None, bin_width, subsample_size, pair_seed)
    b = compute_statistics(reference, None, bin_width, subsample_size, pair_seed)
    scores = score_reports(a, b)
    if thresholds is None:
        thresholds = dict.fromkeys(scores, 0.0)
    verdicts = [Verdict(p, s, m, v, thresholds.get((p, s, m))) for (p, s, m), v in scores.items()]
    overlays = {}
    for p in a.names:
        for stat in STATISTICS:
            xa, xb = a.samples(stat)[p], b.samples(stat)[p]
            if len(xa) and len(xb):
                edges = fd_edges(np.concatenate((xa, xb)), max_bins=200)
                da, _ = np.histogram(xa, edges, density=True)
                db, _ = np.histogram(xb, edges, density=True)
                overlays[(p, stat)] = (edges, da, db)
    return VerificationReport(verdicts, a, b, overlays, warnings)
