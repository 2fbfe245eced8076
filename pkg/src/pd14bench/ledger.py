"""Cross-platform benchmark records, fixed-slope trend fits and the performance figure.

Ledger file format: one INI-style stanza per record, the section name being
the study code::

    [Kau+23]
    q_rtf = 0.05
    e_syn_uJ = 0.048          # or "--" when not reported
    simulator = neuroAIx
    nodes = 35
    system = NetFPGA SUME
    process_node_nm = 28
    external_drive = DC
    year = 2023
    year_inferred = true      # optional, default false
    architecture_class = FPGA # optional, derived from the simulator otherwise
"""
from __future__ import annotations

import configparser
import csv
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ARCH_CLASSES = ("CPU", "GPU", "SpiNNaker", "FPGA", "other")
DRIVES = ("DC", "Poisson")

SIMULATOR_CLASS = {
    "NEST CPU": "CPU",
    "NEST GPU": "GPU",
    "GeNN": "GPU",
    "SpiNNaker 1": "SpiNNaker",
    "CsNN": "FPGA",
    "neuroAIx": "FPGA",
}

CLASS_COLOR = {"CPU": "#1f77b4", "GPU": "#2ca02c", "SpiNNaker": "#d62728",
               "FPGA": "#9467bd", "other": "#7f7f7f"}
SIMULATOR_MARKER = {"NEST CPU": "o", "NEST GPU": "s", "GeNN": "D", "SpiNNaker 1": "^",
                    "CsNN": "v", "neuroAIx": "P"}
FALLBACK_MARKERS = "X*hp<>"


class LedgerError(ValueError):
    def __init__(self, message: str, record: str | None = None, field: str | None = None):
        self.record, self.field = record, field
        where = ".".join(x for x in (record, field) if x)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class BenchmarkRecord:
    study_code: str
    q_rtf: float
    e_syn: float | None          # uJ per synaptic event
    simulator: str
    nodes: int
    system: str
    process_node: float          # nm
    external_drive: str
    year: int
    architecture_class: str = ""
    year_inferred: bool = False

    def __post_init__(self):
        if not self.architecture_class:
            object.__setattr__(self, "architecture_class",
                               SIMULATOR_CLASS.get(self.simulator, "other"))
        err = lambda f, m: LedgerError(m, self.study_code, f)  # noqa: E731
        if not self.study_code or re.search(r"[\[\]\n]", self.study_code):
            raise err("study_code", "study code must be non-empty without brackets")
        if not (self.q_rtf > 0 and math.isfinite(self.q_rtf)):
            raise err("q_rtf", "must be positive")
        if self.e_syn is not None and not (self.e_syn > 0 and math.isfinite(self.e_syn)):
            raise err("e_syn_uJ", "must be positive when present")
        if self.nodes < 1:
            raise err("nodes", "must be >= 1")
        if not self.process_node > 0:
            raise err("process_node_nm", "must be positive")
        if self.external_drive not in DRIVES:
            raise err("external_drive", f"must be one of {DRIVES}")
        if not 2014 <= self.year <= 2100:
            raise err("year", "implausible publication year")
        if self.architecture_class not in ARCH_CLASSES:
            raise err("architecture_class", f"must be one of {ARCH_CLASSES}")


_FIELDS = ("q_rtf", "e_syn_uJ", "simulator", "nodes", "system", "process_node_nm",
           "external_drive", "year")


def _number(value: str, code: str, fld: str, kind=float):
    try:
        x = kind(value)
    except ValueError:
        raise LedgerError(f"not a valid {kind.__name__}: {value!r}", code, fld) from None
    return x


def import_records(document: str) -> list[BenchmarkRecord]:
    """Parse a ledger document; raises :class:`LedgerError` naming the record and field."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(document)
    except configparser.Error as exc:
        raise LedgerError(f"syntax error: {exc}") from None
    out = []
    for code in cp.sections():
        sec = cp[code]
        for f in _FIELDS:
            if f not in sec:
                raise LedgerError("missing field", code, f)
        unknown = set(sec) - set(_FIELDS) - {"architecture_class", "year_inferred"}
        if unknown:
            raise LedgerError(f"unknown field(s) {sorted(unknown)}", code)
        e = sec["e_syn_uJ"].strip()
        inferred = sec.get("year_inferred", "false").strip().lower()
        if inferred not in ("true", "false"):
            raise LedgerError("expected true or false", code, "year_inferred")
        out.append(BenchmarkRecord(
            study_code=code,
            q_rtf=_number(sec["q_rtf"], code, "q_rtf"),
            e_syn=None if e in ("--", "") else _number(e, code, "e_syn_uJ"),
            simulator=sec["simulator"].strip(),
            nodes=_number(sec["nodes"], code, "nodes", int),
            system=sec["system"].strip(),
            process_node=_number(sec["process_node_nm"], code, "process_node_nm"),
            external_drive=sec["external_drive"].strip(),
            year=_number(sec["year"], code, "year", int),
            architecture_class=sec.get("architecture_class", "").strip(),
            year_inferred=inferred == "true",
        ))
    return out


def _g(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def export_records(records: Iterable[BenchmarkRecord]) -> str:
    lines = []
    for r in records:
        lines += [
            f"[{r.study_code}]",
            f"q_rtf = {_g(r.q_rtf)}",
            f"e_syn_uJ = {'--' if r.e_syn is None else _g(r.e_syn)}",
            f"simulator = {r.simulator}",
            f"nodes = {r.nodes}",
            f"system = {r.system}",
            f"process_node_nm = {_g(r.process_node)}",
            f"external_drive = {r.external_drive}",
            f"year = {r.year}",
            f"year_inferred = {'true' if r.year_inferred else 'false'}",
            f"architecture_class = {r.architecture_class}",
            "",
        ]
    return "\n".join(lines)


def load_ledger(path: str | Path) -> list[BenchmarkRecord]:
    return import_records(Path(path).read_text(encoding="utf-8"))


def save_ledger(records: Iterable[BenchmarkRecord], path: str | Path) -> None:
    Path(path).write_text(export_records(records), encoding="utf-8")


def shipped_ledger_path() -> Path:
    return Path(str(resources.files("pd14bench.data").joinpath("table1.ledger")))


def shipped_records() -> list[BenchmarkRecord]:
    return load_ledger(shipped_ledger_path())


def add_record(records: Sequence[BenchmarkRecord], record: BenchmarkRecord) -> list[BenchmarkRecord]:
    if any(r.study_code == record.study_code for r in records):
        raise LedgerError("duplicate study code", record.study_code)
    return [*records, record]


def fit_fixed_slope(points: Iterable[tuple[float, float]], slope: float) -> float:
    """Least-squares log10 intercept of ``log10 y = slope * log10 x + b``."""
    pts = np.asarray(list(points), dtype=float).reshape(-1, 2)
    if pts.shape[0] < 1:
        raise LedgerError("need at least one point to fit")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise LedgerError("fit coordinates must be positive")
    return float(np.mean(np.log10(pts[:, 1]) - slope * np.log10(pts[:, 0])))


# ---------------------------------------------------------------------------
# figure


@dataclass(frozen=True)
class PanelData:
    name: str
    x_label: str
    y_label: str
    codes: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    classes: tuple[str, ...]
    simulators: tuple[str, ...]
    fit_slope: float | None = None
    fit_intercept: float | None = None
    fit_codes: tuple[str, ...] = ()


def panel_data(records: Sequence[BenchmarkRecord]) -> dict[str, PanelData]:
    def make(name, xl, subset, xf, slope=None, fit_sel=None):
        rs = [r for r in records if subset(r)]
        x = np.array([xf(r) for r in rs], dtype=float)
        y = np.array([r.q_rtf for r in rs], dtype=float)
        icpt, fit_codes = None, ()
        if slope is not None:
            sel = [r for r in rs if fit_sel(r)]
            if sel:
                icpt = fit_fixed_slope([(xf(r), r.q_rtf) for r in sel], slope)
                fit_codes = tuple(r.study_code for r in sel)
        return PanelData(name, xl, "q_RTF", tuple(r.study_code for r in rs), x, y,
                         tuple(r.architecture_class for r in rs), tuple(r.simulator for r in rs),
                         slope, icpt, fit_codes)

    return {
        "a": make("a", "year", lambda r: True, lambda r: r.year),
        "b": make("b", "E_syn (uJ)", lambda r: r.e_syn is not None, lambda r: r.e_syn,
                  slope=1.0, fit_sel=lambda r: True),
        "c": make("c", "process node (nm)", lambda r: True, lambda r: r.process_node,
                  slope=2.0, fit_sel=lambda r: r.architecture_class in ("CPU", "GPU")),
    }


@dataclass(frozen=True)
class FigureOutput:
    figure: Path
    tables: dict[str, Path]
    marker_counts: dict[str, int]
    panels: dict[str, PanelData]


def _marker(sim: str, order: list[str]) -> str:
    if sim in SIMULATOR_MARKER:
        return SIMULATOR_MARKER[sim]
    if sim not in order:
        order.append(sim)
    return FALLBACK_MARKERS[order.index(sim) % len(FALLBACK_MARKERS)]


def render_performance_figure(records: Sequence[BenchmarkRecord], out_dir: str | Path,
                              stem: str = "performance") -> FigureOutput:
    """Write ``<stem>.svg`` (panels a-c) and one TSV per panel with every plotted point."""
    if not records:
        raise LedgerError("no records to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.lines import Line2D

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = panel_data(records)
    extra: list[str] = []
    fig, axes = plt.subplots(1, 3, figsize=(13, 4.2))
    counts = {}
    for ax, key in zip(axes, "abc"):
        pd = panels[key]
        for code, x, y, cls, sim in zip(pd.codes, pd.x, pd.y, pd.classes, pd.simulators):
            ax.scatter([x], [y], marker=_marker(sim, extra), color=CLASS_COLOR[cls],
                       s=40, zorder=3, label="_point", gid=f"point-{key}-{code}")
            ax.annotate(code, (x, y), fontsize=6, xytext=(3, 3), textcoords="offset points")
        counts[key] = len(pd.codes)
        ax.set_yscale("log")
        ax.set_xlabel(pd.x_label)
        ax.set_ylabel(pd.y_label)
        if key == "a":
            ax.axhline(1.0, color="k", lw=0.8, ls=":")
        else:
            ax.set_xscale("log")
        if pd.fit_intercept is not None and len(pd.x):
            lo, hi = pd.x.min(), pd.x.max()
            if lo == hi:
                lo, hi = lo / 2, hi * 2
            xs = np.geomspace(lo / 1.5, hi * 1.5, 50)
            ax.plot(xs, 10 ** pd.fit_intercept * xs ** pd.fit_slope, "k--", lw=0.9)
        ax.set_title(key, loc="left", fontweight="bold")
    handles = [Line2D([], [], ls="", marker="o", color=c, label=k)
               for k, c in CLASS_COLOR.items() if any(k in p.classes for p in panels.values())]
    sims = sorted({s for p in panels.values() for s in p.simulators})
    handles += [Line2D([], [], ls="", marker=_marker(s, extra), color="k", label=s) for s in sims]
    fig.legend(handles=handles, loc="lower center", ncol=min(len(handles), 8), fontsize=7,
               frameon=False)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    fig_path = out / f"{stem}.svg"
    fig.savefig(fig_path, format="svg")
    plt.close(fig)

    tables = {}
    for key, pd in panels.items():
        path = out / f"{stem}_panel_{key}.tsv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            if pd.fit_intercept is not None:
                fh.write(f"# fit: log10(q_RTF) = {pd.fit_slope!r} * log10(x) + {pd.fit_intercept!r}"
                         f" over {','.join(pd.fit_codes)}\n")
            w.writerow(["study_code", "x", "q_rtf", "architecture_class", "simulator"])
            for row in zip(pd.codes, pd.x.tolist(), pd.y.tolist(), pd.classes, pd.simulators):
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3], row[4]])
        tables[key] = path
    return FigureOutput(fig_path, tables, counts, panels)


def read_panel_table(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(rows, delimiter="\t"))


def record_from_run(code: str, q_rtf: float, e_syn_uj: float | None, system: str,
                    process_node: float, drive: str, year: int, nodes: int = 1,
                    simulator: str = "pd14bench") -> BenchmarkRecord:
    """Build a record for this harness's own measurement."""
    return BenchmarkRecord(code, q_rtf, e_syn_uj, simulator, nodes, system, process_node,
                           "DC" if drive.lower() == "dc" else "Poisson", year,
                           architecture_class="CPU")


__all__ = [
    "BenchmarkRecord", "LedgerError", "import_records", "export_records", "load_ledger",
    "save_ledger", "shipped_records", "shipped_ledger_path", "add_record", "fit_fixed_slope",
    "panel_data", "render_performance_figure", "read_panel_table", "record_from_run",
]
