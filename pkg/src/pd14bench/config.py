"""Declarative model description: parsing, validation, serialization, downscaling.

Configuration grammar
---------------------
An INI-style document (``configparser`` syntax, case preserved, ``#``/``;``
comments).  Physical quantities carry their unit as a key suffix.

``[populations]``
    ``<name> = <size>`` for every population, in network order.
``[neuron_params.<name>]``
    ``C_m_pF``, ``tau_m_ms``, ``tau_syn_ms``, ``E_L_mV``, ``V_reset_mV``,
    ``V_th_mV``, ``t_ref_ms``.  A population uses the section named after it
    if present, otherwise ``[neuron_params.default]``.
``[connectivity.<source>.<target>]``
    ``synapse_count`` and/or ``in_degree``; ``weight_mean_pA``,
    ``weight_sd_pA``, ``delay_mean_ms``, ``delay_sd_ms``, ``autapses`` and
    ``multapses`` (``allow``/``forbid``).  Missing pairs carry no synapses.
``[drive]``
    ``mode`` (``dc``/``poisson``), ``base_rate_Hz``, ``external_weight_pA``.
``[drive.<population>]``
    ``external_in_degree`` and optionally ``dc_current_pA``.
``[plan]``
    ``timestep_ms``, ``warmup_ms``, ``t_model_ms``, ``master_seed``,
    ``n_seeds``, ``record_spikes``, ``initial_condition_mode``,
    ``connectivity_mode``, ``weight_mode``.
``[initial_conditions.original]``
    ``V_mean_mV``, ``V_sd_mV``.
``[initial_conditions.amended]``
    ``<population>.V_mean_mV``, ``<population>.V_sd_mV`` per population.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

PD14_POPULATIONS = ("L2/3E", "L2/3I", "L4E", "L4I", "L5E", "L5I", "L6E", "L6I")

DRIVE_MODES = ("dc", "poisson")
IC_MODES = ("original", "amended")
CONNECTIVITY_MODES = ("materialized", "procedural")
WEIGHT_MODES = ("distributed", "collapsed")

_NEURON_KEYS = {
    "C_m_pF": "membrane_capacitance",
    "tau_m_ms": "membrane_time_constant",
    "tau_syn_ms": "synaptic_time_constant",
    "E_L_mV": "resting_potential",
    "V_reset_mV": "reset_potential",
    "V_th_mV": "threshold_potential",
    "t_ref_ms": "refractory_period",
}


class ModelConfigError(ValueError):
    pass


class ConfigSyntaxError(ModelConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"syntax error{where}: {message}")


class MissingKeyError(ModelConfigError):
    def __init__(self, section: str, key: str):
        self.section = section
        self.key = key
        super().__init__(f"missing required key '{key}' in [{section}]")


class InvariantViolation(ModelConfigError):
    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        lines = "; ".join(str(v) for v in violations)
        super().__init__(f"invariant violation: {lines}")


@dataclass(frozen=True)
class Violation:
    path: str
    invariant: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.invariant}: {self.message}"


@dataclass(frozen=True)
class NeuronParams:
    membrane_capacitance: float
    membrane_time_constant: float
    synaptic_time_constant: float
    resting_potential: float
    reset_potential: float
    threshold_potential: float
    refractory_period: float


@dataclass(frozen=True)
class ConnectivitySpec:
    synapse_count: int | None = None
    in_degree: float | None = None
    weight_mean: float = 0.0
    weight_sd: float = 0.0
    delay_mean: float = 1.0
    delay_sd: float = 0.0
    autapses: bool = True
    multapses: bool = True

    def total(self, target_size: int) -> int:
        if self.synapse_count is not None:
            return self.synapse_count
        if self.in_degree is None:
            return 0
        return round(self.in_degree * target_size)


@dataclass(frozen=True)
class ExternalDriveSpec:
    mode: str = "dc"
    base_rate: float = 0.0
    external_weight: float = 0.0
    in_degree: Mapping[str, float] = field(default_factory=dict)
    dc_current: Mapping[str, float] = field(default_factory=dict)

    def rate_per_neuron(self, pop: str) -> float:
        return self.base_rate * self.in_degree.get(pop, 0.0)


@dataclass(frozen=True)
class PopulationSpec:
    name: str
    size: int
    neuron_params: str


@dataclass(frozen=True)
class SimulationPlan:
    t_model: float
    timestep: float = 0.1
    t_warmup: float = 500.0
    master_seed: int = 55
    n_seeds: int = 10
    record_spikes: bool = True
    initial_condition_mode: str = "amended"
    connectivity_mode: str = "materialized"
    weight_mode: str = "distributed"


@dataclass(frozen=True)
class InitialConditionSpec:
    mode: str
    mean: Mapping[str, float]
    sd: Mapping[str, float]


_PLAN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(SimulationPlan)
                  if f.default is not dataclasses.MISSING}


@dataclass(frozen=True)
class ModelSpec:
    populations: tuple[PopulationSpec, ...]
    neuron_params: Mapping[str, NeuronParams]
    connectivity: Mapping[tuple[str, str], ConnectivitySpec]
    drive: ExternalDriveSpec
    plan: SimulationPlan
    initial_conditions: Mapping[str, InitialConditionSpec]
    provenance: Mapping[str, object] = field(default_factory=dict, compare=False)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.populations)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(p.size for p in self.populations)

    @property
    def n_neurons(self) -> int:
        return sum(self.sizes)

    def population(self, name: str) -> PopulationSpec:
        for p in self.populations:
            if p.name == name:
                return p
        raise KeyError(name)

    def params_of(self, name: str) -> NeuronParams:
        return self.neuron_params[self.population(name).neuron_params]

    def synapse_count(self, source: str, target: str) -> int:
        conn = self.connectivity.get((source, target))
        if conn is None:
            return 0
        return conn.total(self.population(target).size)

    def with_plan(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, plan=dataclasses.replace(self.plan, **changes))

    def with_drive_mode(self, mode: str) -> "ModelSpec":
        return dataclasses.replace(self, drive=dataclasses.replace(self.drive, mode=mode))

    def digest(self) -> str:
        bare = dataclasses.replace(self, provenance={})
        return hashlib.sha256(serialize_model_config(bare).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing


def _bool(value: str, path: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ModelConfigError(f"{path}: expected boolean, got {value!r}")


def _policy(value: str, path: str) -> bool:
    v = value.strip().lower()
    if v == "allow":
        return True
    if v == "forbid":
        return False
    raise ModelConfigError(f"{path}: expected allow/forbid, got {value!r}")


def _num(value: str, path: str, kind=float):
    try:
        if kind is int:
            try:
                return int(value)
            except ValueError:
                f = float(value)
                if not f.is_integer():
                    raise
                return int(f)
        return float(value)
    except ValueError:
        raise ModelConfigError(f"{path}: expected {kind.__name__}, got {value!r}") from None


class _Reader:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp
        self.defaults: list[str] = []

    def req(self, section, key, kind=float):
        if not self.cp.has_option(section, key):
            raise MissingKeyError(section, key)
        return _num(self.cp.get(section, key), f"{section}.{key}", kind)

    def opt(self, section, key, default, kind=float, record=True):
        if self.cp.has_section(section) and self.cp.has_option(section, key):
            raw = self.cp.get(section, key)
            path = f"{section}.{key}"
            if kind is bool:
                return _bool(raw, path)
            if kind is str:
                return raw.strip()
            return _num(raw, path, kind)
        if record:
            self.defaults.append(f"{section}.{key}")
        return default


def _read_document(source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   strict=True, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigSyntaxError("key outside of a section", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigSyntaxError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigSyntaxError(f"duplicate key '{exc.option}' in [{exc.section}]",
                                exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigSyntaxError("malformed line", line) from None
    return cp


def parse_model_config(source: str, *, validate: bool = True) -> ModelSpec:
    """Parse a configuration document into a :class:`ModelSpec`.

    Defaults that had to be filled in are listed in
    ``spec.provenance["defaults_applied"]``.  Raises :class:`ConfigSyntaxError`,
    :class:`MissingKeyError` or :class:`InvariantViolation`.
    """
    cp = _read_document(source)
    rd = _Reader(cp)
    header = [ln[1:].strip() for ln in source.splitlines() if ln.startswith("#")]

    if not cp.has_section("populations") or not cp.options("populations"):
        raise MissingKeyError("populations", "<population> = <size>")
    names = list(cp.options("populations"))

    params: dict[str, NeuronParams] = {}
    for sec in cp.sections():
        if sec.startswith("neuron_params."):
            label = sec[len("neuron_params."):]
            values = {attr: rd.req(sec, key) for key, attr in _NEURON_KEYS.items()}
            params[label] = NeuronParams(**values)

    pops = []
    for name in names:
        size = rd.req("populations", name, int)
        ref = name if name in params else "default"
        pops.append(PopulationSpec(name, size, ref))

    conn: dict[tuple[str, str], ConnectivitySpec] = {}
    for sec in cp.sections():
        if not sec.startswith("connectivity."):
            continue
        parts = sec[len("connectivity."):].split(".")
        if len(parts) != 2:
            raise ConfigSyntaxError(f"section [{sec}] must be connectivity.<source>.<target>")
        has_count = cp.has_option(sec, "synapse_count")
        has_k = cp.has_option(sec, "in_degree")
        if not (has_count or has_k):
            raise MissingKeyError(sec, "synapse_count")
        conn[(parts[0], parts[1])] = ConnectivitySpec(
            synapse_count=rd.req(sec, "synapse_count", int) if has_count else None,
            in_degree=rd.req(sec, "in_degree") if has_k else None,
            weight_mean=rd.req(sec, "weight_mean_pA"),
            weight_sd=rd.opt(sec, "weight_sd_pA", 0.0),
            delay_mean=rd.req(sec, "delay_mean_ms"),
            delay_sd=rd.opt(sec, "delay_sd_ms", 0.0),
            autapses=_policy(rd.opt(sec, "autapses", "allow", str), f"{sec}.autapses"),
            multapses=_policy(rd.opt(sec, "multapses", "allow", str), f"{sec}.multapses"),
        )

    base_rate = rd.opt("drive", "base_rate_Hz", 0.0)
    ext_w = rd.opt("drive", "external_weight_pA", 0.0)
    in_deg, dc = {}, {}
    for name in names:
        sec = f"drive.{name}"
        in_deg[name] = rd.opt(sec, "external_in_degree", 0.0)
        if cp.has_section(sec) and cp.has_option(sec, "dc_current_pA"):
            dc[name] = rd.req(sec, "dc_current_pA")
        else:
            p = params.get(pops[names.index(name)].neuron_params)
            tau = p.synaptic_time_constant if p else 0.0
            dc[name] = equivalent_dc(base_rate, in_deg[name], ext_w, tau)
            rd.defaults.append(f"{sec}.dc_current_pA")
    drive = ExternalDriveSpec(
        mode=rd.opt("drive", "mode", "dc", str).lower(),
        base_rate=base_rate, external_weight=ext_w, in_degree=in_deg, dc_current=dc,
    )

    plan_kw = {"t_model": rd.req("plan", "t_model_ms")}
    for key, attr, kind in (
        ("timestep_ms", "timestep", float), ("warmup_ms", "t_warmup", float),
        ("master_seed", "master_seed", int), ("n_seeds", "n_seeds", int),
        ("record_spikes", "record_spikes", bool),
        ("initial_condition_mode", "initial_condition_mode", str),
        ("connectivity_mode", "connectivity_mode", str), ("weight_mode", "weight_mode", str),
    ):
        plan_kw[attr] = rd.opt("plan", key, _PLAN_DEFAULTS[attr], kind)
    plan = SimulationPlan(**plan_kw)

    ics: dict[str, InitialConditionSpec] = {}
    if cp.has_section("initial_conditions.original"):
        sec = "initial_conditions.original"
        m, s = rd.req(sec, "V_mean_mV"), rd.req(sec, "V_sd_mV")
        ics["original"] = InitialConditionSpec("original", {n: m for n in names},
                                               {n: s for n in names})
    if cp.has_section("initial_conditions.amended"):
        sec = "initial_conditions.amended"
        ics["amended"] = InitialConditionSpec(
            "amended",
            {n: rd.req(sec, f"{n}.V_mean_mV") for n in names},
            {n: rd.req(sec, f"{n}.V_sd_mV") for n in names},
        )

    spec = ModelSpec(tuple(pops), params, conn, drive, plan, ics,
                     provenance={"defaults_applied": tuple(rd.defaults),
                                 "header": tuple(header)})
    if validate:
        report = validate_model(spec)
        if report:
            raise InvariantViolation(report)
    return spec


def load_model_config(path: str | Path, **kw) -> ModelSpec:
    return parse_model_config(Path(path).read_text(), **kw)


def canonical_pd14() -> ModelSpec:
    """The full-density PD14 model shipped with the package."""
    text = resources.files("pd14bench.data").joinpath("pd14.ini").read_text()
    return parse_model_config(text)


def canonical_pd14_path() -> Path:
    return Path(str(resources.files("pd14bench.data").joinpath("pd14.ini")))


def equivalent_dc(base_rate_hz: float, in_degree: float, weight_pa: float, tau_syn_ms: float) -> float:
    """Mean current of a Poisson drive through exponential synapses (pA)."""
    return base_rate_hz * in_degree * weight_pa * tau_syn_ms * 1e-3


def psp_to_psc(psp_mv: float, params: NeuronParams) -> float:
    """Current amplitude whose exponential PSC yields a PSP peak of ``psp_mv``."""
    c, tm, ts = (params.membrane_capacitance, params.membrane_time_constant,
                 params.synaptic_time_constant)
    if math.isclose(tm, ts):
        return psp_mv * c * math.e / ts
    t_peak = tm * ts / (tm - ts) * math.log(tm / ts)
    unit = ts * tm / (c * (tm - ts)) * (math.exp(-t_peak / tm) - math.exp(-t_peak / ts))
    return psp_mv / unit


# ---------------------------------------------------------------------------
# validation


def _multiple(x: float, h: float) -> bool:
    q = x / h
    return abs(q - round(q)) < 1e-9 * max(1.0, abs(q))


def validate_model(spec: ModelSpec) -> list[Violation]:
    """Every violated invariant, with a path into the document; empty if valid."""
    out: list[Violation] = []
    add = lambda path, inv, msg: out.append(Violation(path, inv, msg))  # noqa: E731
    h = spec.plan.timestep
    names = spec.names

    if len(set(names)) != len(names):
        add("populations", "PopulationSpec", "duplicate population names")
    for p in spec.populations:
        if p.size < 1:
            add(f"populations.{p.name}", "PopulationSpec", "size must be >= 1")
        if p.neuron_params not in spec.neuron_params:
            add(f"populations.{p.name}", "PopulationSpec",
                f"no [neuron_params.{p.neuron_params}] section")

    for label, prm in spec.neuron_params.items():
        path = f"neuron_params.{label}"
        for attr in ("membrane_capacitance", "membrane_time_constant", "synaptic_time_constant"):
            if not getattr(prm, attr) > 0:
                add(f"{path}.{attr}", "NeuronParams", "must be strictly positive")
        if not prm.threshold_potential > prm.reset_potential:
            add(path, "NeuronParams", "threshold_potential must exceed reset_potential")
        if prm.refractory_period < 0 or (h > 0 and not _multiple(prm.refractory_period, h)):
            add(f"{path}.t_ref_ms", "NeuronParams",
                "refractory period must be a non-negative multiple of the timestep")

    for (src, tgt), c in spec.connectivity.items():
        path = f"connectivity.{src}.{tgt}"
        if src not in names or tgt not in names:
            add(path, "ConnectivitySpec", "unknown population")
            continue
        n_s, n_t = spec.population(src).size, spec.population(tgt).size
        if c.synapse_count is not None and c.synapse_count < 0:
            add(f"{path}.synapse_count", "ConnectivitySpec", "must be non-negative")
        if c.in_degree is not None and c.in_degree < 0:
            add(f"{path}.in_degree", "ConnectivitySpec", "must be non-negative")
        if c.synapse_count is not None and c.in_degree is not None:
            if round(c.in_degree * n_t) != c.synapse_count:
                add(path, "ConnectivitySpec",
                    f"consistency: in_degree x N_target = {c.in_degree * n_t:g} "
                    f"!= synapse_count {c.synapse_count}")
        if c.delay_mean < h - 1e-12:
            add(f"{path}.delay_mean_ms", "ConnectivitySpec", "delay below one timestep")
        if c.weight_sd < 0 or c.delay_sd < 0:
            add(path, "ConnectivitySpec", "standard deviations must be non-negative")
        cells = n_s * n_t - (n_s if (src == tgt and not c.autapses) else 0)
        if not c.multapses and c.total(n_t) > cells:
            add(path, "ConnectivitySpec",
                "infeasible: synapse_count exceeds available pairs with multapses forbidden")

    d = spec.drive
    if d.mode not in DRIVE_MODES:
        add("drive.mode", "ExternalDriveSpec", f"mode must be one of {DRIVE_MODES}")
    if d.base_rate < 0:
        add("drive.base_rate_Hz", "ExternalDriveSpec", "must be non-negative")
    for name in names:
        k = d.in_degree.get(name, 0.0)
        if k < 0:
            add(f"drive.{name}.external_in_degree", "ExternalDriveSpec", "must be non-negative")
        p = spec.neuron_params.get(spec.population(name).neuron_params)
        if p is not None:
            expect = equivalent_dc(d.base_rate, k, d.external_weight, p.synaptic_time_constant)
            got = d.dc_current.get(name, 0.0)
            if not math.isclose(got, expect, rel_tol=1e-6, abs_tol=1e-9):
                add(f"drive.{name}.dc_current_pA", "ExternalDriveSpec",
                    f"DC current {got:g} pA differs from Poisson mean current {expect:g} pA")

    pl = spec.plan
    if not pl.timestep > 0:
        add("plan.timestep_ms", "SimulationPlan", "timestep must be positive")
    else:
        empty = pl.t_model == 0 and pl.t_warmup == 0
        if not (pl.t_model > pl.t_warmup >= 0 or empty):
            add("plan", "SimulationPlan", "require t_model > warmup >= 0")
        for key, val in (("t_model_ms", pl.t_model), ("warmup_ms", pl.t_warmup)):
            if not _multiple(val, h):
                add(f"plan.{key}", "SimulationPlan", "must be a multiple of the timestep")
    if pl.n_seeds < 1:
        add("plan.n_seeds", "SimulationPlan", "n_seeds must be >= 1")
    if not 0 <= pl.master_seed < 2**64:
        add("plan.master_seed", "SimulationPlan", "seed must fit an unsigned 64-bit integer")
    for attr, allowed in (("initial_condition_mode", IC_MODES),
                          ("connectivity_mode", CONNECTIVITY_MODES),
                          ("weight_mode", WEIGHT_MODES)):
        if getattr(pl, attr) not in allowed:
            add(f"plan.{attr}", "SimulationPlan", f"must be one of {allowed}")
    if pl.initial_condition_mode in IC_MODES and pl.initial_condition_mode not in spec.initial_conditions:
        add(f"initial_conditions.{pl.initial_condition_mode}", "InitialConditionSpec",
            "section required by plan.initial_condition_mode")

    for mode, ic in spec.initial_conditions.items():
        path = f"initial_conditions.{mode}"
        if any(v < 0 for v in ic.sd.values()):
            add(path, "InitialConditionSpec", "standard deviations must be >= 0")
        if mode == "original" and (len(set(ic.mean.values())) > 1 or len(set(ic.sd.values())) > 1):
            add(path, "InitialConditionSpec", "original mode uses one global (mean, sd) pair")
    return out


# ---------------------------------------------------------------------------
# serialization


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(float(x))   # plain repr, also for numpy scalars
    return str(x)


def serialize_model_config(spec: ModelSpec) -> str:
    """Write ``spec`` back in the configuration grammar (all values explicit)."""
    buf = io.StringIO()
    for line in spec.provenance.get("header", ()):
        buf.write(f"# {line}\n" if line else "#\n")
    buf.write("\n[populations]\n")
    for p in spec.populations:
        buf.write(f"{p.name} = {p.size}\n")
    for label, prm in spec.neuron_params.items():
        buf.write(f"\n[neuron_params.{label}]\n")
        for key, attr in _NEURON_KEYS.items():
            buf.write(f"{key} = {_fmt(float(getattr(prm, attr)))}\n")
    for (src, tgt), c in spec.connectivity.items():
        buf.write(f"\n[connectivity.{src}.{tgt}]\n")
        if c.synapse_count is not None:
            buf.write(f"synapse_count = {c.synapse_count}\n")
        if c.in_degree is not None:
            buf.write(f"in_degree = {_fmt(float(c.in_degree))}\n")
        buf.write(f"weight_mean_pA = {_fmt(float(c.weight_mean))}\n")
        buf.write(f"weight_sd_pA = {_fmt(float(c.weight_sd))}\n")
        buf.write(f"delay_mean_ms = {_fmt(float(c.delay_mean))}\n")
        buf.write(f"delay_sd_ms = {_fmt(float(c.delay_sd))}\n")
        buf.write(f"autapses = {'allow' if c.autapses else 'forbid'}\n")
        buf.write(f"multapses = {'allow' if c.multapses else 'forbid'}\n")
    d = spec.drive
    buf.write(f"\n[drive]\nmode = {d.mode}\nbase_rate_Hz = {_fmt(float(d.base_rate))}\n")
    buf.write(f"external_weight_pA = {_fmt(float(d.external_weight))}\n")
    for name in spec.names:
        buf.write(f"\n[drive.{name}]\n")
        buf.write(f"external_in_degree = {_fmt(float(d.in_degree.get(name, 0.0)))}\n")
        buf.write(f"dc_current_pA = {_fmt(float(d.dc_current.get(name, 0.0)))}\n")
    pl = spec.plan
    buf.write("\n[plan]\n")
    buf.write(f"timestep_ms = {_fmt(float(pl.timestep))}\n")
    buf.write(f"warmup_ms = {_fmt(float(pl.t_warmup))}\n")
    buf.write(f"t_model_ms = {_fmt(float(pl.t_model))}\n")
    buf.write(f"master_seed = {pl.master_seed}\n")
    buf.write(f"n_seeds = {pl.n_seeds}\n")
    buf.write(f"record_spikes = {_fmt(pl.record_spikes)}\n")
    buf.write(f"initial_condition_mode = {pl.initial_condition_mode}\n")
    buf.write(f"connectivity_mode = {pl.connectivity_mode}\n")
    buf.write(f"weight_mode = {pl.weight_mode}\n")
    if "original" in spec.initial_conditions:
        ic = spec.initial_conditions["original"]
        first = spec.names[0]
        buf.write("\n[initial_conditions.original]\n")
        buf.write(f"V_mean_mV = {_fmt(float(ic.mean[first]))}\n")
        buf.write(f"V_sd_mV = {_fmt(float(ic.sd[first]))}\n")
    if "amended" in spec.initial_conditions:
        ic = spec.initial_conditions["amended"]
        buf.write("\n[initial_conditions.amended]\n")
        for name in spec.names:
            buf.write(f"{name}.V_mean_mV = {_fmt(float(ic.mean[name]))}\n")
            buf.write(f"{name}.V_sd_mV = {_fmt(float(ic.sd[name]))}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# downscaling


def downscale(spec: ModelSpec, factor: float, mode: str = "probability_preserving") -> ModelSpec:
    """Shrink the network while keeping every pairwise connection probability.

    Population sizes are multiplied by ``factor`` (rounded half-to-even, at
    least 1), synapse counts are rescaled by ``N_s' N_t' / (N_s N_t)`` and
    external in-degrees by ``factor``.  The result carries a provenance note:
    downscaled activity is not statistically equivalent to the full network.
    """
    if mode != "probability_preserving":
        raise ValueError(f"unsupported downscaling mode {mode!r}")
    if not 0 < factor <= 1:
        raise ValueError(f"downscaling factor must lie in (0, 1], got {factor}")
    if factor == 1:
        return spec

    new_size = {p.name: max(1, round(p.size * factor)) for p in spec.populations}
    pops = tuple(dataclasses.replace(p, size=new_size[p.name]) for p in spec.populations)
    conn = {}
    for (src, tgt), c in spec.connectivity.items():
        n_s, n_t = spec.population(src).size, spec.population(tgt).size
        ratio = new_size[src] * new_size[tgt] / (n_s * n_t)
        conn[(src, tgt)] = dataclasses.replace(
            c, synapse_count=round(c.total(n_t) * ratio), in_degree=None)
    d = spec.drive
    in_deg = {k: v * factor for k, v in d.in_degree.items()}
    dc = {}
    for name in spec.names:
        tau = spec.params_of(name).synaptic_time_constant
        dc[name] = equivalent_dc(d.base_rate, in_deg.get(name, 0.0), d.external_weight, tau)
    drive = dataclasses.replace(d, in_degree=in_deg, dc_current=dc)
    prov = dict(spec.provenance)
    prov["downscaled"] = {
        "factor": factor,
        "mode": mode,
        "warning": "downscaled network: activity statistics are not equivalent to full scale",
    }
    return dataclasses.replace(spec, populations=pops, connectivity=conn, drive=drive,
                               provenance=prov)
