"""TOML scenario files.

Physical quantities carry their unit in the key name (``fc_hz``,
``p_tx_sensing_dbm``, ``r_tx_t_m``). Unknown keys are rejected so typos do
not silently fall back to defaults. Errors name the dotted field and, when
it can be located, the line in the file.
"""

from __future__ import annotations

import cmath
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import defaults
from .channel import LinkBudget, PropagationPath, SyncOffsets
from .impairments import NoisePsdSpec, PaModel, QuantizerSpec, rapp_lut
from .ofdm import PilotGrid, PreambleSpec, SystemConfig
from .radar import TddPattern, WindowSpec
from .scenario import Impairments, PnConfig, Processing, Scenario, SjConfig
from .units import dbm_to_w


class ConfigError(ValueError):
    def __init__(self, msg: str, field: str | None = None, line: int | None = None):
        where = ""
        if field:
            where += f"{field}: "
        if line:
            where = f"line {line}: " + where
        super().__init__(where + msg)
        self.field = field
        self.line = line


class _Table:
    """Typed, consumption-tracked view of one TOML table."""

    def __init__(self, data: dict, prefix: str, doc: "_Doc"):
        self.data = dict(data)
        self.prefix = prefix
        self.doc = doc
        self.used: set[str] = set()

    def _name(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def err(self, key: str, msg: str) -> ConfigError:
        return ConfigError(msg, self._name(key), self.doc.line_of(self.prefix, key))

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, kind, default=..., check=None):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError("required field is missing", self._name(key), self.doc.line_of(self.prefix, None))
            return default
        v = self.data[key]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is not None and not isinstance(v, kind) or (kind in (int, float) and isinstance(v, bool)):
            raise self.err(key, f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
        if check is not None:
            msg = check(v)
            if msg:
                raise self.err(key, msg)
        return v

    def sub(self, key: str, required: bool = False) -> "_Table | None":
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigError("required table is missing", self._name(key))
            return None
        v = self.data[key]
        if not isinstance(v, dict):
            raise self.err(key, "expected a table")
        return _Table(v, self._name(key), self.doc)

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise self.err(extra[0], "unknown field")


@dataclass
class _Doc:
    text: str
    base_dir: Path

    def line_of(self, table: str, key: str | None) -> int | None:
        lines = self.text.splitlines()
        header = None
        if table:
            pat = re.compile(r"^\s*\[\[?\s*" + re.escape(table.split("[")[0]) + r"\s*\]\]?")
            header = next((i for i, ln in enumerate(lines) if pat.match(ln)), None)
        if key is None:
            return None if header is None else header + 1
        start = 0 if header is None else header + 1
        kp = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        for i in range(start, len(lines)):
            if header is not None and i > start and lines[i].lstrip().startswith("["):
                break
            if kp.match(lines[i]):
                return i + 1
        return None


def _pos(v):
    return None if v > 0 else "must be > 0"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


@dataclass
class ScenarioFile:
    """Everything a scenario file can carry, beyond the simulation itself."""

    scenario: Scenario | None
    system: SystemConfig
    budget: LinkBudget
    budget_plot: dict | None = None
    sync_eval: dict | None = None
    outputs: dict = field(default_factory=dict)
    check: dict = field(default_factory=dict)
    adc_fs_hz: float | None = None
    path: Path | None = None


def _wrap(t: _Table, key: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), t._name(key) if key else t.prefix, t.doc.line_of(t.prefix, key)) from exc


def _system(t: _Table) -> SystemConfig:
    pilots = PilotGrid()
    pt = t.sub("pilots")
    if pt is not None:
        pilots = _wrap(pt, "", lambda: PilotGrid(pt.get("freq_comb", int, 4), pt.get("time_comb", int, 4)))
        pt.finish()
    preamble = PreambleSpec()
    pr = t.sub("preamble")
    if pr is not None:
        if not pr.get("enabled", bool, True):
            preamble = None
        else:
            preamble = _wrap(pr, "n_repeats", lambda: PreambleSpec(pr.get("n_repeats", int, 2)))
        pr.finish()
    kw = dict(
        fc_hz=t.get("fc_hz", float, check=_pos),
        delta_f_hz=t.get("delta_f_hz", float, check=_pos),
        n_subcarriers=t.get("n_subcarriers", int, check=_pos),
        n_cp=t.get("n_cp", int, check=_nonneg),
        m_symbols=t.get("m_symbols", int, check=_pos),
        alphabet=t.get("alphabet", str, "qpsk"),
        oversampling=t.get("oversampling", int, 1, check=_pos),
        pilots=pilots,
        preamble=preamble,
    )
    t.finish()
    return _wrap(t, "", lambda: SystemConfig(**kw))


def _link(t: _Table | None) -> LinkBudget:
    if t is None:
        return LinkBudget()
    d = LinkBudget()
    kw = dict(
        p_tx_sensing_dbm=t.get("p_tx_sensing_dbm", float, d.p_tx_sensing_dbm),
        p_tx_reference_dbm=t.get("p_tx_reference_dbm", float, d.p_tx_reference_dbm),
        g_tx_dbi=t.get("g_tx_dbi", float, d.g_tx_dbi),
        g_rx_dbi=t.get("g_rx_dbi", float, d.g_rx_dbi),
        nf_db=t.get("nf_db", float, d.nf_db),
        temp_k=t.get("temp_k", float, d.temp_k, check=_pos),
        sinr_min_db=t.get("sinr_min_db", float, d.sinr_min_db),
        i_hw_db_rel_awgn=t.get("i_hw_db_rel_awgn", float, None),
        p_tx_total_dbm=t.get("p_tx_total_dbm", float, None),
    )
    t.finish()
    return _wrap(t, "", lambda: LinkBudget(**kw))


def _paths(doc: _Doc, raw) -> tuple[PropagationPath, ...]:
    if not isinstance(raw, list):
        raise ConfigError("expected an array of tables [[paths]]", "paths")
    out = []
    for i, item in enumerate(raw):
        t = _Table(item, f"paths[{i}]", doc)
        power = t.get("power_dbm", float, None)
        phase = t.get("phase_rad", float, None)
        gain = None
        if power is not None:
            gain = dbm_to_w(power) ** 0.5 * cmath.exp(1j * (phase or 0.0))
        kw = dict(
            r_tx_t_m=t.get("r_tx_t_m", float, check=_pos),
            r_t_rx_m=t.get("r_t_rx_m", float, check=_pos),
            doppler_hz=t.get("doppler_hz", float, 0.0),
            rcs_m2=t.get("rcs_m2", float, None, check=_pos),
            is_reference=t.get("reference", bool, False),
            explicit_gain=gain,
            phase_rad=phase,
            doppler_tx_t_hz=t.get("doppler_tx_t_hz", float, None),
            doppler_t_rx_hz=t.get("doppler_t_rx_hz", float, None),
        )
        t.finish()
        out.append(_wrap(t, "", lambda: PropagationPath(**kw)))
    return tuple(out)


def _offsets(t: _Table | None, system: SystemConfig) -> SyncOffsets:
    if t is None:
        return SyncOffsets()
    sto = t.get("sto_s", float, 0.0)
    sto += t.get("sto_samples", float, 0.0) / system.sample_rate_hz
    kw = dict(sto_s=sto, cfo_hz=t.get("cfo_hz", float, 0.0), sfo_frac=t.get("sfo_ppm", float, 0.0) * 1e-6)
    t.finish()
    return _wrap(t, "", lambda: SyncOffsets(**kw))


def _psd(t: _Table, default_fn) -> NoisePsdSpec:
    base = default_fn()
    f_min = t.get("f_min_hz", float, base.f_min, check=_pos)
    f_max = t.get("f_max_hz", float, base.f_max, check=_pos)
    if t.has("psd_file") and t.has("anchors"):
        raise t.err("psd_file", "give either psd_file or anchors, not both")
    if t.has("psd_file"):
        p = t.doc.base_dir / t.get("psd_file", str)
        if not p.exists():
            raise t.err("psd_file", f"file not found: {p}")
        psd = _wrap(t, "psd_file", lambda: NoisePsdSpec.from_csv(p, f_min, f_max))
    elif t.has("anchors"):
        a = t.get("anchors", list)
        psd = _wrap(t, "anchors", lambda: NoisePsdSpec(tuple(tuple(x) for x in a), f_min, f_max))
    else:
        psd = _wrap(t, "f_min_hz", lambda: NoisePsdSpec(base.anchors, f_min, f_max))
    target = t.get("integrated_dbc", float, None)
    if target is not None:
        psd = psd.calibrated(target)
    return psd


def _impairments(t: _Table | None) -> tuple[Impairments, float | None]:
    if t is None:
        return Impairments(), None
    pa = pn = adc = sj = None
    adc_fs = None
    s = t.sub("pa")
    if s is not None and not s.get("enabled", bool, True):
        s.used |= set(s.data)
    elif s is not None:
        ibo = s.get("ibo_db", float, defaults.PA_IBO_DB, check=_nonneg)
        if s.has("lut_file"):
            p = t.doc.base_dir / s.get("lut_file", str)
            if not p.exists():
                raise s.err("lut_file", f"file not found: {p}")
            pa = _wrap(s, "lut_file", lambda: PaModel.from_csv(p, ibo))
        else:
            sm = s.get("smoothness", float, defaults.PA_SMOOTHNESS, check=_pos)
            pa = PaModel(rapp_lut(sm), ibo)
    if s is not None:
        s.finish()
    s = t.sub("pn")
    if s is not None:
        if s.get("enabled", bool, True):
            pn = PnConfig(_psd(s, defaults.default_pn_psd), s.get("tx", bool, True), s.get("rx", bool, True))
        else:
            s.used |= set(s.data)
        s.finish()
    s = t.sub("adc")
    if s is not None:
        if s.get("enabled", bool, True):
            adc = _wrap(
                s,
                "n_bits",
                lambda: QuantizerSpec(
                    s.get("n_bits", int, 12),
                    s.get("full_scale", float, None),
                    s.get("headroom_db", float, 20.0),
                ),
            )
            adc_fs = s.get("fs_hz", float, None, check=_pos)
        else:
            s.used |= set(s.data)
        s.finish()
    s = t.sub("sj")
    if s is not None:
        if s.get("enabled", bool, True):
            sj = SjConfig(
                _psd(s, defaults.default_sj_psd),
                s.get("rms_s", float, defaults.SJ_RMS_S, check=_nonneg),
                s.get("dac", bool, True),
                s.get("adc", bool, True),
            )
        else:
            s.used |= set(s.data)
        s.finish()
    hw = Impairments(pa, pn, adc, sj, t.get("awgn", bool, False), t.get("snr_db", float, None))
    t.finish()
    return hw, adc_fs


def _processing(t: _Table | None) -> Processing:
    if t is None:
        return Processing()
    fam = t.get("window", str, "chebyshev")
    win = _wrap(t, "window", lambda: WindowSpec(fam, t.get("sidelobe_db", float, 100.0)))
    margin = t.get("margin_bins", list, [4, 4])
    if len(margin) != 2 or not all(isinstance(v, int) and v >= 0 for v in margin):
        raise t.err("margin_bins", "expected two non-negative integers")
    kw = dict(
        mode=t.get("mode", str, "genie"),
        sync=t.get("sync", str, "ideal"),
        window=win,
        pad_r=t.get("pad_r", int, 1, check=_pos),
        pad_d=t.get("pad_d", int, 1, check=_pos),
        margin=tuple(margin),
        mean_mode=t.get("mean_mode", str, "magnitude", check=lambda v: None if v in ("magnitude", "power") else "must be magnitude or power"),
        cpe_compensate=t.get("cpe_compensate", bool, False),
        psf_subtract=t.get("psf_subtract", bool, False),
        min_sinr_db=t.get("min_sinr_db", float, 17.0),
        group_symbols=t.get("group_symbols", int, 32, check=_pos),
        search_window=t.get("search_window_samples", int, 64, check=_pos),
        pplr=t.get("pplr", bool, True),
    )
    t.finish()
    return _wrap(t, "", lambda: Processing(**kw))


def _budget_plot(t: _Table | None) -> dict | None:
    if t is None:
        return None
    rcs = t.get("rcs_m2", dict, {})
    for k, v in rcs.items():
        if not isinstance(v, (int, float)) or v <= 0:
            raise t.err("rcs_m2", f"RCS of {k!r} must be a positive number")
    out = dict(
        rcs_m2={k: float(v) for k, v in rcs.items()},
        rho_min_m=t.get("rho_min_m", float, 10.0, check=_pos),
        rho_max_m=t.get("rho_max_m", float, 1e5, check=_pos),
        n_points=t.get("n_points", int, 401, check=lambda v: None if v >= 2 else "must be >= 2"),
        mean_sir_db=t.get("mean_sir_db", float),
        min_sir_db=t.get("min_sir_db", float),
        pplr_db=t.get("pplr_db", float, 0.0),
        r0_m=t.get("r0_m", float, None, check=_pos),
    )
    if out["rho_max_m"] <= out["rho_min_m"]:
        raise t.err("rho_max_m", "must exceed rho_min_m")
    t.finish()
    return out


def _sync_eval(t: _Table | None) -> dict | None:
    if t is None:
        return None

    def grid(key, default):
        v = t.get(key, list, default)
        if not v or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            raise t.err(key, "expected a non-empty list of numbers")
        return [float(x) for x in v]

    out = dict(
        sto_samples=grid("sto_samples", [0.0]),
        cfo_hz=grid("cfo_hz", [0.0]),
        sfo_ppm=grid("sfo_ppm", [0.0]),
        snr_db=t.get("snr_db", float, 25.0),
        window=t.get("window", str, "rectangular"),
    )
    t.finish()
    return out


def _check(t: _Table | None) -> dict:
    if t is None:
        return {}
    out = {}
    for key in list(t.data):
        s = t.sub(key)
        spec = {}
        for k in ("value", "tol", "rel_tol", "min", "max"):
            if s.has(k):
                spec[k] = s.get(k, float)
        if "value" in spec and "tol" not in spec and "rel_tol" not in spec:
            raise s.err("value", "needs tol or rel_tol")
        if not spec:
            raise s.err("value", "check needs value+tol, value+rel_tol, min or max")
        s.finish()
        out[key] = spec
    return out


def load(path: str | Path) -> ScenarioFile:
    """Parse and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None) from exc
    return from_dict(raw, _Doc(text, path.parent), path)


def from_dict(raw: dict, doc: _Doc | None = None, path: Path | None = None) -> ScenarioFile:
    doc = doc or _Doc("", Path("."))
    top = _Table(raw, "", doc)
    name = top.get("name", str, path.stem if path else "scenario")
    system = _system(top.sub("system", required=True))
    budget = _link(top.sub("link"))
    offsets = _offsets(top.sub("offsets"), system)
    hw, adc_fs = _impairments(top.sub("impairments"))
    tdd = None
    tt = top.sub("tdd")
    if tt is not None:
        tdd = _wrap(
            tt,
            "",
            lambda: TddPattern(tt.get("period_symbols", int), tt.get("dl_symbols", int), tt.get("mode", str, "blank_ul")),
        )
        tt.finish()
    proc = _processing(top.sub("processing"))
    mc = top.sub("monte_carlo")
    runs, seed = 1, 0
    if mc is not None:
        runs = mc.get("runs", int, 1, check=lambda v: None if v >= 1 else "must be >= 1")
        seed = mc.get("seed", int, 0, check=_nonneg)
        mc.finish()
    outputs = {"periodogram": True, "peaks": True}
    ot = top.sub("outputs")
    if ot is not None:
        outputs = {"periodogram": ot.get("periodogram", bool, True), "peaks": ot.get("peaks", bool, True)}
        ot.finish()
    budget_plot = _budget_plot(top.sub("budget"))
    sync_eval = _sync_eval(top.sub("sync_eval"))
    check = _check(top.sub("check"))

    scenario = None
    top.used.add("paths")
    if "paths" in raw:
        paths = _paths(doc, raw["paths"])
        try:
            scenario = Scenario(
                system.with_(seed=seed), paths, budget, offsets, hw, tdd, proc, runs, seed, name
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "paths" if "reference" in str(exc) else None) from exc
    top.finish()
    return ScenarioFile(scenario, system, budget, budget_plot, sync_eval, outputs, check, adc_fs, path)
