"""Scenario model and the end-to-end Monte-Carlo chain.

One run: frame -> modulate -> DAC jitter -> PA -> Tx PN -> channel ->
STO/CFO -> Rx PN -> AWGN -> ADC clock (SFO + jitter) -> quantizer ->
synchronization -> channel quotient -> periodogram -> metrics.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import channel as ch
from . import impairments as imp
from . import radar, sync
from .ofdm import IqSequence, SystemConfig, demodulate, generate_frame, hard_demap_remap, modulate


@dataclass(frozen=True)
class PnConfig:
    psd: imp.NoisePsdSpec
    tx: bool = True
    rx: bool = True


@dataclass(frozen=True)
class SjConfig:
    psd: imp.NoisePsdSpec
    rms_s: float = 45e-15
    dac: bool = True
    adc: bool = True


@dataclass(frozen=True)
class Impairments:
    pa: imp.PaModel | None = None
    pn: PnConfig | None = None
    adc: imp.QuantizerSpec | None = None
    sj: SjConfig | None = None
    awgn: bool = False
    snr_db: float | None = None  # per-sample reference SNR; overrides the thermal level

    @property
    def any_hw(self) -> bool:
        return any(v is not None for v in (self.pa, self.pn, self.adc, self.sj))

    def disabled(self) -> "Impairments":
        return Impairments(awgn=self.awgn, snr_db=self.snr_db)


@dataclass(frozen=True)
class Processing:
    mode: str = "genie"  # genie | hard | pilot
    sync: str = "ideal"  # ideal | pipeline
    window: radar.WindowSpec = field(default_factory=radar.WindowSpec)
    pad_r: int = 1
    pad_d: int = 1
    margin: tuple[int, int] = (4, 4)
    mean_mode: str = "magnitude"
    cpe_compensate: bool = False
    psf_subtract: bool = False
    min_sinr_db: float = 17.0
    group_symbols: int = 32
    search_window: int = 64
    pplr: bool = True

    def __post_init__(self):
        if self.mode not in ("genie", "hard", "pilot"):
            raise ValueError(f"processing.mode must be genie, hard or pilot, not {self.mode!r}")
        if self.sync not in ("ideal", "pipeline"):
            raise ValueError(f"processing.sync must be ideal or pipeline, not {self.sync!r}")


@dataclass(frozen=True)
class Scenario:
    system: SystemConfig
    paths: tuple[ch.PropagationPath, ...]
    budget: ch.LinkBudget = field(default_factory=ch.LinkBudget)
    offsets: ch.SyncOffsets = field(default_factory=ch.SyncOffsets)
    impairments: Impairments = field(default_factory=Impairments)
    tdd: radar.TddPattern | None = None
    processing: Processing = field(default_factory=Processing)
    runs: int = 1
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        refs = [p for p in self.paths if p.is_reference]
        if len(refs) != 1:
            raise ValueError(f"a scenario needs exactly one reference path, found {len(refs)}")
        if self.runs < 1:
            raise ValueError("monte_carlo.runs must be >= 1")
        if self.processing.sync == "pipeline" and self.system.preamble is None:
            raise ValueError("pipeline sync needs a preamble")

    @property
    def reference(self) -> ch.PropagationPath:
        return next(p for p in self.paths if p.is_reference)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed, system=self.system.with_(seed=seed))


@dataclass
class RunResult:
    run: int
    ok: bool
    metrics: dict = field(default_factory=dict)
    sync: dict | None = None
    peaks: list = field(default_factory=list)
    error: str | None = None
    periodogram: radar.Periodogram | None = None

    def record(self) -> dict:
        d = asdict(self)
        d.pop("periodogram")
        return d


def _guards(scn: Scenario) -> tuple[int, int]:
    fs = scn.system.sample_rate_hz
    max_delay = max(p.delay_s for p in scn.paths) + scn.offsets.sto_s
    drift = abs(scn.offsets.sfo_frac) * (scn.system.frame_samples + scn.system.preamble_samples)
    lead = 64 + int(math.ceil(drift))
    trail = 64 + int(math.ceil(max_delay * fs + drift))
    return lead, trail


def transmit(scn: Scenario, run: int, hw: Impairments) -> tuple[IqSequence, np.ndarray]:
    cfg = scn.system
    x, _ = generate_frame(cfg, run)
    s = modulate(x, cfg, with_preamble=cfg.preamble is not None)
    if hw.sj is not None and hw.sj.dac:
        tau = imp.jitter_generate(hw.sj.psd, hw.sj.rms_s, len(s), s.sample_rate, scn.seed, "sj_dac", run)
        s = imp.resample_clock(s, 0.0, tau)
    if hw.pa is not None:
        s = imp.pa_apply(s, hw.pa)
    if hw.pn is not None and hw.pn.tx:
        s = imp.pn_apply(s, imp.pn_generate(hw.pn.psd, len(s), s.sample_rate, scn.seed, "pn_tx", run))
    return s, x


def receive(scn: Scenario, s: IqSequence, run: int, hw: Impairments) -> tuple[IqSequence, int]:
    """Propagate and impair; returns the ADC output and the transmit start index."""
    lead, trail = _guards(scn)
    s = s.padded(lead, trail)
    gains = ch.path_gains(scn.paths, scn.budget, scn.system.fc_hz, scn.seed, run)
    y = ch.apply_channel(s, scn.paths, gains)
    y = ch.apply_sync_offsets(y, scn.offsets)
    if hw.pn is not None and hw.pn.rx:
        y = imp.pn_apply(y, imp.pn_generate(hw.pn.psd, len(y), y.sample_rate, scn.seed, "pn_rx", run))
    if hw.awgn or hw.snr_db is not None:
        pw = None
        if hw.snr_db is not None:
            ref_gain = abs(gains[scn.paths.index(scn.reference)]) ** 2
            pw = ref_gain * 10 ** (-hw.snr_db / 10)
        y = ch.add_awgn(y, scn.budget, scn.system.bandwidth_hz, scn.seed, run, power_w=pw)
    tau = None
    if hw.sj is not None and hw.sj.adc:
        tau = imp.jitter_generate(hw.sj.psd, hw.sj.rms_s, len(y), y.sample_rate, scn.seed, "sj_adc", run)
    if scn.offsets.sfo_frac or tau is not None:
        y = imp.resample_clock(y, scn.offsets.sfo_frac, tau)
    if hw.adc is not None:
        # Headroom is referred to the mean power of the signal-bearing part.
        body = y.replace(y.samples[lead : len(y) - trail])
        y = imp.quantize_clip(y, hw.adc.resolve(body))
    return y, lead


def ideal_sync(scn: Scenario, y: IqSequence, lead: int) -> np.ndarray:
    """Remove the known reference delay, STO, CFO and SFO, then demodulate."""
    cfg = scn.system
    s = y
    if scn.offsets.sfo_frac:
        d = scn.offsets.sfo_frac / (1 - scn.offsets.sfo_frac)
        s = s.replace(imp.resample_at(s.samples, np.arange(len(s)) * d))
    off = ch.SyncOffsets(sto_s=scn.offsets.sto_s + scn.reference.delay_s, cfo_hz=scn.offsets.cfo_hz)
    s = ch.remove_sync_offsets(s, off)
    return demodulate(s, lead + cfg.preamble_samples, cfg)


def process(scn: Scenario, y_frame: np.ndarray, x: np.ndarray) -> tuple[radar.Periodogram, radar.PeakList, np.ndarray]:
    cfg, pr = scn.system, scn.processing
    if pr.mode == "pilot":
        if scn.tdd is not None or pr.cpe_compensate or pr.psf_subtract:
            raise ValueError("pilot processing does not support tdd, cpe_compensate or psf_subtract")
        p = radar.pilot_periodogram(y_frame, cfg, pr.window, pr.pad_r, pr.pad_d)
        return p, radar.find_peaks(p, pr.min_sinr_db), None
    x_hat = hard_demap_remap(y_frame, cfg, pr.mode, x_true=x)
    g = radar.channel_quotient(y_frame, x_hat)
    if pr.cpe_compensate:
        g = radar.cpe_compensate(g)
    # patch_dl shortens the frame; the grid spacing stays one symbol.
    gated = radar.tdd_blank(g, scn.tdd) if scn.tdd is not None else g
    p = radar.periodogram(gated, cfg, pr.window, pr.pad_r, pr.pad_d)
    peaks = radar.find_peaks(p, pr.min_sinr_db)
    if pr.psf_subtract and len(peaks):
        cleaned, _ = radar.psf_subtract(g, peaks, scn.tdd, cfg, pr.window, pr.pad_r, pr.pad_d, max_components=1)
        peaks = radar.PeakList(peaks.entries[:1] + list(radar.find_peaks(cleaned, pr.min_sinr_db))[1:], peaks.threshold, peaks.floor)
    return p, peaks, g


def _frame(scn: Scenario, run: int, hw: Impairments):
    s, x = transmit(scn, run, hw)
    y, lead = receive(scn, s, run, hw)
    rep = None
    if scn.processing.sync == "ideal":
        yf = ideal_sync(scn, y, lead)
    else:
        yf, rep = sync.run_pipeline(y, scn.system, scn.processing.group_symbols, scn.processing.search_window)
    return yf, x, rep


def run_once(scn: Scenario, run: int, keep_periodogram: bool = True) -> RunResult:
    """One Monte-Carlo realization; failures are captured, not raised."""
    try:
        yf, x, rep = _frame(scn, run, scn.impairments)
        p, peaks, _ = process(scn, yf, x)
        free = None
        if scn.processing.pplr and scn.impairments.any_hw:
            yf0, x0, _ = _frame(scn, run, scn.impairments.disabled())
            free, _, _ = process(scn, yf0, x0)
        m = radar.measure_metrics(p, free, scn.processing.margin, scn.processing.mean_mode)
        m["peak_bin"] = list(m["peak_bin"])
        return RunResult(
            run,
            True,
            m,
            sync=None if rep is None else asdict(rep),
            peaks=[asdict(q) for q in peaks],
            periodogram=p if keep_periodogram else None,
        )
    except (sync.SyncError, ValueError, ZeroDivisionError) as exc:
        return RunResult(run, False, error=f"{type(exc).__name__}: {exc}")


def _run_worker(args):
    scn, run, keep = args
    return run_once(scn, run, keep)


def run_monte_carlo(scn: Scenario, jobs: int = 1, keep_periodogram: bool = True) -> list[RunResult]:
    """All runs, in run order regardless of ``jobs``."""
    tasks = [(scn, r, keep_periodogram) for r in range(scn.runs)]
    if jobs <= 1 or scn.runs == 1:
        return [_run_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, scn.runs)) as pool:
        return list(pool.map(_run_worker, tasks))


def aggregate(results: list[RunResult]) -> dict:
    """Table-style statistics over successful runs: mean and min of each metric.

    Mean SIRs are averaged in dB across runs; the min SIR also reports the
    worst run.
    """
    ok = [r for r in results if r.ok]
    out = {"runs": len(results), "succeeded": len(ok), "failed": [r.run for r in results if not r.ok]}
    if not ok:
        return out
    for key in ("pplr_db", "mean_sir_db", "min_sir_db"):
        vals = [r.metrics[key] for r in ok if r.metrics.get(key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "min": float(np.min(vals)), "max": float(np.max(vals))}
    return out



def ambiguity_cfo_hz(cfg: SystemConfig) -> float:
    """Unambiguous coarse-CFO range (+-) of the repeated-preamble estimator."""
    return cfg.sample_rate_hz / (2 * cfg.symbol_samples)


def sync_trial(scn: Scenario, run: int, window: radar.WindowSpec = radar.RECT, pad: int = 4) -> dict:
    """Per-stage estimation errors of the sync pipeline for one realization.

    Sample errors are relative to the true (fractional) arrival of the
    reference preamble; the final residuals are the reference peak position
    in the synchronized periodogram, in resolution bins. The periodogram is
    zero-padded by ``pad`` so that the peak interpolation samples the main
    lobe instead of the sinc nulls of an on-bin peak.
    """
    cfg = scn.system
    s, x = transmit(scn, run, scn.impairments)
    y, lead = receive(scn, s, run, scn.impairments)
    fs = cfg.sample_rate_hz
    truth = lead + (scn.reference.delay_s + scn.offsets.sto_s) * fs
    yf, rep = sync.run_pipeline(y, cfg, scn.processing.group_symbols, scn.processing.search_window)
    p = radar.periodogram(radar.channel_quotient(yf, x), cfg, window, pad, pad)
    pk = radar.find_peaks(p, scn.processing.min_sinr_db)
    if not len(pk):
        raise sync.SyncError("fine", "no reference peak in the synchronized periodogram")
    ref = pk.entries[0]
    return {
        "coarse_sto_samples": rep.sto_coarse_samples - truth,
        "coarse_cfo_hz": rep.cfo_coarse_hz - scn.offsets.cfo_hz,
        "sample_sto_samples": rep.frame_start_sample - cfg.preamble_samples - truth,
        "sfo_ppm": (rep.sfo_est_frac - scn.offsets.sfo_frac) * 1e6,
        "final_range_bins": ref.range_bin / pad,
        "final_doppler_bins": (ref.doppler_bin - p.power.shape[1] // 2) / pad,
    }
