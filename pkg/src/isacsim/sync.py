"""Over-the-air receiver synchronization against the static reference path.

Four stages: coarse STO/CFO from the repeated preamble, sample-level STO
from a single preamble symbol, SFO from the drift of pilot-based reference
delay estimates (followed by resampling and re-framing), and a fine
residual delay/CFO correction that puts the reference at zero range and
zero Doppler.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal, stats

from .impairments import resample_at
from .ofdm import IqSequence, SystemConfig, demodulate, preamble_waveform


class SyncError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass
class SyncReport:
    sto_coarse_samples: int = 0
    cfo_coarse_hz: float = 0.0
    frame_start_sample: int = 0
    sfo_est_frac: float = 0.0
    residual_delay_s: float = 0.0
    residual_cfo_hz: float = 0.0
    stages: dict = field(
        default_factory=lambda: {"coarse": "pending", "sample": "pending", "sfo": "pending", "fine": "pending"}
    )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


@dataclass
class DelaySeries:
    times: np.ndarray
    delays: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.delays = np.asarray(self.delays, float)
        self.weights = np.asarray(self.weights, float)
        if not (len(self.times) == len(self.delays) == len(self.weights)):
            raise ValueError("times, delays and weights differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def _xcorr(y: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """c[k] = sum_i y[k + i] conj(ref[i]) for k = 0 .. len(y) - len(ref)."""
    return signal.fftconvolve(y, np.conj(ref[::-1]), mode="valid")


def _energy_windows(y: np.ndarray, length: int) -> np.ndarray:
    e = np.concatenate([[0.0], np.cumsum(np.abs(y) ** 2)])
    return e[length:] - e[:-length]


def coarse_sync(
    y: IqSequence, config: SystemConfig, threshold: float | None = None, n_segments: int = 8
) -> tuple[int, float]:
    """Preamble start and CFO from the repeated preamble.

    The start is the earliest maximum of the normalized cross-correlation
    with the known preamble. The reference is split into ``n_segments``
    pieces whose correlation magnitudes add non-coherently, so a CFO close
    to the ambiguity bound does not null the peak. The CFO is the phase of
    the lag-``L`` autocorrelation across the repeats (unambiguous within
    ``+-1 / (2 L Ts)``).
    """
    if config.preamble is None:
        raise SyncError("coarse", "configuration has no preamble")
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    p = preamble_waveform(config)
    s = y.samples
    if len(s) < len(p):
        raise SyncError("coarse", "buffer shorter than the preamble")
    n_out = len(s) - len(p) + 1
    edges = np.linspace(0, len(p), min(n_segments, len(p)) + 1).astype(int)
    c = np.zeros(n_out)
    for a, b in zip(edges[:-1], edges[1:]):
        c += np.abs(_xcorr(s, p[a:b])[a : a + n_out])
    ew = _energy_windows(s, len(p))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(ew > 0, c / np.sqrt(ew * np.sum(np.abs(p) ** 2)), 0.0)
    k = int(np.flatnonzero(c == c.max())[0])
    # Noise alone reaches about 0.9 sqrt(n_seg / L) on average and twice that at the maximum.
    n_seg = len(edges) - 1
    thr = threshold if threshold is not None else max(0.1, 3.0 * np.sqrt(n_seg / len(p)))
    if rho[k] < thr:
        raise SyncError("coarse", f"no preamble found (normalized correlation {rho[k]:.3f} < {thr:.3f})")
    cfo = preamble_cfo(s, k, config)
    return k, cfo


def preamble_cfo(s: np.ndarray, start: int, config: SystemConfig) -> float:
    lag = config.symbol_samples
    span = (config.preamble.n_repeats - 1) * lag
    a = s[start : start + span]
    b = s[start + lag : start + lag + span]
    acc = np.vdot(b, a)  # sum a * conj(b)
    return float(-np.angle(acc) / (2 * np.pi * lag) * config.sample_rate_hz)


def sample_sync(
    y: IqSequence, config: SystemConfig, coarse_sto: int, cfo_hz: float = 0.0, window: int = 64
) -> int:
    """Refine the preamble start within ``+-window`` samples of the coarse estimate.

    The CFO is removed on that reduced range only, then the range is
    correlated with the first preamble symbol. Returns the frame start
    (first sample after the preamble).
    """
    lsym = config.symbol_samples
    ref = preamble_waveform(config)[:lsym]
    lo = max(coarse_sto - window, 0)
    hi = min(coarse_sto + window + lsym, len(y))
    if hi - lo < lsym:
        raise SyncError("sample", "search range does not hold a preamble symbol")
    seg = y.samples[lo:hi]
    if cfo_hz:
        seg = seg * np.exp(-2j * np.pi * cfo_hz * (y.t0 + np.arange(lo, hi) / y.sample_rate))
    c = np.abs(_xcorr(seg, ref))
    k = lo + int(np.flatnonzero(c == c.max())[0])
    return k + config.preamble_samples


def _pilot_channel(y_frame: np.ndarray, config: SystemConfig, cols: np.ndarray):
    pg = config.pilots
    rows = np.arange(0, config.n_subcarriers, pg.freq_comb)
    h = y_frame[np.ix_(rows, cols)] / config.pilot_values[np.ix_(rows, cols)]
    freqs = (rows - config.n_subcarriers // 2) * config.delta_f_hz
    return h, freqs


def _delay_from_pilots(h: np.ndarray, freqs: np.ndarray) -> tuple[float, float]:
    """Delay (s) of the dominant path from pilot phases vs frequency.

    A lag-one autocorrelation over the comb gives an unambiguous coarse
    slope; a least-squares fit of the derotated phases (per-symbol common
    phase removed) refines it. The weight is the comb coherence in [0, 1].
    """
    df = freqs[1] - freqs[0]
    acc = np.sum(h[1:] * np.conj(h[:-1]))
    denom = np.sum(np.abs(h[1:]) * np.abs(h[:-1]))
    weight = float(abs(acc) / denom) if denom > 0 else 0.0
    tau = -np.angle(acc) / (2 * np.pi * df)
    hd = h * np.exp(2j * np.pi * freqs[:, None] * tau)
    cpe = np.angle(np.sum(hd, axis=0))
    ph = np.angle(hd * np.exp(-1j * cpe)[None, :])
    w = np.abs(hd)
    f_c = freqs - np.average(freqs)
    num = np.sum(w * f_c[:, None] * ph)
    den = np.sum(w * f_c[:, None] ** 2)
    if den > 0:
        tau -= num / den / (2 * np.pi)
    return float(tau), weight


def estimate_delay_series(
    y_frame: np.ndarray, config: SystemConfig, frame_start: int = 0, group_symbols: int = 32, t0: float = 0.0
) -> DelaySeries:
    """One reference-delay estimate per group of ``group_symbols`` symbols.

    Times are the group centers in buffer time (``t0`` + index / fs).
    """
    pg = config.pilots
    pilot_cols = np.arange(0, config.m_symbols, pg.time_comb)
    if len(pilot_cols) == 0:
        raise SyncError("sfo", "no pilot symbols")
    group = max(group_symbols, pg.time_comb)
    times, delays, weights = [], [], []
    for g0 in range(0, config.m_symbols, group):
        cols = pilot_cols[(pilot_cols >= g0) & (pilot_cols < g0 + group)]
        if len(cols) == 0:
            continue
        h, freqs = _pilot_channel(y_frame, config, cols)
        tau, w = _delay_from_pilots(h, freqs)
        centre = frame_start + (cols.mean() + 0.5) * config.symbol_samples
        times.append(t0 + centre / config.sample_rate_hz)
        delays.append(tau)
        weights.append(w)
    return DelaySeries(np.array(times), np.array(delays), np.array(weights))


def robust_line(t: np.ndarray, d: np.ndarray, w: np.ndarray | None = None, n_sigma: float = 3.0, max_iter: int = 20):
    """Line fit with a repeated-medians start and iterative n-sigma trimming.

    Returns ``(slope, intercept, inlier_mask)``.
    """
    t = np.asarray(t, float)
    d = np.asarray(d, float)
    w = np.ones_like(t) if w is None else np.asarray(w, float)
    if len(np.unique(t)) < 2:
        raise ValueError("line fit needs at least two distinct times")
    tc = t - t.mean()
    if len(t) > 2:
        slope, icpt = stats.siegelslopes(d, tc)
    else:
        slope = (d[1] - d[0]) / (tc[1] - tc[0])
        icpt = d[0] - slope * tc[0]
    keep = np.ones(len(t), bool)
    # Floor for the trimming scale on exact data; median-based so outliers cannot widen it.
    scale = max(float(np.median(np.abs(d))), 1e-300)
    for _ in range(max_iter):
        r = d - (slope * tc + icpt)
        mad = np.median(np.abs(r - np.median(r)))
        sigma = max(1.4826 * mad, 1e-12 * scale)
        new_keep = np.abs(r) <= n_sigma * sigma
        if new_keep.sum() < 2 or len(np.unique(t[new_keep])) < 2:
            break
        ww = w[new_keep]
        slope, icpt = np.polyfit(tc[new_keep], d[new_keep], 1, w=np.sqrt(ww))
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    return float(slope), float(icpt - slope * t.mean()), keep


def estimate_sfo(series: DelaySeries) -> float:
    """SFO as the fitted drift rate (s/s) of the reference delay."""
    ok = series.weights > 0
    if ok.sum() < 2:
        raise SyncError("sfo", "fewer than two usable delay estimates")
    try:
        slope, _, _ = robust_line(series.times[ok], series.delays[ok], series.weights[ok])
    except ValueError as exc:
        raise SyncError("sfo", str(exc)) from exc
    return slope


def fine_sync(y_frame: np.ndarray, config: SystemConfig, min_coherence: float = 0.05) -> tuple[float, float]:
    """Residual delay (s) and CFO (Hz) of the reference seen on the pilots."""
    pg = config.pilots
    cols = np.arange(0, config.m_symbols, pg.time_comb)
    h, freqs = _pilot_channel(y_frame, config, cols)
    tau, coh = _delay_from_pilots(h, freqs)
    if coh < min_coherence:
        raise SyncError("fine", f"reference not detected on pilots (coherence {coh:.3f})")
    hd = h * np.exp(2j * np.pi * freqs[:, None] * tau)
    z = hd.sum(axis=0)
    dt = pg.time_comb * config.symbol_duration_s
    if len(cols) < 2:
        return tau, 0.0
    acc = np.sum(z[1:] * np.conj(z[:-1]))
    f = np.angle(acc) / (2 * np.pi * dt)
    zr = z * np.exp(-2j * np.pi * f * cols * config.symbol_duration_s)
    ph = np.unwrap(np.angle(zr))
    t = cols * config.symbol_duration_s
    wts = np.abs(zr)
    slope = np.polyfit(t, ph, 1, w=np.sqrt(wts))[0]
    f += slope / (2 * np.pi)
    return float(tau), float(f)


def apply_residuals(y_frame: np.ndarray, config: SystemConfig, delay_s: float, cfo_hz: float) -> np.ndarray:
    """Remove a residual delay and CFO in the frame domain (inverse: negate both)."""
    n = np.arange(config.n_subcarriers) - config.n_subcarriers // 2
    m = np.arange(config.m_symbols)
    ramp_f = np.exp(2j * np.pi * n * config.delta_f_hz * delay_s)
    ramp_t = np.exp(-2j * np.pi * cfo_hz * m * config.symbol_duration_s)
    return y_frame * ramp_f[:, None] * ramp_t[None, :]


def run_pipeline(
    y: IqSequence,
    config: SystemConfig,
    group_symbols: int = 32,
    search_window: int = 64,
    correct_sfo: bool = True,
    resample_tol: float = 1e-9,
) -> tuple[np.ndarray, SyncReport]:
    """Run all four stages and return the synchronized frame with its report."""
    rep = SyncReport()
    k, cfo = coarse_sync(y, config)
    rep.sto_coarse_samples, rep.cfo_coarse_hz = k, cfo
    rep.stages["coarse"] = "ok"

    start = sample_sync(y, config, k, cfo, search_window)
    if start + config.frame_samples > len(y):
        raise SyncError("sample", "frame extends beyond the received buffer")
    rep.frame_start_sample = start
    rep.stages["sample"] = "ok"

    s = y.samples * np.exp(-2j * np.pi * cfo * y.times)
    frame = demodulate(s, start, config)

    if correct_sfo:
        series = estimate_delay_series(frame, config, start, group_symbols)
        if np.count_nonzero(series.weights > 0) >= 2:
            slope = estimate_sfo(series)
            rep.sfo_est_frac = slope / (1 + slope)
            if slope:
                s = resample_at(s, np.arange(len(s)) * slope, tol=resample_tol)
                frame = demodulate(s, start, config)
            rep.stages["sfo"] = "ok"
        else:
            rep.stages["sfo"] = "skipped: fewer than two delay estimates"
    else:
        rep.stages["sfo"] = "skipped"

    tau, f = fine_sync(frame, config)
    rep.residual_delay_s, rep.residual_cfo_hz = tau, f
    rep.stages["fine"] = "ok"
    return apply_residuals(frame, config, tau, f), rep
