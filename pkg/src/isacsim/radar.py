"""Range-Doppler periodograms, TDD gating, PSF subtraction and peak picking.

Periodogram scaling: a static path of complex gain ``a`` at bin (0, 0)
peaks at ``|a|^2 N M`` whatever the window (coherent-gain normalization).
With rectangular windows a noise bin averages the per-entry noise power of
the channel quotient, i.e. the AWGN power ``k_B B T NF``; a tapered window
raises it by its equivalent noise bandwidth in bins on each axis.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.signal.windows import chebwin

from .ofdm import SystemConfig
from .units import C0


@dataclass(frozen=True)
class WindowSpec:
    family: str = "chebyshev"
    sidelobe_db: float = 100.0

    def __post_init__(self):
        if self.family not in ("rectangular", "chebyshev"):
            raise ValueError(f"unknown window family {self.family!r}")
        if self.family == "chebyshev" and self.sidelobe_db <= 13:
            raise ValueError("chebyshev sidelobe_db must be > 13")

    def taps(self, n: int) -> np.ndarray:
        if self.family == "rectangular" or n == 1:
            return np.ones(n)
        return chebwin(n, self.sidelobe_db)

    def mainlobe_bins(self, n: int) -> float:
        """Peak-to-first-null half-width of the length-``n`` window response, in DFT bins."""
        if self.family == "rectangular" or n < 3:
            return 1.0
        x0 = np.cosh(np.arccosh(10 ** (self.sidelobe_db / 20)) / (n - 1))
        return float(n / np.pi * np.arccos(np.cos(np.pi / (2 * (n - 1))) / x0))

    def enbw_bins(self, n: int) -> float:
        w = self.taps(n)
        return float(n * np.sum(w**2) / np.sum(w) ** 2)


RECT = WindowSpec("rectangular")


@dataclass(frozen=True)
class TddPattern:
    period_symbols: int
    dl_symbols: int
    mode: str = "blank_ul"

    def __post_init__(self):
        if not 0 < self.dl_symbols <= self.period_symbols:
            raise ValueError("need 0 < dl_symbols <= period_symbols")
        if self.mode not in ("blank_ul", "patch_dl"):
            raise ValueError(f"unknown TDD mode {self.mode!r}")

    def mask(self, m: int) -> np.ndarray:
        """True on DL symbols; a trailing partial period follows the same phase."""
        return (np.arange(m) % self.period_symbols) < self.dl_symbols


@dataclass
class Periodogram:
    """Range-Doppler power surface.

    ``power`` is indexed ``[range_bin, doppler_bin]``. Range bins run from
    zero (the reference) upward and wrap; the Doppler axis is centered.
    ``field`` keeps the complex surface before magnitude-squaring.
    """

    power: np.ndarray
    range_axis: np.ndarray
    doppler_axis: np.ndarray
    range_bin_m: float
    doppler_bin_hz: float
    pad: tuple[int, int] = (1, 1)
    field: np.ndarray | None = None
    scaling: str = "peak = |a|^2 N M; rectangular noise bin = per-entry noise power"
    mainlobe_bins: tuple[float, float] = (1.0, 1.0)  # half-widths in padded bins

    def __post_init__(self):
        if self.power.shape != (len(self.range_axis), len(self.doppler_axis)):
            raise ValueError("axis lengths do not match the power matrix")

    @property
    def zero_doppler_col(self) -> int:
        return len(self.doppler_axis) // 2

    def db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10 * np.log10(self.power)


def channel_quotient(y: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    if y.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {x_hat.shape}")
    if np.any(x_hat == 0):
        raise ZeroDivisionError("estimated transmit frame has zero entries")
    return y / x_hat


def _transform(g: np.ndarray, wr: np.ndarray, wd: np.ndarray, pad_r: int, pad_d: int) -> np.ndarray:
    n, m = g.shape
    gw = g * wr[:, None] * wd[None, :]
    # Range: IDFT over subcarriers (unnormalized sum). Doppler: DFT over symbols.
    rp = np.fft.ifft(gw, n=n * pad_r, axis=0) * (n * pad_r)
    rd = np.fft.fft(rp, n=m * pad_d, axis=1)
    return np.fft.fftshift(rd, axes=1)


def _axes(n_bins_r, n_bins_d, range_bin_m, doppler_bin_hz):
    r_axis = np.arange(n_bins_r) * range_bin_m
    d_axis = (np.arange(n_bins_d) - n_bins_d // 2) * doppler_bin_hz
    return r_axis, d_axis


def periodogram(
    g: np.ndarray,
    config: SystemConfig,
    window: WindowSpec = WindowSpec(),
    pad_r: int = 1,
    pad_d: int = 1,
    keep_field: bool = False,
    freq_step_hz: float | None = None,
    symbol_step_s: float | None = None,
) -> Periodogram:
    """Range-Doppler periodogram of a channel-quotient frame ``g``.

    ``freq_step_hz`` / ``symbol_step_s`` describe the grid spacing of ``g``;
    they default to the full frame (``delta_f`` and the CP-inclusive symbol
    duration) and are overridden for decimated pilot grids.
    """
    if g.ndim != 2:
        raise ValueError("g must be 2-D")
    if int(pad_r) != pad_r or int(pad_d) != pad_d or pad_r < 1 or pad_d < 1:
        raise ValueError("pad factors must be integers >= 1")
    n, m = g.shape
    df = freq_step_hz or config.delta_f_hz
    dt = symbol_step_s or config.symbol_duration_s
    wr, wd = window.taps(n), window.taps(m)
    field_ = _transform(g, wr, wd, pad_r, pad_d)
    field_ *= np.sqrt(n * m) / (wr.sum() * wd.sum())
    r_bin = C0 / (n * df) / pad_r
    d_bin = 1.0 / (m * dt) / pad_d
    r_axis, d_axis = _axes(n * pad_r, m * pad_d, r_bin, d_bin)
    return Periodogram(
        np.abs(field_) ** 2,
        r_axis,
        d_axis,
        r_bin,
        d_bin,
        (pad_r, pad_d),
        field_ if keep_field else None,
        mainlobe_bins=(window.mainlobe_bins(n) * pad_r, window.mainlobe_bins(m) * pad_d),
    )


def pilot_periodogram(
    y: np.ndarray, config: SystemConfig, window: WindowSpec = WindowSpec(), pad_r: int = 1, pad_d: int = 1
) -> Periodogram:
    """Periodogram from the pilot comb only."""
    pg = config.pilots
    n, m = config.n_subcarriers, config.m_symbols
    if n % pg.freq_comb or m % pg.time_comb:
        raise ValueError("pilot comb must divide the frame dimensions")
    ys = y[:: pg.freq_comb, :: pg.time_comb]
    ps = config.pilot_values[:: pg.freq_comb, :: pg.time_comb]
    g = channel_quotient(ys, ps)
    return periodogram(
        g,
        config,
        window,
        pad_r,
        pad_d,
        freq_step_hz=config.delta_f_hz * pg.freq_comb,
        symbol_step_s=config.symbol_duration_s * pg.time_comb,
    )


def tdd_blank(g: np.ndarray, pattern: TddPattern) -> np.ndarray:
    dl = pattern.mask(g.shape[1])
    if pattern.mode == "patch_dl":
        return g[:, dl].copy()
    out = g.copy()
    out[:, ~dl] = 0
    return out


def cpe_compensate(g: np.ndarray, min_power: float = 0.0) -> np.ndarray:
    """Remove a common phase per symbol, estimated on the zero-delay bin."""
    c = g.mean(axis=0)
    p = np.abs(c) ** 2
    if np.any(p <= min_power):
        raise ValueError("reference power on the zero-range bin is below threshold")
    return g * np.exp(-1j * np.angle(c))[None, :]


@dataclass
class Peak:
    range_m: float
    doppler_hz: float
    power: float
    range_bin: float
    doppler_bin: float


@dataclass
class PeakList:
    entries: list[Peak] = field(default_factory=list)
    threshold: float = 0.0
    floor: float = 0.0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["range_m", "doppler_hz", "power_w", "range_bin", "doppler_bin"])
            for p in self.entries:
                w.writerow([p.range_m, p.doppler_hz, p.power, p.range_bin, p.doppler_bin])


def _parabolic(ym, y0, yp) -> float:
    den = ym - 2 * y0 + yp
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (ym - yp) / den, -0.5, 0.5))


def find_peaks(p: Periodogram, min_sinr_db: float = 17.0, exclusion: tuple[float, float] | None = None) -> PeakList:
    """Greedy global-threshold peak picking over a median noise-floor estimate.

    Bins are visited strongest first. A bin is accepted if every stronger
    neighbour in its 3x3 ring is an accepted peak and no accepted peak lies
    strictly within ``exclusion`` padded bins on both axes (default: the
    main-lobe half-width of the window). Two rectangular-window targets one
    resolution cell apart are therefore both reported.
    """
    pw = p.power
    nr, nd = pw.shape
    # The 250 dB guard keeps rounding dust on noiseless surfaces out of the floor.
    floor = max(float(np.median(pw)), 1e-25 * float(pw.max()))
    thr = floor * 10 ** (min_sinr_db / 10)
    ex_r, ex_d = exclusion or p.mainlobe_bins
    shifts = [(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1) if i or j]
    nb = [np.roll(pw, s, (0, 1)) for s in shifts]
    is_max = np.all([pw >= q for q in nb], axis=0)
    # Bins whose stronger neighbours are all local maxima may become peaks once those are accepted.
    second = np.all([(pw >= q) | np.roll(is_max, s, (0, 1)) for q, s in zip(nb, shifts)], axis=0)
    above = pw > thr
    sel = above & (is_max | second)
    cand = np.argwhere(sel)
    order = np.argsort(pw[sel], kind="stable")[::-1]
    # Below-floor neighbours (sinc nulls of an on-bin peak) carry no position information.
    logp = np.log(np.maximum(pw, floor))
    out: list[Peak] = []
    taken: set[tuple[int, int]] = set()
    for ci in order:
        i, j = (int(v) for v in cand[ci])
        # Exclusion on grid indices: interpolated offsets must not merge neighbours.
        if any(abs((qi - i + nr // 2) % nr - nr // 2) < ex_r and abs(qj - j) < ex_d for qi, qj in taken):
            continue
        if not is_max[i, j]:
            bigger = [((i - a) % nr, (j - b) % nd) for (a, b), q in zip(shifts, nb) if q[i, j] > pw[i, j]]
            if not all(c in taken for c in bigger):
                continue
        taken.add((i, j))
        di = _parabolic(logp[(i - 1) % nr, j], logp[i, j], logp[(i + 1) % nr, j])
        dj = _parabolic(logp[i, (j - 1) % nd], logp[i, j], logp[i, (j + 1) % nd]) if nd > 2 else 0.0
        rb, db_ = i + di, j + dj
        if rb >= nr / 2:
            # Range wraps at R_ua; report paths just before the reference as negative.
            rb -= nr
        out.append(
            Peak(
                range_m=rb * p.range_bin_m,
                doppler_hz=(db_ - nd // 2) * p.doppler_bin_hz,
                power=float(pw[i, j]),
                range_bin=rb,
                doppler_bin=db_,
            )
        )
    return PeakList(out, thr, floor)


def _steering(g_shape, tau_bins: float, fd_bins: float):
    """Unit single-path response on the frame grid, in periodogram-bin units (pad 1)."""
    n, m = g_shape
    a_r = np.exp(-2j * np.pi * (np.arange(n) - n // 2) * tau_bins / n)
    a_d = np.exp(2j * np.pi * np.arange(m) * fd_bins / m)
    return a_r, a_d


@dataclass
class PsfComponent:
    range_bin: float
    doppler_bin: float
    amplitude: complex


def psf_subtract(
    g: np.ndarray,
    peaks: PeakList,
    pattern: TddPattern | None,
    config: SystemConfig,
    window: WindowSpec = WindowSpec(),
    pad_r: int = 1,
    pad_d: int = 1,
    max_components: int = 10,
    refine: bool = True,
) -> tuple[Periodogram, list[PsfComponent]]:
    """Point-target cleaning of a TDD-gated frame.

    ``g`` is the ungated channel quotient (UL columns may hold anything);
    the known DL mask is applied here. For each peak, strongest first, the
    delay/Doppler are refined by maximizing the matched-filter response of
    a gated single-path model, the complex amplitude is fitted by least
    squares and the gated model is subtracted. Stops if residual energy
    would increase. Returns the periodogram of the cleaned gated frame.
    """
    n, m = g.shape
    dl = pattern.mask(m) if pattern is not None else np.ones(m, bool)
    resid = g * dl[None, :]
    comps: list[PsfComponent] = []
    energy = float(np.sum(np.abs(resid) ** 2))
    for pk in list(peaks)[:max_components]:
        # Periodogram bins -> pad-1 frame units.
        tau0 = pk.range_bin / pad_r
        fd0 = (pk.doppler_bin - (m * pad_d) // 2) / pad_d

        def response(v):
            a_r, a_d = _steering((n, m), v[0], v[1])
            a_d = a_d * dl
            return a_r, a_d, np.vdot(a_r, resid @ a_d.conj())

        if refine:
            res = optimize.minimize(
                lambda v: -abs(response(v)[2]) ** 2,
                x0=[tau0, fd0],
                method="Nelder-Mead",
                options={"xatol": 1e-6, "fatol": 1e-14 * abs(response([tau0, fd0])[2]) ** 2, "maxiter": 400},
            )
            v = res.x
        else:
            v = [tau0, fd0]
        a_r, a_d, proj = response(v)
        norm = n * float(np.sum(np.abs(a_d) ** 2))
        amp = proj / norm
        trial = resid - amp * np.outer(a_r, a_d)
        e_new = float(np.sum(np.abs(trial) ** 2))
        if e_new > energy:
            break
        resid, energy = trial, e_new
        comps.append(PsfComponent(float(v[0]), float(v[1]), complex(amp)))
    return periodogram(resid, config, window, pad_r, pad_d), comps


def measure_metrics(
    p_test: Periodogram,
    p_ref_free: Periodogram | None = None,
    margin: tuple[int, int] = (4, 4),
    mean_mode: str = "magnitude",
) -> dict:
    """PPLR and mean / min SIR of the strongest peak.

    ``margin`` is the half-width, in resolution cells per axis, of the box
    around the peak that is excluded from the interference region. The mean
    interference level is averaged over bin magnitudes (``"magnitude"``,
    reported as 20 log10 of the amplitude ratio) or powers (``"power"``).
    """
    pw = p_test.power
    nr, nd = pw.shape
    mr, md = margin[0] * p_test.pad[0], margin[1] * p_test.pad[1]
    if 2 * mr + 1 >= nr and 2 * md + 1 >= nd:
        raise ValueError("margin covers the whole periodogram")
    i, j = np.unravel_index(np.argmax(pw), pw.shape)
    peak = float(pw[i, j])
    di = np.abs((np.arange(nr) - i + nr // 2) % nr - nr // 2)
    dj = np.abs((np.arange(nd) - j + nd // 2) % nd - nd // 2)
    out_mask = ~((di[:, None] <= mr) & (dj[None, :] <= md))
    region = pw[out_mask]
    if mean_mode == "magnitude":
        mean_sir = 20 * np.log10(np.sqrt(peak) / np.mean(np.sqrt(region)))
    elif mean_mode == "power":
        mean_sir = 10 * np.log10(peak / np.mean(region))
    else:
        raise ValueError(f"unknown mean_mode {mean_mode!r}")
    min_sir = 10 * np.log10(peak / np.max(region))
    pplr = None
    if p_ref_free is not None:
        if p_ref_free.power.shape != pw.shape:
            raise ValueError("reference periodogram has different dimensions")
        pplr = float(10 * np.log10(peak / np.max(p_ref_free.power)))
    return {
        "pplr_db": pplr,
        "mean_sir_db": float(mean_sir),
        "min_sir_db": float(min_sir),
        "peak_w": peak,
        "peak_bin": (int(i), int(j)),
    }


MAGIC = b"BISP"


def write_periodogram(p: Periodogram, path: str | Path) -> None:
    """Binary matrix (``BISP``, u32 rows, u32 cols, 4 reserved bytes, f64 LE row-major) + JSON axes."""
    path = Path(path)
    rows, cols = p.power.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", rows, cols) + b"\0" * 4)
        fh.write(np.ascontiguousarray(p.power, dtype="<f8").tobytes())
    sidecar = {
        "rows": rows,
        "cols": cols,
        "range_axis_m": p.range_axis.tolist(),
        "doppler_axis_hz": p.doppler_axis.tolist(),
        "range_bin_m": p.range_bin_m,
        "doppler_bin_hz": p.doppler_bin_hz,
        "pad": list(p.pad),
        "mainlobe_bins": list(p.mainlobe_bins),
        "scaling": p.scaling,
        "units": "W",
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def read_periodogram(path: str | Path) -> Periodogram:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a periodogram file")
    rows, cols = struct.unpack("<II", raw[4:12])
    power = np.frombuffer(raw[16:], dtype="<f8").reshape(rows, cols).copy()
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return Periodogram(
        power,
        np.array(meta["range_axis_m"]),
        np.array(meta["doppler_axis_hz"]),
        meta["range_bin_m"],
        meta["doppler_bin_hz"],
        tuple(meta["pad"]),
        scaling=meta["scaling"],
        mainlobe_bins=tuple(meta.get("mainlobe_bins", (1.0, 1.0))),
    )
