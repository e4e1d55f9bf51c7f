"""Hardware impairments: PA nonlinearity, phase noise, quantizer, sampling clock."""

from __future__ import annotations

import csv
import functools
import math
import warnings
from dataclasses import dataclass, replace

import finufft
import numpy as np

from .ofdm import IqSequence
from .units import rng_for


@dataclass(frozen=True)
class NoisePsdSpec:
    """Single-sideband noise PSD given as ``(offset_hz, dBc/Hz)`` anchors.

    Levels are interpolated linearly in dB over log-frequency and held flat
    beyond the outermost anchors; the spectrum is zero outside
    ``[f_min, f_max]``.
    """

    anchors: tuple[tuple[float, float], ...]
    f_min: float
    f_max: float

    def __post_init__(self):
        a = tuple((float(f), float(lv)) for f, lv in self.anchors)
        object.__setattr__(self, "anchors", a)
        if len(a) < 2:
            raise ValueError("need at least two PSD anchors")
        f = np.array([p[0] for p in a])
        if np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ValueError("anchor frequencies must be positive and strictly increasing")
        if not all(np.isfinite(p[1]) for p in a):
            raise ValueError("anchor levels must be finite")
        if not 0 < self.f_min < self.f_max:
            raise ValueError("need 0 < f_min < f_max")

    @classmethod
    def from_csv(cls, path, f_min: float | None = None, f_max: float | None = None) -> "NoisePsdSpec":
        with open(path, newline="") as fh:
            rows = [(float(r["freq_hz"]), float(r["level_dbc_hz"])) for r in csv.DictReader(fh)]
        return cls(tuple(rows), f_min or rows[0][0], f_max or rows[-1][0])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "level_dbc_hz"])
            w.writerows(self.anchors)

    def shifted(self, delta_db: float) -> "NoisePsdSpec":
        return replace(self, anchors=tuple((f, lv + delta_db) for f, lv in self.anchors))

    def level_dbc_hz(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        fa = np.log10([p[0] for p in self.anchors])
        la = np.array([p[1] for p in self.anchors])
        with np.errstate(divide="ignore"):
            lf = np.log10(np.where(f > 0, f, np.nan))
        return np.interp(lf, fa, la)

    def psd(self, f) -> np.ndarray:
        """Linear single-sideband PSD (rad^2/Hz), zero outside the integration limits."""
        f = np.abs(np.asarray(f, dtype=float))
        inside = (f >= self.f_min) & (f <= self.f_max)
        out = np.zeros_like(f)
        out[inside] = 10.0 ** (self.level_dbc_hz(f[inside]) / 10.0)
        return out

    def _segments(self):
        edges = np.array([self.f_min] + [f for f, _ in self.anchors if self.f_min < f < self.f_max] + [self.f_max])
        lv = 10 ** (self.level_dbc_hz(edges) / 10)
        slope = np.log(lv[1:] / lv[:-1]) / np.log(edges[1:] / edges[:-1])
        return edges, lv, slope

    def cumulative(self, f) -> np.ndarray:
        """Single-sideband power ``int_{f_min}^{f} L(v) dv`` (rad^2), exact for the piecewise power law."""
        edges, lv, b = self._segments()
        x = np.clip(np.asarray(f, dtype=float), self.f_min, self.f_max)
        j = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(b) - 1)

        def part(e, s1, bb, hi):
            r = hi / e
            near = np.abs(bb + 1) < 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                pw = s1 * e / np.where(near, 1.0, bb + 1) * (r ** (bb + 1) - 1)
            return np.where(near, s1 * e * np.log(r), pw)

        full = np.concatenate([[0.0], np.cumsum(part(edges[:-1], lv[:-1], b, edges[1:]))])
        return full[j] + part(edges[j], lv[j], b[j], x)

    def integrated_rad2(self) -> float:
        """Two-sided phase variance ``2 * int L(f) df`` over the integration limits."""
        return float(2.0 * self.cumulative(self.f_max))

    def integrated_dbc(self) -> float:
        return 10 * math.log10(self.integrated_rad2())

    def calibrated(self, target_dbc: float) -> "NoisePsdSpec":
        """Shift every anchor so the integrated level equals ``target_dbc``."""
        return self.shifted(target_dbc - self.integrated_dbc())


@dataclass(frozen=True)
class PaModel:
    """Memoryless PA as an AM-AM / AM-PM table.

    ``lut`` rows are ``(in_amp, out_amp, out_phase_rad)``. With ``ibo_db``
    set, the input is scaled so its mean power sits ``ibo_db`` below the
    input 1-dB compression point and the output is scaled back by the
    small-signal gain, so an ideal PA is the identity. With ``ibo_db=None``
    the table is applied to raw amplitudes.
    """

    lut: np.ndarray
    ibo_db: float | None = 10.0

    def __post_init__(self):
        lut = np.asarray(self.lut, dtype=float)
        if lut.ndim != 2 or lut.shape[1] != 3 or lut.shape[0] < 2:
            raise ValueError("LUT must have rows (in_amp, out_amp, out_phase_rad)")
        if np.any(np.diff(lut[:, 0]) <= 0):
            raise ValueError("LUT input grid must be strictly increasing")
        if np.any(np.diff(lut[:, 1]) < -1e-12):
            raise ValueError("LUT AM-AM must be non-decreasing")
        if self.ibo_db is not None and self.ibo_db < 0:
            raise ValueError("ibo_db must be >= 0")
        object.__setattr__(self, "lut", lut)

    @classmethod
    def from_csv(cls, path, ibo_db: float | None = 10.0) -> "PaModel":
        with open(path, newline="") as fh:
            rows = [
                (float(r["in_amp"]), float(r["out_amp"]), float(r["out_phase_rad"]))
                for r in csv.DictReader(fh)
            ]
        return cls(np.array(rows), ibo_db)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["in_amp", "out_amp", "out_phase_rad"])
            w.writerows(self.lut.tolist())

    @property
    def small_signal_gain(self) -> float:
        i = 1 if self.lut[0, 0] == 0 else 0
        return self.lut[i, 1] / self.lut[i, 0]

    @property
    def p1db_in(self) -> float:
        """Input amplitude where the gain is 1 dB below small-signal gain."""
        lut = self.lut
        pos = lut[:, 0] > 0
        gain_db = 20 * np.log10(lut[pos, 1] / lut[pos, 0] / self.small_signal_gain)
        below = np.nonzero(gain_db <= -1.0)[0]
        if len(below) == 0:
            return float(lut[-1, 0])
        k = below[0]
        x_in = lut[pos, 0]
        if k == 0:
            return float(x_in[0])
        return float(np.interp(-1.0, [gain_db[k], gain_db[k - 1]], [x_in[k], x_in[k - 1]]))


def rapp_lut(smoothness: float = 2.0, saturation: float = 1.0, n_points: int = 8193, max_in: float = 8.0) -> np.ndarray:
    """AM-AM table of Rapp's model ``r / (1 + (r/A)^(2p))^(1/(2p))`` with no AM-PM."""
    r = np.linspace(0.0, max_in * saturation, n_points)
    out = r / (1 + (r / saturation) ** (2 * smoothness)) ** (1 / (2 * smoothness))
    return np.stack([r, out, np.zeros_like(r)], axis=1)


def pa_apply(x: IqSequence, pa: PaModel) -> IqSequence:
    s = x.samples
    scale = 1.0
    if pa.ibo_db is not None:
        rms = np.sqrt(np.mean(np.abs(s) ** 2))
        if rms > 0:
            scale = pa.p1db_in * 10 ** (-pa.ibo_db / 20) / rms
    r = np.abs(s) * scale
    amp = np.interp(r, pa.lut[:, 0], pa.lut[:, 1])
    ph = np.interp(r, pa.lut[:, 0], pa.lut[:, 2])
    out = amp * np.exp(1j * (np.angle(s) + ph))
    if pa.ibo_db is not None:
        out = out / (scale * pa.small_signal_gain)
    return x.replace(out)


@functools.lru_cache(maxsize=16)
def _shape(psd: NoisePsdSpec, nfft: int, fs: float) -> np.ndarray:
    f = np.fft.rfftfreq(nfft, 1.0 / fs)
    df = fs / nfft
    # Each bin carries the exact PSD integral over its width, so steep
    # spectra keep their power whatever the grid.
    power = psd.cumulative(f + df / 2) - psd.cumulative(f - df / 2)
    shape = np.sqrt(nfft * np.maximum(power, 0.0))
    shape[0] = 0.0
    shape.setflags(write=False)
    return shape


def _shaped_gaussian(psd: NoisePsdSpec, n_samples: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    """Real Gaussian sequence whose two-sided PSD is ``psd.psd(|f|)``."""
    if fs < 2 * psd.f_max:
        warnings.warn("PSD extends beyond fs/2 and is truncated there", stacklevel=3)
    nfft = n_samples
    if fs / nfft > psd.f_min:
        nfft = int(math.ceil(fs / psd.f_min))
        warnings.warn(
            f"{n_samples} samples cannot resolve f_min={psd.f_min} Hz; generating on {nfft} points",
            stacklevel=3,
        )
    spec = np.fft.rfft(rng.standard_normal(nfft))
    return np.fft.irfft(spec * _shape(psd, nfft, float(fs)), n=nfft)[:n_samples]


def pn_generate(psd: NoisePsdSpec, n_samples: int, fs: float, seed: int = 0, stream: str = "pn_tx", run: int = 0) -> np.ndarray:
    """Phase-noise realization (rad) by spectral shaping of white Gaussian noise."""
    return _shaped_gaussian(psd, n_samples, fs, rng_for(seed, stream, run))


def pn_apply(y: IqSequence, phase: np.ndarray) -> IqSequence:
    phase = np.asarray(phase, dtype=float)
    if phase.shape != (len(y),):
        raise ValueError(f"phase length {phase.shape} does not match {len(y)} samples")
    return y.replace(y.samples * np.exp(1j * phase))


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform mid-rise quantizer with hard clipping, applied per rail.

    Without an explicit ``full_scale`` the clipping level is set so that a
    full-scale complex tone is ``headroom_db`` above the mean input power.
    """

    n_bits: int = 12
    full_scale: float | None = None
    headroom_db: float = 20.0

    def __post_init__(self):
        if self.n_bits < 1:
            raise ValueError("n_bits must be >= 1")
        if self.full_scale is not None and self.full_scale <= 0:
            raise ValueError("full_scale must be > 0")

    def resolve(self, y: IqSequence) -> "QuantizerSpec":
        if self.full_scale is not None:
            return self
        p = np.mean(np.abs(y.samples) ** 2)
        return replace(self, full_scale=float(np.sqrt(p * 10 ** (self.headroom_db / 10))))


def quantize_clip(y: IqSequence, q: QuantizerSpec) -> IqSequence:
    fs_ = q.resolve(y).full_scale
    step = 2 * fs_ / 2**q.n_bits
    top = 2 ** (q.n_bits - 1) - 1

    def rail(v):
        k = np.clip(np.floor(v / step), -top - 1, top)
        return (k + 0.5) * step

    s = y.samples
    return y.replace(rail(s.real) + 1j * rail(s.imag))


def jitter_generate(
    psd: NoisePsdSpec,
    target_rms_s: float,
    n_samples: int,
    fs: float,
    seed: int = 0,
    stream: str = "sj_adc",
    run: int = 0,
) -> np.ndarray:
    """Sampling-jitter sequence (s) with the PSD shape of ``psd`` and an exact RMS."""
    if target_rms_s == 0:
        return np.zeros(n_samples)
    tau = _shaped_gaussian(psd, n_samples, fs, rng_for(seed, stream, run))
    rms = np.sqrt(np.mean(tau**2))
    return tau * (target_rms_s / rms)


def resample_at(samples: np.ndarray, displacement: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Band-limited evaluation of ``samples`` at indices ``s + displacement[s]``.

    The periodic DFT interpolant of the buffer is evaluated at the displaced
    positions with a type-2 non-uniform FFT whose accuracy meets ``tol``
    (relative). Callers keep zero guards at the ends since the interpolant
    wraps around.
    """
    s = np.asarray(samples, dtype=complex)
    d = np.asarray(displacement, dtype=float)
    if d.shape != s.shape:
        raise ValueError("displacement must match the sample count")
    if not np.any(d):
        return s.copy()
    n = len(s)
    if np.max(np.abs(d)) >= n / 2:
        raise ValueError("displacement leaves the available support")
    x = 2 * np.pi * (np.arange(n) + d) / n
    eps = max(tol, 1e-14)
    return finufft.nufft1d2(x, np.fft.fft(s), isign=1, eps=eps, modeord=1) / n


def resample_clock(y: IqSequence, sfo_frac: float = 0.0, tau_sj: np.ndarray | None = None, tol: float = 1e-12) -> IqSequence:
    """Sample ``y`` at ``s Ts (1 - sfo) + tau_sj[s]``, with sample 0 as the time origin."""
    n = len(y)
    d = -np.arange(n) * sfo_frac
    if tau_sj is not None:
        tau_sj = np.asarray(tau_sj, dtype=float)
        if tau_sj.shape != (n,):
            raise ValueError("tau_sj length must match the sample count")
        d = d + tau_sj * y.sample_rate
    return y.replace(resample_at(y.samples, d, tol=tol))

