"""Bistatic multipath propagation, path gains, AWGN and sync offsets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ofdm import IqSequence
from .units import C0, K_B, dbm_to_w, from_db, rng_for


@dataclass(frozen=True)
class PropagationPath:
    """One propagation path between the two nodes.

    The reference path is static; its gain follows one-way free-space loss
    over the bistatic range ``r_tx_t_m + r_t_rx_m``. ``doppler_hz`` is the
    total shift; per-leg shifts, if given, are summed into it.
    """

    r_tx_t_m: float
    r_t_rx_m: float
    doppler_hz: float = 0.0
    rcs_m2: float | None = None
    is_reference: bool = False
    explicit_gain: complex | None = None
    phase_rad: float | None = None
    doppler_tx_t_hz: float | None = None
    doppler_t_rx_hz: float | None = None

    def __post_init__(self):
        if self.r_tx_t_m <= 0 or self.r_t_rx_m <= 0:
            raise ValueError("path ranges must be > 0")
        if self.doppler_tx_t_hz is not None or self.doppler_t_rx_hz is not None:
            total = (self.doppler_tx_t_hz or 0.0) + (self.doppler_t_rx_hz or 0.0)
            object.__setattr__(self, "doppler_hz", total)
        if self.is_reference and self.doppler_hz != 0.0:
            raise ValueError("the reference path is static: doppler_hz must be 0")
        if not self.is_reference and self.rcs_m2 is None and self.explicit_gain is None:
            raise ValueError("target paths need rcs_m2 or explicit_gain")

    @property
    def bistatic_range_m(self) -> float:
        return self.r_tx_t_m + self.r_t_rx_m

    @property
    def delay_s(self) -> float:
        return self.bistatic_range_m / C0

    @property
    def rho_m(self) -> float:
        return float(np.sqrt(self.r_tx_t_m * self.r_t_rx_m))


@dataclass(frozen=True)
class SyncOffsets:
    sto_s: float = 0.0
    cfo_hz: float = 0.0
    sfo_frac: float = 0.0

    def __post_init__(self):
        if self.sto_s < 0:
            raise ValueError("sto_s must be >= 0")
        if abs(self.sfo_frac) >= 1e-3:
            raise ValueError("|sfo_frac| must be < 1e-3")


@dataclass(frozen=True)
class LinkBudget:
    p_tx_sensing_dbm: float = 35.86
    p_tx_reference_dbm: float = 21.0
    g_tx_dbi: float = 33.0
    g_rx_dbi: float = 33.0
    nf_db: float = 8.0
    temp_k: float = 290.0
    sinr_min_db: float = 17.0
    i_hw_db_rel_awgn: float | None = None
    p_tx_total_dbm: float | None = None

    def __post_init__(self):
        if self.temp_k <= 0:
            raise ValueError("temp_k must be > 0")
        vals = (self.p_tx_sensing_dbm, self.p_tx_reference_dbm, self.g_tx_dbi, self.g_rx_dbi, self.nf_db)
        if not all(np.isfinite(vals)):
            raise ValueError("link budget powers and gains must be finite")
        if self.p_tx_total_dbm is not None:
            total = 10 * np.log10(dbm_to_w(self.p_tx_sensing_dbm) + dbm_to_w(self.p_tx_reference_dbm)) + 30
            if total > self.p_tx_total_dbm + 0.01:
                raise ValueError(
                    f"beam powers sum to {total:.2f} dBm, above the {self.p_tx_total_dbm} dBm total"
                )

    def noise_power_w(self, bandwidth_hz: float) -> float:
        return K_B * self.temp_k * from_db(self.nf_db) * bandwidth_hz


def path_gain(
    path: PropagationPath,
    budget: LinkBudget,
    fc_hz: float,
    rng: np.random.Generator | None = None,
) -> complex:
    """Complex amplitude (sqrt W) of ``path`` at the receiver.

    Targets follow the bistatic radar equation with the sensing-beam power,
    the reference follows Friis with the reference-beam power.
    """
    if path.explicit_gain is not None:
        return complex(path.explicit_gain)
    lam = C0 / fc_hz
    g = from_db(budget.g_tx_dbi + budget.g_rx_dbi)
    if path.is_reference:
        p = dbm_to_w(budget.p_tx_reference_dbm)
        power = p * g * lam**2 / (4 * np.pi * path.bistatic_range_m) ** 2
    else:
        p = dbm_to_w(budget.p_tx_sensing_dbm)
        power = p * g * path.rcs_m2 * lam**2 / ((4 * np.pi) ** 3 * path.r_tx_t_m**2 * path.r_t_rx_m**2)
    if path.phase_rad is not None:
        phase = path.phase_rad
    elif rng is not None:
        phase = rng.uniform(0, 2 * np.pi)
    else:
        phase = 0.0
    return complex(np.sqrt(power) * np.exp(1j * phase))


def path_gains(paths, budget: LinkBudget, fc_hz: float, seed: int = 0, run: int = 0) -> list[complex]:
    rng = rng_for(seed, "path_phase", run)
    return [path_gain(p, budget, fc_hz, rng) for p in paths]


def fractional_delay(samples: np.ndarray, delay_samples: float) -> np.ndarray:
    """Delay by a real number of samples via a phase ramp on the full-sequence DFT.

    Exact for the periodic extension of ``samples``; callers keep enough
    zero guard at the ends that nothing wraps around.
    """
    if delay_samples == 0:
        return np.array(samples, dtype=complex, copy=True)
    n = len(samples)
    if float(delay_samples).is_integer():
        return np.roll(samples, int(delay_samples))
    # fftfreq puts the Nyquist bin at -fs/2, where subcarrier 0 sits at the
    # critical rate, so the ramp stays unit-modulus and exactly invertible.
    f = np.fft.fftfreq(n)
    ramp = np.exp(-2j * np.pi * f * delay_samples)
    return np.fft.ifft(np.fft.fft(samples) * ramp)


def apply_channel(x: IqSequence, paths, gains) -> IqSequence:
    """Superpose delayed, Doppler-rotated, scaled copies of ``x``.

    The Doppler is a phase ramp over absolute time (narrowband model); the
    delay is in absolute seconds and must fit inside the buffer.
    """
    if len(paths) != len(gains):
        raise ValueError("paths and gains differ in length")
    fs = x.sample_rate
    t = x.times
    out = np.zeros(len(x), dtype=complex)
    for p, a in zip(paths, gains):
        d = p.delay_s * fs
        if d >= len(x):
            raise ValueError(f"path delay of {d:.1f} samples exceeds the {len(x)}-sample buffer")
        if abs(p.doppler_hz) >= fs / 2:
            raise ValueError(f"Doppler {p.doppler_hz} Hz beyond +-fs/2")
        y = fractional_delay(x.samples, d)
        if p.doppler_hz:
            y = y * np.exp(2j * np.pi * p.doppler_hz * t)
        out += a * y
    return x.replace(out)


def apply_sync_offsets(y: IqSequence, off: SyncOffsets) -> IqSequence:
    """Delay by the STO, then rotate by the CFO. SFO is handled by ``impairments.resample_clock``."""
    s = fractional_delay(y.samples, off.sto_s * y.sample_rate) if off.sto_s else y.samples.copy()
    if off.cfo_hz:
        s = s * np.exp(2j * np.pi * off.cfo_hz * y.times)
    return y.replace(s)


def remove_sync_offsets(y: IqSequence, off: SyncOffsets) -> IqSequence:
    """Exact inverse of :func:`apply_sync_offsets`."""
    s = y.samples
    if off.cfo_hz:
        s = s * np.exp(-2j * np.pi * off.cfo_hz * y.times)
    if off.sto_s:
        s = fractional_delay(s, -off.sto_s * y.sample_rate)
    return y.replace(s)


def add_awgn(
    y: IqSequence,
    budget: LinkBudget,
    bandwidth_hz: float,
    seed: int = 0,
    run: int = 0,
    power_w: float | None = None,
) -> IqSequence:
    """Add circular complex Gaussian noise.

    Per-sample variance is ``k_B T NF`` times the simulated bandwidth
    ``sample_rate``, so the in-band density is the same at any oversampling;
    at the critical rate this is ``k_B B T NF``. ``power_w`` overrides the
    per-sample variance directly.
    """
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be > 0")
    if power_w is None:
        power_w = budget.noise_power_w(bandwidth_hz) * (y.sample_rate / bandwidth_hz)
    rng = rng_for(seed, "awgn", run)
    n = len(y)
    noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.sqrt(power_w / 2)
    return y.replace(y.samples + noise)
