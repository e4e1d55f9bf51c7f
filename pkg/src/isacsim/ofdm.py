"""CP-OFDM frame construction, modulation and demodulation.

Frames are ``(N, M)`` complex arrays, subcarriers along axis 0 and OFDM
symbols along axis 1. Subcarrier ``n`` sits at baseband frequency
``(n - N // 2) * delta_f`` so that a delay maps to a phase that is linear
in ``n`` over the whole band.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .units import rng_for

QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)


@dataclass(frozen=True)
class PilotGrid:
    """Regular comb of known pilot symbols.

    A grid with both combs equal to 1 marks the whole frame as known.
    """

    freq_comb: int = 4
    time_comb: int = 4

    def __post_init__(self):
        if self.freq_comb < 1 or self.time_comb < 1:
            raise ValueError("pilot combs must be >= 1")

    @property
    def full_frame_known(self) -> bool:
        return self.freq_comb == 1 and self.time_comb == 1

    def mask(self, n: int, m: int) -> np.ndarray:
        if self.freq_comb > n or self.time_comb > m:
            raise ValueError(f"pilot comb ({self.freq_comb}, {self.time_comb}) exceeds frame ({n}, {m})")
        out = np.zeros((n, m), dtype=bool)
        out[:: self.freq_comb, :: self.time_comb] = True
        return out


@dataclass(frozen=True)
class PreambleSpec:
    n_repeats: int = 2

    def __post_init__(self):
        if self.n_repeats < 2:
            raise ValueError("preamble needs at least two repeated symbols for CFO estimation")


@dataclass(frozen=True)
class SystemConfig:
    fc_hz: float = 27.4e9
    delta_f_hz: float = 120e3
    n_subcarriers: int = 1584
    n_cp: int = 112
    m_symbols: int = 1120
    alphabet: str = "qpsk"
    pilots: PilotGrid = field(default_factory=PilotGrid)
    preamble: PreambleSpec | None = field(default_factory=PreambleSpec)
    seed: int = 0
    oversampling: int = 1

    def __post_init__(self):
        if self.n_subcarriers <= 0:
            raise ValueError("n_subcarriers must be > 0")
        if self.m_symbols <= 0:
            raise ValueError("m_symbols must be > 0")
        if not 0 <= self.n_cp < self.n_subcarriers:
            raise ValueError("n_cp must satisfy 0 <= n_cp < n_subcarriers")
        if self.delta_f_hz <= 0 or self.fc_hz <= 0:
            raise ValueError("delta_f_hz and fc_hz must be > 0")
        if self.alphabet.lower() != "qpsk":
            raise ValueError(f"unsupported alphabet {self.alphabet!r}")
        if self.oversampling < 1:
            raise ValueError("oversampling must be a positive integer")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        self.pilots.mask(self.n_subcarriers, self.m_symbols)

    @property
    def bandwidth_hz(self) -> float:
        # N * delta_f, not the rounded 190 MHz.
        return self.n_subcarriers * self.delta_f_hz

    @property
    def sample_rate_hz(self) -> float:
        return self.bandwidth_hz * self.oversampling

    @property
    def symbol_samples(self) -> int:
        """Samples per OFDM symbol including CP, at the simulation rate."""
        return (self.n_subcarriers + self.n_cp) * self.oversampling

    @property
    def symbol_duration_s(self) -> float:
        return (self.n_subcarriers + self.n_cp) / self.bandwidth_hz

    @property
    def preamble_samples(self) -> int:
        return 0 if self.preamble is None else self.preamble.n_repeats * self.symbol_samples

    @property
    def frame_samples(self) -> int:
        return self.m_symbols * self.symbol_samples

    @cached_property
    def pilot_mask(self) -> np.ndarray:
        return self.pilots.mask(self.n_subcarriers, self.m_symbols)

    @cached_property
    def pilot_values(self) -> np.ndarray:
        """Known pilot symbols, ``(N, M)`` with zeros off the pilot grid."""
        rng = rng_for(self.seed, "pilots")
        vals = np.zeros((self.n_subcarriers, self.m_symbols), dtype=complex)
        mask = self.pilot_mask
        vals[mask] = QPSK[rng.integers(0, 4, size=int(mask.sum()))]
        return vals

    @cached_property
    def preamble_symbol(self) -> np.ndarray:
        rng = rng_for(self.seed, "preamble")
        return QPSK[rng.integers(0, 4, size=self.n_subcarriers)]

    def with_(self, **changes) -> "SystemConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class IqSequence:
    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=complex))

    def __len__(self):
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    def replace(self, samples: np.ndarray) -> "IqSequence":
        return IqSequence(samples, self.sample_rate, self.t0)

    def padded(self, lead: int = 0, trail: int = 0) -> "IqSequence":
        """Zero-pad on both ends; ``t0`` moves back so existing samples keep their times."""
        s = np.concatenate([np.zeros(lead, complex), self.samples, np.zeros(trail, complex)])
        return IqSequence(s, self.sample_rate, self.t0 - lead / self.sample_rate)


def qpsk_map(bits: np.ndarray) -> np.ndarray:
    """Gray-mapped QPSK: bit pair (b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)."""
    b = np.asarray(bits, dtype=np.int8).reshape(-1, 2)
    return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2)


def qpsk_demap(symbols: np.ndarray) -> np.ndarray:
    s = np.asarray(symbols).ravel()
    return np.stack([s.real < 0, s.imag < 0], axis=1).astype(np.uint8).ravel()


def generate_frame(config: SystemConfig, run: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Build the transmit frame and the bits carried by its data positions.

    Bits are ordered column-major over data positions (subcarrier fastest),
    which is the order ``X.T[~mask.T]`` visits them.
    """
    n, m = config.n_subcarriers, config.m_symbols
    mask = config.pilot_mask
    rng = rng_for(config.seed, "data", run)
    n_data = int((~mask).sum())
    bits = rng.integers(0, 2, size=2 * n_data, dtype=np.uint8)
    x = config.pilot_values.copy()
    x_t = x.T
    x_t[~mask.T] = qpsk_map(bits)
    return x_t.T.copy(), bits


def frame_bits(x_hat: np.ndarray, config: SystemConfig) -> np.ndarray:
    """Bits carried by the data positions of a (decided) frame."""
    return qpsk_demap(x_hat.T[~config.pilot_mask.T])


def _symbols_to_time(cols: np.ndarray, config: SystemConfig) -> np.ndarray:
    """``(N, K)`` subcarrier columns -> ``(K, N_CP + N)`` time symbols (CP first)."""
    n, os_ = config.n_subcarriers, config.oversampling
    nfft = n * os_
    spec = np.zeros((nfft, cols.shape[1]), dtype=complex)
    # Centered subcarriers, shifted into FFT order.
    spec[(np.arange(n) - n // 2) % nfft] = cols
    td = np.fft.ifft(spec, axis=0, norm="ortho") * np.sqrt(os_)
    cp = config.n_cp * os_
    td = np.concatenate([td[nfft - cp :], td], axis=0) if cp else td
    return td.T


def preamble_waveform(config: SystemConfig) -> np.ndarray:
    if config.preamble is None:
        return np.zeros(0, complex)
    sym = _symbols_to_time(config.preamble_symbol[:, None], config).ravel()
    return np.tile(sym, config.preamble.n_repeats)


def modulate(x: np.ndarray, config: SystemConfig, with_preamble: bool = True) -> IqSequence:
    """CP-OFDM synthesis with unitary scaling; preamble prepended if configured."""
    if x.shape != (config.n_subcarriers, config.m_symbols):
        raise ValueError(f"frame shape {x.shape} != ({config.n_subcarriers}, {config.m_symbols})")
    body = _symbols_to_time(x, config).ravel()
    if with_preamble and config.preamble is not None:
        body = np.concatenate([preamble_waveform(config), body])
    return IqSequence(body, config.sample_rate_hz)


def demodulate(y: IqSequence | np.ndarray, frame_start: int, config: SystemConfig) -> np.ndarray:
    """Strip CPs and DFT every symbol of the frame starting at ``frame_start``."""
    s = y.samples if isinstance(y, IqSequence) else np.asarray(y)
    l_sym, m = config.symbol_samples, config.m_symbols
    if frame_start < 0 or frame_start + m * l_sym > len(s):
        raise ValueError(
            f"need {m * l_sym} samples from index {frame_start}, buffer has {len(s)}"
        )
    n, os_ = config.n_subcarriers, config.oversampling
    nfft = n * os_
    blocks = s[frame_start : frame_start + m * l_sym].reshape(m, l_sym)[:, config.n_cp * os_ :]
    spec = np.fft.fft(blocks, axis=1, norm="ortho") / np.sqrt(os_)
    return spec[:, (np.arange(n) - n // 2) % nfft].T


def hard_demap_remap(
    y: np.ndarray,
    config: SystemConfig,
    mode: str = "hard",
    x_true: np.ndarray | None = None,
    equalize: bool = True,
) -> np.ndarray:
    """Estimate the transmit frame from a received one.

    ``mode`` is ``"hard"`` (nearest QPSK point per entry, pilots restored) or
    ``"genie"`` (return ``x_true``). With ``equalize`` the decisions are taken
    after dividing by the least-squares common gain seen on the pilots, which
    removes the unknown complex amplitude of the dominant path.
    """
    if mode == "genie":
        if x_true is None:
            raise ValueError("genie mode needs the true frame")
        return np.array(x_true, dtype=complex, copy=True)
    if mode != "hard":
        raise ValueError(f"unknown demap mode {mode!r}")
    mask = config.pilot_mask
    pv = config.pilot_values
    z = y
    if equalize:
        h = np.vdot(pv[mask], y[mask]) / np.vdot(pv[mask], pv[mask])
        if abs(h) > 0:
            z = y / h
    x_hat = (np.where(z.real >= 0, 1.0, -1.0) + 1j * np.where(z.imag >= 0, 1.0, -1.0)) / np.sqrt(2)
    x_hat[mask] = pv[mask]
    return x_hat
