import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from conftest import SEEDS, crandn
from isacsim.channel import SyncOffsets, apply_sync_offsets
from isacsim.defaults import PN_ANCHORS, default_pn_psd, default_sj_psd
from isacsim.impairments import (
    NoisePsdSpec,
    PaModel,
    QuantizerSpec,
    jitter_generate,
    pa_apply,
    pn_apply,
    pn_generate,
    quantize_clip,
    rapp_lut,
    resample_at,
    resample_clock,
)
from isacsim.ofdm import IqSequence, SystemConfig, demodulate, generate_frame, modulate

IDENTITY_LUT = np.array([[0.0, 0.0, 0.0], [10.0, 10.0, 0.0]])
BROADBAND = NoisePsdSpec(((1e6, -100.0), (1e7, -105.0), (9e7, -110.0)), 1e6, 9e7)
FS = 190.08e6


def tone_seq(n, fs, f0=0.1):
    return IqSequence(np.exp(2j * np.pi * f0 * np.arange(n)), fs)


class TestNoisePsdSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            NoisePsdSpec(((1e3, -80.0),), 1e3, 1e6)
        with pytest.raises(ValueError):
            NoisePsdSpec(((1e4, -80.0), (1e3, -90.0)), 1e3, 1e6)
        with pytest.raises(ValueError):
            NoisePsdSpec(((1e3, -80.0), (1e4, float("nan"))), 1e3, 1e6)
        with pytest.raises(ValueError):
            NoisePsdSpec(((1e3, -80.0), (1e4, -90.0)), 1e6, 1e3)

    def test_log_log_interpolation(self):
        psd = NoisePsdSpec(((1e3, -80.0), (1e5, -120.0)), 1e3, 1e5)
        assert psd.level_dbc_hz(1e4) == pytest.approx(-100.0)
        assert psd.psd(2e5) == 0.0

    def test_integral_matches_quadrature(self):
        psd = default_pn_psd()
        f = np.logspace(np.log10(psd.f_min), np.log10(psd.f_max), 400_001)
        quad = 2 * np.trapezoid(psd.psd(f), f)
        assert psd.integrated_rad2() == pytest.approx(quad, rel=1e-4)

    def test_default_pn_calibration(self):
        assert default_pn_psd().integrated_dbc() == pytest.approx(-32.09, abs=0.01)
        shifted = default_pn_psd().calibrated(-40.0)
        assert shifted.integrated_dbc() == pytest.approx(-40.0, abs=1e-9)
        assert len(PN_ANCHORS) >= 2

    def test_csv_round_trip(self, tmp_path):
        psd = default_sj_psd()
        psd.to_csv(tmp_path / "p.csv")
        back = NoisePsdSpec.from_csv(tmp_path / "p.csv", psd.f_min, psd.f_max)
        assert back == psd


class TestPa:
    def test_identity_lut(self):
        x = IqSequence(crandn(np.random.default_rng(0), 1000), 1.0)
        for ibo in (None, 10.0):
            np.testing.assert_allclose(pa_apply(x, PaModel(IDENTITY_LUT, ibo)).samples, x.samples, atol=1e-12)

    def test_constant_envelope_power(self):
        pa = PaModel(rapp_lut(2.0), ibo_db=None)
        a = 0.8
        x = IqSequence(a * np.exp(1j * np.linspace(0, 6, 50)), 1.0)
        expected = np.interp(a, pa.lut[:, 0], pa.lut[:, 1]) ** 2
        np.testing.assert_allclose(np.abs(pa_apply(x, pa).samples) ** 2, expected, rtol=1e-12)

    def test_rapp_compression_point(self):
        p = 2.0
        analytic = (10 ** (2 * p / 20) - 1) ** (1 / (2 * p))
        assert PaModel(rapp_lut(p)).p1db_in == pytest.approx(analytic, rel=1e-4)

    def test_saturates_beyond_grid(self):
        pa = PaModel(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.1]]), ibo_db=None)
        out = pa_apply(IqSequence(np.array([5.0 + 0j]), 1.0), pa).samples
        assert out[0] == pytest.approx(np.exp(0.1j))

    def test_am_pm(self):
        pa = PaModel(np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 0.4]]), ibo_db=None)
        out = pa_apply(IqSequence(np.array([1.0 + 0j]), 1.0), pa).samples
        assert np.angle(out[0]) == pytest.approx(0.2)

    @pytest.mark.parametrize(
        "lut",
        [
            np.zeros((1, 3)),
            np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            np.array([[0.0, 1.0, 0.0], [1.0, 0.5, 0.0]]),
            np.zeros((3, 2)),
        ],
    )
    def test_malformed_lut(self, lut):
        with pytest.raises(ValueError):
            PaModel(lut)

    def test_negative_ibo(self):
        with pytest.raises(ValueError):
            PaModel(IDENTITY_LUT, ibo_db=-1.0)

    def test_csv_round_trip(self, tmp_path):
        pa = PaModel(rapp_lut(3.0, n_points=17))
        pa.to_csv(tmp_path / "lut.csv")
        np.testing.assert_allclose(PaModel.from_csv(tmp_path / "lut.csv").lut, pa.lut)


class TestPhaseNoise:
    def test_flat_psd_integral(self):
        psd = NoisePsdSpec(((1e3, -100.0), (1e6, -100.0)), 1e3, 1e6)
        expected = 2e-10 * (1e6 - 1e3)
        var = np.mean([np.var(pn_generate(psd, 2**16, 4e6, seed=s)) for s in range(20)])
        assert var == pytest.approx(expected, rel=0.03)

    def test_level_scaling(self):
        psd = NoisePsdSpec(((1e3, -100.0), (1e6, -100.0)), 1e3, 1e6)
        a = pn_generate(psd, 2**14, 4e6, seed=1)
        b = pn_generate(psd.shifted(10.0), 2**14, 4e6, seed=1)
        assert np.var(b) / np.var(a) == pytest.approx(10.0, rel=1e-9)

    def test_shaping_carries_analytic_power(self):
        psd = default_pn_psd()
        n = 2**21
        df = FS / n
        f = np.fft.rfftfreq(n, 1 / FS)
        per_bin = psd.cumulative(f + df / 2) - psd.cumulative(f - df / 2)
        assert 2 * per_bin.sum() == pytest.approx(psd.integrated_rad2(), rel=1e-9)

    @pytest.mark.slow
    def test_calibrated_integrated_level(self):
        # Half the power sits in the bin next to f_min, so single records
        # scatter by several dB; 400 records bring the spread to about 0.12 dB.
        psd = default_pn_psd()
        var = np.mean([np.mean(pn_generate(psd, 2**21, FS, seed=s) ** 2) for s in range(400)])
        assert 10 * np.log10(var) == pytest.approx(-32.09, abs=0.3)

    def test_short_record_warns_and_extends(self):
        psd = NoisePsdSpec(((1e3, -100.0), (1e6, -100.0)), 1e3, 1e6)
        with pytest.warns(UserWarning, match="cannot resolve"):
            out = pn_generate(psd, 100, 4e6)
        assert out.shape == (100,)

    def test_pn_apply_zero_and_constant(self):
        cfg = SystemConfig(n_subcarriers=64, n_cp=8, m_symbols=4, preamble=None)
        x, _ = generate_frame(cfg)
        s = modulate(x, cfg)
        np.testing.assert_array_equal(pn_apply(s, np.zeros(len(s))).samples, s.samples)
        y = demodulate(pn_apply(s, np.full(len(s), 0.7)), 0, cfg)
        np.testing.assert_allclose(y, x * np.exp(0.7j), atol=1e-12)

    def test_sinusoidal_phase_sidebands(self):
        n, delta_f = 64, 120e3
        fs = n * delta_f
        fm = delta_f / 2
        length = 128 * 50
        t = np.arange(length) / fs
        y = pn_apply(IqSequence(np.ones(length, complex), fs), 0.01 * np.sin(2 * np.pi * fm * t))
        spec = np.abs(np.fft.fft(y.samples)) / length
        k = int(round(fm / fs * length))
        assert spec[k] == pytest.approx(0.005, rel=1e-3)
        assert spec[-k] == pytest.approx(0.005, rel=1e-3)

    def test_pn_apply_length_mismatch(self):
        with pytest.raises(ValueError):
            pn_apply(IqSequence(np.ones(4), 1.0), np.zeros(3))


class TestQuantizer:
    def test_full_scale_sine_sqnr(self):
        n = 2**16
        tone = 0.999999 * np.exp(2j * np.pi * 0.123456789 * np.arange(n))
        y = IqSequence(tone, 1.0)
        out = quantize_clip(y, QuantizerSpec(12, full_scale=1.0)).samples
        sqnr = 10 * np.log10(np.mean(tone.real**2) / np.mean((out.real - tone.real) ** 2))
        assert sqnr == pytest.approx(6.02 * 12 + 1.76, abs=0.3)

    def test_gaussian_with_headroom(self):
        y = IqSequence(crandn(np.random.default_rng(3), 2**18), 1.0)
        out = quantize_clip(y, QuantizerSpec(12, headroom_db=20.0)).samples
        sqnr = 10 * np.log10(np.mean(np.abs(y.samples) ** 2) / np.mean(np.abs(out - y.samples) ** 2))
        assert sqnr == pytest.approx(74.0 - 20.0, abs=0.5)

    def test_clipping_bound(self):
        y = IqSequence(2.0 * crandn(np.random.default_rng(4), 1000) * 3, 1.0)
        out = quantize_clip(y, QuantizerSpec(8, full_scale=1.0)).samples
        assert np.all(np.abs(out.real) <= 1.0) and np.all(np.abs(out.imag) <= 1.0)
        assert np.max(np.abs(out)) <= np.sqrt(2)

    def test_validation(self):
        with pytest.raises(ValueError):
            QuantizerSpec(0)
        with pytest.raises(ValueError):
            QuantizerSpec(8, full_scale=0.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_idempotent(self, seed):
        y = IqSequence(crandn(np.random.default_rng(seed), 4096), 1.0)
        q = QuantizerSpec(10, full_scale=0.5)
        once = quantize_clip(y, q)
        assert quantize_clip(once, q).samples.tobytes() == once.samples.tobytes()


class TestJitter:
    def test_exact_rms(self):
        tau = jitter_generate(default_sj_psd(), 45e-15, 2**18, FS, seed=2)
        assert np.sqrt(np.mean(tau**2)) == pytest.approx(45e-15, rel=1e-3)

    def test_zero_rms(self):
        np.testing.assert_array_equal(jitter_generate(default_sj_psd(), 0.0, 100, FS), np.zeros(100))

    def test_white_spec_is_white(self):
        fs = 1e6
        psd = NoisePsdSpec(((10.0, -100.0), (fs / 2, -100.0)), 10.0, fs / 2)
        tau = jitter_generate(psd, 1e-12, 2**18, fs, seed=5)
        r = np.array([np.dot(tau[:-k], tau[k:]) for k in range(1, 6)]) / np.dot(tau, tau)
        assert np.all(np.abs(r) < 4 / np.sqrt(len(tau)))


class TestResample:
    def test_identity(self):
        y = IqSequence(crandn(np.random.default_rng(0), 256), 1.0)
        np.testing.assert_allclose(resample_clock(y).samples, y.samples, atol=1e-9)

    def test_sfo_scales_tone_frequency(self):
        # Sampling at s Ts (1 - sfo) turns f0 into f0 (1 - sfo) per nominal sample.
        n, f0, sfo = 2**20, 0.1, 1e-6
        y = tone_seq(n, 1.0, f0)
        out = resample_clock(y, sfo, tol=1e-12).samples
        core = slice(n // 8, n - n // 8)
        s = np.arange(n)[core]
        ph = np.unwrap(np.angle(out[core] * np.exp(-2j * np.pi * f0 * s)))
        slope = np.polyfit(s, ph, 1)[0] / (2 * np.pi)
        assert slope == pytest.approx(-f0 * sfo, rel=1e-3)

    def test_constant_jitter_is_delay(self):
        rng = np.random.default_rng(1)
        n = 1024
        spec = crandn(rng, n)
        spec[np.abs(np.fft.fftfreq(n)) > 0.4] = 0
        y = IqSequence(np.fft.ifft(spec), FS)
        c = 0.37 / FS
        out = resample_clock(y, 0.0, np.full(n, -c)).samples
        ref = apply_sync_offsets(y, SyncOffsets(sto_s=c)).samples
        np.testing.assert_allclose(out, ref, atol=1e-9)

    def test_support(self):
        with pytest.raises(ValueError):
            resample_at(np.ones(8), np.full(8, 4.0))
        with pytest.raises(ValueError):
            resample_at(np.ones(8), np.zeros(7))
        with pytest.raises(ValueError):
            resample_clock(IqSequence(np.ones(8), 1.0), 0.0, np.zeros(7))


class TestImpairmentInvariants:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_zeroed_parameters_are_identity(self, seed):
        y = IqSequence(crandn(np.random.default_rng(seed), 2048), FS)
        ref = y.samples
        np.testing.assert_allclose(pa_apply(y, PaModel(IDENTITY_LUT)).samples, ref, atol=1e-9)
        np.testing.assert_allclose(pn_apply(y, np.zeros(len(y))).samples, ref, atol=1e-9)
        tau = jitter_generate(default_sj_psd(), 0.0, len(y), FS, seed=seed)
        np.testing.assert_allclose(resample_clock(y, 0.0, tau).samples, ref, atol=1e-9)
        fine = QuantizerSpec(48, full_scale=8.0)
        np.testing.assert_allclose(quantize_clip(y, fine).samples, ref, atol=1e-9)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_generators_deterministic_and_decorrelated(self, seed):
        n = 1_000_000
        a = pn_generate(BROADBAND, n, FS, seed=seed)
        assert a.tobytes() == pn_generate(BROADBAND, n, FS, seed=seed).tobytes()
        b = pn_generate(BROADBAND, n, FS, seed=seed + 100)
        assert abs(np.dot(a, b)) / np.sqrt(np.dot(a, a) * np.dot(b, b)) < 0.05
        ja = jitter_generate(BROADBAND, 45e-15, n, FS, seed=seed)
        jb = jitter_generate(BROADBAND, 45e-15, n, FS, seed=seed + 100)
        assert ja.tobytes() == jitter_generate(BROADBAND, 45e-15, n, FS, seed=seed).tobytes()
        assert abs(np.dot(ja, jb)) / np.sqrt(np.dot(ja, ja) * np.dot(jb, jb)) < 0.05

    @pytest.mark.parametrize("seed", SEEDS)
    def test_pn_psd_matches_anchors(self, seed):
        fs = 4e6
        psd = NoisePsdSpec(((1e3, -80.0), (1e4, -90.0), (1e5, -110.0), (1e6, -120.0)), 1e3, 1.9e6)
        phi = pn_generate(psd, 2**22, fs, seed=seed)
        nper = 2**16
        f, pxx = signal.welch(phi, fs, nperseg=nper, noverlap=nper // 2, return_onesided=True)
        assert len(phi) // nper >= 20
        # One-sided Welch of a real process is twice the single-sideband L(f).
        measured = pxx / 2
        edges = 10 ** np.arange(3.0, 6.3, 0.5)
        for lo, hi in zip(edges[:-1], edges[1:]):
            band = (f >= lo) & (f < hi)
            got = 10 * np.log10(np.mean(measured[band]))
            want = 10 * np.log10(np.mean(psd.psd(f[band])))
            assert got == pytest.approx(want, abs=1.5), (lo, hi)

    @given(theta=st.floats(-np.pi, np.pi), seed=st.integers(0, 1000))
    def test_pa_phase_covariant(self, theta, seed):
        x = IqSequence(crandn(np.random.default_rng(seed), 256), 1.0)
        pa = PaModel(rapp_lut(2.0), 10.0)
        rot = pa_apply(x.replace(np.exp(1j * theta) * x.samples), pa).samples
        base = pa_apply(x, pa).samples
        assert len(base) == len(x)
        np.testing.assert_allclose(rot, np.exp(1j * theta) * base, atol=1e-12)
