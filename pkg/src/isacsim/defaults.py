"""Default impairment models.

These tables are calibrated, not normative: the source oscillator and PA
models are not published, so the shapes below were tuned on the default
1584 x 1120 frame to land near the reported sensing metrics.
"""

from .impairments import NoisePsdSpec, PaModel, rapp_lut

# Per-oscillator PN, (offset Hz, dBc/Hz); integrates to -32.09 dBc over [100 Hz, 95 MHz].
PN_ANCHORS = (
    (1e2, -50.22),
    (3e2, -76.22),
    (1e3, -89.72),
    (1e4, -97.72),
    (1e5, -107.22),
    (1e6, -111.22),
    (1e7, -113.22),
    (1e8, -141.22),
)
PN_F_MIN_HZ = 100.0
PN_F_MAX_HZ = 95e6

# Synthesizer-style shape for the sampling jitter; only the shape matters, the RMS is rescaled.
SJ_ANCHORS = (
    (1e3, -95.0),
    (1e4, -105.0),
    (1e5, -110.0),
    (1e6, -130.0),
    (1e7, -150.0),
    (9.5e7, -155.0),
)
SJ_F_MIN_HZ = 1e3
SJ_F_MAX_HZ = 95e6
SJ_RMS_S = 45e-15

PA_SMOOTHNESS = 3.0
PA_IBO_DB = 10.0


def default_pn_psd() -> NoisePsdSpec:
    return NoisePsdSpec(PN_ANCHORS, PN_F_MIN_HZ, PN_F_MAX_HZ)


def default_sj_psd() -> NoisePsdSpec:
    return NoisePsdSpec(SJ_ANCHORS, SJ_F_MIN_HZ, SJ_F_MAX_HZ)


def default_pa(ibo_db: float = PA_IBO_DB, smoothness: float = PA_SMOOTHNESS) -> PaModel:
    return PaModel(rapp_lut(smoothness), ibo_db)
