"""Closed-form sensing KPIs, periodogram SQNR and bistatic link budget."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import LinkBudget
from .ofdm import SystemConfig
from .units import C0, K_B, db10, dbm_to_w, from_db, w_to_dbm

I_MODES = ("none", "mean_interference", "artifact_level")


@dataclass(frozen=True)
class KpiTable:
    delta_r_m: float
    r_max_ua_m: float
    r_max_isi_m: float
    delta_fd_hz: float
    fd_max_ua_hz: float
    fd_max_ici_hz: float
    gp_db: float

    def to_dict(self) -> dict:
        return asdict(self)


def kpi_table(config: SystemConfig) -> KpiTable:
    b = config.bandwidth_hz
    n, m = config.n_subcarriers, config.m_symbols
    dr = C0 / b
    dfd = b / ((n + config.n_cp) * m)
    return KpiTable(
        delta_r_m=dr,
        r_max_ua_m=n * dr,
        r_max_isi_m=config.n_cp * dr,
        delta_fd_hz=dfd,
        fd_max_ua_hz=m * dfd / 2,
        fd_max_ici_hz=config.delta_f_hz / 10,
        gp_db=float(db10(n * m)),
    )


def sqnr_periodogram(nb: int, fs_hz: float, b_hz: float, headroom_db: float, gp_db: float) -> float:
    """Periodogram SQNR (dB) of a uniform ``nb``-bit quantizer."""
    if nb < 1:
        raise ValueError("nb must be >= 1")
    if fs_hz < b_hz:
        raise ValueError("fs must be >= B")
    return 6.02 * nb + 1.76 + float(db10(fs_hz / b_hz)) + gp_db - headroom_db


def _awgn_w(budget: LinkBudget, b_hz: float) -> float:
    return K_B * b_hz * budget.temp_k * from_db(budget.nf_db)


def max_range_param(
    budget: LinkBudget,
    sigma_m2: float,
    gp_linear: float,
    b_hz: float,
    fc_hz: float,
    i_mode: str = "none",
    i_db_rel_awgn: float | None = None,
    pplr_db: float = 0.0,
) -> float:
    """Largest range parameter rho (m) meeting the minimum SINR.

    ``i_db_rel_awgn`` is the hardware interference level over AWGN for the
    chosen ``i_mode``; it falls back to ``budget.i_hw_db_rel_awgn``.
    """
    if i_mode not in I_MODES:
        raise ValueError(f"i_mode must be one of {I_MODES}")
    noise = _awgn_w(budget, b_hz)
    if i_mode != "none":
        rel = i_db_rel_awgn if i_db_rel_awgn is not None else budget.i_hw_db_rel_awgn
        if rel is None:
            raise ValueError(f"i_mode {i_mode!r} needs an interference level")
        noise = noise * (1 + from_db(rel))
    lam = C0 / fc_hz
    num = (
        dbm_to_w(budget.p_tx_sensing_dbm)
        * from_db(budget.g_tx_dbi + budget.g_rx_dbi + pplr_db)
        * sigma_m2
        * lam**2
        * gp_linear
    )
    return float((num / ((4 * np.pi) ** 3 * noise * from_db(budget.sinr_min_db))) ** 0.25)


def combine_impairments(rows: dict[str, dict]) -> dict:
    """Combine per-impairment metrics assuming uncorrelated interference.

    PPLRs add in dB; mean and worst interference levels add in linear
    scale. A row without ``min_sir_db`` contributes its mean level to the
    worst case. Missing PPLRs count as 0 dB.
    """
    pplr = sum(r.get("pplr_db") or 0.0 for r in rows.values())
    mean_i = sum(from_db(-r["mean_sir_db"]) for r in rows.values())
    max_i = sum(from_db(-(r.get("min_sir_db") or r["mean_sir_db"])) for r in rows.values())
    return {"pplr_db": pplr, "mean_sir_db": float(-db10(mean_i)), "min_sir_db": float(-db10(max_i))}


@dataclass
class BudgetCurve:
    rho_axis: np.ndarray
    target_power_dbm: dict[str, np.ndarray]
    reference_peak_dbm: float
    awgn_dbm: float
    mean_interf_dbm: float
    artifact_dbm: float
    rcs_m2: dict[str, float] = field(default_factory=dict)
    pplr_db: float = 0.0
    level_1m_dbm: dict[str, float] = field(default_factory=dict)

    def floors(self) -> dict[str, float]:
        """Effective floor per i-mode; AWGN and interference add in power."""
        awgn = dbm_to_w(self.awgn_dbm)
        return {
            "none": self.awgn_dbm,
            "mean_interference": float(w_to_dbm(awgn + dbm_to_w(self.mean_interf_dbm))),
            "artifact_level": float(w_to_dbm(awgn + dbm_to_w(self.artifact_dbm))),
        }

    def level_at(self, name: str, rho_m, i_mode: str = "mean_interference") -> np.ndarray:
        """Target level (dBm) of class ``name`` at ``rho_m``; exact ``rho^-4`` law.

        The impairment PPLR is left out for ``i_mode="none"``, the
        impairment-free reference case.
        """
        a = self.level_1m_dbm[name] + (0.0 if i_mode == "none" else self.pplr_db)
        return a - 40 * np.log10(np.asarray(rho_m, float))

    def to_csv(self, path) -> None:
        names = list(self.target_power_dbm)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["rho_m"] + [f"{n}_dbm" for n in names] + ["reference_peak_dbm", "awgn_dbm", "mean_interf_dbm", "artifact_dbm"]
            )
            for i, rho in enumerate(self.rho_axis):
                w.writerow(
                    [f"{rho:.6g}"]
                    + [f"{self.target_power_dbm[n][i]:.6f}" for n in names]
                    + [f"{v:.6f}" for v in (self.reference_peak_dbm, self.awgn_dbm, self.mean_interf_dbm, self.artifact_dbm)]
                )


def reference_peak_dbm(budget: LinkBudget, r0_m: float, fc_hz: float, gp_db: float) -> float:
    """Friis level of the reference path over bistatic range ``r0_m``, plus G_p."""
    lam = C0 / fc_hz
    fspl = 20 * np.log10(4 * np.pi * r0_m / lam)
    return budget.p_tx_reference_dbm + budget.g_tx_dbi + budget.g_rx_dbi - fspl + gp_db


def budget_curve(
    budget: LinkBudget,
    rcs_m2: dict[str, float],
    gp_db: float,
    rho_m: np.ndarray,
    fc_hz: float,
    b_hz: float,
    r0_m: float,
    mean_sir_db: float,
    min_sir_db: float,
    pplr_db: float = 0.0,
) -> BudgetCurve:
    """Fig.-style periodogram levels vs range parameter for each RCS class.

    Interference floors sit ``mean_sir_db`` and ``min_sir_db`` below the
    reference peak. Target levels include ``pplr_db``.
    """
    rho = np.asarray(rho_m, float)
    if np.any(rho <= 0):
        raise ValueError("rho range must be positive")
    lam = C0 / fc_hz
    base = (
        budget.p_tx_sensing_dbm
        + budget.g_tx_dbi
        + budget.g_rx_dbi
        + 10 * np.log10(lam**2 / (4 * np.pi) ** 3)
        + gp_db
    )
    level_1m = {name: float(base + 10 * np.log10(s)) for name, s in rcs_m2.items()}
    ref = reference_peak_dbm(budget, r0_m, fc_hz, gp_db)
    curve = BudgetCurve(
        rho_axis=rho,
        target_power_dbm={n: a + pplr_db - 40 * np.log10(rho) for n, a in level_1m.items()},
        reference_peak_dbm=float(ref),
        awgn_dbm=float(w_to_dbm(_awgn_w(budget, b_hz))),
        mean_interf_dbm=float(ref - mean_sir_db),
        artifact_dbm=float(ref - min_sir_db),
        rcs_m2=dict(rcs_m2),
        pplr_db=pplr_db,
        level_1m_dbm=level_1m,
    )
    return curve


@dataclass(frozen=True)
class Intersection:
    rcs_class: str
    i_mode: str
    rho_m: float
    floor_dbm: float
    in_range: bool


def solve_rho_intersections(curve: BudgetCurve, sinr_min_db: float = 17.0) -> list[Intersection]:
    """Range parameter where each class's level meets floor + SINR_min.

    The AWGN-only floor disregards hardware interference. The mean and
    artifact floors include the AWGN in power, as the combined
    noise-plus-interference term does. ``in_range`` marks whether the point
    falls on the sampled rho axis.
    """
    out = []
    lo, hi = float(curve.rho_axis.min()), float(curve.rho_axis.max())
    for name in curve.level_1m_dbm:
        for mode, floor in curve.floors().items():
            lvl = float(curve.level_at(name, 1.0, mode))
            rho = 10 ** ((lvl - floor - sinr_min_db) / 40)
            out.append(Intersection(name, mode, float(rho), floor, lo <= rho <= hi))
    return out


def budget_report(curve: BudgetCurve, points: list[Intersection]) -> str:
    return json.dumps(
        {
            "reference_peak_dbm": curve.reference_peak_dbm,
            "awgn_dbm": curve.awgn_dbm,
            "mean_interf_dbm": curve.mean_interf_dbm,
            "artifact_dbm": curve.artifact_dbm,
            "pplr_db": curve.pplr_db,
            "rcs_m2": curve.rcs_m2,
            "intersections": [asdict(p) for p in points],
        },
        indent=1,
    )
