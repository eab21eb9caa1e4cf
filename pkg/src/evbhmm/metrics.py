"""Tracking and frequency-quality metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


def mape(ref, actual, guard=1e-6):
    """Mean absolute percentage error (%) over entries with ``|ref| > guard``."""
    ref = np.asarray(ref, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if ref.shape != actual.shape:
        raise ValueError("reference and actual series differ in shape")
    ok = np.abs(ref) > guard
    if not ok.any():
        raise ValueError("no usable reference values")
    return float(np.mean(np.abs((ref[ok] - actual[ok]) / ref[ok])) * 100.0)


def mae(ref, actual):
    ref = np.asarray(ref, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if ref.size == 0:
        raise ValueError("empty series")
    return float(np.mean(np.abs(ref - actual)))


@dataclass
class MetricsReport:
    n_steps: int
    mape_pct: float
    mae_mw: float
    max_abs_df_hz: float = float("nan")
    deadband_residency_pct: float = float("nan")
    bytes_per_cycle: float = float("nan")
    fit_time_mean_s: float = float("nan")
    fit_time_max_s: float = float("nan")

    def to_dict(self):
        return asdict(self)

    def to_json(self, path, include_timing=True):
        d = self.to_dict()
        if not include_timing:
            d.pop("fit_time_mean_s")
            d.pop("fit_time_max_s")
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def compute_metrics(log=None, *, ref=None, actual=None, f_deadband=0.1):
    """Metrics of a regulation run log, or of a ``ref``/``actual`` power pair in kW."""
    if log is not None:
        if len(log) == 0:
            raise ValueError("empty run log")
        ref = log.column("p_ref_kw")
        actual = log.column("p_ev_real_kw")
        f = log.column("delta_f_hz")
        extras = log.extras
        payload = np.asarray(extras.get("payload_bytes", []), dtype=float)
        fits = np.asarray(extras.get("fit_s", []), dtype=float)
        has_ev = payload.size > 0
        return MetricsReport(
            n_steps=len(log),
            mape_pct=mape(ref, actual) if has_ev else float("nan"),
            mae_mw=mae(ref, actual) / 1000.0,
            max_abs_df_hz=float(np.max(np.abs(f))),
            deadband_residency_pct=float(np.mean(np.abs(f) <= f_deadband) * 100.0),
            bytes_per_cycle=float(payload.mean()) if has_ev else 0.0,
            fit_time_mean_s=float(fits.mean()) if fits.size else float("nan"),
            fit_time_max_s=float(fits.max()) if fits.size else float("nan"))
    if ref is None or actual is None:
        raise ValueError("need a run log or a ref/actual pair")
    ref = np.asarray(ref, dtype=float)
    if ref.size == 0:
        raise ValueError("empty series")
    return MetricsReport(n_steps=int(ref.size), mape_pct=mape(ref, actual),
                         mae_mw=mae(ref, actual) / 1000.0)
