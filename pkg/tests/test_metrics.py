import numpy as np
import pytest

from evbhmm.control import RunLog
from evbhmm.metrics import MetricsReport, compute_metrics, mae, mape


def test_mape_example():
    assert mape([100.0, -200.0], [110.0, -180.0]) == pytest.approx(10.0)


def test_mape_skips_zero_reference():
    assert mape([0.0, 50.0], [3.0, 55.0]) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        mape([0.0], [1.0])
    with pytest.raises(ValueError):
        mape([1.0, 2.0], [1.0])


def test_mae():
    assert mae([1.0, 2.0], [2.0, 0.0]) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        mae([], [])


def _log(f, ref, act, payload=None):
    log = RunLog.empty()
    for k, (a, b, c) in enumerate(zip(f, ref, act)):
        row = dict(t_s=15.0 * (k + 1), delta_f_hz=a, p_ev_real_kw=c, p_ref_kw=b, dp_cg_mw=0.0,
                   err_p=0.0, refit_flag=0)
        if payload is not None:
            row["payload_bytes"] = payload
        log.append(**row)
    return log


def test_runlog_metrics():
    log = _log([0.05, -0.2, 0.1, 0.0], [1000.0, 1000.0, 2000.0, 2000.0],
               [900.0, 1100.0, 2000.0, 1800.0], payload=60)
    m = compute_metrics(log)
    assert m.n_steps == 4
    assert m.max_abs_df_hz == pytest.approx(0.2)
    assert m.deadband_residency_pct == pytest.approx(75.0)
    assert m.mape_pct == pytest.approx(100 * (0.1 + 0.1 + 0 + 0.1) / 4)
    assert m.mae_mw == pytest.approx(0.1)
    assert m.bytes_per_cycle == 60


def test_no_ev_run_has_no_tracking_mape():
    m = compute_metrics(_log([0.3], [0.0], [0.0]))
    assert np.isnan(m.mape_pct) and m.bytes_per_cycle == 0


def test_report_json_round_trip(tmp_path):
    rep = MetricsReport(3, 1.5, 0.2, 0.3, 99.0, 60.0, 1.0, 2.0)
    rep.to_json(tmp_path / "a.json")
    assert MetricsReport.from_json(tmp_path / "a.json") == rep
    rep.to_json(tmp_path / "b.json", include_timing=False)
    assert "fit_time" not in (tmp_path / "b.json").read_text()


def test_errors():
    with pytest.raises(ValueError):
        compute_metrics()
    with pytest.raises(ValueError):
        compute_metrics(RunLog.empty())
