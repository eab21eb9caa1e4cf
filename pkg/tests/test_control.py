import ast
import inspect
import logging
import math
import re

import numpy as np
import pytest

from evbhmm import control, ident
from evbhmm.bhmm import mean_rollout, template_params
from evbhmm.control import (DeadbeatBisection, GridProfiles, GridState, RegulationConfig, RunLog,
                            bhmm_affine, decode_broadcast, dispatch, encode_broadcast, mpc_solve,
                            pi_regulation, predict_band, regulation_demand, solve_tracking_qp,
                            swing, swing_step, synthetic_profiles, update_lambda)
from evbhmm.essm import FleetStats

CFG = RegulationConfig()
STATS = FleetStats(n_ev=10_000.0, eta=0.915, capacity=25.0, p_ac=6.2, p_ad=6.2)


# ---------------------------------------------------------------- frequency

def test_swing_equilibrium():
    for method in ("zoh", "euler"):
        assert swing(0.3, 20 * 0.3, 120, 20, 15, method) == pytest.approx(0.3, abs=1e-15)


def test_swing_euler_example():
    assert swing(0.0, 12.0, 120, 20, 15, "euler") == pytest.approx(1.5)


def test_swing_zoh_matches_ode_solution():
    # exact solution of h f' = p - d f with constant p over dt
    h, d, dt, p, f0 = 120.0, 20.0, 15.0, 12.0, 0.1
    tau = h / d
    exact = p / d + (f0 - p / d) * math.exp(-dt / tau)
    assert swing(f0, p, h, d, dt) == pytest.approx(exact, rel=1e-14)
    assert swing(0.0, 12.0, h, d, dt) == pytest.approx(0.6 * (1 - math.exp(-2.5)))


def test_swing_decay_rate():
    f = [0.2]
    for _ in range(5):
        f.append(swing(f[-1], 0.0, 120, 20, 15))
    ratios = np.array(f[1:]) / np.array(f[:-1])
    assert np.allclose(ratios, math.exp(-20 * 15 / 120))
    # small-step limit: per-step decay 1 - (d/h) dt
    assert swing(0.2, 0.0, 120, 20, 0.01) == pytest.approx(0.2 * (1 - 20 / 120 * 0.01), rel=1e-5)


def test_swing_step_updates_grid():
    g = GridState(delta_f=0.0, inertia=120, damping=20)
    assert swing_step(g, 12.0, 15.0, "euler").delta_f == pytest.approx(1.5)
    with pytest.raises(ValueError):
        swing(0, 1, 120, 20, 15, "rk4")


def test_pi_regulation_examples():
    assert pi_regulation(0.05, 100, 0.1) == 0.0
    assert pi_regulation(-0.05, 100, 0.1) == 0.0
    assert pi_regulation(0.2, 100, 0.1) == pytest.approx(10.0)
    assert pi_regulation(-0.2, 100, 0.1) == pytest.approx(-10.0)
    assert abs(pi_regulation(0.1 + 1e-12, 100, 0.1)) < 1e-9
    assert regulation_demand(0.2, 100, 0.1) == pytest.approx(-10.0)
    with pytest.raises(ValueError):
        pi_regulation(0.2, -1, 0.1)


def test_dead_band_exact_zero():
    for f in np.linspace(-0.1, 0.1, 201):
        assert regulation_demand(f, 57.3, 0.1) == 0.0


def test_lambda_unchanged_inside_band():
    g = GridState(delta_f=0.02, lam=33.0, inertia=120, damping=20)
    assert update_lambda(g, CFG, p_imbalance=0.5) == 33.0


@pytest.mark.parametrize("p_imb", [-9.0, -4.0, -2.5, 3.0, 6.0, 10.0])
def test_lambda_deadbeat(p_imb):
    g = GridState(delta_f=0.0, lam=0.0, inertia=120, damping=20)
    lam = update_lambda(g, CFG, p_imb)
    f1 = swing(0.0, p_imb, 120, 20, 15)
    assert abs(f1) > CFG.f_deadband
    f_next = swing(0.0, p_imb + regulation_demand(f1, lam, CFG.f_deadband), 120, 20, 15)
    assert abs(f_next) <= CFG.f_deadband + 1e-6
    assert f_next * f1 >= 0
    if lam < CFG.lambda_max - 1e-6:
        assert abs(f_next) == pytest.approx(CFG.f_target, abs=1e-6)
    else:  # saturated: a small excess needs a bias factor above the bracket
        assert abs(f_next) > CFG.f_target


def test_lambda_euler_deadbeat():
    cfg = RegulationConfig(swing="euler")
    g = GridState(delta_f=0.0, inertia=120, damping=20)
    lam = update_lambda(g, cfg, 1.5)
    f1 = swing(0.0, 1.5, 120, 20, 15, "euler")
    f_next = swing(0.0, 1.5 + regulation_demand(f1, lam, 0.1), 120, 20, 15, "euler")
    assert abs(f_next) <= 0.1 + 1e-6


def test_lambda_monotone_in_excess():
    g = GridState(delta_f=0.0, inertia=120, damping=20)
    lams = [update_lambda(g, CFG, p) for p in np.linspace(2.2, 40, 60)]
    assert np.all(np.diff(lams) <= 1e-9)
    lams = [update_lambda(g, CFG, -p) for p in np.linspace(2.2, 40, 60)]
    assert np.all(np.diff(lams) <= 1e-9)


def test_lambda_strategy_interface():
    class Fixed:
        def __call__(self, grid, config, p_imbalance=0.0):
            return 7.0
    assert update_lambda(GridState(), CFG, 0.0, strategy=Fixed()) == 7.0
    assert isinstance(DeadbeatBisection()(GridState(lam=3.0), CFG), float)


# ---------------------------------------------------------------- dispatch

def grid(p_cg=200.0):
    return GridState(delta_f=0.0, p_cg=p_cg, lam=28.0, inertia=120, damping=20)


def test_dispatch_examples():
    d = dispatch(0.0, -20_000.0, -12_000.0, -23_000.0, grid(), CFG)
    assert d.dp_ev == 0 and d.dp_cg == 0 and d.p_ref == -20_000.0
    d = dispatch(5.0, -20_000.0, -12_000.0, -23_000.0, grid(), CFG)
    assert d.dp_ev == pytest.approx(5000.0) and d.dp_cg == 0.0
    d = dispatch(20.0, -20_000.0, -12_000.0, -23_000.0, grid(400.0), CFG)
    assert d.dp_ev == pytest.approx(8000.0) and d.dp_cg == pytest.approx(12.0)
    assert CFG.ramp_step == 12.5


def test_dispatch_ramp_and_capacity():
    d = dispatch(30.0, -20_000.0, -12_000.0, -23_000.0, grid(400.0), CFG)
    assert d.dp_ev == pytest.approx(8000.0) and d.dp_cg == pytest.approx(12.5)
    d = dispatch(30.0, -20_000.0, -12_000.0, -23_000.0, grid(495.0), CFG)
    assert d.dp_cg == pytest.approx(5.0)
    d = dispatch(-10.0, -20_000.0, -12_000.0, -23_000.0, grid(400.0), CFG)
    assert d.dp_ev == pytest.approx(-3000.0) and d.dp_cg == pytest.approx(-7.0)
    d = dispatch(-10.0, -20_000.0, -12_000.0, -23_000.0, grid(2.0), CFG)
    assert d.dp_cg == pytest.approx(-2.0)


def test_dispatch_clamps_inconsistent_band(caplog):
    with caplog.at_level(logging.WARNING, logger="evbhmm.control"):
        d = dispatch(1.0, -30_000.0, -12_000.0, -23_000.0, grid(), CFG)
    assert d.clamped and d.p_ref == pytest.approx(-22_000.0)
    assert "clamping" in caplog.text


def test_dispatch_feasibility_random():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        p = rng.uniform(-30_000, 0)
        up, lo = p + rng.uniform(0, 20_000), p - rng.uniform(0, 5_000)
        g = grid(rng.uniform(0, 500))
        d = dispatch(rng.uniform(-40, 40), p, up, lo, g, CFG)
        assert abs(d.dp_cg) <= CFG.ramp_step + 1e-12
        assert CFG.cg_min - 1e-9 <= g.p_cg + d.dp_cg <= CFG.cg_max + 1e-9
        assert lo - 1e-6 <= d.p_ref <= up + 1e-6


# ---------------------------------------------------------------- MPC

def template_case(n_bins=1, seed=0):
    rng = np.random.default_rng(seed)
    p = template_params(STATS, n_bins, 15.0)
    mu = rng.exponential(size=p.n)
    return p, mu / mu.sum()


def test_affine_form_matches_rollout():
    p, mu = template_case(3, 1)
    p.drift = np.random.default_rng(2).normal(0, 1e-3, p.drift.shape)
    p0, g = bhmm_affine(p, mu)
    u = np.random.default_rng(3).uniform(0, 1, 14)
    assert p0 + g @ u == pytest.approx(mean_rollout(p, mu, u[None])[0], rel=1e-12)


def test_mpc_regularized_zero():
    p, mu = template_case(3)
    p0, hi, lo = predict_band(p, mu)
    res = mpc_solve(p, mu, p0, lo, hi, CFG)
    assert np.linalg.norm(res.u) <= 1e-3
    assert res.kkt <= 1e-6


def test_mpc_saturates_for_unreachable_reference():
    p, mu = template_case(3)
    p0, hi, lo = predict_band(p, mu)
    res = mpc_solve(p, mu, hi + 50_000.0, lo, hi + 1e9, CFG)
    _, g = bhmm_affine(p, mu)
    assert np.allclose(res.u[g > 1e-9], 1.0)
    assert np.allclose(res.u[g < -1e-9], 0.0)
    assert res.kkt <= 1e-6
    res = mpc_solve(p, mu, lo - 50_000.0, lo - 1e9, hi, CFG)
    assert np.allclose(res.u[g < -1e-9], 1.0)


def grid_search_two_groups(p0, a, b, p_ref, lo, hi, step=0.01):
    vals = np.arange(0, 1 + 1e-12, step)
    UA, UB = np.meshgrid(vals, vals)
    P = (p0 + 3 * a * UA + 3 * b * UB) * 1e-3
    J = (CFG.q_w * (P - p_ref * 1e-3) ** 2
         + CFG.band_weight * (np.maximum(P - hi * 1e-3, 0) ** 2 + np.maximum(lo * 1e-3 - P, 0) ** 2)
         + CFG.r_w * 3 * (UA ** 2 + UB ** 2))
    return J.min()


@pytest.mark.parametrize("seed", range(6))
def test_mpc_against_grid_search(seed):
    # N=1: six inputs; two gain groups of three equal entries make the optimum
    # symmetric within each group, so a 2-D grid covers the search
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(500, 3000), -rng.uniform(500, 3000)
    g = np.array([a, a, a, b, b, b])
    p0 = -20_000.0
    p_ref = p0 + rng.uniform(-6000, 6000)
    lo, hi = p0 - 5000.0, p0 + 5000.0
    res = solve_tracking_qp(p0, g, p_ref, lo, hi, CFG)
    best = grid_search_two_groups(p0, a, b, p_ref, lo, hi)
    assert res.objective <= best + 1e-12
    # objective change from moving one grid cell in each group
    slope = 2 * CFG.q_w * 3 * (abs(a) + abs(b)) * 1e-3 * (abs(p_ref - p0) * 1e-3 + 10)
    assert best - res.objective <= 2 * 0.01 * slope
    assert res.kkt <= 1e-6


def test_mpc_pg_agrees_with_scalar():
    rng = np.random.default_rng(7)
    for _ in range(20):
        g = rng.normal(0, 2000, 14)
        p0 = rng.uniform(-30_000, -10_000)
        ref = p0 + rng.uniform(-8000, 8000)
        lo, hi = p0 - rng.uniform(0, 6000), p0 + rng.uniform(0, 6000)
        s = solve_tracking_qp(p0, g, ref, lo, hi, CFG)
        q = solve_tracking_qp(p0, g, ref, lo, hi, CFG, method="pg")
        assert s.kkt <= 1e-6
        assert s.objective <= q.objective + 1e-9
        assert abs(s.p_pred - q.p_pred) <= 1.0  # kW


def test_mpc_band_soft_constraint():
    g = np.full(6, 1000.0)
    res = solve_tracking_qp(0.0, g, 10_000.0, -100.0, 2000.0, CFG)
    assert res.p_pred == pytest.approx(2000.0, abs=1.0)
    assert res.p_pred >= 2000.0
    with pytest.raises(ValueError):
        solve_tracking_qp(0.0, g, 0.0, -1.0, 1.0, CFG, method="newton")


def test_predict_band_ordering():
    p, mu = template_case(3, 4)
    p0, hi, lo = predict_band(p, mu)
    assert lo <= p0 <= hi
    q = p.copy()
    q.V = -q.V  # inverted gains: the band still contains the nominal
    p0, hi, lo = predict_band(q, mu)
    assert lo <= p0 <= hi


# ---------------------------------------------------------------- broadcast

def test_payload_size_and_roundtrip():
    rng = np.random.default_rng(0)
    u = rng.uniform(0, 1, 14)
    b = encode_broadcast(u, seq=300)
    assert len(b) == 60
    back, seq = decode_broadcast(b, 3)
    assert seq == 300 % 256
    assert np.max(np.abs(back - u)) <= 1e-7


def test_zero_payload_body():
    b = encode_broadcast(np.zeros(14))
    assert b[4:] == bytes(56)
    assert b[:4] == bytes([3, 0, 0, 0])


def test_payload_validation():
    with pytest.raises(ValueError):
        encode_broadcast(np.full(14, 1.2))
    with pytest.raises(ValueError):
        encode_broadcast(np.zeros(13))
    with pytest.raises(ValueError):
        decode_broadcast(encode_broadcast(np.zeros(14))[:-4])
    with pytest.raises(ValueError):
        decode_broadcast(encode_broadcast(np.zeros(10)), n_bins=3)


# ---------------------------------------------------------------- profiles and logs

def test_profiles_interpolation_and_csv(tmp_path):
    pr = GridProfiles([0.0, 10.0, 20.0], [1.0, 3.0, 5.0], [10.0, 10.0, 20.0])
    assert pr.at(5.0) == (2.0, 10.0)
    assert pr.at(15.0) == (4.0, 15.0)
    with pytest.raises(ValueError):
        pr.at(25.0)
    pr.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "t_s,p_wind_mw,p_load_mw"
    back = GridProfiles.from_csv(tmp_path / "p.csv")
    assert np.array_equal(back.p_load, pr.p_load)
    with pytest.raises(ValueError):
        GridProfiles([0.0, 0.0], [1, 1], [1, 1])


def test_synthetic_profiles_deterministic():
    a = synthetic_profiles(0, 3600, seed=3)
    b = synthetic_profiles(0, 3600, seed=3)
    assert np.array_equal(a.p_wind, b.p_wind)
    assert a.covers(0, 3600) and a.t_s.size == 241


def test_runlog_csv_roundtrip(tmp_path):
    log = RunLog.empty()
    for k in range(5):
        log.append(t_s=15.0 * k, delta_f_hz=0.01 * k, p_ev_real_kw=-1e4 - k, p_ref_kw=-1e4,
                   dp_cg_mw=0.5, err_p=1e-4 * k, refit_flag=k % 3, extra=k)
    log.to_csv(tmp_path / "r.csv")
    head = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert head == "t_s,delta_f_hz,p_ev_real_kw,p_ref_kw,dp_cg_mw,err_p,refit_flag"
    back = RunLog.from_csv(tmp_path / "r.csv")
    for c in control.RUNLOG_COLUMNS:
        assert np.array_equal(back.column(c), log.column(c))


# ---------------------------------------------------------------- privacy firewall

FORBIDDEN = {"fleet", "experiments", "kernels", "_kernels", "_kernels_py"}


def _imported_modules(obj):
    tree = ast.parse(inspect.getsource(obj))
    names = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            names.add((node.module or "").split(".")[-1])
        elif isinstance(node, ast.Import):
            names.update(a.name.split(".")[-1] for a in node.names)
    return names


def test_ident_never_sees_per_ev_data():
    assert not (_imported_modules(ident) & FORBIDDEN)
    src = inspect.getsource(ident)
    for token in ("soc", "soc_reported", "fleet_state_vector"):
        assert not re.search(rf"\b{token}\b", src), token


def test_bhmm_aggregator_never_sees_per_ev_data():
    assert not (_imported_modules(control.BhmmAggregator) & FORBIDDEN)
    src = inspect.getsource(control.BhmmAggregator)
    for token in ("soc", "fleet", "plant", "mode"):
        assert not re.search(rf"\b{token}\b", src), token
    # module-level imports of control carry no fleet dependency either
    top = {n for n in _imported_modules(control)}
    mod_tree = ast.parse(inspect.getsource(control))
    top_level = {(n.module or "").split(".")[-1] for n in mod_tree.body
                 if isinstance(n, ast.ImportFrom)}
    assert not (top_level & FORBIDDEN)
    assert "fleet" in top  # only the loop's plant side builds the fleet
