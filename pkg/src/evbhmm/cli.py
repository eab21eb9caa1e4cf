"""Command-line entry point: ``evbhmm <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("evbhmm")


# --------------------------------------------------------------------------- helpers


def _out_dir(args, default_name):
    base = args.out or os.environ.get("EVBHMM_OUT") or "."
    path = Path(base)
    if path.suffix:  # a file name was given
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    path.mkdir(parents=True, exist_ok=True)
    return path / default_name if default_name else path


def _scenario(args):
    from .fleet import FleetScenario
    sc = FleetScenario.from_json(args.scenario) if args.scenario else FleetScenario()
    over = {}
    if args.n_ev is not None:
        over["n_ev"] = args.n_ev
    if args.seed is not None:
        over["seed"] = args.seed
    sc = replace(sc, **over)
    sc.validate()
    return sc


def _reg_config(path):
    from .control import RegulationConfig
    if not path:
        return RegulationConfig().validate()
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - set(RegulationConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown regulation config keys: {sorted(unknown)}")
    return RegulationConfig(**data).validate()


def _load_days(directory, t0, dt):
    from .experiments import DayRecord
    files = sorted(Path(directory).glob("day_*.csv"))
    if not files:
        raise FileNotFoundError(f"no day_*.csv files in {directory}")
    days = [DayRecord.from_csv(f, t0, dt) for f in files]
    live = days[0] if files[0].stem == "day_0000" else None
    history = days[1:] if live is not None else days
    return history, live


def _read_meta(directory):
    path = Path(directory) / "dataset.json"
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    return {}


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------- commands


def cmd_simulate_fleet(args):
    from .fleet import FleetLog, fast_forward, sample_fleet
    sc = _scenario(args)
    fleet = sample_fleet(sc)
    fast_forward(fleet, args.t0)
    n = int(round(args.hours * 3600 / sc.dt))
    fleet_log = FleetLog()
    fleet.run(n, fleet_log)
    path = _out_dir(args, "fleet.csv")
    fleet_log.to_csv(path)
    return {"fleet_log": str(path), "steps": n}


def cmd_gen_dataset(args):
    from .experiments import simulate_day
    sc = _scenario(args)
    out = _out_dir(args, None)
    cap = 1.0 if args.full_range else args.cap
    dcap = None if args.full_range else args.discharge_cap
    for day in range(args.days):
        rec = simulate_day(sc, day, args.t0, args.steps, args.n_bins, hold=args.hold, cap=cap,
                           discharge_cap=dcap)
        rec.to_csv(out / f"day_{day:04d}.csv")
    sc.to_json(out / "scenario.json")
    _write_json(out / "dataset.json", {"t0": args.t0, "dt": sc.dt, "n_bins": args.n_bins,
                                       "steps": args.steps, "cap": cap,
                                       "discharge_cap": dcap, "hold": args.hold})
    return {"dataset": str(out), "days": args.days}


def cmd_fit(args):
    from .bhmm import ModelParams
    from .ident import build_dataset, em_fit, init_params
    meta = _read_meta(args.data)
    dt = meta.get("dt", 15.0)
    history, live = _load_days(args.data, meta.get("t0", 0.0), dt)
    if live is None:
        raise FileNotFoundError("dataset has no live day (day_0000.csv)")
    n_bins = args.n_bins or meta.get("n_bins", 3)
    end = args.end if args.end is not None else args.K
    data = build_dataset(history, live, end, args.K, L=args.L, dt=dt)
    rng = np.random.default_rng(args.seed or 0)
    params0 = ModelParams.load(args.init) if args.init else init_params(data, n_bins, rng)
    params, rep, _ = em_fit(data, params0, n_iter_max=args.iters, pe_threshold=args.pe_threshold)
    out = _out_dir(args, None)
    params.save(out / "params.txt")
    rep.to_csv(out / "fit_report.csv", with_timing=False)
    _write_json(out / "timing.json", {"wall_time_s": rep.wall_time, "elapsed_s": rep.elapsed})
    return {"params": str(out / "params.txt"), "iterations": rep.iterations,
            "converged": rep.converged, "loglik": rep.loglik[-1]}


def cmd_predict(args):
    from .experiments import sliding_prediction
    from .metrics import compute_metrics
    meta = _read_meta(args.data)
    history, live = _load_days(args.data, meta.get("t0", 0.0), meta.get("dt", 15.0))
    if live is None:
        raise FileNotFoundError("dataset has no live day (day_0000.csv)")
    n_bins = args.n_bins or meta.get("n_bins", 3)
    run = sliding_prediction(history, live, n_bins, K=args.K, n_p=args.n_p, stop=args.stop,
                             warm_iters=args.iters, seed=args.seed or 0, L=args.L)
    path = _out_dir(args, "prediction.csv")
    run.to_csv(path, oracle=live)
    rep = compute_metrics(ref=run.p_true, actual=run.p_pred)
    rep.fit_time_mean_s = float(np.mean(run.fit_s))
    rep.fit_time_max_s = float(np.max(run.fit_s))
    rep.to_json(path.with_suffix(".metrics.json"), include_timing=False)
    return {"prediction": str(path), "mape_pct": rep.mape_pct, "mae_mw": rep.mae_mw}


def cmd_regulate(args):
    from .control import GridProfiles, regulation_loop, synthetic_profiles
    from .metrics import compute_metrics
    sc = _scenario(args)
    cfg = _reg_config(args.config)
    out = _out_dir(args, None)
    n_steps = int(round(args.hours * 3600 / cfg.dt))
    t_start = args.t0 * 3600
    if args.profiles:
        profiles = GridProfiles.from_csv(args.profiles)
    else:
        profiles = synthetic_profiles(t_start, (args.K + n_steps + 1) * cfg.dt, seed=sc.seed)
        profiles.to_csv(out / "profiles.csv")
    history = []
    if args.controller == "bhmm":
        if not args.history:
            raise ValueError("--history is required for the bhmm controller")
        history, _ = _load_days(args.history, args.t0, cfg.dt)
    runlog = regulation_loop(sc, profiles, cfg, history, controller=args.controller,
                             n_steps=n_steps, t0=args.t0, n_bins=args.n_bins, K=args.K, L=args.L,
                             soc_noise=args.noise, noise_seed=sc.seed,
                             warm_iters=args.iters)
    runlog.to_csv(out / "runlog.csv")
    rep = compute_metrics(runlog, f_deadband=cfg.f_deadband)
    rep.to_json(out / "metrics.json", include_timing=False)
    _write_json(out / "timing.json", {"fit_s": runlog.extras.get("fit_s", []),
                                      "mpc_s_max": max(runlog.extras.get("mpc_s", [0.0]))})
    return {"runlog": str(out / "runlog.csv"), **{k: v for k, v in rep.to_dict().items()
                                                   if not k.startswith("fit_time")}}


def _bench_case(case):
    """One prediction experiment of a sweep; runs in a worker process."""
    from .experiments import simulate_day, sliding_prediction
    from .fleet import FleetScenario
    sc = FleetScenario(n_ev=case["n_ev"], seed=case["seed"])
    steps = case["K"] + case["horizon"]
    days = [simulate_day(sc, d, case["t0"], steps, case["n_bins"], cap=case["cap"],
                         discharge_cap=case["discharge_cap"]) for d in range(case["L"])]
    run = sliding_prediction(days[1:], days[0], case["n_bins"], K=case["K"], n_p=case["n_p"],
                             warm_iters=case["iters"], seed=case["seed"])
    return {**case, "mape_pct": run.mape, "fit_s_mean": float(np.mean(run.fit_s)),
            "min_eig": float(np.nanmin(run.min_eig))}


def cmd_bench(args):
    out = _out_dir(args, "bench.csv")
    if args.sweep == "kernels":
        from .bench import kernel_benchmark
        rows = kernel_benchmark(n_ev=args.n_ev or 10000, n_steps=args.steps, repeat=args.repeat)
    else:
        base = {"n_ev": args.n_ev or 1000, "n_bins": args.n_bins, "L": args.L or 30, "K": args.K,
                "n_p": args.n_p, "horizon": args.steps, "t0": args.t0, "cap": args.cap,
                "discharge_cap": args.discharge_cap, "iters": args.iters,
                "seed": args.seed if args.seed is not None else 0}
        defaults = {"n_ev": [200, 1000, 5000, 10000], "n_bins": [2, 3, 4], "L": [10, 30, 100],
                    "K": [20, 40, 60]}
        values = args.values or defaults[args.sweep]
        cases = [{**base, args.sweep: int(v)} for v in values]
        if args.workers > 1:
            with ProcessPoolExecutor(args.workers) as pool:
                rows = list(pool.map(_bench_case, cases))
        else:
            rows = [_bench_case(c) for c in cases]
    cols = list(rows[0])
    with open(out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    return {"bench": str(out), "rows": len(rows)}


# --------------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="evbhmm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fleet=True):
        sp.add_argument("--out", help="output file or directory (default: $EVBHMM_OUT or .)")
        sp.add_argument("--seed", type=int)
        if fleet:
            sp.add_argument("--scenario", help="fleet scenario JSON")
            sp.add_argument("--n-ev", type=int)
            sp.add_argument("--t0", type=float, default=18.0, help="start clock time (h)")

    sp = sub.add_parser("simulate-fleet", help="uncontrolled fleet run")
    common(sp)
    sp.add_argument("--hours", type=float, default=24.0)
    sp.set_defaults(func=cmd_simulate_fleet)

    sp = sub.add_parser("gen-dataset", help="excited-fleet trajectories, one CSV per day")
    common(sp)
    sp.add_argument("--days", type=int, default=300, help="day 0 is the live day")
    sp.add_argument("--steps", type=int, default=1260)
    sp.add_argument("--n-bins", type=int, default=3)
    sp.add_argument("--hold", type=int, default=4, help="steps between input redraws")
    sp.add_argument("--cap", type=float, default=0.3, help="upper bound of U(0, cap) inputs")
    sp.add_argument("--discharge-cap", type=float, default=0.1,
                    help="bound for discharge-direction inputs")
    sp.add_argument("--full-range", action="store_true", help="draw inputs from U(0, 1)")
    sp.set_defaults(func=cmd_gen_dataset)

    sp = sub.add_parser("fit", help="EM identification on one window")
    common(sp, fleet=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n-bins", type=int)
    sp.add_argument("--K", type=int, default=60)
    sp.add_argument("--L", type=int)
    sp.add_argument("--end", type=int)
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--pe-threshold", type=float, default=1e-8)
    sp.add_argument("--init", help="initial parameter bundle")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="sliding-window prediction of the live day")
    common(sp, fleet=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n-bins", type=int)
    sp.add_argument("--K", type=int, default=60)
    sp.add_argument("--L", type=int)
    sp.add_argument("--n-p", type=int, default=12)
    sp.add_argument("--stop", type=int)
    sp.add_argument("--iters", type=int, default=5, help="EM iterations per refit")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("regulate", help="closed-loop frequency regulation")
    common(sp)
    sp.add_argument("--history", help="gen-dataset directory with past days")
    sp.add_argument("--profiles", help="CSV t_s,p_wind_mw,p_load_mw (synthetic if omitted)")
    sp.add_argument("--config", help="regulation config JSON")
    sp.add_argument("--controller", choices=("bhmm", "essm", "none"), default="bhmm")
    sp.add_argument("--hours", type=float, default=5.0)
    sp.add_argument("--n-bins", type=int, default=3)
    sp.add_argument("--K", type=int, default=60)
    sp.add_argument("--L", type=int)
    sp.add_argument("--noise", type=float, default=0.0, help="reported-SOC corruption bound")
    sp.add_argument("--iters", type=int, default=5, help="EM iterations per refit")
    sp.set_defaults(func=cmd_regulate)

    sp = sub.add_parser("bench", help="parameter sweeps and kernel timing")
    common(sp)
    sp.add_argument("--sweep", choices=("n_ev", "n_bins", "L", "K", "kernels"), default="n_ev")
    sp.add_argument("--values", type=float, nargs="+")
    sp.add_argument("--n-bins", type=int, default=3)
    sp.add_argument("--L", type=int)
    sp.add_argument("--K", type=int, default=60)
    sp.add_argument("--n-p", type=int, default=12)
    sp.add_argument("--steps", type=int, default=240, help="predicted steps (or kernel steps)")
    sp.add_argument("--cap", type=float, default=0.3)
    sp.add_argument("--discharge-cap", type=float, default=0.1)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--repeat", type=int, default=3)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # machine-readable failure record
        print(json.dumps({"status": "error", "command": args.command,
                          "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            raise
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
