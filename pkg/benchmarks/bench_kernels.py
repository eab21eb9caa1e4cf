"""Compare the compiled and numpy fleet kernels.

    python3 benchmarks/bench_kernels.py [--n-ev 10000] [--steps 200]
"""

import argparse

from evbhmm.bench import kernel_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-ev", type=int, default=10000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rows = kernel_benchmark(args.n_ev, args.steps, args.repeat)
    print(f"{'backend':8s} {'seconds':>9s} {'ns/agent-step':>14s} {'speedup':>8s} identical")
    for r in rows:
        print(f"{r['backend']:8s} {r['seconds']:9.4f} {r['ns_per_agent_step']:14.1f} "
              f"{r['speedup_vs_python']:8.1f} {r['identical']}")


if __name__ == "__main__":
    main()
