"""Time the compiled MLP kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Both backends run the same forward+backward pass on identical inputs; the
script also reports the largest absolute disagreement between them.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from diffac import _kernels_py
from diffac.nn import DenseNet, MlpSpec

try:
    from diffac import _kernels_c
except ImportError:
    _kernels_c = None

CASES = [
    # (label, input_dim, hidden, output_dim, batch)
    ("score 2-D", 3, (64, 64), 2, 256),
    ("critic 8-D", 9, (64, 64), 1, 256),
    ("q-critic 32-D", 65, (64, 64), 1, 256),
    ("wide", 33, (256, 256, 256), 32, 256),
    ("tiny batch", 3, (64, 64), 2, 8),
]


def step(mod, net, x, dy):
    y, hs = mod.mlp_forward(net.params, net._layout, net.act_code, x)
    return mod.mlp_backward(net.params, net._layout, net.act_code, hs, dy)


def run_case(label, d_in, hidden, d_out, batch, repeats):
    rng = np.random.default_rng(0)
    net = DenseNet.init(MlpSpec(d_in, hidden, d_out, "relu"), rng)
    x = rng.standard_normal((batch, d_in))
    dy = rng.standard_normal((batch, d_out))
    row = {"case": label, "batch": batch, "params": int(net.params.size)}
    ref = step(_kernels_py, net, x, dy)
    for name, mod in (("python", _kernels_py), ("compiled", _kernels_c)):
        if mod is None:
            continue
        t = min(timeit.repeat(lambda: step(mod, net, x, dy), number=10, repeat=repeats)) / 10
        row[f"{name}_us"] = t * 1e6
        if mod is not _kernels_py:
            out = step(mod, net, x, dy)
            row["max_abs_diff"] = float(max(np.max(np.abs(a - b)) for a, b in zip(out, ref)))
    if "compiled_us" in row:
        row["speedup"] = row["python_us"] / row["compiled_us"]
    return row


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    rows = [run_case(*c, args.repeats) for c in CASES]
    print(f"{'case':<15}{'batch':>6}{'params':>9}{'python us':>12}{'compiled us':>13}"
          f"{'speedup':>9}{'max|diff|':>11}")
    for r in rows:
        print(f"{r['case']:<15}{r['batch']:>6}{r['params']:>9}{r['python_us']:>12.1f}"
              f"{r.get('compiled_us', float('nan')):>13.1f}{r.get('speedup', float('nan')):>9.2f}"
              f"{r.get('max_abs_diff', float('nan')):>11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
