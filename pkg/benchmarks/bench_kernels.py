"""
Compiled vs numpy recurrent kernels, and a full training step on each.

    python benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Times are the minimum over repeats, which is the least noisy statistic on a
shared machine.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from cglmha import kernels
from cglmha import model as M
from cglmha import optim as O
from cglmha import tensor as T


def _gru_args(rng, B, L, D, H, dt):
    X = rng.standard_normal((B, L, D)).astype(dt)
    Wrz = (rng.standard_normal((2 * H, H + D)) * 0.1).astype(dt)
    Wh = (rng.standard_normal((H, H + D)) * 0.1).astype(dt)
    brz, bh = np.zeros(2 * H, dt), np.zeros(H, dt)
    mask = np.ones((B, L), np.uint8)
    mask[B // 2:, L - 5:] = 0
    return X, Wrz, Wh, brz, bh, mask


def _lstm_args(rng, B, L, D, H, dt):
    X = rng.standard_normal((B, L, D)).astype(dt)
    W = (rng.standard_normal((4 * H, H + D)) * 0.1).astype(dt)
    b = np.zeros(4 * H, dt)
    mask = np.ones((B, L), np.uint8)
    mask[B // 2:, L - 5:] = 0
    return X, W, b, mask


def bench_kernel(k, kind, args, repeats):
    if kind == "gru":
        X, Wrz, Wh, brz, bh, mask = args

        def fwd():
            return k.gru_forward(X, Wrz, Wh, brz, bh, mask, False)

        Hs, cache = fwd()
        dH = np.ones_like(Hs)

        def bwd():
            k.gru_backward(dH, X, Wrz, Wh, mask, False, cache)
    else:
        X, W, b, mask = args

        def fwd():
            return k.lstm_forward(X, W, b, mask, False)

        Hs, cache = fwd()
        dH = np.ones_like(Hs)

        def bwd():
            k.lstm_backward(dH, X, W, mask, False, cache)

    t_f = min(timeit.repeat(fwd, number=1, repeat=repeats))
    t_b = min(timeit.repeat(bwd, number=1, repeat=repeats))
    return t_f, t_b


def bench_step(repeats, B=32):
    cfg = M.ModelConfig(vocab_size=5000, seed=0)
    params = M.build_model(cfg)
    rng = np.random.default_rng(0)
    ids = rng.integers(2, cfg.vocab_size, size=(B, cfg.max_len))
    mask = np.ones_like(ids, dtype=bool)
    mask[B // 2:, 12:] = False
    ids[~mask] = 0
    labels = rng.integers(0, 2, size=B)

    def step():
        loss = O.cross_entropy(M.forward(params, (ids, mask)), labels)
        T.backward(loss)

    step()
    return min(timeit.repeat(step, number=1, repeat=repeats))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--length", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    if not kernels.compiled_available():
        print("compiled extension not built; only the numpy backend can be timed", file=sys.stderr)
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    B, L, H = args.batch, args.length, args.hidden
    results = []
    for dtype in ("float32", "float64"):
        dt = np.dtype(dtype)
        for kind in ("gru", "lstm"):
            make = _gru_args if kind == "gru" else _lstm_args
            row = {"kernel": kind, "dtype": dtype}
            for name in backends:
                a = make(np.random.default_rng(1), B, L, H, H, dt)
                t_f, t_b = bench_kernel(kernels.get_backend(name), kind, a, args.repeats)
                row[name] = {"forward_ms": 1e3 * t_f, "backward_ms": 1e3 * t_b}
            results.append(row)

    step = {}
    saved = kernels.backend
    try:
        for name in backends:
            kernels.backend = kernels.get_backend(name)
            step[name] = 1e3 * bench_step(max(3, args.repeats // 4), args.batch)
    finally:
        kernels.backend = saved

    print(f"B={B} L={L} D=H={H}, min of {args.repeats} runs (ms)")
    print(f"{'kernel':<14}{'backend':<10}{'forward':>10}{'backward':>10}{'speedup':>10}")
    for row in results:
        base = row["python"]["forward_ms"] + row["python"]["backward_ms"]
        for name in backends:
            r = row[name]
            total = r["forward_ms"] + r["backward_ms"]
            label = f"{row['kernel']}/{row['dtype']}"
            print(f"{label:<14}{name:<10}{r['forward_ms']:>10.3f}{r['backward_ms']:>10.3f}{base / total:>9.2f}x")
    print(f"\nfull model forward+backward, batch {args.batch}, float32:")
    for name in backends:
        print(f"  {name:<10}{step[name]:>9.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": results, "train_step_ms": step}, fh, indent=2)


if __name__ == "__main__":
    main()
