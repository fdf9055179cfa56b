"""Time the numba and numpy kernel backends on TinyNet-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Each kernel is warmed up once per backend (JIT compile) before timing, and
the two backends' outputs are checked for agreement.
"""
import argparse
import time

import numpy as np

from adaprune import kernels
from adaprune._jit import HAVE_NUMBA
from adaprune.autodiff import Tensor, no_grad
from adaprune.backbones import build_network, preset
from adaprune.spm import Variant


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(batch, rng):
    x = rng.standard_normal((batch, 16, 16, 16))
    cols = kernels.im2col(x, 3, 1, 1)
    w2d = rng.standard_normal((32, cols.shape[1]))
    mask = rng.random((batch, 32)) < 0.5
    g = rng.standard_normal(cols.shape)
    p = rng.standard_normal((batch, 32, 16, 16))
    out, arg = kernels.maxpool_forward(p, 2)
    return {
        "im2col": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im": lambda: kernels.col2im(g, x.shape, 3, 1, 1),
        "conv_channels": lambda: kernels.conv_channels(w2d, cols),
        "conv_channels_masked": lambda: kernels.conv_channels(w2d, cols, mask),
        "maxpool_forward": lambda: kernels.maxpool_forward(p, 2),
        "maxpool_backward": lambda: kernels.maxpool_backward(out, arg, p.shape, 2),
    }


def network_forward(batch, rng):
    net = build_network(preset("tinynet"), Variant.SANP, seed=0)
    net.eval()
    x = Tensor(rng.standard_normal((batch, 3, 32, 32)))

    def run():
        with no_grad():
            return net(x).data

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba unavailable (or ADAPRUNE_DISABLE_JIT=1): only the numpy backend runs")
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    table = {}
    outputs = {}
    for name in backends:
        with kernels.backend(name):
            fns = cases(args.batch, np.random.default_rng(0))
            fns["tinynet_eval_forward"] = network_forward(args.batch, np.random.default_rng(1))
            for k, fn in fns.items():
                table.setdefault(k, {})[name] = _time(fn, args.repeat)
                outputs.setdefault(k, {})[name] = fn()
    print(f"{'kernel':<24}" + "".join(f"{b + ' ms':>12}" for b in backends) + ("  speedup  agree" if len(backends) > 1 else ""))
    for k, row in table.items():
        line = f"{k:<24}" + "".join(f"{1e3 * row[b]:>12.3f}" for b in backends)
        if len(backends) > 1:
            a, b = outputs[k]["numpy"], outputs[k]["numba"]
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            agree = all(np.allclose(u, v, rtol=1e-12, atol=1e-12) for u, v in zip(a, b))
            line += f"{row['numpy'] / row['numba']:>9.2f}x  {'yes' if agree else 'NO'}"
        print(line)


if __name__ == "__main__":
    main()
