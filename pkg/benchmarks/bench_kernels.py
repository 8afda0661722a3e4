"""Compare the jit-compiled gather/scatter kernels with the numpy fallback.

Runs both implementations on the shapes the training loop actually hits and
prints per-call times plus the speedup.  The tensor-level row at the bottom
uses whichever backend the package selected at import time (numba unless
OSAR_NO_NUMBA=1), so running the script twice, once with the flag set, shows
the end-to-end difference.
"""

import argparse
import time

import numpy as np

from osar import kernels
from osar.tensor import Tape, Tensor, conv2d, mse_loss, xavier_init


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


SHAPES = [
    # (label, batch, cin, h, w, kh, stride, pad)
    ("attention 3x3 s1", 27, 2, 32, 32, 3, 1, 1),
    ("encoder 3x3 s2", 27, 32, 32, 32, 3, 2, 1),
    ("decoder 3x3 s1", 27, 64, 16, 16, 3, 1, 1),
    ("inference 256px", 1, 2, 256, 256, 3, 1, 1),
]


def bench_kernels(repeat):
    if not kernels.USE_NUMBA:
        print("numba backend disabled (OSAR_NO_NUMBA set); nothing to compare")
        return
    rng = np.random.default_rng(0)
    rows = []
    for label, b, c, h, w, k, stride, pad in SHAPES:
        img = rng.standard_normal((b, c, h, w)).astype(np.float32)
        args = (k, k, stride, pad)
        col_nb = kernels.im2col(img, *args)
        col_np = kernels._im2col_np(img, *args)
        np.testing.assert_array_equal(col_nb, col_np)  # backends must agree

        t_gather_nb = _time(lambda: kernels.im2col(img, *args), repeat)
        t_gather_np = _time(lambda: kernels._im2col_np(img, *args), repeat)

        scatter_args = (b, c, h, w, k, k, stride, pad)
        back_nb = kernels.col2im(col_nb, *scatter_args)
        back_np = kernels._col2im_np(col_np, *scatter_args)
        np.testing.assert_array_equal(back_nb, back_np)

        t_scatter_nb = _time(lambda: kernels.col2im(col_nb, *scatter_args), repeat)
        t_scatter_np = _time(lambda: kernels._col2im_np(col_np, *scatter_args), repeat)
        rows.append((label, t_gather_nb, t_gather_np, t_scatter_nb, t_scatter_np))

    print(f"{'shape':<18} {'gather numba':>13} {'gather numpy':>13} {'x':>6} "
          f"{'scatter numba':>14} {'scatter numpy':>14} {'x':>6}")
    for label, gn, gp, sn, sp in rows:
        print(f"{label:<18} {gn * 1e3:>11.3f}ms {gp * 1e3:>11.3f}ms {gp / gn:>6.1f} "
              f"{sn * 1e3:>12.3f}ms {sp * 1e3:>12.3f}ms {sp / sn:>6.1f}")


def bench_training_step(repeat):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((27, 32, 32, 32)).astype(np.float32))
    w = xavier_init((64, 32, 3, 3), rng, dtype=np.float32)
    bias = Tensor(np.zeros(64, dtype=np.float32))
    target = Tensor(np.zeros((27, 64, 32, 32), dtype=np.float32))

    def step():
        tape = Tape()
        out = conv2d(tape, x, w, bias, stride=1, padding=1)
        tape.backward(mse_loss(tape, out, target))

    step()  # warm the jit cache before timing
    t = _time(step, repeat)
    print(f"\nconv2d fwd+bwd (27x32x32x32 -> 64ch, {kernels.backend_name()} "
          f"backend): {t * 1e3:.2f}ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=7,
                        help="take the best of this many timed calls")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    bench_training_step(args.repeat)


if __name__ == "__main__":
    main()
