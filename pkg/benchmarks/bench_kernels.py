"""Benchmark the numba kernels against their pure-numpy fallbacks.

Times the three hot paths (parent aggregation forward + adjoints, fused Adam
update, sequential lagged recurrence) at a few problem sizes, plus one full
training step for an end-to-end view.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]

The active-backend selection for the package itself is unaffected; this
script calls both implementation tables directly.
"""

import argparse
import timeit

import numpy as np

from causalmarket import kernels


def best_of(fn, repeats):
    return min(timeit.timeit(fn, number=1) for _ in range(repeats))


def bench_parent_sum(impls, B, D, L, K, repeats, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(L, D, D))
    feats = rng.normal(size=(B, D, L, K))
    g = rng.normal(size=(B, D, K))
    rows = []
    rows.append(("parent_sum", best_of(lambda: impls["parent_sum"](w, feats), repeats)))
    rows.append(("parent_sum_grad_w", best_of(lambda: impls["parent_sum_grad_w"](g, feats), repeats)))
    rows.append(("parent_sum_grad_feats", best_of(lambda: impls["parent_sum_grad_feats"](g, w), repeats)))
    return rows


def bench_adam(impls, n, repeats, seed=1):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)
    return [("adam_update", best_of(
        lambda: impls["adam_update"](p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.01), repeats
    ))]


def bench_recurrence(impls, T, D, L, repeats, seed=2):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(L, D, D)) * 0.1
    noise = rng.normal(size=(T, D))
    return [("lagged_recurrence", best_of(lambda: impls["lagged_recurrence"](a, noise, L, 0), repeats))]


def bench_train_step(repeats):
    """One optimizer step of the movement model under each backend's kernels."""
    from causalmarket import autodiff as ad
    from causalmarket import training
    from causalmarket.config import TrainConfig
    from causalmarket.model import Model

    cfg = TrainConfig(lag=5, d_p=4, d_m=64, hidden=64, depth=3, use_news=True,
                      learning_rate=1e-3, epochs=1, batch_size=32, precision="float32")
    model = Model.build(cfg, [f"S{i:02d}" for i in range(16)], np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = {
        "prices": rng.normal(size=(32, 16, 5, 6)).astype(np.float32),
        "labels": (rng.random((32, 16)) < 0.5).astype(np.float32),
        "mask": np.ones((32, 16), dtype=np.float32),
        "news_mean": rng.normal(size=(32, 16, 5, 5)).astype(np.float32),
        "news_has": (rng.random((32, 16, 5)) < 0.7).astype(np.float32),
    }

    def step():
        tape, total, _ = training.compute_loss(model, batch, rng=np.random.default_rng(2))
        grads = ad.backward(tape, total)
        model.store.zero_grads()
        model.store.accumulate(grads)
        model.store.adam_step(cfg.learning_rate)

    return best_of(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = sorted(kernels.IMPLEMENTATIONS)
    print(f"available backends: {', '.join(backends)}")
    if "numba" in backends:
        # trigger JIT compilation outside the timed region
        warm = kernels.IMPLEMENTATIONS["numba"]
        bench_parent_sum(warm, 2, 2, 2, 2, 1)
        bench_adam(warm, 16, 1)
        bench_recurrence(warm, 40, 2, 1, 1)

    cases = [
        ("parent aggregation (B=32, D=16, L=5, K=68)",
         lambda impls: bench_parent_sum(impls, 32, 16, 5, 68, args.repeats)),
        ("parent aggregation (B=32, D=88, L=5, K=68)",
         lambda impls: bench_parent_sum(impls, 32, 88, 5, 68, args.repeats)),
        ("adam update (1M parameters)",
         lambda impls: bench_adam(impls, 1_000_000, args.repeats)),
        ("lagged recurrence (T=2000, D=8, L=2)",
         lambda impls: bench_recurrence(impls, 2000, 8, 2, args.repeats)),
        ("lagged recurrence (T=2000, D=64, L=5)",
         lambda impls: bench_recurrence(impls, 2000, 64, 5, args.repeats)),
    ]
    for label, runner in cases:
        print(f"\n{label}")
        times = {}
        for backend in backends:
            for name, t in runner(kernels.IMPLEMENTATIONS[backend]):
                times.setdefault(name, {})[backend] = t
        for name, by_backend in times.items():
            line = f"  {name:24s}"
            for backend in backends:
                line += f" {backend}: {by_backend[backend] * 1e3:8.3f} ms"
            if len(backends) == 2:
                ratio = by_backend["numpy"] / by_backend["numba"]
                line += f"  (numpy/numba = {ratio:.2f}x)"
            print(line)

    print(f"\nfull training step (D=16, L=5, news on), active backend "
          f"[{'numba' if kernels.IMPLEMENTATIONS.get('numba') else 'numpy'}]")
    t = bench_train_step(args.repeats)
    print(f"  train_step              {t * 1e3:8.3f} ms")


if __name__ == "__main__":
    main()
