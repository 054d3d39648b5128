"""Compare the numba and numpy LSTM kernels, plus one full outer step per backend.

    python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import time

import numpy as np

from tabml import kernels
from tabml.base_model import Model
from tabml.episodes import EpisodeSpec, SynthConfig, generate_synthetic
from tabml.topic import meta_train_profile
from tabml.trainer import BatchCache, TrainConfig, build_profiles, initial_theta, outer_step


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def kernel_case(B, T, H, rng):
    xproj = rng.normal(size=(B, T, 4 * H))
    w_h = rng.normal(scale=0.3, size=(H, 4 * H))
    lengths = rng.integers(1, T + 1, size=B)
    dh = rng.normal(size=(B, H))

    def fwd():
        return kernels.lstm_forward(xproj, lengths, w_h)

    def both():
        _, cache = kernels.lstm_forward(xproj, lengths, w_h)
        kernels.lstm_backward(dh, lengths, w_h, cache)

    return fwd, both


def outer_case():
    tasks = generate_synthetic(SynthConfig(tasks=4))
    model = Model.default()
    cfg = TrainConfig(z_mode="one", k_min=4, k_max=4)
    theta = initial_theta(model, cfg)
    per_task = build_profiles(tasks, model, cfg.top_k)
    meta = meta_train_profile(tasks, [per_task[t.task_id] for t in tasks])
    profiles = (per_task[tasks[0].task_id], meta)
    cache = BatchCache(model)

    def step():
        outer_step(theta, tasks[0], cfg, len(tasks), profiles, EpisodeSpec(), model, batches=cache)

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    cases = [("clue encoder", 360, 6, 16), ("statement encoder", 12, 12, 16), ("long", 64, 100, 32)]
    print(f"{'case':<20}{'B':>5}{'T':>5}{'H':>4}  {'backend':<7}{'fwd ms':>9}{'fwd+bwd ms':>12}")
    for name, B, T, H in cases:
        fwd, both = kernel_case(B, T, H, rng)
        for backend in ("numba", "numpy"):
            kernels.set_backend(backend)
            f, _ = best_of(fwd, args.repeat)
            fb, _ = best_of(both, args.repeat)
            print(f"{name:<20}{B:>5}{T:>5}{H:>4}  {backend:<7}{f * 1e3:>9.3f}{fb * 1e3:>12.3f}")

    step = outer_case()
    for backend in ("numba", "numpy"):
        kernels.set_backend(backend)
        best, med = best_of(step, max(3, args.repeat // 10))
        print(f"outer step (K=4)  {backend:<7} best {best * 1e3:.1f} ms  median {med * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
