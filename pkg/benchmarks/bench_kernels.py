"""Benchmark the compiled kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 200]

Times each hot kernel on training-shaped inputs plus one full training step
(both networks, forward + backward + Adam) per backend. The MLP matmuls run
through BLAS either way, so the end-to-end gap is smaller than the per-kernel
gaps; the table reports both.
"""

import argparse
import time

import numpy as np


def timeit(fn, repeat):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_cases(kernels, rng):
    r, n = 128, 40
    t = np.sort(rng.uniform(1.0, 8.9, (r, n)), axis=1)
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = 9.0 - t[:, -1]
    tau = np.abs(rng.normal(0.0, 1.5, (r, n)))
    rgb = rng.uniform(0, 1, (r, n, 3))
    fwd = kernels.composite_fwd(t, deltas, tau, rgb)
    d_c = rng.normal(size=(r, 3))
    d_d = rng.normal(size=r)
    d_p = rng.normal(size=(r, n))
    x = rng.normal(size=(r * n, 3))
    edges = np.concatenate(
        [np.full((r, 1), 1.0), 0.5 * (t[:, 1:] + t[:, :-1]), np.full((r, 1), 9.0)],
        axis=1,
    )
    w = np.abs(rng.normal(size=(r, n)))
    u = rng.random((r, 24))
    mu = rng.uniform(1, 9, r)
    sg = rng.uniform(0.02, 1.0, r)
    return {
        "composite_fwd": lambda: kernels.composite_fwd(t, deltas, tau, rgb),
        "composite_bwd": lambda: kernels.composite_bwd(
            t, deltas, fwd[2], fwd[4], fwd[5], fwd[6], rgb, d_c, d_d, d_p
        ),
        "positional_encoding": lambda: kernels.positional_encoding(x, 6),
        "sample_pdf": lambda: kernels.sample_pdf(edges, w, u),
        "gaussian_bin_masses": lambda: kernels.gaussian_bin_masses(edges, mu, sg),
    }


def training_step_case(rng):
    from radfield.field import FieldConfig, init_params
    from radfield.losses import LossGains
    from radfield.optimizer import adam_step, init_adam
    from radfield.pipeline import RayBatch, loss_and_grads

    cfg = FieldConfig(l_pos=6, l_dir=2, hidden_width=64, hidden_layers=3,
                      skip_layer=1, color_hidden=32, pos_scale=2.0 / 9.0)
    params_c = init_params(cfg, seed=0)
    params_f = init_params(cfg, seed=1)
    adam_c = init_adam(params_c)
    adam_f = init_adam(params_f)
    dirs = rng.normal(size=(128, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    batch = RayBatch(
        origins=rng.normal(size=(128, 3)), dirs=dirs, t_near=1.0, t_far=9.0,
        rgb=rng.uniform(0, 1, (128, 3)), depth_mean=rng.uniform(2, 8, 128),
        depth_sigma=np.full(128, 0.05), confidence=np.ones(128),
        supervised=np.ones(128, dtype=bool),
    )
    gains = LossGains(1.0, 1.0, 1.0)
    step_rng = np.random.default_rng(7)

    def step():
        _, gc, gf, _ = loss_and_grads(params_c, params_f, batch, gains, 16, 24,
                                      step_rng)
        adam_step(params_c, gc, adam_c)
        adam_step(params_f, gf, adam_f)

    return step


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    import radfield.backend as backend

    mods = backend.available_backends()
    names = ["python"] + (["compiled"] if len(mods) > 1 else [])
    print(f"active backend: {backend.backend_name()}")
    if len(mods) == 1:
        print("compiled extension not built; benchmarking the fallback only")

    rows = []
    for case in ("composite_fwd", "composite_bwd", "positional_encoding",
                 "sample_pdf", "gaussian_bin_masses"):
        times = []
        for mod in mods:
            fns = kernel_cases(mod, np.random.default_rng(0))
            times.append(timeit(fns[case], args.repeat))
        rows.append((case, times))

    # end-to-end step: rebind the kernel module inside every consumer
    import radfield.geometry
    import radfield.losses
    import radfield.pipeline
    import radfield.renderer

    consumers = (radfield.pipeline, radfield.renderer, radfield.geometry,
                 radfield.losses, backend)
    saved = backend.kernels
    step_times = []
    try:
        for mod in mods:
            for consumer in consumers:
                consumer.kernels = mod
            step = training_step_case(np.random.default_rng(3))
            step_times.append(timeit(step, max(10, args.repeat // 10)))
    finally:
        for consumer in consumers:
            consumer.kernels = saved
    rows.append(("training_step (128 rays)", step_times))

    width = max(len(r[0]) for r in rows)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, times in rows:
        line = f"{name:<{width}}  " + "  ".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            line += f"  {times[0] / times[1]:>7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
