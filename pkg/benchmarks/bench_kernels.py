"""Benchmark the compiled convolution core against the numpy fallback.

Runs the stride-1 kernels on the layer shapes the default desk-scale
network actually uses, then times a full twin training step through each
backend.  Select the backend with RRSEG_BACKEND; this script spawns a
subprocess per backend so both are measured in one invocation.

    python benchmarks/bench_kernels.py            # compare both backends
    python benchmarks/bench_kernels.py --inner    # used internally
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

# (channels, edge) for the conv-heavy levels of the f=8 depth-3 network
# on a 24^3 training crop and the 32^3 validation volume
SHAPES = [(8, 24), (8, 32), (16, 12), (32, 6), (64, 3)]


def time_call(fn, min_repeats=5, min_seconds=0.2):
    fn()
    times = []
    t_total = 0.0
    while len(times) < min_repeats or t_total < min_seconds:
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        times.append(dt)
        t_total += dt
    return min(times)


def bench_convs():
    from rrseg import kernels

    rows = []
    rng = np.random.default_rng(0)
    for c, s in SHAPES:
        x = rng.standard_normal((c, s, s, s), dtype=np.float32)
        w = (rng.standard_normal((c, c, 3, 3, 3)) * 0.2).astype(np.float32)
        b = rng.standard_normal(c, dtype=np.float32)
        out, xp = kernels.conv3_forward(x, w, b, 1)
        g = rng.standard_normal(out.shape, dtype=np.float32)
        flops = 2 * c * c * 27 * s ** 3
        t_fwd = time_call(lambda: kernels.conv3_forward(x, w, b, 1))
        t_gx = time_call(lambda: kernels.conv3_grad_x(g, w, x.shape, 1))
        t_gw = time_call(lambda: kernels.conv3_grad_w(g, xp, 1))
        rows.append({
            "shape": f"{c}x{s}^3",
            "fwd_ms": t_fwd * 1e3, "fwd_gflops": flops / t_fwd / 1e9,
            "gx_ms": t_gx * 1e3, "gx_gflops": flops / t_gx / 1e9,
            "gw_ms": t_gw * 1e3, "gw_gflops": flops / t_gw / 1e9,
        })
    return rows


def bench_train_step():
    from rrseg import autodiff as ad
    from rrseg import network, trainer
    from rrseg.phantom import PhantomConfig, generate_case
    from rrseg.volume import normalize_nonzero

    cfg = trainer.TrainConfig()
    vol, lab = generate_case(PhantomConfig(), 0)
    vol = normalize_nonzero(vol)
    rng = np.random.default_rng(0)
    model = network.build(cfg.network, rng)
    opt = trainer.OptimizerState(model.params)

    def step():
        parts = trainer._train_step(model, cfg, vol, lab, rng)
        for p in model.params.values():
            p.grad = None
        ad.backward(parts.total)
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in model.params.items()}
        trainer.adamw_step(model.params, grads, opt, 1e-4, cfg)

    return time_call(step, min_repeats=5, min_seconds=1.0)


def run_inner():
    from rrseg import kernels

    payload = {
        "backend": kernels.backend_name(),
        "convs": bench_convs(),
        "step_seconds": bench_train_step(),
    }
    print(json.dumps(payload))


def run_outer():
    results = {}
    for backend in ("compiled", "numpy"):
        env = dict(os.environ, RRSEG_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, __file__, "--inner"],
            capture_output=True, text=True, env=env,
        )
        if proc.returncode != 0:
            print(f"{backend}: unavailable ({proc.stderr.strip().splitlines()[-1]})")
            continue
        results[backend] = json.loads(proc.stdout)

    for backend, data in results.items():
        print(f"\n== {backend} backend ==")
        print(f"{'shape':>10s} {'fwd ms':>9s} {'GF/s':>7s} {'gx ms':>9s} "
              f"{'GF/s':>7s} {'gw ms':>9s} {'GF/s':>7s}")
        for r in data["convs"]:
            print(f"{r['shape']:>10s} {r['fwd_ms']:9.2f} {r['fwd_gflops']:7.1f} "
                  f"{r['gx_ms']:9.2f} {r['gx_gflops']:7.1f} "
                  f"{r['gw_ms']:9.2f} {r['gw_gflops']:7.1f}")
        print(f"full twin train step: {data['step_seconds'] * 1e3:.0f} ms")

    if len(results) == 2:
        s_np = results["numpy"]["step_seconds"]
        s_c = results["compiled"]["step_seconds"]
        print(f"\ncompiled speedup on the training step: {s_np / s_c:.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--inner", action="store_true")
    args = ap.parse_args()
    run_inner() if args.inner else run_outer()
