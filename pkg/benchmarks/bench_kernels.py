"""Benchmark the compiled kernel backend against the numpy reference.

Runs each hot kernel (masked softmax forward/backward, layer norm
forward/backward) over attention-shaped inputs and reports best-of-trials
wall time per call for both backends, plus an end-to-end model step.

Usage: python benchmarks/bench_kernels.py [--trials 5] [--inner 20]
"""

import argparse
import time

import numpy as np

from mmcare.kernels import BACKEND, compiled, reference


def best_time(fn, trials, inner):
    best = float("inf")
    for _ in range(trials):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench_kernels(trials, inner):
    rng = np.random.default_rng(0)
    shapes = [("small attn", (32, 2, 24, 24)), ("large attn", (128, 2, 48, 48)),
              ("tokens", (4096, 32))]
    rows = []
    for label, shape in shapes:
        x = rng.normal(size=shape).astype(np.float32)
        mask = np.where(rng.random(shape) < 0.3, np.float32(-1e9),
                        np.float32(0.0))
        g = rng.normal(size=shape).astype(np.float32)
        gain = np.ones(shape[-1], dtype=np.float32)
        bias = np.zeros(shape[-1], dtype=np.float32)

        for impl_name, impl in (("compiled", compiled), ("python", reference)):
            if impl is None:
                continue
            y = impl.softmax_fwd(x + mask)
            rows.append((f"softmax_fwd {label}", impl_name,
                         best_time(lambda: impl.softmax_fwd(x + mask),
                                   trials, inner)))
            rows.append((f"softmax_bwd {label}", impl_name,
                         best_time(lambda: impl.softmax_bwd(y, g),
                                   trials, inner)))
            flat = np.ascontiguousarray(x.reshape(-1, shape[-1]))
            _, xhat, inv_std = impl.layernorm_fwd(flat, gain, bias, 1e-5)
            gf = np.ascontiguousarray(g.reshape(-1, shape[-1]))
            rows.append((f"layernorm_fwd {label}", impl_name,
                         best_time(lambda: impl.layernorm_fwd(flat, gain,
                                                              bias, 1e-5),
                                   trials, inner)))
            rows.append((f"layernorm_bwd {label}", impl_name,
                         best_time(lambda: impl.layernorm_bwd(gf, xhat,
                                                              inv_std, gain),
                                   trials, inner)))
    return rows


def bench_model_step(trials):
    import tempfile

    from mmcare.data import GenConfig, generate, load, make_batch
    from mmcare.model import Model, ModelConfig

    with tempfile.TemporaryDirectory() as d:
        generate(GenConfig(n_samples=256, seed=0), d)
        ds = load(d)
    dims = ds.manifest["dims"]
    cfg = ModelConfig(d=32, layers=2, ts_feat_dim=dims["ts_feat_dim"],
                      ts_max_steps=dims["ts_steps"],
                      image_size=dims["image_size"],
                      image_channels=dims["image_channels"],
                      note_dim=dims["note_dim"],
                      note_max_tokens=dims["note_tokens"])
    model = Model(cfg, ds.tasks, seed=0)
    batch = make_batch(ds.split("ihm", "train")[:64], "ihm", dims)

    def step():
        model.zero_grad()
        model.forward_batch(batch).loss.backward()

    step()  # warm up caches
    return best_time(step, trials, inner=3)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=5)
    parser.add_argument("--inner", type=int, default=20)
    parser.add_argument("--skip-model", action="store_true")
    args = parser.parse_args()

    print(f"active backend: {BACKEND}")
    if compiled is None:
        print("compiled extension unavailable; benchmarking the reference only")

    rows = bench_kernels(args.trials, args.inner)
    by_case = {}
    for case, impl, t in rows:
        by_case.setdefault(case, {})[impl] = t
    width = max(len(c) for c in by_case)
    print(f"{'kernel':<{width}}  {'compiled':>12}  {'python':>12}  speedup")
    for case, impls in by_case.items():
        c = impls.get("compiled")
        p = impls.get("python")
        c_s = f"{c * 1e6:9.1f} us" if c is not None else "       n/a"
        p_s = f"{p * 1e6:9.1f} us" if p is not None else "       n/a"
        ratio = f"{p / c:6.2f}x" if c and p else "    n/a"
        print(f"{case:<{width}}  {c_s:>12}  {p_s:>12}  {ratio}")

    if not args.skip_model:
        t = bench_model_step(args.trials)
        print(f"\nfull train step (B=64, d=32, L=2, backend={BACKEND}): "
              f"{t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
