"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs every kernel pair on representative shapes and prints a timing table,
then times one teacher-forcing training step of the tiny model under the
currently selected path (set GEOCAP_NUMBA=0 to time the numpy path).

Usage: python benchmarks/bench_kernels.py [--repeats 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from geocap import _accel


def _time(fn, args, repeats):
    fn(*args)  # warm up (and JIT-compile, for numba dispatchers)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _jit(fn):
    try:
        from numba import njit
    except ImportError:
        return None
    return njit(cache=False)(fn)


def kernel_cases(rng):
    x = rng.standard_normal((64, 512)).astype(np.float32)
    y = _accel.softmax_rows_np(x)
    gy = rng.standard_normal(x.shape).astype(np.float32)
    gamma = np.ones(512, dtype=np.float32)
    beta = np.zeros(512, dtype=np.float32)
    _, mean, rstd = _accel.layer_norm_rows_np(x, gamma, beta, np.float32(1e-5))
    lat0, lon0 = np.radians(54.0), np.radians(-2.0)
    lats = np.radians(rng.uniform(50, 58, 10_000))
    lons = np.radians(rng.uniform(-6, 1, 10_000))
    X = rng.standard_normal((400, 40))
    labels = (rng.random(400) > 0.5).astype(np.float64)
    p = rng.standard_normal(200_000).astype(np.float32)
    g = rng.standard_normal(200_000).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    return {
        "softmax_rows": (x,),
        "softmax_rows_grad": (y, gy),
        "log_softmax_rows": (x,),
        "layer_norm_rows": (x, gamma, beta, np.float32(1e-5)),
        "layer_norm_rows_grad": (gy, x, gamma, mean, rstd),
        "haversine_many": (lat0, lon0, lats, lons),
        "logreg_gd": (X, labels, 0.5, 1e-4, 1e-6, 300),
        "adam_step": (p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001, 5.0),
    }


def small_kernel_cases(rng):
    # training-loop shapes: many small attention/score rows, tiny layer norms
    x = rng.standard_normal((30, 15)).astype(np.float32)
    y = _accel.softmax_rows_np(x)
    gy = rng.standard_normal(x.shape).astype(np.float32)
    xl = rng.standard_normal((20, 64)).astype(np.float32)
    gamma = np.ones(64, dtype=np.float32)
    beta = np.zeros(64, dtype=np.float32)
    _, mean, rstd = _accel.layer_norm_rows_np(xl, gamma, beta, np.float32(1e-5))
    return {
        "softmax_rows": (x,),
        "softmax_rows_grad": (y, gy),
        "log_softmax_rows": (x,),
        "layer_norm_rows": (xl, gamma, beta, np.float32(1e-5)),
        "layer_norm_rows_grad": (rng.standard_normal(xl.shape).astype(np.float32), xl, gamma, mean, rstd),
    }


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    large = kernel_cases(rng)
    small = small_kernel_cases(rng)
    print(f"{'kernel':32} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, (np_impl, loop_impl) in _accel.KERNEL_IMPLS.items():
        jitted = _jit(loop_impl)
        for label, cases in (("", large), (" (small)", small)):
            args = cases.get(name)
            if args is None:
                continue
            t_np = _time(np_impl, args, repeats)
            if jitted is None:
                print(f"{name + label:32} {t_np * 1e6:10.1f}us {'n/a':>12} {'n/a':>9}")
                continue
            t_nb = _time(jitted, args, repeats)
            print(
                f"{name + label:32} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us"
                f" {t_np / t_nb:8.2f}x"
            )


def bench_training_step(repeats):
    from geocap.corpus import TokenizedCaption, TokenKind, Vocabulary, build_vocabulary
    from geocap.model.captioner import CaptionModel, SampleInput, indicator_matrices
    from geocap.model.config import ModelConfig
    from geocap.model.autodiff import Adam

    rng = np.random.default_rng(1)
    config = ModelConfig.tiny(seed=0)
    tc = TokenizedCaption(
        tuple("token%d" % i for i in range(12)),
        tuple([TokenKind.VOCAB] * 12),
        tuple([-1] * 12),
    )
    vocab = build_vocabulary([tc], dim=config.d, seed=0)
    n_geo, n_fact, n_pred = 8, 12, 6
    tokens = [vocab.index_of(f"token{i}") for i in range(8)] + [len(vocab) + 1, len(vocab) + n_geo + 2]
    caption = TokenizedCaption(
        tuple(["w"] * 10),
        tuple([TokenKind.VOCAB] * 8 + [TokenKind.ENTITY, TokenKind.FACT]),
        tuple(list(range(8)) + [1, 2]),
    )
    subj = rng.integers(0, n_geo, n_fact).astype(np.int64)
    preds = rng.integers(0, n_pred, n_fact).astype(np.int64)
    p_ind, g_ind = indicator_matrices(caption, subj, preds, n_pred, np.float32)
    hybrid = np.array(tokens, dtype=np.int64)
    sample = SampleInput(
        image_id="bench",
        image_features=rng.standard_normal((config.image_positions, config.image_channels)).astype(np.float32),
        geo_features=rng.standard_normal((n_geo, 6)).astype(np.float32),
        type_indices=rng.integers(0, 3, n_geo).astype(np.int64),
        geo_names=tuple(f"ent {i}" for i in range(n_geo)),
        fact_subject_refs=subj,
        fact_pred_indices=preds,
        fact_objects=tuple(f"obj{i}" for i in range(n_fact)),
        input_indices=np.concatenate([[Vocabulary.BOS], hybrid]),
        targets=np.concatenate([hybrid, [Vocabulary.EOS]]),
        p_ind=p_ind,
        g_ind=g_ind,
    )
    type_table = rng.uniform(-0.05, 0.05, (4, config.d_type)).astype(np.float32)
    model = CaptionModel(config, vocab, type_table, n_pred)
    optimizer = Adam([t for _, t in model.parameters()], lr=config.lr, clip=config.grad_clip)

    def step():
        optimizer.zero_grad()
        loss = model.teacher_loss(sample, training=True)
        loss.backward()
        optimizer.step()

    t = _time(step, (), repeats)
    path = "numba" if _accel.NUMBA_ENABLED else "numpy"
    print(f"\ntiny-config training step ({path} path): {t * 1e3:.2f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    print(f"active path: {'numba' if _accel.NUMBA_ENABLED else 'numpy (GEOCAP_NUMBA=0)'}")
    bench_kernels(args.repeats)
    bench_training_step(max(20, args.repeats // 10))


if __name__ == "__main__":
    main()
