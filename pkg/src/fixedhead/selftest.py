"""Fast invariant checks run by ``fixedhead selftest``.

Each check is a small seeded probe of one module's contract; the full pytest
suite covers the same ground more thoroughly.
"""

from __future__ import annotations

import numpy as np

from . import attention as att
from . import experiments as exp
from . import linalg, realization, separation


def _rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _check_softmax(rng):
    m = rng.uniform(-1e3, 1e3, size=(7, 5))
    s = linalg.softmax_columns(m)
    shifted = linalg.softmax_columns(m + rng.normal(size=(1, 5)) * 100)
    return np.max(np.abs(s.sum(axis=0) - 1)) < 1e-12 and np.max(np.abs(s - shifted)) < 1e-12


def _check_left_inverse(rng):
    x = rng.normal(size=(9, 5))
    return linalg.max_abs(linalg.left_inverse(x) @ x - np.eye(5)) < 1e-10


def _check_realization(rng):
    x = rng.normal(size=(12, 6))
    p = linalg.softmax_columns(rng.normal(size=(6, 6)))
    res = realization.realize_context(x, p)
    return res.residual_max_abs < 1e-8 and realization.verify_fixed_point(res.w_kq_tilde, p, res.scale) < 1e-12


def _check_bottleneck(rng):
    lo, arg = realization.scalar_bottleneck_witness()
    return abs(lo - 0.25) < 1e-9 and arg == 0.0


def _numeric_grad(f, w, step=1e-5):
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        old = w[idx]
        w[idx] = old + step
        fp = f()
        w[idx] = old - step
        fm = f()
        w[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def _check_gradients(rng):
    params = att.init_multihead(4, 2, att.Mode.STANDARD, rng)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 3))
    grads, _ = att.multi_head_backward(x, params, up)

    def f():
        return np.sum(up * att.multi_head_forward(x, params))

    return all(_rel_err(grads.named_arrays()[k], _numeric_grad(f, w)) < 1e-4
               for k, w in params.named_arrays().items())


def _check_containment(rng):
    params = att.init_multihead(8, 4, att.Mode.STANDARD, rng)
    fixed = att.embed_multihead_as_fixed(params, 5)
    x = rng.normal(size=(8, 6))
    return linalg.max_abs(att.multi_head_forward(x, params) - att.multi_head_forward(x, fixed)) < 1e-10


def _check_separation(rng):
    t = separation.build_target(4, 4, 2, 2, seed=int(rng.integers(1 << 31)))
    summary = separation.verify_separation(t, 5, seed=int(rng.integers(1 << 31)))
    return summary.min_gap > 1e-8 and all(v > 0 for v in summary.counts.values())


def _check_param_count(rng):
    cfg = exp.ExperimentConfig(d=8, h=3, n=4, d_p=5, use_ffn=True, ffn_width=6)
    return exp.init_block(cfg, rng).count() == exp.param_count(cfg)


CHECKS = [
    ("softmax columns normalize and are shift invariant", _check_softmax),
    ("left inverse satisfies X+ X = I", _check_left_inverse),
    ("context realization certificate", _check_realization),
    ("scalar bottleneck residual is 1/4", _check_bottleneck),
    ("attention gradients match finite differences", _check_gradients),
    ("standard layer embeds into fixed layer", _check_containment),
    ("separation witnesses for all three cases", _check_separation),
    ("parameter count formula", _check_param_count),
]


def run(seed: int, out=print) -> bool:
    ok_all = True
    for i, (name, fn) in enumerate(CHECKS):
        rng = linalg.make_rng(seed + i)
        try:
            ok = bool(fn(rng))
        except Exception as exc:  # report and keep going
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}")
    return ok_all
