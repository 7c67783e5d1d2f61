"""Multi-head self-attention with hand-written reverse mode.

Inputs follow the column convention: a sequence is a ``d x n`` matrix whose
columns are tokens. Every forward/backward function also accepts a batch of
sequences with shape ``(..., d, n)``; parameter gradients are summed over the
batch axes.

Two layer families share one container, :class:`MultiHeadParams`:

* ``Mode.STANDARD``: ``h`` heads of size ``d / h`` (the usual heuristic).
* ``Mode.FIXED``: ``h`` heads of an arbitrary size ``d_p``.

In both cases the softmax temperature is ``sqrt(d_p)``, which for standard
layers is the familiar ``sqrt(d / h)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, InvalidTarget
from .linalg import matrix_from_csv, matrix_to_csv, softmax_columns


class Mode(str, Enum):
    STANDARD = "standard"
    FIXED = "fixed"


@dataclass
class HeadParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.w_q), np.shape(self.w_k), np.shape(self.w_v)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise DimensionMismatch(f"head projections must share one 2-D shape, got {sorted(shapes)}")


@dataclass
class MultiHeadParams:
    heads: list[HeadParams]
    w_o: np.ndarray
    mode: Mode
    d: int
    d_p: int
    n_hint: int | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not self.heads:
            raise DimensionMismatch("at least one head is required")
        if self.mode is Mode.STANDARD and self.d_p * self.h != self.d:
            raise DimensionMismatch(f"standard mode needs d_p == d/h, got d={self.d}, h={self.h}, d_p={self.d_p}")
        for i, head in enumerate(self.heads):
            if head.w_q.shape != (self.d_p, self.d):
                raise DimensionMismatch(f"head {i} projections are {head.w_q.shape}, expected {(self.d_p, self.d)}")
        if self.w_o.shape != (self.d, self.h * self.d_p):
            raise DimensionMismatch(f"w_o is {self.w_o.shape}, expected {(self.d, self.h * self.d_p)}")

    @property
    def h(self) -> int:
        return len(self.heads)

    @property
    def scale(self) -> float:
        return math.sqrt(self.d_p)

    def w_o_block(self, i: int) -> np.ndarray:
        return self.w_o[:, i * self.d_p:(i + 1) * self.d_p]

    def value_output_products(self) -> list[np.ndarray]:
        """Per-head ``W_o^i W_v^i`` (each ``d x d``)."""
        return [self.w_o_block(i) @ hd.w_v for i, hd in enumerate(self.heads)]

    def key_query_products(self) -> list[np.ndarray]:
        """Per-head ``(W_k^i)^T W_q^i`` (each ``d x d``)."""
        return [hd.w_k.T @ hd.w_q for hd in self.heads]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, hd in enumerate(self.heads):
            out[f"h{i}.w_q"] = hd.w_q
            out[f"h{i}.w_k"] = hd.w_k
            out[f"h{i}.w_v"] = hd.w_v
        out["w_o"] = self.w_o
        return out

    def map_arrays(self, fn) -> "MultiHeadParams":
        return MultiHeadParams(
            heads=[HeadParams(fn(hd.w_q), fn(hd.w_k), fn(hd.w_v)) for hd in self.heads],
            w_o=fn(self.w_o), mode=self.mode, d=self.d, d_p=self.d_p, n_hint=self.n_hint,
        )

    def copy(self) -> "MultiHeadParams":
        return self.map_arrays(np.array)

    def zeros_like(self) -> "MultiHeadParams":
        return self.map_arrays(np.zeros_like)

    def count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise DimensionMismatch("gain and bias must be equal-length vectors")

    @classmethod
    def identity(cls, d: int, epsilon: float = 1e-6) -> "LayerNormParams":
        return cls(np.ones(d), np.zeros(d), epsilon)

    def copy(self) -> "LayerNormParams":
        return LayerNormParams(self.gain.copy(), self.bias.copy(), self.epsilon)


def init_multihead(d: int, h: int, mode: Mode | str, rng: np.random.Generator,
                   d_p: int | None = None, init_scale: float | None = None,
                   n_hint: int | None = None) -> MultiHeadParams:
    """Random parameters, entries i.i.d. uniform on ``[-s, s]`` with ``s = 1/sqrt(d)``."""
    mode = Mode(mode)
    if mode is Mode.STANDARD:
        if d % h:
            raise DimensionMismatch(f"standard mode needs h | d, got d={d}, h={h}")
        if d_p is not None and d_p != d // h:
            raise DimensionMismatch(f"standard mode fixes d_p = d/h = {d // h}, got {d_p}")
        d_p = d // h
    elif d_p is None:
        raise ValueError("fixed mode needs an explicit d_p")
    s = 1.0 / math.sqrt(d) if init_scale is None else init_scale

    def draw(*shape):
        return rng.uniform(-s, s, size=shape)

    heads = [HeadParams(draw(d_p, d), draw(d_p, d), draw(d_p, d)) for _ in range(h)]
    return MultiHeadParams(heads, draw(d, h * d_p), mode, d, d_p, n_hint)


def _check_x(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != d:
        raise DimensionMismatch(f"input must have {d} rows, got shape {x.shape}")
    return x


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sum_batch(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, *a.shape[-2:]).sum(axis=0)


def single_head_forward(x, head: HeadParams, scale: float):
    """Return ``(W_v X P, P)`` with ``P = softmax((W_k X)^T (W_q X) / scale)``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = _check_x(x, head.w_q.shape[1])
    logits = _t(head.w_k @ x) @ (head.w_q @ x) / scale
    ctx = softmax_columns(logits)
    return (head.w_v @ x) @ ctx, ctx


def _forward_cache(x, params: MultiHeadParams):
    x = _check_x(x, params.d)
    cache = []
    for hd in params.heads:
        k, q, v = hd.w_k @ x, hd.w_q @ x, hd.w_v @ x
        ctx = softmax_columns(_t(k) @ q / params.scale)
        cache.append((k, q, v, ctx, v @ ctx))
    concat = np.concatenate([c[4] for c in cache], axis=-2)
    return x, cache, concat, params.w_o @ concat


def multi_head_forward(x, params: MultiHeadParams) -> np.ndarray:
    """``W_o . Concat[head_1(X), ..., head_h(X)]``, before residual and LayerNorm."""
    return _forward_cache(x, params)[3]


def multi_head_contexts(x, params: MultiHeadParams) -> list[np.ndarray]:
    return [c[3] for c in _forward_cache(x, params)[1]]


def softmax_columns_backward(ctx: np.ndarray, d_ctx: np.ndarray) -> np.ndarray:
    return ctx * (d_ctx - np.sum(ctx * d_ctx, axis=-2, keepdims=True))


def multi_head_backward(x, params: MultiHeadParams, upstream):
    """Gradients of ``<upstream, multi_head_forward(x, params)>``.

    Returns ``(grad_params, grad_x)`` where ``grad_params`` is a
    :class:`MultiHeadParams` holding the gradient of every array.
    """
    x, cache, concat, out = _forward_cache(x, params)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise DimensionMismatch(f"upstream has shape {g.shape}, forward output is {out.shape}")
    grad_wo = _sum_batch(g @ _t(concat))
    d_concat = params.w_o.T @ g
    heads, grad_x = [], np.zeros_like(x)
    for i, (hd, (k, q, v, ctx, _)) in enumerate(zip(params.heads, cache)):
        d_head = d_concat[..., i * params.d_p:(i + 1) * params.d_p, :]
        d_v = d_head @ _t(ctx)
        d_logits = softmax_columns_backward(ctx, _t(v) @ d_head) / params.scale
        d_k = q @ _t(d_logits)
        d_q = k @ d_logits
        xt = _t(x)
        heads.append(HeadParams(w_q=_sum_batch(d_q @ xt), w_k=_sum_batch(d_k @ xt), w_v=_sum_batch(d_v @ xt)))
        grad_x = grad_x + hd.w_k.T @ d_k + hd.w_q.T @ d_q + hd.w_v.T @ d_v
    grads = MultiHeadParams(heads, grad_wo, params.mode, params.d, params.d_p, params.n_hint)
    return grads, grad_x


def layer_norm_forward(x, ln: LayerNormParams):
    """Normalize each column over its ``d`` entries; returns ``(y, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != ln.gain.shape[0]:
        raise DimensionMismatch(f"LayerNorm of size {ln.gain.shape[0]} applied to shape {x.shape}")
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-2, keepdims=True) + ln.epsilon)
    xhat = xc * inv_std
    return ln.gain[:, None] * xhat + ln.bias[:, None], (xhat, inv_std)


def layer_norm_backward(cache, ln: LayerNormParams, dy):
    """Returns ``(LayerNormParams of gradients, dx)``."""
    xhat, inv_std = cache
    dy = np.asarray(dy, dtype=np.float64)
    d_gain = (dy * xhat).reshape(-1, *xhat.shape[-2:]).sum(axis=(0, 2))
    d_bias = dy.reshape(-1, *dy.shape[-2:]).sum(axis=(0, 2))
    dxhat = dy * ln.gain[:, None]
    dx = inv_std * (dxhat - dxhat.mean(axis=-2, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-2, keepdims=True))
    return LayerNormParams(d_gain, d_bias, ln.epsilon), dx


def attention_block_forward(x, params: MultiHeadParams, ln: LayerNormParams) -> np.ndarray:
    """``LN(X + W_o . MultiHead(X))``."""
    x = _check_x(x, params.d)
    return layer_norm_forward(x + multi_head_forward(x, params), ln)[0]


def attention_block_backward(x, params: MultiHeadParams, ln: LayerNormParams, upstream):
    """Returns ``(grad_params, grad_ln, grad_x)`` for ``<upstream, block(x)>``."""
    x = _check_x(x, params.d)
    y, ln_cache = layer_norm_forward(x + multi_head_forward(x, params), ln)
    if np.shape(upstream) != y.shape:
        raise DimensionMismatch(f"upstream has shape {np.shape(upstream)}, forward output is {y.shape}")
    grad_ln, d_res = layer_norm_backward(ln_cache, ln, upstream)
    grad_params, grad_x = multi_head_backward(x, params, d_res)
    return grad_params, grad_ln, grad_x + d_res


def embed_multihead_as_fixed(params: MultiHeadParams, d_p_target: int) -> MultiHeadParams:
    """Rewrite a standard layer as a fixed-head-size layer computing the same map.

    Each head's projections are zero-padded from ``d/h`` to ``d_p_target`` rows
    and ``w_o`` gains matching zero columns. Queries are multiplied by
    ``sqrt(d_p_target / (d/h))`` so the larger softmax temperature cancels and
    every context matrix is unchanged.
    """
    if params.mode is not Mode.STANDARD:
        raise InvalidTarget("only standard-mode layers can be embedded")
    small = params.d_p
    if d_p_target < small:
        raise InvalidTarget(f"target head size {d_p_target} is below d/h = {small}")
    pad = d_p_target - small
    q_gain = math.sqrt(d_p_target / small)

    def grow(w):
        return np.vstack([w, np.zeros((pad, params.d))])

    heads = [HeadParams(grow(hd.w_q * q_gain), grow(hd.w_k), grow(hd.w_v)) for hd in params.heads]
    blocks = []
    for i in range(params.h):
        blocks += [params.w_o_block(i), np.zeros((params.d, pad))]
    return MultiHeadParams(heads, np.hstack(blocks), Mode.FIXED, params.d, d_p_target, params.n_hint)


# --- JSON serialization ------------------------------------------------------

def params_to_dict(params: MultiHeadParams) -> dict:
    out = {
        "mode": params.mode.value,
        "d": params.d,
        "h": params.h,
        "d_p": params.d_p,
        "heads": [{"w_q": matrix_to_csv(hd.w_q), "w_k": matrix_to_csv(hd.w_k), "w_v": matrix_to_csv(hd.w_v)}
                  for hd in params.heads],
        "w_o": matrix_to_csv(params.w_o),
    }
    if params.n_hint is not None:
        out["n_hint"] = params.n_hint
    return out


def params_from_dict(obj: dict) -> MultiHeadParams:
    heads = [HeadParams(matrix_from_csv(hd["w_q"]), matrix_from_csv(hd["w_k"]), matrix_from_csv(hd["w_v"]))
             for hd in obj["heads"]]
    if len(heads) != obj["h"]:
        raise DimensionMismatch(f"'h' is {obj['h']} but {len(heads)} heads are present")
    return MultiHeadParams(heads, matrix_from_csv(obj["w_o"]), Mode(obj["mode"]),
                           int(obj["d"]), int(obj["d_p"]), obj.get("n_hint"))


def params_to_json(params: MultiHeadParams) -> str:
    return json.dumps(params_to_dict(params), sort_keys=True)


def params_from_json(text: str) -> MultiHeadParams:
    return params_from_dict(json.loads(text))
