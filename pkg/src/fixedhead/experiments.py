"""Small training runs comparing standard and fixed-head-size attention.

Two synthetic tasks:

* ``context_fit``: each sample is an independent ``(X, P)`` problem and gets
  its own projections; we measure how closely a head of size ``d_p`` can
  reproduce an arbitrary context ``P``.
* ``teacher_student``: a frozen random fixed-head-size block (head size
  ``n``) labels random inputs, and a student block regresses its outputs.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np

from .attention import (LayerNormParams, Mode, MultiHeadParams, attention_block_forward, init_multihead,
                        layer_norm_backward, layer_norm_forward, multi_head_backward, multi_head_forward,
                        softmax_columns_backward)
from .errors import DimensionMismatch, Diverged
from .linalg import make_rng, softmax_columns

SWEEP_HEADER = ["task", "mode", "d", "h", "n", "d_p", "use_ffn", "ffn_width", "steps", "batch", "opt", "lr",
                "seed", "param_count", "final_eval", "wall_time_ms", "error"]


class Task(str, Enum):
    CONTEXT_FIT = "context_fit"
    TEACHER_STUDENT = "teacher_student"


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ExperimentConfig:
    task: Task = Task.TEACHER_STUDENT
    d: int = 16
    h: int = 2
    n: int = 8
    d_p: int | None = None
    mode: Mode = Mode.FIXED
    use_ffn: bool = False
    ffn_width: int = 0
    steps: int = 2000
    batch: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    eval_every: int = 100
    samples: int = 256
    teacher_heads: int = 8
    teacher_scale: float = 2.0

    def __post_init__(self):
        self.task = Task(self.task)
        self.mode = Mode(self.mode)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.mode is Mode.STANDARD:
            if self.d % self.h:
                raise DimensionMismatch(f"standard mode needs h | d, got d={self.d}, h={self.h}")
            if self.d_p is None:
                self.d_p = self.d // self.h
            elif self.d_p != self.d // self.h:
                raise DimensionMismatch(f"standard mode fixes d_p = d/h = {self.d // self.h}, got {self.d_p}")
        elif self.d_p is None:
            raise ValueError("fixed mode needs d_p")
        for name in ("d", "h", "n", "d_p", "steps", "batch", "samples", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.use_ffn and self.ffn_width <= 0:
            raise ValueError("use_ffn needs a positive ffn_width")
        if self.optimizer.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer.kind!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task"] = self.task.value
        out["mode"] = self.mode.value
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**obj)


@dataclass
class TrainReport:
    config: ExperimentConfig
    losses: list[tuple[int, float, float]]
    final_eval: float
    wall_time_ms: int
    param_count: int
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "losses": [list(row) for row in self.losses],
            "final_eval": self.final_eval,
            "param_count": self.param_count,
            "note": self.note,
            "wall_time_ms": self.wall_time_ms,
        }


# --- optimizers ----------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params, grads) -> None:
        for k, p in params.items():
            p -= self.lr * grads[k]


def make_optimizer(cfg: OptimizerConfig):
    if cfg.kind == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.lr)


# --- feed-forward layer and block assembly -------------------------------------

def ffn_forward(x, w1, w2) -> np.ndarray:
    """``w2 . relu(w1 . x)``, before residual and LayerNorm."""
    x = np.asarray(x, dtype=np.float64)
    if w1.shape[1] != x.shape[-2] or w2.shape[1] != w1.shape[0]:
        raise DimensionMismatch(f"ffn shapes w1={w1.shape}, w2={w2.shape} do not fit input {x.shape}")
    return w2 @ np.maximum(w1 @ x, 0.0)


def ffn_backward(x, w1, w2, upstream):
    """Returns ``(d_w1, d_w2, d_x)`` for ``<upstream, ffn_forward(x, w1, w2)>``."""
    x = np.asarray(x, dtype=np.float64)
    pre = w1 @ x
    act = np.maximum(pre, 0.0)
    d_act = w2.T @ upstream
    d_pre = d_act * (pre > 0)
    xt = np.swapaxes(x, -1, -2)
    d_w2 = (upstream @ np.swapaxes(act, -1, -2)).reshape(-1, *w2.shape).sum(axis=0)
    d_w1 = (d_pre @ xt).reshape(-1, *w1.shape).sum(axis=0)
    return d_w1, d_w2, w1.T @ d_pre


@dataclass
class BlockParams:
    """``LN1(X + MHA(X))``, optionally followed by ``LN2(Z + FFN(Z))``."""

    attn: MultiHeadParams
    ln1: LayerNormParams
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None
    ln2: LayerNormParams | None = None

    @property
    def use_ffn(self) -> bool:
        return self.w1 is not None

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"attn.{k}": v for k, v in self.attn.named_arrays().items()}
        out["ln1.gain"], out["ln1.bias"] = self.ln1.gain, self.ln1.bias
        if self.use_ffn:
            out["ffn.w1"], out["ffn.w2"] = self.w1, self.w2
            out["ln2.gain"], out["ln2.bias"] = self.ln2.gain, self.ln2.bias
        return out

    def count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


def init_block(cfg: ExperimentConfig, rng: np.random.Generator) -> BlockParams:
    attn = init_multihead(cfg.d, cfg.h, cfg.mode, rng, d_p=cfg.d_p, n_hint=cfg.n)
    bp = BlockParams(attn, LayerNormParams.identity(cfg.d))
    if cfg.use_ffn:
        s = 1.0 / math.sqrt(cfg.d)
        bp.w1 = rng.uniform(-s, s, size=(cfg.ffn_width, cfg.d))
        s2 = 1.0 / math.sqrt(cfg.ffn_width)
        bp.w2 = rng.uniform(-s2, s2, size=(cfg.d, cfg.ffn_width))
        bp.ln2 = LayerNormParams.identity(cfg.d)
    return bp


def block_forward(x, bp: BlockParams):
    z, ln1_cache = layer_norm_forward(x + multi_head_forward(x, bp.attn), bp.ln1)
    if not bp.use_ffn:
        return z, (x, ln1_cache, None, None)
    y, ln2_cache = layer_norm_forward(z + ffn_forward(z, bp.w1, bp.w2), bp.ln2)
    return y, (x, ln1_cache, z, ln2_cache)


def block_backward(bp: BlockParams, cache, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``<upstream, block_forward(x, bp)[0]>`` keyed like ``bp.named_arrays()``."""
    x, ln1_cache, z, ln2_cache = cache
    grads = {}
    dz = upstream
    if bp.use_ffn:
        g_ln2, d_res2 = layer_norm_backward(ln2_cache, bp.ln2, upstream)
        d_w1, d_w2, d_z_ffn = ffn_backward(z, bp.w1, bp.w2, d_res2)
        grads.update({"ffn.w1": d_w1, "ffn.w2": d_w2, "ln2.gain": g_ln2.gain, "ln2.bias": g_ln2.bias})
        dz = d_res2 + d_z_ffn
    g_ln1, d_res1 = layer_norm_backward(ln1_cache, bp.ln1, dz)
    g_attn, d_x = multi_head_backward(x, bp.attn, d_res1)
    grads.update({f"attn.{k}": v for k, v in g_attn.named_arrays().items()})
    grads["ln1.gain"], grads["ln1.bias"] = g_ln1.gain, g_ln1.bias
    return grads, d_x + d_res1


def attention_param_count(d: int, h: int, d_p: int) -> int:
    """Query, key and value projections plus the output projection: ``3 h d_p d + d h d_p``."""
    return 3 * h * d_p * d + d * h * d_p


def param_count(cfg: ExperimentConfig) -> int:
    """Trainable entries of the model ``train`` builds for ``cfg`` (embeddings excluded)."""
    if cfg.task is Task.CONTEXT_FIT:
        return 2 * cfg.h * cfg.d_p * cfg.d
    total = attention_param_count(cfg.d, cfg.h, cfg.d_p) + 2 * cfg.d
    if cfg.use_ffn:
        total += 2 * cfg.d * cfg.ffn_width + 2 * cfg.d
    return total


def param_matched_heads(d: int, d_p: int, budget: int) -> int:
    """Head count whose fixed-size attention parameter count is closest to ``budget``."""
    return max(1, round(budget / attention_param_count(d, 1, d_p)))


# --- datasets --------------------------------------------------------------------

@dataclass
class ContextFitData:
    x: np.ndarray  # (samples, d, n)
    p: np.ndarray  # (samples, n, n)


@dataclass
class TeacherStudentData:
    x: np.ndarray
    y: np.ndarray
    teacher: BlockParams


def gen_context_fit(seed: int, n: int, d: int, samples: int) -> ContextFitData:
    if d < 2 or n < 2:
        raise ValueError("need d >= 2 and n >= 2")
    rng = make_rng(seed)
    x = rng.standard_normal((samples, d, n))
    p = softmax_columns(rng.standard_normal((samples, n, n)))
    return ContextFitData(x, p)


def make_teacher(seed: int, n: int, d: int, d_p_teacher: int, h_teacher: int,
                 logit_scale: float = 2.0) -> BlockParams:
    """Random fixed-head-size block; ``logit_scale`` multiplies the default query/key init."""
    rng = make_rng(seed)
    attn = init_multihead(d, h_teacher, Mode.FIXED, rng, d_p=d_p_teacher, n_hint=n)
    for hd in attn.heads:
        hd.w_q *= logit_scale
        hd.w_k *= logit_scale
    return BlockParams(attn, LayerNormParams.identity(d))


def gen_teacher_student(seed: int, n: int, d: int, d_p_teacher: int, h_teacher: int, samples: int,
                        logit_scale: float = 2.0) -> TeacherStudentData:
    teacher_seed, data_seed = np.random.SeedSequence(seed).spawn(2)
    teacher = make_teacher(int(teacher_seed.generate_state(1)[0]), n, d, d_p_teacher, h_teacher, logit_scale)
    x = np.random.Generator(np.random.PCG64(data_seed)).standard_normal((samples, d, n))
    y = attention_block_forward(x, teacher.attn, teacher.ln1)
    return TeacherStudentData(x, y, teacher)


def make_dataset(cfg: ExperimentConfig):
    if cfg.task is Task.CONTEXT_FIT:
        return gen_context_fit(cfg.seed, cfg.n, cfg.d, cfg.samples)
    return gen_teacher_student(cfg.seed, cfg.n, cfg.d, cfg.n, cfg.teacher_heads, cfg.samples, cfg.teacher_scale)


def split_index(samples: int) -> int:
    """First index of the held-out tail (last 20%, at least one sample)."""
    return min(samples - 1, max(1, int(round(samples * 0.8))))


# --- context fitting ------------------------------------------------------------

def context_fit_forward(w_k, w_q, x):
    """Per-sample, per-head contexts; ``w_k, w_q`` are ``(S, h, d_p, d)``, ``x`` is ``(S, d, n)``."""
    xs = x[:, None]
    k, q = w_k @ xs, w_q @ xs
    ctx = softmax_columns(np.swapaxes(k, -1, -2) @ q / math.sqrt(w_k.shape[-2]))
    return k, q, ctx


def context_fit_loss(w_k, w_q, data: ContextFitData) -> float:
    ctx = context_fit_forward(w_k, w_q, data.x)[2]
    return float(np.mean((ctx - data.p[:, None]) ** 2))


def _train_context_fit(cfg: ExperimentConfig, data: ContextFitData, rng: np.random.Generator):
    samples, d, _ = data.x.shape
    s = 1.0 / math.sqrt(d)
    params = {"w_k": rng.uniform(-s, s, size=(samples, cfg.h, cfg.d_p, d)),
              "w_q": rng.uniform(-s, s, size=(samples, cfg.h, cfg.d_p, d))}
    opt = make_optimizer(cfg.optimizer)
    xs = data.x[:, None]
    xt = np.swapaxes(xs, -1, -2)
    target = data.p[:, None]
    scale = math.sqrt(cfg.d_p)
    losses = []
    for step in range(cfg.steps + 1):
        k, q, ctx = context_fit_forward(params["w_k"], params["w_q"], data.x)
        diff = ctx - target
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise Diverged(step, loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            losses.append((step, loss, loss))
        if step == cfg.steps:
            break
        d_logits = softmax_columns_backward(ctx, 2.0 * diff / diff.size) / scale
        grads = {"w_k": (q @ np.swapaxes(d_logits, -1, -2)) @ xt, "w_q": (k @ d_logits) @ xt}
        opt.step(params, grads)
    return losses, "context_fit: every sample is its own fitting problem; eval_loss is the full-set loss"


def _train_teacher_student(cfg: ExperimentConfig, data: TeacherStudentData, rng: np.random.Generator):
    init_rng, batch_rng = (np.random.Generator(np.random.PCG64(s))
                           for s in np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(2))
    student = init_block(cfg, init_rng)
    params = student.named_arrays()
    opt = make_optimizer(cfg.optimizer)
    cut = split_index(data.x.shape[0])
    x_tr, y_tr, x_ev, y_ev = data.x[:cut], data.y[:cut], data.x[cut:], data.y[cut:]
    losses = []
    for step in range(cfg.steps + 1):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            tr = float(np.mean((block_forward(x_tr, student)[0] - y_tr) ** 2))
            ev = float(np.mean((block_forward(x_ev, student)[0] - y_ev) ** 2))
            if not (math.isfinite(tr) and math.isfinite(ev)):
                raise Diverged(step, tr if not math.isfinite(tr) else ev)
            losses.append((step, tr, ev))
        if step == cfg.steps:
            break
        idx = batch_rng.integers(0, cut, size=min(cfg.batch, cut))
        out, cache = block_forward(x_tr[idx], student)
        diff = out - y_tr[idx]
        if not np.all(np.isfinite(diff)):
            raise Diverged(step, float("nan"))
        grads, _ = block_backward(student, cache, 2.0 * diff / diff.size)
        opt.step(params, grads)
    return losses, ""


def train(cfg: ExperimentConfig, dataset) -> TrainReport:
    """Fit ``cfg``'s model to ``dataset`` with mini-batch Adam or SGD on mean squared error."""
    start = time.perf_counter()
    rng = make_rng(cfg.seed + 1_000_003)
    if cfg.task is Task.CONTEXT_FIT:
        if not isinstance(dataset, ContextFitData) or dataset.x.shape[0] == 0:
            raise ValueError("context_fit needs a non-empty ContextFitData")
        losses, note = _train_context_fit(cfg, dataset, rng)
    else:
        if not isinstance(dataset, TeacherStudentData) or dataset.x.shape[0] < 2:
            raise ValueError("teacher_student needs a TeacherStudentData with at least two samples")
        losses, note = _train_teacher_student(cfg, dataset, rng)
    return TrainReport(cfg, losses, losses[-1][2], int((time.perf_counter() - start) * 1000), param_count(cfg), note)


# --- sweeps -------------------------------------------------------------------------

def _run_one(cfg: ExperimentConfig) -> dict:
    row = {
        "task": cfg.task.value, "mode": cfg.mode.value, "d": cfg.d, "h": cfg.h, "n": cfg.n, "d_p": cfg.d_p,
        "use_ffn": int(cfg.use_ffn), "ffn_width": cfg.ffn_width, "steps": cfg.steps, "batch": cfg.batch,
        "opt": cfg.optimizer.kind, "lr": repr(cfg.optimizer.lr), "seed": cfg.seed,
        "param_count": param_count(cfg), "final_eval": "", "wall_time_ms": "", "error": "",
    }
    try:
        rep = train(cfg, make_dataset(cfg))
        row["final_eval"] = repr(rep.final_eval)
        row["wall_time_ms"] = rep.wall_time_ms
    except Exception as exc:  # a failed run is reported in its row; the sweep goes on
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def expand_seeds(configs: list[ExperimentConfig], seeds_per_config: int) -> list[ExperimentConfig]:
    return [replace(cfg, seed=cfg.seed + k) for cfg in configs for k in range(seeds_per_config)]


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sweep(configs: list[ExperimentConfig], seeds_per_config: int, out_path=None, workers: int = 1) -> list[dict]:
    """Train every (config, seed) pair and write one CSV row per run, in config order.

    Rows with equal ``param_count`` are parameter-matched and can be compared directly.
    """
    runs = expand_seeds(configs, seeds_per_config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, runs))
    else:
        rows = [_run_one(cfg) for cfg in runs]
    if out_path is not None:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        write_atomic(out_path, buf.getvalue())
    return rows


def median_final_eval(rows: list[dict], **match) -> float:
    vals = [float(r["final_eval"]) for r in rows
            if not r["error"] and all(str(r[k]) == str(v) for k, v in match.items())]
    if not vals:
        raise ValueError(f"no successful rows match {match}")
    return float(np.median(vals))
