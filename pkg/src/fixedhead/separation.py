"""Finding inputs on which a standard layer differs from a fixed-head-size target.

The target ``g_V`` is a fixed-head-size layer whose heads all share the same
key/query product ``U = (V_k^i)^T V_q^i`` of rank ``d_p``, and whose
``V_o . stack(V_v)`` is full rank. For any standard competitor ``f_W`` with the
same ``d`` and ``h`` we build an ``X`` with ``f_W(X) != g_V(X)``,
splitting on which of three cases ``W`` falls in:

* Case 1: ``sum_i W_o^i W_v^i != sum_i V_o^i V_v^i``. Use constant columns,
  where every softmax averages identical tokens and the layers act linearly.
* Case 2: the products match but some
  ``Delta_i = U/sqrt(d_p) - (W_k^i)^T W_q^i / sqrt(d/h)`` has a nonzero
  symmetric part. A single nonzero column ``v`` with ``v^T Delta_i v != 0``
  makes head ``i`` weigh that token differently in the two layers.
* Case 3: every ``Delta_i`` is skew-symmetric. Two nonzero columns, the
  second scaled by a growing ``alpha``, push the two softmaxes towards
  opposite tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import HeadParams, Mode, MultiHeadParams, multi_head_forward, params_to_json
from .errors import (ConstructionFailed, DegenerateDirection, DimensionMismatch, FixedHeadError,
                     MisclassifiedInput, WitnessNotFound)
from .linalg import make_rng, matrix_to_csv, max_abs, numerical_rank

CASE_TOL = 1e-9
GAP_TOL = 1e-8
MAX_BUILD_ATTEMPTS = 10
POWER_ITERATIONS = 50
MAX_DOUBLINGS = 60


class Case(str, Enum):
    CASE1 = "Case1"
    CASE2 = "Case2"
    CASE3 = "Case3"


@dataclass
class SeparationTarget:
    v_params: MultiHeadParams
    u: np.ndarray
    d_p: int
    h: int
    n: int

    @property
    def d(self) -> int:
        return self.v_params.d

    def value_output_sum(self) -> np.ndarray:
        return sum(self.v_params.value_output_products())

    def check(self, tol: float = 1e-12) -> None:
        """Raise ``ConstructionFailed`` unless every hypothesis holds."""
        d, d_p, h = self.d, self.d_p, self.h
        if not (h * d_p > d and d >= d_p and self.n >= 2):
            raise ConstructionFailed(f"hypotheses violated for d={d}, d_p={d_p}, h={h}, n={self.n}")
        if numerical_rank(self.u) != d_p:
            raise ConstructionFailed(f"rank(U) = {numerical_rank(self.u)} != d_p = {d_p}")
        for i, kq in enumerate(self.v_params.key_query_products()):
            if max_abs(kq - self.u) > tol:
                raise ConstructionFailed(f"head {i} key/query product differs from U")
        if numerical_rank(self.value_output_sum()) != d:
            raise ConstructionFailed("V_o . stack(V_v) is not full rank")


@dataclass
class WitnessReport:
    case: Case
    x: np.ndarray
    gap_frobenius: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "case": self.case.value,
            "x_csv": matrix_to_csv(self.x),
            "gap_frobenius": self.gap_frobenius,
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _check_hypotheses(d: int, d_p: int, h: int, n: int) -> None:
    if not h * d_p > d:
        raise ValueError(f"need h > d/d_p, got h={h}, d={d}, d_p={d_p}")
    if d < d_p:
        raise ValueError(f"need d >= d_p, got d={d}, d_p={d_p}")
    if n < 2:
        raise ValueError(f"need n >= 2, got n={n}")
    if d % h:
        raise ValueError(f"standard competitors need h | d, got d={d}, h={h}")


def _indefinite_core(d_p: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Random invertible ``d_p x d_p`` matrix whose symmetric part has at most ``r``
    positive and ``r`` negative eigenvalues."""
    pos = min(r, d_p)
    neg = min(r, d_p - pos)
    signs = np.array([1.0] * pos + [-1.0] * neg + [0.0] * (d_p - pos - neg))
    qmat, _ = np.linalg.qr(rng.normal(size=(d_p, d_p)))
    sym = (qmat * (signs * rng.uniform(0.5, 1.5, size=d_p))) @ qmat.T
    skew = rng.normal(size=(d_p, d_p))
    return sym + (skew - skew.T) / 2


def build_target(d: int, d_p: int, h: int, n: int, seed: int, case3_admissible: bool = True) -> SeparationTarget:
    """Random target satisfying the separation hypotheses.

    ``U = A^T B`` with ``A`` Gaussian. By default ``B = M A`` for a random
    invertible core ``M`` whose symmetric part has inertia bounded by
    ``d/h``; without that, no standard head (rank at most ``d/h``) can match
    the quadratic form of ``U`` and Case 3 is empty. Pass
    ``case3_admissible=False`` for independent Gaussian ``A, B``.
    """
    _check_hypotheses(d, d_p, h, n)
    rng = make_rng(seed)
    last = None
    for _ in range(MAX_BUILD_ATTEMPTS):
        a = rng.normal(size=(d_p, d))
        if case3_admissible:
            b = _indefinite_core(d_p, d // h, rng) @ a
        else:
            b = rng.normal(size=(d_p, d))
        heads = [HeadParams(w_q=b.copy(), w_k=a.copy(), w_v=rng.normal(size=(d_p, d))) for _ in range(h)]
        v_params = MultiHeadParams(heads, rng.normal(size=(d, h * d_p)), Mode.FIXED, d, d_p, n_hint=n)
        target = SeparationTarget(v_params, a.T @ b, d_p, h, n)
        try:
            target.check()
            return target
        except ConstructionFailed as exc:
            last = exc
    raise ConstructionFailed(f"no valid target after {MAX_BUILD_ATTEMPTS} attempts: {last}")


def _check_competitor(w: MultiHeadParams, t: SeparationTarget) -> None:
    if w.mode is not Mode.STANDARD:
        raise DimensionMismatch("competitor must be a standard-mode layer")
    if w.d != t.d or w.h != t.h:
        raise DimensionMismatch(f"competitor has d={w.d}, h={w.h}; target has d={t.d}, h={t.h}")


def delta_matrices(w: MultiHeadParams, t: SeparationTarget) -> list[np.ndarray]:
    """``U/sqrt(d_p) - (W_k^i)^T W_q^i / sqrt(d/h)`` for each head."""
    return [t.u / math.sqrt(t.d_p) - kq / w.scale for kq in w.key_query_products()]


def _sym(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2


def classify_case(w: MultiHeadParams, t: SeparationTarget, tol: float = CASE_TOL) -> Case:
    _check_competitor(w, t)
    if max_abs(sum(w.value_output_products()) - t.value_output_sum()) > tol:
        return Case.CASE1
    if any(max_abs(_sym(delta)) > tol for delta in delta_matrices(w, t)):
        return Case.CASE2
    return Case.CASE3


def output_gap(w: MultiHeadParams, t: SeparationTarget, x: np.ndarray) -> float:
    return float(np.linalg.norm(multi_head_forward(x, w) - multi_head_forward(x, t.v_params)))


def _require(w, t, case: Case, tol: float) -> None:
    got = classify_case(w, t, tol)
    if got is not case:
        raise MisclassifiedInput(f"competitor is in {got.value}, not {case.value}")


def case1_witness(w: MultiHeadParams, t: SeparationTarget, tol: float = CASE_TOL) -> WitnessReport:
    _require(w, t, Case.CASE1, tol)
    diff = sum(w.value_output_products()) - t.value_output_sum()
    j = int(np.argmax(np.linalg.norm(diff, axis=0)))
    v = np.zeros(t.d)
    v[j] = 1.0
    x = np.outer(v, np.ones(t.n))
    closed_form = float(np.linalg.norm(diff @ v) * math.sqrt(t.n))
    return WitnessReport(Case.CASE1, x, output_gap(w, t, x),
                         {"v": v, "column": j, "closed_form_gap": closed_form})


def phi(s, n: int):
    """Softmax weight of one token with logit ``s`` among ``n - 1`` zero logits."""
    return np.exp(s) / (np.exp(s) + n - 1)


def phi1(s1, s2, n: int):
    return np.exp(s1) / (np.exp(s1) + np.exp(s2) + n - 2)


def phi2(s1, s2, n: int):
    return np.exp(s2) / (np.exp(s1) + np.exp(s2) + n - 2)


def _leading_direction(sym: np.ndarray, start: np.ndarray) -> np.ndarray:
    v = start / np.linalg.norm(start)
    for _ in range(POWER_ITERATIONS):
        nxt = sym @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            break
        v = nxt / norm
    return v


def case2_witness(w: MultiHeadParams, t: SeparationTarget, tol: float = CASE_TOL, seed: int = 0,
                  max_retries: int = 10) -> WitnessReport:
    _require(w, t, Case.CASE2, tol)
    deltas = delta_matrices(w, t)
    head = int(np.argmax([max_abs(_sym(dm)) for dm in deltas]))
    sym = _sym(deltas[head])
    rng = make_rng(seed)
    start = rng.normal(size=t.d)
    candidates = [_leading_direction(sym, start), _leading_direction(sym, -start)]
    v = max(candidates, key=lambda c: abs(c @ sym @ c))
    for attempt in range(max_retries + 1):
        quad = float(v @ sym @ v)
        if abs(quad) >= 1e-10:
            x = np.zeros((t.d, t.n))
            x[:, 0] = v
            gap = output_gap(w, t, x)
            if gap > GAP_TOL:
                s_target = float(v @ t.u @ v) / math.sqrt(t.d_p)
                s_comp = [float(v @ kq @ v) / w.scale for kq in w.key_query_products()]
                return WitnessReport(Case.CASE2, x, gap, {
                    "head": head, "v": v, "quadratic_form": quad, "attempt": attempt,
                    "phi_target": float(phi(s_target, t.n)),
                    "phi_competitor": [float(phi(s, t.n)) for s in s_comp],
                })
        v = rng.normal(size=t.d)
        v /= np.linalg.norm(v)
    raise DegenerateDirection(f"no direction with v^T Delta v != 0 and a certified gap after {max_retries} retries")


def _case3_direction(a: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    """``v2~`` with ``v2~ . a > 0`` and ``v2~ . b < 0``, or ``None`` if impossible."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    scale = max(na, nb)
    if nb <= 1e-12 * scale:
        return a
    if na <= 1e-12 * scale:
        return -b
    gram = np.array([[a @ a, a @ b], [a @ b, b @ b]])
    if abs(np.linalg.det(gram)) <= 1e-12 * (na * nb) ** 2:
        # a and b parallel: feasible only if they point in opposite directions
        return a if a @ b < 0 else None
    coef = np.linalg.solve(gram, np.array([1.0, -1.0]))
    return coef[0] * a + coef[1] * b


def case3_columns(v1: np.ndarray, v2_tilde: np.ndarray, alpha: float, n: int) -> np.ndarray:
    x = np.zeros((v1.shape[0], n))
    x[:, 0] = v1
    x[:, 1] = alpha * v2_tilde
    return x


def case3_phis(w: MultiHeadParams, t: SeparationTarget, head: int, v1, v2_tilde, alpha: float) -> dict:
    """Attention weights the first query puts on tokens 1 and 2, in the target and in head ``head`` of ``w``."""
    v2 = alpha * np.asarray(v2_tilde)
    kq = w.key_query_products()[head]
    st = (v1 @ t.u @ v1 / math.sqrt(t.d_p), v2 @ t.u @ v1 / math.sqrt(t.d_p))
    sw = (v1 @ kq @ v1 / w.scale, v2 @ kq @ v1 / w.scale)
    return {
        "target_phi1": float(phi1(*st, t.n)), "target_phi2": float(phi2(*st, t.n)),
        "competitor_phi1": float(phi1(*sw, t.n)), "competitor_phi2": float(phi2(*sw, t.n)),
    }


def case3_witness(w: MultiHeadParams, t: SeparationTarget, tol: float = CASE_TOL, seed: int = 0,
                  v1=None, gap_tol: float = GAP_TOL, max_tries: int = 10) -> WitnessReport:
    _require(w, t, Case.CASE3, tol)
    rng = make_rng(seed)
    deltas = delta_matrices(w, t)
    kqs = w.key_query_products()
    scale_ref = max(max_abs(dm) for dm in deltas)
    tried = []
    for attempt in range(max_tries):
        for head, delta in enumerate(deltas):
            cand = np.asarray(v1, dtype=np.float64) if v1 is not None else rng.normal(size=t.d)
            if np.linalg.norm(delta @ cand) <= 1e-10 * max(scale_ref, 1.0) * np.linalg.norm(cand):
                continue
            a = t.u @ cand / math.sqrt(t.d_p)
            b = kqs[head] @ cand / w.scale
            v2_tilde = _case3_direction(a, b)
            if v2_tilde is None:
                tried.append({"head": head, "reason": "a and b point the same way"})
                continue
            schedule = []
            alpha = 1.0
            for _ in range(MAX_DOUBLINGS + 1):
                x = case3_columns(cand, v2_tilde, alpha, t.n)
                gap = output_gap(w, t, x)
                schedule.append((alpha, gap))
                if gap > gap_tol:
                    return WitnessReport(Case.CASE3, x, gap, {
                        "head": head, "v1": cand, "v2_tilde": v2_tilde, "alpha": alpha,
                        "a_dot": float(v2_tilde @ a), "b_dot": float(v2_tilde @ b),
                        "degenerate_branch": bool(np.linalg.norm(b) <= 1e-12 * np.linalg.norm(a)),
                        "phis": case3_phis(w, t, head, cand, v2_tilde, alpha),
                        "schedule": schedule, "attempt": attempt,
                    })
                alpha *= 2.0
            tried.append({"head": head, "reason": "doubling exhausted", "schedule": schedule})
        if v1 is not None:
            break
    raise WitnessNotFound(f"Case 3 search failed: {_jsonable(tried)}")


def random_competitor(t: SeparationTarget, rng: np.random.Generator) -> MultiHeadParams:
    d, h = t.d, t.h
    r = d // h
    heads = [HeadParams(rng.normal(size=(r, d)), rng.normal(size=(r, d)), rng.normal(size=(r, d)))
             for _ in range(h)]
    return MultiHeadParams(heads, rng.normal(size=(d, d)), Mode.STANDARD, d, r, t.n)


def zero_competitor(t: SeparationTarget) -> MultiHeadParams:
    return random_competitor(t, make_rng(0)).map_arrays(np.zeros_like)


def _matched_values(t: SeparationTarget, rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    """Random ``W_o`` and per-head ``W_v`` with ``W_o . stack(W_v) == sum_i V_o^i V_v^i``."""
    d, r = t.d, t.d // t.h
    w_o = rng.normal(size=(d, d)) + d * np.eye(d)
    stacked = np.linalg.solve(w_o, t.value_output_sum())
    return w_o, [stacked[i * r:(i + 1) * r] for i in range(t.h)]


def engineer_case2(t: SeparationTarget, seed: int = 0) -> MultiHeadParams:
    rng = make_rng(seed)
    d, r = t.d, t.d // t.h
    w_o, w_vs = _matched_values(t, rng)
    heads = [HeadParams(rng.normal(size=(r, d)), rng.normal(size=(r, d)), wv) for wv in w_vs]
    return MultiHeadParams(heads, w_o, Mode.STANDARD, d, r, t.n)


def rank_limited_symmetric_factor(g: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """``(A, B)`` of shape ``r x d`` with ``sym(A^T B) == g`` for symmetric ``g``.

    Each factor ``a b^T`` absorbs one positive and one negative eigenpair of
    ``g``, so this works iff ``g`` has at most ``r`` eigenvalues of each sign.
    """
    lam, vec = np.linalg.eigh(g)
    cut = 1e-12 * max(np.max(np.abs(lam)), 1e-300)
    pos = [(lam[i], vec[:, i]) for i in np.argsort(-lam) if lam[i] > cut]
    neg = [(lam[i], vec[:, i]) for i in np.argsort(lam) if lam[i] < -cut]
    if max(len(pos), len(neg)) > r:
        raise ConstructionFailed(
            f"symmetric part has inertia ({len(pos)}, {len(neg)}); a rank-{r} product cannot match it")
    d = g.shape[0]
    a_rows, b_rows = np.zeros((r, d)), np.zeros((r, d))
    for k in range(max(len(pos), len(neg))):
        a_vec, b_vec = np.zeros(d), np.zeros(d)
        if k < len(pos):
            lp, up = pos[k]
            a_vec += math.sqrt(lp) * up
            b_vec += math.sqrt(lp) * up
        if k < len(neg):
            ln, un = neg[k]
            a_vec += math.sqrt(-ln) * un
            b_vec -= math.sqrt(-ln) * un
        a_rows[k], b_rows[k] = a_vec, b_vec
    return a_rows, b_rows


def engineer_case3(t: SeparationTarget, seed: int = 0) -> MultiHeadParams:
    """Competitor with matched value products and every ``Delta_i`` skew-symmetric."""
    rng = make_rng(seed)
    d, r = t.d, t.d // t.h
    w_o, w_vs = _matched_values(t, rng)
    g = _sym(t.u) * math.sqrt(r) / math.sqrt(t.d_p)
    w_k, w_q = rank_limited_symmetric_factor(g, r)
    heads = [HeadParams(w_q.copy(), w_k.copy(), wv) for wv in w_vs]
    return MultiHeadParams(heads, w_o, Mode.STANDARD, d, r, t.n)


def witness(w: MultiHeadParams, t: SeparationTarget, tol: float = CASE_TOL, seed: int = 0) -> WitnessReport:
    case = classify_case(w, t, tol)
    if case is Case.CASE1:
        return case1_witness(w, t, tol)
    if case is Case.CASE2:
        return case2_witness(w, t, tol, seed=seed)
    return case3_witness(w, t, tol, seed=seed)


@dataclass
class SeparationSummary:
    counts: dict
    min_gap: float
    reports: list

    def to_dict(self, include_reports: bool = True) -> dict:
        out = {"counts": dict(self.counts), "min_gap": self.min_gap, "n_checked": len(self.reports)}
        if include_reports:
            out["reports"] = [{"label": label, **rep.to_dict()} for label, rep in self.reports]
        return out


def verify_separation(t: SeparationTarget, n_samples: int, seed: int) -> SeparationSummary:
    """Run the witness search against random and engineered competitors.

    Every competitor must yield a gap above ``GAP_TOL``; otherwise the error is
    re-raised with the offending parameters attached as ``exc.params_json``.
    """
    seq = np.random.SeedSequence(seed)
    sample_seq, witness_seq, adv_seq = seq.spawn(3)
    competitors = [("zero", zero_competitor(t))]
    competitors += [(f"random{k}", random_competitor(t, np.random.Generator(np.random.PCG64(s))))
                    for k, s in enumerate(sample_seq.spawn(n_samples))]
    adv_seeds = adv_seq.generate_state(2)
    competitors.append(("engineered_case2", engineer_case2(t, int(adv_seeds[0]))))
    competitors.append(("engineered_case3", engineer_case3(t, int(adv_seeds[1]))))

    counts = {c.value: 0 for c in Case}
    reports = []
    witness_seeds = witness_seq.generate_state(len(competitors))
    for (label, w), wseed in zip(competitors, witness_seeds):
        try:
            rep = witness(w, t, seed=int(wseed))
            if not rep.gap_frobenius > GAP_TOL:
                raise WitnessNotFound(f"{label}: gap {rep.gap_frobenius:.3g} is not above {GAP_TOL:g}")
        except FixedHeadError as exc:
            exc.params_json = params_to_json(w)
            exc.args = (f"{exc} [competitor {label}: {exc.params_json}]",)
            raise
        counts[rep.case.value] += 1
        reports.append((label, rep))
    return SeparationSummary(counts, min(rep.gap_frobenius for _, rep in reports), reports)
