import json
import math

import numpy as np
import pytest
import scipy.linalg

from fixedhead import separation as sep
from fixedhead.attention import Mode, multi_head_forward, params_from_json
from fixedhead.errors import ConstructionFailed, MisclassifiedInput, WitnessNotFound
from fixedhead.linalg import numerical_rank
from fixedhead.separation import (Case, build_target, case1_witness, case2_witness, case3_phis, case3_witness,
                                  classify_case, delta_matrices, engineer_case2, engineer_case3, output_gap,
                                  phi, phi1, phi2, random_competitor, rank_limited_symmetric_factor,
                                  verify_separation, zero_competitor)

CONFIGS = [(4, 4, 2, 2), (6, 3, 3, 4)]


def sym(m):
    return (m + m.T) / 2


@pytest.fixture(params=CONFIGS, ids=lambda c: "d{}-dp{}-h{}-n{}".format(*c))
def target(request):
    return build_target(*request.param, seed=7)


class TestBuildTarget:
    @pytest.mark.parametrize("config", CONFIGS)
    def test_invariants_over_100_seeds(self, config):
        d, d_p, h, n = config
        for seed in range(100):
            t = build_target(d, d_p, h, n, seed=seed, case3_admissible=seed % 2 == 0)
            assert numerical_rank(t.u) == d_p
            for kq in t.v_params.key_query_products():
                np.testing.assert_allclose(kq, t.u, atol=1e-12)
            assert numerical_rank(t.value_output_sum()) == d
            assert t.v_params.mode is Mode.FIXED and t.v_params.d_p == d_p and t.v_params.h == h

    def test_admissible_target_inertia(self):
        t = build_target(6, 3, 3, 4, seed=1)
        lam = np.linalg.eigvalsh(sym(t.u))
        cut = 1e-9 * np.abs(lam).max()
        assert np.sum(lam > cut) <= 2 and np.sum(lam < -cut) <= 2

    def test_deterministic(self):
        a, b = build_target(4, 4, 2, 2, seed=3), build_target(4, 4, 2, 2, seed=3)
        assert a.u.tobytes() == b.u.tobytes()

    @pytest.mark.parametrize("config", [(4, 2, 2, 2), (4, 5, 2, 2), (4, 4, 2, 1), (6, 4, 4, 2)])
    def test_hypotheses_rejected(self, config):
        with pytest.raises(ValueError):
            build_target(*config, seed=0)

    def test_check_catches_broken_target(self, target):
        target.v_params.heads[0].w_q[0, 0] += 1.0
        with pytest.raises(ConstructionFailed):
            target.check()


class TestClassify:
    def test_zero_competitor_is_case1(self, target):
        assert classify_case(zero_competitor(target), target) is Case.CASE1

    def test_engineered(self, target):
        assert classify_case(engineer_case2(target, 1), target) is Case.CASE2
        assert classify_case(engineer_case3(target, 1), target) is Case.CASE3

    def test_case3_deltas_are_skew(self, target):
        w = engineer_case3(target, 2)
        for dm in delta_matrices(w, target):
            assert np.max(np.abs(sym(dm))) < 1e-9
            assert np.max(np.abs(dm)) > 1e-3  # the skew part survives and is ignored

    def test_skew_shift_does_not_change_symmetric_part(self, target, rng):
        s = rng.normal(size=(target.d, target.d))
        s = s - s.T
        for dm in delta_matrices(random_competitor(target, rng), target):
            np.testing.assert_allclose(sym(dm + s), sym(dm), atol=1e-12)

    def test_rejects_fixed_competitor(self, target):
        with pytest.raises(Exception):
            classify_case(target.v_params, target)


class TestCase1:
    def test_zero_competitor_gap(self, target):
        rep = case1_witness(zero_competitor(target), target)
        v = rep.diagnostics["v"]
        expected = np.linalg.norm(target.value_output_sum() @ v) * math.sqrt(target.n)
        assert rep.gap_frobenius == pytest.approx(expected, rel=1e-10)

    def test_random_competitor_matches_closed_form(self, target, rng):
        rep = case1_witness(random_competitor(target, rng), target)
        assert rep.gap_frobenius == pytest.approx(rep.diagnostics["closed_form_gap"], rel=1e-10)
        assert rep.gap_frobenius > 1e-8

    def test_gap_is_linear_in_scale(self, target, rng):
        w = random_competitor(target, rng)
        rep = case1_witness(w, target)
        assert output_gap(w, target, 2 * rep.x) == pytest.approx(2 * rep.gap_frobenius, rel=1e-10)
        assert np.all(rep.x == rep.x[:, :1])

    def test_wrong_case_rejected(self, target):
        with pytest.raises(MisclassifiedInput):
            case1_witness(engineer_case2(target), target)


class TestCase2:
    def test_witness(self, target):
        w = engineer_case2(target, 3)
        rep = case2_witness(w, target, seed=5)
        assert rep.gap_frobenius > 1e-8
        assert rep.gap_frobenius == pytest.approx(output_gap(w, target, rep.x), abs=1e-12)
        assert abs(rep.diagnostics["quadratic_form"]) >= 1e-10

    def test_witness_column_structure(self, target):
        w = engineer_case2(target, 3)
        rep = case2_witness(w, target)
        assert np.all(rep.x[:, 1:] == 0)
        diff = multi_head_forward(rep.x, w) - multi_head_forward(rep.x, target.v_params)
        for j in range(2, target.n):
            np.testing.assert_allclose(diff[:, j], diff[:, 1], atol=1e-12)

    def test_opposite_direction_also_separates(self, target):
        w = engineer_case2(target, 3)
        rep = case2_witness(w, target)
        assert output_gap(w, target, -rep.x) > 1e-8

    def test_wrong_case_rejected(self, target):
        with pytest.raises(MisclassifiedInput):
            case2_witness(zero_competitor(target), target)


class TestCase3:
    def test_witness(self, target):
        w = engineer_case3(target, 4)
        rep = case3_witness(w, target, seed=2)
        assert rep.gap_frobenius > 1e-8
        assert rep.gap_frobenius == pytest.approx(output_gap(w, target, rep.x), abs=1e-12)
        assert rep.diagnostics["a_dot"] > 0 > rep.diagnostics["b_dot"]

    def test_phi_limits_along_alpha(self, target):
        w = engineer_case3(target, 4)
        rep = case3_witness(w, target, seed=2)
        dg = rep.diagnostics
        alphas = [2.0 ** k for k in range(6)]
        phis = [case3_phis(w, target, dg["head"], dg["v1"], dg["v2_tilde"], a) for a in alphas]
        t2 = [p["target_phi2"] for p in phis]
        c2 = [p["competitor_phi2"] for p in phis]
        assert all(x < y for x, y in zip(t2, t2[1:])) and all(x > y for x, y in zip(c2, c2[1:]))
        big = case3_phis(w, target, dg["head"], dg["v1"], dg["v2_tilde"], 40.0 / min(dg["a_dot"], -dg["b_dot"]))
        assert big["target_phi2"] > 1 - 1e-12 and big["competitor_phi2"] < 1e-12

    def test_null_space_branch(self):
        # v1 in the null space of the competitor's query map gives b = 0
        t = build_target(6, 3, 3, 4, seed=7)
        w = engineer_case3(t, 4)
        v1 = scipy.linalg.null_space(w.heads[0].w_q)[:, 0]
        rep = case3_witness(w, t, v1=v1)
        assert rep.diagnostics["degenerate_branch"]
        assert rep.gap_frobenius > 1e-8

    def test_two_tokens(self):
        t = build_target(4, 4, 2, 2, seed=11)
        rep = case3_witness(engineer_case3(t, 1), t)
        assert rep.x.shape == (4, 2) and rep.gap_frobenius > 1e-8

    def test_inadmissible_target_has_no_case3_competitor(self):
        t = build_target(6, 3, 3, 4, seed=7, case3_admissible=False)
        with pytest.raises(ConstructionFailed):
            engineer_case3(t)

    def test_wrong_case_rejected(self, target):
        with pytest.raises(MisclassifiedInput):
            case3_witness(engineer_case2(target), target)


class TestPhi:
    @pytest.mark.parametrize("s", [-5.0, 0.0, 0.3, 7.0])
    def test_one_logit_identity(self, s):
        for n in (2, 3, 8):
            assert phi(s, n) == pytest.approx(phi1(s, 0.0, n), rel=1e-15)

    def test_values(self):
        assert phi(0.0, 4) == pytest.approx(0.25)
        assert phi1(0.0, 0.0, 4) == pytest.approx(0.25) == phi2(0.0, 0.0, 4)

    def test_weights_sum_below_one(self, rng):
        s1, s2 = rng.normal(size=2)
        n = 5
        rest = (n - 2) / (math.exp(s1) + math.exp(s2) + n - 2)
        assert phi1(s1, s2, n) + phi2(s1, s2, n) + rest == pytest.approx(1.0, abs=1e-15)


class TestFactor:
    def test_symmetric_part_reproduced(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        g = (q * np.array([2.0, 1.0, -0.5, -3.0, 0.0, 0.0])) @ q.T
        a, b = rank_limited_symmetric_factor(g, 2)
        np.testing.assert_allclose(sym(a.T @ b), g, atol=1e-12)

    def test_too_much_inertia(self, rng):
        with pytest.raises(ConstructionFailed):
            rank_limited_symmetric_factor(np.diag([1.0, 2.0, 3.0, -1.0]), 2)


class TestVerify:
    @pytest.mark.parametrize("config", CONFIGS)
    def test_every_competitor_separated(self, config):
        t = build_target(*config, seed=7)
        summary = verify_separation(t, 50, seed=7)
        assert summary.min_gap > 1e-8
        assert all(summary.counts[c.value] >= 1 for c in Case)
        assert sum(summary.counts.values()) == 53

    def test_deterministic(self, target):
        a = verify_separation(target, 10, seed=1).to_dict()
        b = verify_separation(target, 10, seed=1).to_dict()
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_failure_carries_parameters(self, target, monkeypatch):
        def boom(w, t, tol=sep.CASE_TOL, seed=0):
            raise WitnessNotFound("forced")

        monkeypatch.setattr(sep, "witness", boom)
        with pytest.raises(WitnessNotFound) as info:
            verify_separation(target, 1, seed=0)
        w = params_from_json(info.value.params_json)
        assert w.mode is Mode.STANDARD and w.d == target.d

    def test_summary_dict(self, target):
        out = verify_separation(target, 2, seed=0).to_dict(include_reports=False)
        assert set(out) == {"counts", "min_gap", "n_checked"} and out["n_checked"] == 5
