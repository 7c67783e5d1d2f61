import csv
import math

import numpy as np
import pytest

from conftest import max_rel_err, numeric_grad
from fixedhead.attention import Mode
from fixedhead.errors import Diverged
from fixedhead.experiments import (SWEEP_HEADER, Adam, ExperimentConfig, OptimizerConfig, SGD, Task,
                                   attention_param_count, block_backward, block_forward, context_fit_loss,
                                   ffn_backward, ffn_forward, gen_context_fit, gen_teacher_student, init_block,
                                   make_dataset, median_final_eval, param_count, param_matched_heads,
                                   split_index, sweep, train)
from fixedhead.linalg import numerical_rank
from fixedhead.realization import realize_context


def cf_config(**kw):
    base = dict(task=Task.CONTEXT_FIT, d=8, h=1, n=4, d_p=4, steps=50, samples=8, eval_every=10,
                optimizer=OptimizerConfig(lr=0.05))
    base.update(kw)
    return ExperimentConfig(**base)


def ts_config(**kw):
    base = dict(task=Task.TEACHER_STUDENT, d=6, h=2, n=4, d_p=4, steps=30, samples=20, batch=8, eval_every=10,
                teacher_heads=2, optimizer=OptimizerConfig(lr=1e-2))
    base.update(kw)
    return ExperimentConfig(**base)


class TestData:
    def test_context_fit_targets_are_stochastic(self):
        data = gen_context_fit(0, 5, 7, 10)
        assert data.x.shape == (10, 7, 5) and data.p.shape == (10, 5, 5)
        assert np.all(data.p > 0)
        np.testing.assert_allclose(data.p.sum(axis=1), 1.0, atol=1e-12)

    def test_context_fit_reproducible(self):
        a, b = gen_context_fit(3, 4, 6, 5), gen_context_fit(3, 4, 6, 5)
        assert a.x.tobytes() == b.x.tobytes() and a.p.tobytes() == b.p.tobytes()

    def test_context_fit_inputs_full_rank(self):
        data = gen_context_fit(1, 8, 16, 1000)
        assert all(numerical_rank(x) == 8 for x in data.x)

    def test_context_fit_too_small(self):
        with pytest.raises(ValueError):
            gen_context_fit(0, 1, 4, 3)

    def test_teacher_student_reproducible(self):
        a = gen_teacher_student(2, 4, 6, 4, 3, 10)
        b = gen_teacher_student(2, 4, 6, 4, 3, 10)
        assert a.y.tobytes() == b.y.tobytes()
        assert a.teacher.attn.h == 3 and a.teacher.attn.d_p == 4

    def test_teacher_reproduces_its_labels(self):
        data = gen_teacher_student(0, 4, 6, 4, 2, 10)
        out, _ = block_forward(data.x, data.teacher)
        assert np.mean((out - data.y) ** 2) < 1e-20

    def test_teacher_labels_permutation_equivariant(self, rng):
        data = gen_teacher_student(0, 5, 6, 5, 2, 3)
        perm = rng.permutation(5)
        out, _ = block_forward(data.x[..., perm], data.teacher)
        np.testing.assert_allclose(out, data.y[..., perm], atol=1e-12)

    def test_split(self):
        assert split_index(256) == 205
        assert split_index(2) == 1


class TestConfig:
    def test_standard_fills_head_size(self):
        assert ExperimentConfig(mode=Mode.STANDARD, d=16, h=4).d_p == 4

    def test_fixed_needs_head_size(self):
        with pytest.raises(ValueError):
            ExperimentConfig(mode=Mode.FIXED, d_p=None)

    def test_round_trip(self):
        cfg = ts_config(use_ffn=True, ffn_width=5)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            ExperimentConfig.from_dict({"bogus": 1})


class TestOptimizers:
    def test_adam_first_step_by_hand(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([0.3, -0.1, 0.0])}
        Adam(lr=0.1).step(p, g)
        # bias correction makes the first update lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
        np.testing.assert_allclose(p["w"], expected, rtol=0, atol=1e-15)

    def test_adam_second_step_by_hand(self):
        p = {"w": np.array([0.0])}
        opt = Adam(lr=1.0, beta1=0.5, beta2=0.5, eps=0.0)
        opt.step(p, {"w": np.array([2.0])})
        opt.step(p, {"w": np.array([4.0])})
        m = (0.5 * 0.5 * 2 + 0.5 * 4) / (1 - 0.25)
        v = (0.5 * 0.5 * 4 + 0.5 * 16) / (1 - 0.25)
        assert p["w"][0] == pytest.approx(-1.0 - m / math.sqrt(v), abs=1e-15)

    def test_sgd(self):
        p = {"w": np.array([1.0])}
        SGD(lr=0.5).step(p, {"w": np.array([4.0])})
        assert p["w"][0] == -1.0


class TestFfn:
    def test_zero_first_layer(self, rng):
        assert np.all(ffn_forward(rng.normal(size=(4, 3)), np.zeros((5, 4)), rng.normal(size=(4, 5))) == 0)

    def test_negative_preactivations_vanish(self):
        x = np.ones((2, 1))
        w1 = -np.ones((3, 2))
        assert np.all(ffn_forward(x, w1, np.ones((2, 3))) == 0)

    def test_by_hand(self):
        x = np.array([[1.0], [2.0]])
        w1 = np.array([[1.0, 1.0], [1.0, -1.0]])
        w2 = np.array([[2.0, 5.0]])
        assert ffn_forward(x, w1, w2)[0, 0] == 6.0

    def test_gradients(self, rng):
        x, w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(6, 4)), rng.normal(size=(4, 6))
        up = rng.normal(size=(4, 3))

        def f():
            return float(np.sum(up * ffn_forward(x, w1, w2)))

        d_w1, d_w2, d_x = ffn_backward(x, w1, w2, up)
        assert max_rel_err(d_w1, numeric_grad(f, w1)) < 1e-4
        assert max_rel_err(d_w2, numeric_grad(f, w2)) < 1e-4
        assert max_rel_err(d_x, numeric_grad(f, x)) < 1e-4


class TestBlock:
    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("mode", [Mode.STANDARD, Mode.FIXED])
    def test_gradients_with_ffn(self, seed, mode):
        rng = np.random.default_rng(seed)
        cfg = ts_config(mode=mode, d=4, h=2, d_p=2 if mode is Mode.STANDARD else 3, use_ffn=True, ffn_width=5)
        bp = init_block(cfg, rng)
        for arr in bp.named_arrays().values():
            arr += rng.normal(scale=0.3, size=arr.shape)
        x, up = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))

        def f():
            return float(np.sum(up * block_forward(x, bp)[0]))

        grads, d_x = block_backward(bp, block_forward(x, bp)[1], up)
        for name, w in bp.named_arrays().items():
            assert max_rel_err(grads[name], numeric_grad(f, w)) < 1e-4, name
        assert max_rel_err(d_x, numeric_grad(f, x)) < 1e-4

    def test_gradient_keys_match_parameters(self, rng):
        bp = init_block(ts_config(), rng)
        x = rng.normal(size=(6, 4))
        grads, _ = block_backward(bp, block_forward(x, bp)[1], np.ones((6, 4)))
        assert set(grads) == set(bp.named_arrays())


class TestParamCount:
    @pytest.mark.parametrize("kw", [dict(), dict(use_ffn=True, ffn_width=7), dict(mode=Mode.STANDARD, h=3, d_p=None),
                                    dict(h=5, d_p=1)])
    def test_matches_instantiated_model(self, rng, kw):
        cfg = ts_config(**kw)
        assert init_block(cfg, rng).count() == param_count(cfg)

    def test_standard_closed_form(self):
        for d, h in [(16, 2), (16, 8), (12, 3)]:
            cfg = ExperimentConfig(d=d, h=h, mode=Mode.STANDARD)
            assert param_count(cfg) == 4 * d * d + 2 * d

    def test_context_fit_counts_key_and_query(self):
        assert param_count(cf_config(h=2, d_p=3)) == 2 * 2 * 3 * 8

    def test_matched_heads(self):
        assert param_matched_heads(16, 8, attention_param_count(16, 2, 8)) == 2
        assert param_matched_heads(16, 8, 4 * 16 * 16) == 2


class TestTraining:
    @pytest.mark.parametrize("make", [cf_config, ts_config])
    def test_zero_learning_rate_keeps_loss(self, make):
        cfg = make(optimizer=OptimizerConfig(lr=0.0))
        rep = train(cfg, make_dataset(cfg))
        assert len({row[1] for row in rep.losses}) == 1 and len({row[2] for row in rep.losses}) == 1

    def test_report_fields(self):
        cfg = ts_config()
        rep = train(cfg, make_dataset(cfg))
        assert [row[0] for row in rep.losses] == [0, 10, 20, 30]
        assert rep.final_eval == rep.losses[-1][2] and rep.param_count == param_count(cfg)

    def test_teacher_student_loss_decreases(self):
        cfg = ts_config(steps=200, samples=64)
        rep = train(cfg, make_dataset(cfg))
        assert rep.losses[-1][1] < rep.losses[0][1]

    def test_context_fit_full_projection_reaches_target(self):
        cfg = cf_config(d=8, n=4, d_p=8, steps=2000, samples=16)
        assert train(cfg, make_dataset(cfg)).final_eval < 1e-3

    def test_realizable_floor(self):
        # the explicit per-sample construction attains zero context-fit loss when d_p = d >= n
        data = gen_context_fit(0, 8, 16, 20)
        res = [realize_context(x, p) for x, p in zip(data.x, data.p)]
        w_k = np.stack([r.w_k for r in res])[:, None]
        w_q = np.stack([r.w_q for r in res])[:, None]
        assert context_fit_loss(w_k, w_q, data) < 1e-10

    @pytest.mark.parametrize("make", [cf_config, ts_config])
    def test_deterministic(self, make):
        cfg = make()
        a, b = train(cfg, make_dataset(cfg)), train(cfg, make_dataset(cfg))
        assert a.losses == b.losses

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        cfg = cf_config(optimizer=OptimizerConfig(kind="sgd", lr=1e300))
        with pytest.raises(Diverged) as info:
            train(cfg, make_dataset(cfg))
        assert info.value.step >= 1

    def test_wrong_dataset(self):
        cfg = cf_config()
        with pytest.raises(ValueError):
            train(cfg, make_dataset(ts_config()))

    def test_head_size_ablation_direction(self):
        # more per-head dimensions never fit contexts worse (n = 8, d = 16)
        medians = []
        for d_p in (1, 2, 4, 8):
            rows = sweep([cf_config(d=16, n=8, d_p=d_p, steps=300, samples=8)], 3)
            medians.append(median_final_eval(rows, d_p=d_p))
        assert all(a >= b for a, b in zip(medians, medians[1:]))


class TestSweep:
    def test_csv_layout(self, tmp_path):
        out = tmp_path / "s.csv"
        rows = sweep([ts_config(), cf_config()], 2, out)
        assert len(rows) == 4 and [r["seed"] for r in rows] == [0, 1, 0, 1]
        with open(out) as f:
            reader = csv.reader(f)
            assert next(reader) == SWEEP_HEADER
            assert len(list(reader)) == 4

    def test_repeat_is_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        sweep([ts_config()], 2, a)
        sweep([ts_config()], 2, b)
        strip = [[v for k, v in zip(SWEEP_HEADER, line.split(",")) if k != "wall_time_ms"]
                 for line in a.read_text().splitlines()]
        again = [[v for k, v in zip(SWEEP_HEADER, line.split(",")) if k != "wall_time_ms"]
                 for line in b.read_text().splitlines()]
        assert strip == again

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failed_run_recorded(self):
        rows = sweep([cf_config(optimizer=OptimizerConfig(kind="sgd", lr=1e300)), cf_config()], 1)
        assert rows[0]["error"].startswith("Diverged") and rows[0]["final_eval"] == ""
        assert rows[1]["error"] == "" and float(rows[1]["final_eval"]) >= 0

    def test_workers_match_serial(self):
        cfgs = [ts_config(), cf_config()]
        serial = sweep(cfgs, 1)
        parallel = sweep(cfgs, 1, workers=2)
        assert [r["final_eval"] for r in serial] == [r["final_eval"] for r in parallel]

    def test_median_requires_match(self):
        with pytest.raises(ValueError):
            median_final_eval([], h=1)
