import numpy as np
import pytest

from seqcl import clstrat as cs
from seqcl import ndgrad as ng
from seqcl import seqmodel as sm
from seqcl.exemplar import ExemplarMemory, GrowingPolicy
from seqcl.ndgrad import ParamVector, Tape, Tensor


def leaves_of(pv: ParamVector) -> dict:
    return {n: Tensor(a) for n, a in pv.items()}


def small_model(seed=0):
    return sm.Model(sm.ModelConfig(d=3, h=6, enc_layers=2, o=5, seed=seed))


def random_utt(rng, cfg, n_tokens=2):
    return sm.Utterance(rng.normal(size=(2 * n_tokens, cfg.d)),
                        rng.integers(2, cfg.o, size=n_tokens))


class TestEwcFisher:
    def test_constant_loss_gives_zero(self):
        theta = ParamVector({"t": np.array([1.0, 2.0])})
        omega = cs.ewc_fisher(lambda lv, s: ng.sum_(Tensor([3.0])), theta, [0, 1])
        np.testing.assert_array_equal(omega["t"], [0.0, 0.0])

    def test_single_sample_squared_gradient(self):
        theta = ParamVector({"t": np.array([0.7, -0.3])})
        omega = cs.ewc_fisher(
            lambda lv, s: ng.sq_l2norm(lv["t"]), theta, ["only"])
        np.testing.assert_allclose(omega["t"], (2 * theta["t"]) ** 2, atol=1e-15)

    def test_two_samples_hand_average(self):
        theta = ParamVector({"t": np.array([0.0, 0.0])})
        weights = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 2.0])}
        omega = cs.ewc_fisher(
            lambda lv, s: ng.sum_(ng.mul(lv["t"], weights[s])), theta, [0, 1])
        np.testing.assert_allclose(omega["t"], [0.5, 2.0], atol=1e-15)

    def test_empty_dataset_rejected(self):
        theta = ParamVector({"t": np.zeros(2)})
        with pytest.raises(cs.StrategyError):
            cs.ewc_fisher(lambda lv, s: ng.sum_(lv["t"]), theta, [])

    def test_nonnegative_on_real_model(self):
        rng = np.random.default_rng(0)
        m = small_model()
        params = m.init_params()
        samples = [random_utt(rng, m.cfg) for _ in range(3)]
        omega = cs.ewc_fisher(cs.model_loss_fn(m), params, samples)
        assert all((a >= 0).all() for _, a in omega.items())


class TestMasImportance:
    def test_scalar_model_hand_value(self):
        # f(x) = theta * x, c = 1: E|2 theta x^2| over x in {1, 2} -> 5
        theta = ParamVector({"t": np.asarray(1.0)})
        omega = cs.mas_importance(
            lambda lv, x: (ng.mul(lv["t"], float(x)), None), theta, [1.0, 2.0], c=1.0)
        assert float(omega["t"]) == pytest.approx(5.0, abs=1e-12)

    def test_stationary_point_gives_zero(self):
        theta = ParamVector({"t": np.asarray(0.0)})
        omega = cs.mas_importance(
            lambda lv, x: (ng.mul(lv["t"], float(x)), None), theta, [1.0, 2.0], c=1.0)
        assert float(omega["t"]) == 0.0

    def test_c_one_ignores_decoder_head(self):
        rng = np.random.default_rng(1)
        theta = ParamVector({"t": rng.normal(size=3)})

        def with_decoder(lv, x):
            return ng.mul(lv["t"], float(x)), ng.tanh(lv["t"])

        def without_decoder(lv, x):
            return ng.mul(lv["t"], float(x)), None

        a = cs.mas_importance(with_decoder, theta, [1.0, 2.0], c=1.0)
        b = cs.mas_importance(without_decoder, theta, [1.0, 2.0], c=1.0)
        np.testing.assert_array_equal(a["t"], b["t"])

    def test_nonnegative_on_real_model(self):
        rng = np.random.default_rng(2)
        m = small_model()
        params = m.init_params()
        samples = [random_utt(rng, m.cfg) for _ in range(2)]
        omega = cs.mas_importance(cs.model_prob_outputs_fn(m), params, samples,
                                  c=m.cfg.ctc_weight)
        assert all((a >= 0).all() for _, a in omega.items())


class TestQuadPenalty:
    def test_zero_at_anchor(self):
        rng = np.random.default_rng(3)
        anchor = ParamVector({"a": rng.normal(size=(2, 2)), "b": rng.normal(size=3)})
        curv = cs.Curvature(diag=ParamVector({"a": np.ones((2, 2)), "b": np.ones(3)}),
                            anchor=anchor, strength=5.0)
        assert curv.penalty_value(anchor) == 0.0

    def test_hand_value(self):
        anchor = ParamVector({"t": np.zeros(2)})
        curv = cs.Curvature(diag=ParamVector({"t": np.array([1.0, 2.0])}),
                            anchor=anchor, strength=2.0)
        theta = ParamVector({"t": np.array([1.0, 1.0])})
        assert curv.penalty_value(theta) == pytest.approx(3.0, abs=1e-15)

    def test_zero_diag_zero_everywhere(self):
        anchor = ParamVector({"t": np.zeros(3)})
        curv = cs.Curvature(diag=anchor.zeros_like(), anchor=anchor, strength=1.0)
        rng = np.random.default_rng(4)
        for _ in range(5):
            theta = ParamVector({"t": rng.normal(size=3)})
            assert curv.penalty_value(theta) == 0.0

    def test_layout_mismatch(self):
        curv = cs.Curvature(diag=ParamVector({"t": np.ones(2)}),
                            anchor=ParamVector({"t": np.zeros(2)}), strength=1.0)
        with pytest.raises(cs.StrategyError):
            cs.quad_penalty(curv, leaves_of(ParamVector({"x": np.zeros(2)})))

    def test_gradient_finite_diff_diag_only(self):
        rng = np.random.default_rng(5)
        anchor = ParamVector({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=2)})
        curv = cs.Curvature(
            diag=ParamVector({"a": rng.uniform(0.1, 2, (3, 2)),
                              "b": rng.uniform(0.1, 2, 2)}),
            anchor=anchor, strength=1.7)
        theta = ParamVector({n: a + rng.normal(size=a.shape) for n, a in anchor.items()})
        err = ng.finite_diff_check(lambda lv: cs.quad_penalty(curv, lv), theta, 1e-4)
        assert err < 1e-6

    def test_gradient_finite_diff_with_lowrank(self):
        rng = np.random.default_rng(6)
        anchor = ParamVector({"a": rng.normal(size=4), "b": rng.normal(size=3)})
        u = rng.normal(size=(7, 3))
        m = cs._psd_clamp(rng.normal(size=(3, 3)))
        curv = cs.Curvature(diag=ParamVector({"a": rng.uniform(0, 1, 4),
                                              "b": rng.uniform(0, 1, 3)}),
                            anchor=anchor, strength=0.9,
                            lowrank=[cs.DenseLowRank(U=u, M=m)])
        theta = ParamVector({n: a + 0.5 * rng.normal(size=a.shape)
                             for n, a in anchor.items()})
        err = ng.finite_diff_check(lambda lv: cs.quad_penalty(curv, lv), theta, 1e-4)
        assert err < 1e-6

    def test_gradient_zero_at_anchor(self):
        rng = np.random.default_rng(7)
        anchor = ParamVector({"a": rng.normal(size=5)})
        curv = cs.Curvature(diag=ParamVector({"a": rng.uniform(0.1, 1, 5)}),
                            anchor=anchor, strength=3.0)
        with Tape() as tape:
            lv = leaves_of(anchor)
            pen = cs.quad_penalty(curv, lv)
        g = ng.backward(pen, tape).param_grads(lv)
        assert pen.item() == 0.0
        assert g.norm() == 0.0


class TestSr1Compact:
    def _quadratic_fixture(self, rng, n=24, rank=None):
        b0 = rng.uniform(0.2, 1.0, size=n)
        c = rng.normal(size=(n, rank or n))
        a = np.diag(b0) + c @ c.T
        return b0, a

    def test_secant_property_exact_quadratic(self):
        rng = np.random.default_rng(11)
        b0, a = self._quadratic_fixture(rng)
        s_list = [rng.normal(size=len(b0)) for _ in range(5)]
        s_list = [s / np.linalg.norm(s) for s in s_list]
        y_list = [a @ s for s in s_list]
        retained, u, w = cs.sr1_compact(b0, s_list, y_list)
        assert retained == list(range(5))
        m = np.linalg.inv(w)
        for k in retained:
            bs = b0 * s_list[k] + u @ (m @ (u.T @ s_list[k]))
            rel = np.linalg.norm(bs - y_list[k]) / np.linalg.norm(y_list[k])
            assert rel < 1e-8

    def test_duplicate_direction_skipped(self):
        rng = np.random.default_rng(12)
        b0, a = self._quadratic_fixture(rng)
        s = rng.normal(size=len(b0))
        s /= np.linalg.norm(s)
        retained, _, _ = cs.sr1_compact(b0, [s, s], [a @ s, a @ s])
        assert retained == [0]

    def test_csqn_k0_equals_ewc_penalty_exactly(self):
        rng = np.random.default_rng(13)
        base = ParamVector({"a": rng.uniform(0, 1, 6), "b": rng.uniform(0, 1, 4)})
        anchor = ParamVector({"a": rng.normal(size=6), "b": rng.normal(size=4)})
        curv = cs.csqn_build(lambda p, s: p.zeros_like(), anchor, [], base,
                             k_pairs=0, lam=2.0, rng=rng)
        ewc = cs.Curvature(diag=base, anchor=anchor, strength=2.0)
        theta = ParamVector({n: a + rng.normal(size=a.shape) for n, a in anchor.items()})
        assert curv.penalty_value(theta) == ewc.penalty_value(theta)
        assert not curv.lowrank

    def test_live_build_penalty_nonnegative(self):
        rng = np.random.default_rng(14)
        anchor = ParamVector({"a": rng.normal(size=10), "b": rng.normal(size=6)})
        base = ParamVector({"a": rng.uniform(0, 0.5, 10), "b": rng.uniform(0, 0.5, 6)})
        fake_grads = [ParamVector({"a": rng.normal(size=10),
                                   "b": rng.normal(size=6)}) for _ in range(8)]
        curv = cs.csqn_build(lambda p, i: fake_grads[i], anchor, list(range(8)),
                             base, k_pairs=4, lam=1.0, rng=rng)
        for _ in range(100):
            theta = ParamVector({n: a + rng.normal(size=a.shape)
                                 for n, a in anchor.items()})
            assert curv.penalty_value(theta) >= 0.0
        assert curv.penalty_value(anchor) == 0.0

    def test_k_exceeding_param_count_rejected(self):
        rng = np.random.default_rng(15)
        pv = ParamVector({"a": np.zeros(3)})
        with pytest.raises(cs.StrategyError):
            cs.csqn_build(lambda p, s: p, pv, [0], pv.zeros_like(),
                          k_pairs=9, lam=1.0, rng=rng)


class TestCsqnBtReduce:
    def _curv_with_lowrank(self, rng, seg_sizes=(40, 30, 50), k=6):
        names = [f"s{i}" for i in range(len(seg_sizes))]
        diag = ParamVector({n: rng.uniform(0, 1, sz) for n, sz in zip(names, seg_sizes)})
        anchor = ParamVector({n: rng.normal(size=sz) for n, sz in zip(names, seg_sizes)})
        u = rng.normal(size=(sum(seg_sizes), k))
        m = cs._psd_clamp(rng.normal(size=(k, k)))
        return cs.Curvature(diag=diag, anchor=anchor, strength=1.3,
                            lowrank=[cs.DenseLowRank(U=u, M=m)])

    def test_full_rank_reduce_preserves_penalty(self):
        rng = np.random.default_rng(21)
        curv = self._curv_with_lowrank(rng, k=5)
        reduced = cs.csqn_bt_reduce(curv, per_block_rank=5)
        for _ in range(10):
            theta = ParamVector({n: a + rng.normal(size=a.shape)
                                 for n, a in curv.anchor.items()})
            assert reduced.penalty_value(theta) == pytest.approx(
                curv.penalty_value(theta), abs=1e-10, rel=1e-10)

    def test_rank1_block_unchanged(self):
        rng = np.random.default_rng(22)
        names = ["a", "b"]
        diag = ParamVector({n: np.zeros(20) for n in names})
        anchor = ParamVector({n: rng.normal(size=20) for n in names})
        # rank-1 whitened factor in every block
        u = np.outer(rng.normal(size=40), [1.0])
        curv = cs.Curvature(diag=diag, anchor=anchor, strength=1.0,
                            lowrank=[cs.DenseLowRank(U=u, M=np.eye(1))])
        reduced = cs.csqn_bt_reduce(curv, per_block_rank=1)
        theta = ParamVector({n: a + rng.normal(size=20) for n, a in anchor.items()})
        assert reduced.penalty_value(theta) == pytest.approx(
            curv.penalty_value(theta), abs=1e-10)

    def test_storage_strictly_smaller(self):
        rng = np.random.default_rng(23)
        curv = self._curv_with_lowrank(rng, seg_sizes=(100, 120, 80), k=6)
        reduced = cs.csqn_bt_reduce(curv, per_block_rank=2)
        assert reduced.storage_floats() < curv.storage_floats()

    def test_rank_exceeding_k_rejected(self):
        rng = np.random.default_rng(24)
        curv = self._curv_with_lowrank(rng, k=3)
        with pytest.raises(cs.StrategyError):
            cs.csqn_bt_reduce(curv, per_block_rank=4)


class TestDistillLoss:
    def test_teacher_equals_student_uniform(self):
        lp = np.full((1, 2), np.log(0.5))
        loss = cs.distill_loss(lp, lp, Tensor(lp), Tensor(lp), lam=1.0, c=0.3)
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_lambda_zero(self):
        lp = np.full((2, 3), np.log(1 / 3))
        loss = cs.distill_loss(lp, lp, Tensor(lp), Tensor(lp), lam=0.0)
        assert loss.item() == 0.0

    def test_one_hot_teacher_matching_student(self):
        t = np.log(np.array([[1.0, 1e-300]]))  # exact one-hot in prob space
        t_probs_lp = np.array([[0.0, -700.0]])
        s = np.log(np.array([[1.0 - 1e-15, 1e-15]]))
        loss = cs.distill_loss(t_probs_lp, t_probs_lp, Tensor(s), Tensor(s),
                               lam=1.0, c=0.5)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_self_distillation_equals_weighted_entropy(self):
        rng = np.random.default_rng(31)
        c, lam = 0.3, 1.4
        ctc_lp = np.log(cs.tempered_probs(rng.normal(size=(4, 5)), 1.0))
        dec_lp = np.log(cs.tempered_probs(rng.normal(size=(3, 5)), 1.0))
        loss = cs.distill_loss(ctc_lp, dec_lp, Tensor(ctc_lp), Tensor(dec_lp),
                               lam=lam, c=c)
        ent = lambda lp: float(-(np.exp(lp) * lp).sum())
        expected = lam * (c * ent(ctc_lp) + (1 - c) * ent(dec_lp))
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_gradient_finite_diff(self):
        rng = np.random.default_rng(32)
        t_ctc = np.log(cs.tempered_probs(rng.normal(size=(3, 4)), 1.0))
        t_dec = np.log(cs.tempered_probs(rng.normal(size=(2, 4)), 1.0))
        theta = ParamVector({"sc": rng.normal(size=(3, 4)),
                             "sd": rng.normal(size=(2, 4))})

        def build(lv):
            return cs.distill_loss(t_ctc, t_dec,
                                   ng.log_softmax(lv["sc"]), ng.log_softmax(lv["sd"]),
                                   lam=1.2, gamma=2.0, c=0.3)

        assert ng.finite_diff_check(build, theta, 1e-4) < 1e-6

    def test_shape_mismatch(self):
        a, b = np.zeros((2, 3)), np.zeros((3, 3))
        with pytest.raises(ng.ShapeError):
            cs.distill_loss(a, a, Tensor(b), Tensor(a), lam=1.0)


class TestAgemTransform:
    def test_aligned_gradient_untouched(self):
        g = ParamVector({"t": np.array([1.0, 0.0])})
        g_ref = ParamVector({"t": np.array([1.0, 1.0])})
        assert cs.agem_transform(g, g_ref) is g

    def test_hand_projection(self):
        g = ParamVector({"t": np.array([1.0, -1.0])})
        g_ref = ParamVector({"t": np.array([0.0, 1.0])})
        out = cs.agem_transform(g, g_ref)
        np.testing.assert_allclose(out["t"], [1.0, 0.0], atol=1e-15)
        assert out.dot(g_ref) == pytest.approx(0.0, abs=1e-15)

    def test_antiparallel_zeroed(self):
        g_ref = ParamVector({"t": np.array([0.3, -0.7])})
        out = cs.agem_transform(g_ref * -1.0, g_ref)
        assert out.norm() == pytest.approx(0.0, abs=1e-15)

    def test_zero_reference_untouched(self):
        g = ParamVector({"t": np.array([1.0, 2.0])})
        assert cs.agem_transform(g, g.zeros_like()) is g

    def test_projection_safety_property(self):
        rng = np.random.default_rng(41)
        for _ in range(200):
            g = ParamVector({"t": rng.normal(size=6)})
            g_ref = ParamVector({"t": rng.normal(size=6)})
            out = cs.agem_transform(g, g_ref)
            assert out.dot(g_ref) >= -1e-12


def make_memory(rng, cfg, n=6):
    mem = ExemplarMemory(GrowingPolicy(n), seed=5)
    mem.task_end_update([random_utt(rng, cfg) for _ in range(n)], 0)
    return mem


class TestErCompose:
    def test_er_returns_unit_weights(self):
        rng = np.random.default_rng(51)
        m = small_model()
        mem = make_memory(rng, m.cfg)
        task = [random_utt(rng, m.cfg) for _ in range(4)]
        batches = cs.er_compose(task, mem, "ER", None, rng)
        assert [w for _, w in batches] == [1.0, 1.0]
        assert batches[0][0] == task and len(batches[1][0]) == 4

    def test_er_lambda_weight_and_validation(self):
        rng = np.random.default_rng(52)
        m = small_model()
        mem = make_memory(rng, m.cfg)
        task = [random_utt(rng, m.cfg) for _ in range(3)]
        batches = cs.er_compose(task, mem, "ER_LAMBDA", 0.25, rng)
        assert [w for _, w in batches] == [1.0, 0.25]
        with pytest.raises(cs.StrategyError):
            cs.er_compose(task, mem, "ER_LAMBDA", 1.5, rng)

    def test_er_requires_memory(self):
        rng = np.random.default_rng(53)
        m = small_model()
        task = [random_utt(rng, m.cfg)]
        with pytest.raises(cs.StrategyError):
            cs.er_compose(task, None, "ER", None, rng)

    def test_ber_merges_and_shuffles(self):
        rng = np.random.default_rng(54)
        m = small_model()
        mem = make_memory(rng, m.cfg, n=5)
        task = [random_utt(rng, m.cfg) for _ in range(7)]
        (merged, w), = cs.er_compose(task, mem, "BER", None, rng)
        assert w == 1.0
        assert sorted(map(id, merged)) == sorted(map(id, task + mem.utterances()))

    def test_ber_empty_memory_is_plain_epoch(self):
        rng = np.random.default_rng(55)
        m = small_model()
        task = [random_utt(rng, m.cfg) for _ in range(4)]
        (merged, w), = cs.er_compose(task, None, "BER", None, rng)
        assert sorted(map(id, merged)) == sorted(map(id, task))


class TestMakeStrategy:
    def test_ft_hooks_are_identities(self):
        rng = np.random.default_rng(61)
        m = small_model()
        strat = cs.make_strategy("FT")
        ctx = cs.TrainContext(model=m, params=m.init_params(), rng=rng)
        batch = [random_utt(rng, m.cfg)]
        assert strat.compose_batch(batch, ctx) == [(batch, 1.0)]
        assert strat.extra_loss(leaves_of(ctx.params), batch, ctx) is None
        g = ParamVector({"t": np.ones(3)})
        assert strat.transform_grad(g, ctx) is g

    def test_ewc_zero_penalty_at_anchor(self):
        rng = np.random.default_rng(62)
        m = small_model()
        params = m.init_params()
        strat = cs.make_strategy("EWC", {"lam": 10.0})
        ctx = cs.TrainContext(model=m, params=params, rng=rng, fisher_samples=2)
        train = [random_utt(rng, m.cfg) for _ in range(2)]
        strat.on_task_end(params, train, ctx)
        pen = strat.extra_loss(leaves_of(params), train, ctx)
        assert pen.item() == 0.0

    def test_ewc_accumulates_per_task_omegas(self):
        rng = np.random.default_rng(63)
        m = small_model()
        params = m.init_params()
        u1, u2 = random_utt(rng, m.cfg), random_utt(rng, m.cfg)
        strat = cs.make_strategy("EWC", {"lam": 1.0})
        ctx = cs.TrainContext(model=m, params=params, rng=rng, fisher_samples=1)
        strat.on_task_end(params, [u1], ctx)
        strat.on_task_end(params, [u2], ctx)
        om1 = cs.ewc_fisher(cs.model_loss_fn(m), params, [u1])
        om2 = cs.ewc_fisher(cs.model_loss_fn(m), params, [u2])
        np.testing.assert_allclose(strat.curv.diag.flat(), (om1 + om2).flat(),
                                   atol=1e-15)

    def test_kd_equals_lwf_on_same_teacher_and_batch(self):
        rng = np.random.default_rng(64)
        m = small_model()
        params = m.init_params()
        teacher = m.init_params().from_flat(
            params.flat() + 0.1 * rng.normal(size=params.total_len))
        mem_utt = random_utt(rng, m.cfg)
        mem = ExemplarMemory(GrowingPolicy(1), seed=3)
        mem.task_end_update([mem_utt], 0)

        lwf = cs.make_strategy("LWF", {"lam": 0.8})
        kd = cs.make_strategy("KD", {"lam": 0.8})
        lwf.teacher = teacher.copy()
        kd.teacher = teacher.copy()
        ctx = cs.TrainContext(model=m, params=params, memory=mem,
                              rng=np.random.default_rng(0), batch_size=3)
        batch = [mem_utt] * 3  # exactly what KD samples from the single-entry memory
        loss_lwf = lwf.extra_loss(leaves_of(params), batch, ctx)
        loss_kd = kd.extra_loss(leaves_of(params), batch, ctx)
        assert loss_kd.item() == pytest.approx(loss_lwf.item(), abs=1e-15)

    def test_unknown_name_lists_valid(self):
        with pytest.raises(cs.StrategyError) as e:
            cs.make_strategy("SI")
        for name in cs.STRATEGY_NAMES:
            assert name in str(e.value)

    def test_missing_lambda_rejected(self):
        with pytest.raises(cs.StrategyError):
            cs.make_strategy("EWC")

    def test_aliases(self):
        assert cs.make_strategy("A-GEM").name == "AGEM"
        assert cs.make_strategy("ER_λ", {"lam": 0.5}).name == "ER_LAMBDA"


class TestPenaltyAnchoring:
    """extra_loss(θ^t) = 0 and its finite-difference gradient vanishes."""

    @pytest.mark.parametrize("name,hyper", [
        ("EWC", {"lam": 5.0}),
        ("MAS", {"lam": 5.0}),
        ("CSQN", {"lam": 5.0, "k_pairs": 3, "fvp_batch": 4}),
        ("CSQN-BT", {"lam": 5.0, "k_pairs": 3, "fvp_batch": 4, "block_rank": 1}),
    ])
    def test_anchored_at_task_end(self, name, hyper):
        rng = np.random.default_rng(71)
        m = small_model()
        params = m.init_params()
        strat = cs.make_strategy(name, hyper)
        ctx = cs.TrainContext(model=m, params=params, rng=rng, fisher_samples=4)
        train = [random_utt(rng, m.cfg) for _ in range(4)]
        strat.on_task_end(params, train, ctx)

        pen = strat.extra_loss(leaves_of(params), train, ctx)
        assert pen.item() == 0.0

        def value_at(flat):
            pv = params.from_flat(flat)
            return strat.extra_loss(leaves_of(pv), train, ctx).item()

        base = params.flat()
        eps = 1e-5
        idx = rng.choice(base.size, size=40, replace=False)
        fd = np.zeros(len(idx))
        for j, i in enumerate(idx):
            hi, lo = base.copy(), base.copy()
            hi[i] += eps
            lo[i] -= eps
            fd[j] = (value_at(hi) - value_at(lo)) / (2 * eps)
        assert np.linalg.norm(fd) < 1e-6
