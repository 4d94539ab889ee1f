import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ConstantModel, random_mlp
from oracles import naive_lipschitz, naive_metric
from relstab.model import LR, MLP, ModelArtifact
from relstab.stability import (
    ELEMENTWISE,
    NORM_RATIO,
    LabelMismatch,
    MetricConfig,
    StabilityRecord,
    evaluate,
    parse_norm_order,
    percent_change,
    pointwise_lipschitz_stability,
    relative_input_stability,
    relative_output_stability,
    relative_representation_stability,
)

MODES = (ELEMENTWISE, NORM_RATIO)
NORMS = (1.0, 2.0, math.inf)


def identity_mlp(d, rng):
    return ModelArtifact(MLP, np.eye(d), np.zeros(d), rng.normal(size=(2, d)), np.zeros(2))


class TestPercentChange:
    def test_equal_vectors(self, rng):
        a = rng.normal(size=6)
        np.testing.assert_array_equal(percent_change(a, a), np.zeros(6))

    def test_hand_example(self):
        np.testing.assert_allclose(percent_change([2.0, 2.0], [2.2, 2.0]), [-0.1, 0.0], atol=1e-15)

    def test_zero_guard(self):
        out = percent_change([0.0, 1.0], [1.0, 1.0], 1e-8)
        assert out[0] == pytest.approx(-1e8, rel=1e-12) and out[1] == 0.0

    def test_negative_anchor_keeps_sign(self):
        # (a - b) / a for a = -2, b = -1
        assert percent_change([-2.0], [-1.0])[0] == pytest.approx(0.5, abs=1e-15)


class TestLipschitz:
    def test_hand_example(self):
        v = pointwise_lipschitz_stability([1.0, 0.0], [[0.0, 0.0]], [0.0, 0.0], [[0.5, 0.0]], 2)
        assert v == pytest.approx(2.0, abs=1e-15)

    def test_constant_explainer(self, rng):
        x, pts = rng.normal(size=3), rng.normal(size=(5, 3))
        e = rng.normal(size=3)
        assert pointwise_lipschitz_stability(e, np.tile(e, (5, 1)), x, pts) == 0.0

    def test_identity_explainer(self, rng):
        x, pts = rng.normal(size=3), rng.normal(size=(5, 3))
        assert pointwise_lipschitz_stability(x, pts, x, pts) == pytest.approx(1.0, abs=1e-15)

    def test_all_neighbours_coincide(self, caplog):
        x = np.ones(2)
        assert math.isnan(pointwise_lipschitz_stability(x, [x * 2], x, [x]))
        assert "undefined" in caplog.text

    def test_skips_coincident_neighbour(self):
        v = pointwise_lipschitz_stability([1.0, 0.0], [[5.0, 0.0], [0.0, 0.0]], [0.0, 0.0], [[0.0, 0.0], [0.5, 0.0]])
        assert v == pytest.approx(2.0)


class TestRelativeInput:
    def test_constant_explainer(self, rng):
        e = rng.normal(size=3)
        assert relative_input_stability(e, np.tile(e, (4, 1)), rng.normal(size=3), rng.normal(size=(4, 3))) == 0.0

    def test_hand_example(self):
        v = relative_input_stability([2.0, 2.0], [[2.2, 2.0]], [1.0, 1.0], [[1.1, 1.0]])
        assert v == pytest.approx(1.0, abs=1e-12)

    def test_clamp_path(self):
        # neighbour equals the anchor: denominator 0 is floored at eps_min
        v = relative_input_stability([2.0, 2.0], [[2.2, 2.0]], [1.0, 1.0], [[1.0, 1.0]])
        assert v == pytest.approx(1e5, rel=1e-12)

    def test_norm_ratio_denominator(self):
        cfg = MetricConfig(denom_mode=NORM_RATIO)
        # ||x - x'|| / ||x|| = 0.5 / 5
        v = relative_input_stability([2.0, 2.0], [[2.2, 2.0]], [3.0, 4.0], [[3.5, 4.0]], cfg)
        assert v == pytest.approx(0.1 / 0.1, abs=1e-12)

    def test_double_zero_neighbours_skipped(self):
        x = np.array([1.0, 1.0])
        e = np.array([2.0, 2.0])
        assert relative_input_stability(e, [e], x, [x]) == 0.0
        v = relative_input_stability(e, [e, [2.2, 2.0]], x, [x, [1.1, 1.0]])
        assert v == pytest.approx(1.0, abs=1e-12)


class TestRelativeRepresentation:
    def test_hand_example(self, rng):
        model = identity_mlp(2, rng)
        v = relative_representation_stability([2.0, 2.0], [[2.2, 2.0]], model, [1.0, 1.0], [[1.2, 1.0]])
        assert v == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("p", NORMS)
    def test_identity_layer_matches_input_bitwise(self, mode, p, rng):
        cfg = MetricConfig(p=p, denom_mode=mode)
        for _ in range(20):
            model = identity_mlp(4, rng)
            x, pts = rng.normal(size=4), x_nbrs(rng, 4, 6)
            e_x, e_n = rng.normal(size=4), rng.normal(size=(6, 4))
            ris = relative_input_stability(e_x, e_n, x, pts, cfg)
            rrs = relative_representation_stability(e_x, e_n, model, x, pts, cfg)
            assert np.float64(ris).tobytes() == np.float64(rrs).tobytes()

    def test_constant_layer_clamps(self, rng):
        e_x, e_n = rng.normal(size=3), rng.normal(size=(5, 3))
        num = np.linalg.norm(percent_change(e_x, e_n), axis=1).max()
        v = relative_representation_stability(e_x, e_n, ConstantModel(), np.zeros(3), rng.normal(size=(5, 3)))
        assert v == pytest.approx(num / 1e-6, rel=1e-12)


class TestRelativeOutput:
    def test_hand_example(self):
        model = ModelArtifact(LR, [[0.0, 0.0], [0.5, 0.0]], [0.0, 0.0])
        v = relative_output_stability([2.0, 2.0], [[2.2, 2.0]], model, [1.0, 1.0], [[1.1, 1.0]])
        assert v == pytest.approx(2.0, abs=1e-12)

    def test_equal_logits_clamp(self, rng):
        e_x, e_n = rng.normal(size=2), rng.normal(size=(4, 2))
        num = np.linalg.norm(percent_change(e_x, e_n), axis=1).max()
        v = relative_output_stability(e_x, e_n, ConstantModel(), np.zeros(2), rng.normal(size=(4, 2)))
        assert v == pytest.approx(num / 1e-6, rel=1e-12)

    def test_constant_explainer(self, rng):
        model = random_mlp(rng, d=3)
        e = rng.normal(size=3)
        assert relative_output_stability(e, np.tile(e, (4, 1)), model, rng.normal(size=3), rng.normal(size=(4, 3))) == 0.0

    @pytest.mark.parametrize("mode", MODES)
    def test_denominator_is_not_normalised(self, mode):
        # logits move from (10, 0) to (10.5, 0): raw change 0.5, relative change 0.05
        model = ModelArtifact(LR, [[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
        e_x, e_n = [2.0, 2.0], [[2.2, 2.0]]
        cfg = MetricConfig(denom_mode=mode)
        ros = relative_output_stability(e_x, e_n, model, [10.0, 0.0], [[10.5, 0.0]], cfg)
        assert ros == pytest.approx(0.1 / 0.5, abs=1e-12)
        assert ros != pytest.approx(0.1 / 0.05)
        # the input denominator over the same pair is normalised
        ris = relative_input_stability(e_x, e_n, [10.0, 0.0], [[10.5, 0.0]], cfg)
        assert ris == pytest.approx(0.1 / 0.05, abs=1e-12)


def x_nbrs(rng, d, m):
    return rng.normal(size=(m, d))


def random_fixture(rng, d, m, clamp):
    x = rng.normal(size=d)
    pts = x + rng.normal(0, 0.05, size=(m, d))
    e_x = rng.normal(size=d)
    e_n = e_x + rng.normal(0, 0.1, size=(m, d))
    if clamp:
        # exercise zero components, duplicate points and duplicate explanations
        x[0] = 0.0
        e_x[-1] = 0.0
        pts[0] = x
        e_n[1] = e_x
        pts[2], e_n[2] = x, e_x
    return x, pts, e_x, e_n


class TestNaiveOracle:
    def test_hundred_fixtures(self, rng):
        for k in range(100):
            d, m = int(rng.integers(2, 7)), int(rng.integers(3, 9))
            model = random_mlp(rng, d=d, h=8)
            x, pts, e_x, e_n = random_fixture(rng, d, m, clamp=k % 3 == 0)
            p = NORMS[k % 3]
            for mode in MODES:
                cfg = MetricConfig(p=p, denom_mode=mode)
                kw = dict(p=p, eps_min=cfg.eps_min, eps_div=cfg.eps_div)
                ris = naive_metric(e_x, e_n, x, pts, den_kind=mode, **kw)
                rrs = naive_metric(e_x, e_n, model.hidden_pre(x), model.hidden_pre(pts), den_kind=mode, **kw)
                ros = naive_metric(e_x, e_n, model.logits(x), model.logits(pts), den_kind="raw", **kw)
                got = (
                    relative_input_stability(e_x, e_n, x, pts, cfg),
                    relative_representation_stability(e_x, e_n, model, x, pts, cfg),
                    relative_output_stability(e_x, e_n, model, x, pts, cfg),
                )
                np.testing.assert_allclose(got, (ris, rrs, ros), rtol=1e-12, atol=0)
            lip = pointwise_lipschitz_stability(e_x, e_n, x, pts, p)
            assert lip == pytest.approx(naive_lipschitz(e_x, e_n, x, pts, p), rel=1e-12)

    def test_hand_examples_agree(self):
        kw = dict(p=2.0, eps_min=1e-6, eps_div=1e-8)
        assert naive_metric([2.0, 2.0], [[2.2, 2.0]], [1.0, 1.0], [[1.1, 1.0]], den_kind="elementwise", **kw) == \
            pytest.approx(relative_input_stability([2.0, 2.0], [[2.2, 2.0]], [1.0, 1.0], [[1.1, 1.0]]), rel=1e-12)
        assert naive_metric([2.0, 2.0], [[2.2, 2.0]], [1.0, 1.0], [[1.0, 1.0]], den_kind="elementwise", **kw) == \
            pytest.approx(1e5, rel=1e-12)


class TestInvariants:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), mode=st.sampled_from(MODES), p=st.sampled_from(NORMS))
    def test_permutation_invariance(self, seed, mode, p):
        rng = np.random.default_rng(seed)
        model = random_mlp(rng, d=3, h=6)
        x, pts, e_x, e_n = random_fixture(rng, 3, 7, clamp=seed % 2 == 0)
        cfg = MetricConfig(p=p, denom_mode=mode)
        perm = rng.permutation(7)
        for fn in (relative_representation_stability, relative_output_stability):
            assert fn(e_x, e_n, model, x, pts, cfg) == fn(e_x, e_n[perm], model, x, pts[perm], cfg)
        assert relative_input_stability(e_x, e_n, x, pts, cfg) == relative_input_stability(e_x, e_n[perm], x, pts[perm], cfg)

    @pytest.mark.parametrize("mode", MODES)
    def test_record_is_max_of_per_neighbour(self, mode, trained_circles_mlp, rng):
        model, _, _, te = trained_circles_mlp
        from relstab.neighborhood import sample_neighborhood

        x = te.X[3]
        nb = sample_neighborhood(model, x, m=20, seed=1)
        e_x, e_n = rng.normal(size=2), rng.normal(size=(20, 2))
        rec = evaluate(model, x, nb.points, e_x, e_n, MetricConfig(denom_mode=mode), keep_per_neighbor=True)
        for key in ("ris", "rrs", "ros"):
            per = rec.per_neighbor[key]
            assert getattr(rec, key) == np.nanmax(per) >= 0
            assert getattr(rec, f"argmax_neighbor_{key}") == int(np.nanargmax(per))

    def test_evaluate_rejects_label_change(self):
        model = ModelArtifact(LR, [[0.0], [1.0]], [0.0, 0.0])
        with pytest.raises(LabelMismatch):
            evaluate(model, [1.0], [[0.5], [-1.0]], [1.0], [[1.0], [1.0]])

    def test_record_roundtrip(self, rng):
        model = random_mlp(rng, d=2, h=4)
        x = rng.normal(size=2)
        pts = x + 1e-9 * rng.normal(size=(3, 2))
        pts = pts[model.predict(pts) == model.predict(x)]
        rec = evaluate(model, x, pts, rng.normal(size=2), rng.normal(size=(len(pts), 2)),
                       method="VanillaGrad", keep_per_neighbor=True)
        back = StabilityRecord.from_dict(rec.to_dict())
        assert back.to_dict() == rec.to_dict()


class TestConfig:
    @pytest.mark.parametrize("raw,val", [("inf", math.inf), (1, 1.0), ("2", 2.0)])
    def test_norm_orders(self, raw, val):
        assert parse_norm_order(raw) == val

    def test_bad_norm(self):
        with pytest.raises(ValueError):
            parse_norm_order(3)

    @pytest.mark.parametrize("kw", [{"eps_min": 0.0}, {"eps_div": -1.0}, {"denom_mode": "ratio"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MetricConfig(**kw)
