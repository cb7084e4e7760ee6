import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conceptsurv.datagen import GenerationConfig, build_dataset, synth_glyph_pool
from conceptsurv.encoders import ConceptSchema, EncoderConfig, concept_prefix
from conceptsurv.interpret import (
    ExplanationReport,
    NeighborSet,
    explain_cox_contributions,
    explain_with_neighbors,
    neighbor_match_scores,
    neighbor_panel_svg,
    scores_from_counts,
    sf_distance,
    sf_distance_matrix,
)
from conceptsurv.models import ModelSpec, SurvivalHeadSpec, TrainConfig, TrainedModel, fit, init_params
from conceptsurv.survival import StepSurvivalFunction, kaplan_meier

TINY = EncoderConfig((56, 56, 1), ((4, 5, 4),), 2, (8,), 10)


def random_sf(rng):
    n = int(rng.integers(1, 8))
    knots = np.sort(rng.choice(np.arange(1, 40), n, replace=False) * rng.uniform(0.1, 1.0))
    values = np.sort(rng.random(n))[::-1]
    return StepSurvivalFunction(knots, values)


@pytest.fixture(scope="module")
def data():
    pool = synth_glyph_pool(10, 10, seed=0)
    return build_dataset("mnist", pool, 50, GenerationConfig.mnist(seed=2, rho=0.7))


@pytest.fixture(scope="module")
def beran_model(data):
    spec = ModelSpec("survcbm", SurvivalHeadSpec("beran", 16), data.schema, TINY, concept_hidden=(5,))
    return fit(spec, data, TrainConfig(epochs=1, batch_size=16, seed=0))


def cox_model(schema, b, zero_logits=False):
    spec = ModelSpec("survcbm", SurvivalHeadSpec("cox"), schema, TINY, concept_hidden=(5,))
    params = init_params(spec, 0)
    params.arrays["cox.b"][:] = b
    if zero_logits:
        for i in range(schema.m):
            params.arrays[f"{concept_prefix(i)}dense1.w"][:] = 0
            params.arrays[f"{concept_prefix(i)}dense1.b"][:] = 0
    return TrainedModel(spec, params, StepSurvivalFunction([1.0, 2.0], [0.7, 0.3]))


class TestSfDistance:
    def test_identity(self):
        a = StepSurvivalFunction([1, 3], [0.6, 0.1])
        assert sf_distance(a, a) == 0.0

    def test_unit_step_shift(self):
        a = StepSurvivalFunction([1], [0.0])
        b = StepSurvivalFunction([2], [0.0])
        assert_allclose(sf_distance(a, b), 1.0)

    def test_hand_value(self):
        # differences 0.5 on [1,2) and 0.2 beyond 2 up to the last knot 4
        a = StepSurvivalFunction([1, 2], [0.5, 0.2])
        b = StepSurvivalFunction([2, 4], [0.4, 0.0])
        assert_allclose(sf_distance(a, b), np.sqrt(0.25 * 1 + 0.04 * 2))

    def test_metric_axioms_common_horizon(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a, b, c = random_sf(rng), random_sf(rng), random_sf(rng)
            h = float(rng.uniform(1, 45))
            ab, ba = sf_distance(a, b, h), sf_distance(b, a, h)
            assert ab >= 0 and sf_distance(a, a, h) == 0.0
            assert abs(ab - ba) <= 1e-9
            assert ab <= sf_distance(a, c, h) + sf_distance(c, b, h) + 1e-9

    def test_metric_axioms_shared_last_knot(self):
        # predictions of one model share a knot grid, hence a last knot
        rng = np.random.default_rng(1)
        for _ in range(1000):
            fs = []
            for _ in range(3):
                f = random_sf(rng)
                fs.append(StepSurvivalFunction(np.append(f.knots[f.knots < 50], 50.0), np.append(f.values[f.knots < 50], rng.random() * f.values[-1])))
            a, b, c = fs
            ab = sf_distance(a, b)
            assert abs(ab - sf_distance(b, a)) <= 1e-9
            assert ab <= sf_distance(a, c) + sf_distance(c, b) + 1e-9

    def test_default_horizon_is_larger_last_knot(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b = random_sf(rng), random_sf(rng)
            h = max(a.knots[-1], b.knots[-1])
            assert abs(sf_distance(a, b) - sf_distance(a, b, horizon=h)) <= 1e-12

    def test_horizon_truncates(self):
        a = StepSurvivalFunction([1], [0.0])
        b = StepSurvivalFunction([2], [0.0])
        assert_allclose(sf_distance(a, b, horizon=1.5), np.sqrt(0.5))
        assert_allclose(sf_distance(a, b, horizon=5.0), 1.0)
        with pytest.raises(ValueError):
            sf_distance(a, b, horizon=-1.0)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(1)
        knots = np.array([0.5, 1.0, 2.5, 4.0])
        rows = np.sort(rng.random((5, 4)), axis=1)[:, ::-1]
        d = sf_distance_matrix(knots, rows[:2], rows)
        for i in range(2):
            for j in range(5):
                want = sf_distance(StepSurvivalFunction(knots, rows[i]), StepSurvivalFunction(knots, rows[j]))
                assert_allclose(d[i, j], want, atol=1e-7)


class TestScores:
    def test_worked_counts(self):
        scores = scores_from_counts([9, 8, 2, 2], 9)
        assert list(scores) == [1.0, 8 / 9, 2 / 9, 2 / 9]

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            scores_from_counts([10], 9)
        with pytest.raises(ValueError):
            scores_from_counts([1], 0)

    def test_mismatched_concept_scores_zero(self):
        counts, scores = neighbor_match_scores([1, 2], [[1, 5], [1, 5], [1, 5]])
        assert_array_equal(counts, [3, 0])
        assert_array_equal(scores, [1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        _, scores = neighbor_match_scores(rng.integers(0, 3, 4), rng.integers(0, 3, (9, 4)))
        assert np.all((scores >= 0) & (scores <= 1))

    def test_report_validation(self):
        with pytest.raises(ValueError):
            ExplanationReport("neighbor-match", ["a", "b"], np.array([0.5]), {})
        with pytest.raises(ValueError):
            ExplanationReport("neighbor-match", ["a"], np.array([1.5]), {})

    def test_neighbor_set_validation(self):
        with pytest.raises(ValueError):
            NeighborSet(np.array([0, 1]), np.array([2.0, 1.0]), np.zeros((2, 1)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            NeighborSet(np.array([1, 1]), np.array([1.0, 2.0]), np.zeros((2, 1)), np.zeros((2, 1)))


class TestNeighborExplanation:
    def test_self_match(self, data, beran_model):
        report = explain_with_neighbors(beran_model, data.images[7], data, k=1)
        assert report.neighbors.distances[0] == pytest.approx(0.0, abs=1e-7)
        assert_array_equal(report.scores, 1.0)

    def test_report_fields(self, data, beran_model):
        report = explain_with_neighbors(beran_model, data.images[0], data)
        assert report.method == "neighbor-match"
        assert len(report.scores) == data.schema.m
        assert report.support["k"] == 9 and len(report.neighbors.indices) == 9
        assert_allclose(report.scores, np.array(report.support["match_count"]) / 9)
        assert np.all(np.diff(report.neighbors.distances) >= 0)
        assert_array_equal(report.neighbors.concepts, data.concepts[report.neighbors.indices])

    def test_permutation_invariant(self, data, beran_model):
        perm = np.random.default_rng(3).permutation(len(data))
        a = explain_with_neighbors(beran_model, data.images[4], data)
        b = explain_with_neighbors(beran_model, data.images[4], data.subset(perm))
        assert_array_equal(a.scores, b.scores)
        assert_array_equal(np.sort(a.neighbors.indices), np.sort(perm[b.neighbors.indices]))

    def test_k_range(self, data, beran_model):
        for k in (0, len(data) + 1):
            with pytest.raises(ValueError):
                explain_with_neighbors(beran_model, data.images[0], data, k=k)

    def test_rejects_cox(self, data):
        with pytest.raises(ValueError, match="Beran"):
            explain_with_neighbors(cox_model(data.schema, 0.0), data.images[0], data)

    def test_rejects_survbase(self, data):
        from conceptsurv.models import BeranBackground

        spec = ModelSpec("survbase", SurvivalHeadSpec("beran", 8), None, TINY)
        bg = BeranBackground(np.zeros((2, spec.head_width)), np.array([1.0, 2.0]), np.array([True, True]), np.arange(2))
        model = TrainedModel(spec, init_params(spec, 0), None, bg)
        with pytest.raises(ValueError):
            explain_with_neighbors(model, data.images[0], data)

    def test_json(self, data, beran_model):
        doc = json.loads(explain_with_neighbors(beran_model, data.images[2], data).to_json())
        assert doc["method"] == "neighbor-match"
        assert [c["concept"] for c in doc["concepts"]] == list(data.schema.names)


class TestCoxContributions:
    SCHEMA = ConceptSchema(("shape", "colour", "size", "flag"), (3, 3, 2, 2))

    def test_constant_blocks_and_worked_value(self, data):
        b = np.concatenate([np.full(3, -0.7), np.full(3, 2.0), np.full(2, 0.1), np.full(2, 5.0)])
        report = explain_cox_contributions(cox_model(self.SCHEMA, b), np.random.default_rng(0).random((56, 56, 1)))
        assert_allclose(report.scores, [-0.7, 2.0, 0.1, 5.0], rtol=0, atol=1e-12)
        assert report.scores[3] == pytest.approx(5.0, abs=1e-14)

    def test_uniform_probabilities_give_mean(self):
        b = np.arange(10.0)
        report = explain_cox_contributions(cox_model(self.SCHEMA, b, zero_logits=True), np.zeros((56, 56, 1)))
        assert_allclose(report.scores, [1.0, 4.0, 6.5, 8.5], atol=1e-12)

    def test_completeness(self):
        from conceptsurv.models import _features

        rng = np.random.default_rng(4)
        model = cox_model(self.SCHEMA, rng.normal(size=10))
        for _ in range(5):
            x = rng.random((56, 56, 1))
            report = explain_cox_contributions(model, x)
            _, logits = _features(model.params, model.spec, x[None])
            pis = np.concatenate([np.exp(l - l.max()) / np.exp(l - l.max()).sum()
                                  for l in np.split(logits[0], np.cumsum(self.SCHEMA.cardinalities)[:-1])])
            assert abs(report.scores.sum() - model.params["cox.b"] @ pis) <= 1e-12
            assert abs(report.support["total"] - report.scores.sum()) <= 1e-12

    def test_rejects_other_models(self, data, beran_model):
        with pytest.raises(ValueError):
            explain_cox_contributions(beran_model, data.images[0])
        spec = ModelSpec("survrcm", SurvivalHeadSpec("cox"), data.schema, TINY)
        with pytest.raises(ValueError):
            explain_cox_contributions(TrainedModel(spec, init_params(spec, 0), kaplan_meier([1.0], [1])), data.images[0])


class TestPanel:
    def test_svg(self):
        rng = np.random.default_rng(0)
        svg = neighbor_panel_svg(rng.random((8, 8, 1)), [rng.random((8, 8, 1)) for _ in range(3)], "x", ["a", "b"])
        assert svg.startswith("<?xml")
        assert svg.count("<image ") == 4
        assert svg.count("data:image/png;base64,") == 4
        assert 'stroke="red"' in svg
        assert svg.rstrip().endswith("</svg>")
