import numpy as np
import pytest
from scipy.spatial.distance import pdist

from core.errors import InputError, NumericalError, PreconditionError
from core.geometry import DistanceKind
from core.model import (
    ComponentSet,
    GLVQHead,
    HeadKind,
    Model,
    OriginalReasoningHead,
    RBFHead,
    ReasoningHead,
    cbc_concept_probabilities,
    cbc_forward,
    class_best_distances,
    decode_reasoning,
    detect,
    detection_probabilities,
    forward,
    glvq_forward,
    init_temperatures,
    model_scores,
    original_cbc_forward,
    original_cbc_probabilities,
    predict,
    rbf_forward,
)
from tests.conftest import random_model


def _points(translations, sigma=1.0, kind="euclidean", clip=False):
    translations = np.atleast_2d(np.asarray(translations, dtype=float))
    return ComponentSet.from_temperatures(kind, translations, np.full(translations.shape[0], sigma), clip=clip)


class TestDetection:
    def test_detection_is_one_on_the_component(self):
        cs = _points([[0.2, 0.4]], sigma=0.7)
        np.testing.assert_allclose(detect([0.2, 0.4], cs), [1.0])

    def test_distance_equal_to_temperature(self):
        cs = _points([[0.0, 0.0]], sigma=5.0)
        np.testing.assert_allclose(detect([3.0, 4.0], cs), [np.exp(-1.0)])

    def test_squared_kernel(self):
        cs = _points([[0.0, 0.0]], sigma=1.0, kind="squared_euclidean")
        np.testing.assert_allclose(detect([1.0, 1.0], cs), [np.exp(-2.0)])

    def test_detections_lie_in_unit_interval(self, rng):
        model = random_model(rng, kind="tangent", n=5, K=6, r=2)
        d = detection_probabilities(rng.random((50, 5)), model.components)
        assert d.shape == (50, 6)
        assert np.all((d > 0) & (d <= 1))


class TestInitTemperatures:
    def test_p0_of_inverse_e_gives_mean_plus_std(self, rng):
        data = rng.random((30, 4))
        cs = _points(rng.random((3, 4)))
        pairwise = pdist(data)
        sigma = init_temperatures(data, cs, np.exp(-1.0))
        np.testing.assert_allclose(sigma, np.full(3, pairwise.mean() + pairwise.std()))

    def test_shared_returns_single_value(self, rng):
        cs = ComponentSet.from_temperatures("euclidean", rng.random((3, 2)), [1.0])
        assert init_temperatures(rng.random((10, 2)), cs, 0.01).shape == (1,)

    def test_rejects_bad_p0(self, rng):
        with pytest.raises(InputError):
            init_temperatures(rng.random((5, 2)), _points([[0, 0]]), 1.0)

    def test_rejects_identical_points(self):
        with pytest.raises(InputError):
            init_temperatures(np.zeros((5, 2)), _points([[0, 0]]), 0.01)


class TestDecodeReasoning:
    def test_uniform_logits(self):
        head = ReasoningHead(raw=np.zeros((1, 1, 4)))
        positive, negative = decode_reasoning(head, 0, 0)
        np.testing.assert_allclose(positive, [0.25, 0.25])
        np.testing.assert_allclose(negative, [0.25, 0.25])

    def test_masked_negative_reasoning(self):
        head = ReasoningHead(raw=np.zeros((1, 1, 4)), negative_masked=True)
        positive, negative = decode_reasoning(head, 0, 0)
        np.testing.assert_allclose(positive, [0.5, 0.5])
        np.testing.assert_array_equal(negative, [0.0, 0.0])

    def test_weighted_logits(self):
        head = ReasoningHead(raw=np.array([[[np.log(2.0), 0.0, 0.0, 0.0]]]))
        positive, negative = decode_reasoning(head, 0, 0)
        np.testing.assert_allclose(positive, [0.4, 0.2])
        np.testing.assert_allclose(negative, [0.2, 0.2])

    def test_decoded_vectors_sum_to_one(self, rng):
        head = ReasoningHead(raw=rng.normal(size=(3, 2, 10)))
        positive, negative = head.decode()
        np.testing.assert_allclose(positive.sum(-1) + negative.sum(-1), 1.0)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            decode_reasoning(ReasoningHead(raw=np.zeros((2, 1, 4))), 2, 0)


class TestCBC:
    def test_single_positive_component(self):
        head = ReasoningHead(raw=np.zeros((1, 1, 2)), negative_masked=True)
        np.testing.assert_allclose(cbc_forward([1.0], head), [1.0])

    def test_balanced_reasoning_gives_one_half(self, rng):
        b = np.array([0.3, 0.7])
        head = ReasoningHead(raw=np.log(np.concatenate([b, b]))[None, None, :])
        for d in rng.random((5, 2)):
            np.testing.assert_allclose(cbc_forward(d, head), [0.5])

    def test_positive_and_negative_component(self):
        p = cbc_concept_probabilities([0.8, 0.3], [[[0.5, 0.0]]], [[[0.0, 0.5]]])
        np.testing.assert_allclose(p, [[[0.75]]])

    def test_class_probability_is_best_concept(self):
        positive = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        negative = np.zeros_like(positive)
        p = cbc_concept_probabilities([0.2, 0.9], positive, negative)
        assert p.max(axis=-1)[0, 0] == pytest.approx(0.9)

    def test_rejects_detections_outside_unit_interval(self):
        with pytest.raises(InputError):
            cbc_concept_probabilities([1.2], [[[1.0]]], [[[0.0]]])

    def test_scores_are_probabilities(self, rng):
        model = random_model(rng, kind="squared_tangent", n=4, r=2)
        scores = model_scores(model, rng.random((40, 4)))
        assert np.all((scores >= 0) & (scores <= 1))

    def test_softmax_shift_invariance(self, rng):
        model = random_model(rng)
        shifted = model.copy()
        shifted.head.raw += rng.normal(size=(model.C, model.M, 1))
        X = rng.random((10, model.n))
        np.testing.assert_allclose(model_scores(model, X), model_scores(shifted, X), atol=1e-12)

    def test_rbf_norm_equals_masked_cbc(self, rng):
        model = random_model(rng, head_kind="rbf_norm")
        as_cbc = Model(head_kind=HeadKind.CBC, components=model.components,
                       head=ReasoningHead(raw=model.head.raw.copy(), negative_masked=True))
        X = rng.random((20, model.n))
        np.testing.assert_allclose(model_scores(model, X), model_scores(as_cbc, X), atol=1e-12)

    def test_crisp_positive_reasoning_matches_nearest_component(self, rng):
        cs = ComponentSet.from_temperatures("euclidean", rng.random((3, 2)), [0.5])
        X = rng.random((1000, 2))
        positive = np.eye(3)[:, None, :]
        scores = cbc_concept_probabilities(detection_probabilities(X, cs), positive, np.zeros_like(positive))
        best, _ = class_best_distances(cs.distances(X).kernel, np.arange(3), 3)
        np.testing.assert_array_equal(np.argmax(scores[..., 0], axis=1), np.argmin(best, axis=1))


class TestOriginalCBC:
    def test_all_agreement_at_full_detection(self):
        triples = np.array([[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])
        np.testing.assert_allclose(original_cbc_probabilities([1.0, 1.0], triples), [[1.0]])

    def test_single_component_example(self):
        triples = np.array([[[0.4, 0.1, 0.5]]])
        np.testing.assert_allclose(original_cbc_probabilities([0.9], triples), [[0.74]])

    def test_invariant_to_scaling_the_relevant_mass(self, rng):
        triples = rng.dirichlet(np.ones(3), size=(2, 4))
        scaled = triples.copy()
        scaled[..., :2] *= 0.5
        scaled[..., 2] = 1.0 - scaled[..., :2].sum(-1)
        d = rng.random((6, 4))
        np.testing.assert_allclose(original_cbc_probabilities(d, triples),
                                   original_cbc_probabilities(d, scaled), atol=1e-12)

    def test_all_indefinite_reasoning(self):
        with pytest.raises(NumericalError):
            original_cbc_probabilities([0.5], np.array([[[0.0, 0.0, 1.0]]]))

    def test_forward_uses_decoded_triples(self, rng):
        head = OriginalReasoningHead(raw=rng.normal(size=(2, 3, 3)))
        out = original_cbc_forward([0.1, 0.5, 0.9], head)
        assert out.shape == (2,)
        assert np.all((out >= 0) & (out <= 1))


class TestRBF:
    def test_linear_combination(self):
        np.testing.assert_allclose(rbf_forward([0.5, 1.0], [[1.0, 0.0]], [0.1]), [0.6])

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            rbf_forward([0.5, 1.0], [[1.0, 0.0, 1.0]], [0.0])


class TestGLVQ:
    def test_input_on_a_prototype_wins(self, rng):
        translations = rng.random((8, 3))
        labels = np.repeat(np.arange(4), 2)
        winner, best = glvq_forward(translations[6], _points(translations), labels)
        assert winner == 3
        assert best[3] == pytest.approx(0.0)

    def test_nearest_prototype(self):
        winner, best = glvq_forward([4.0], _points([[0.0], [10.0]]), [0, 1])
        assert winner == 0
        np.testing.assert_allclose(best, [4.0, 6.0])

    def test_tie_resolves_to_lower_class(self):
        winner, _ = glvq_forward([5.0], _points([[0.0], [10.0], [0.0]]), [1, 2, 0])
        assert winner == 0
        winner, _ = glvq_forward([5.0], _points([[20.0], [0.0], [10.0]]), [0, 1, 2])
        assert winner == 1

    def test_scores_are_negated_distances(self, rng):
        model = random_model(rng, head_kind="glvq", C=2, M=2)
        X = rng.random((5, model.n))
        fp = forward(model, X)
        best, _ = class_best_distances(model.components.distances(X).kernel, model.head.labels, 2)
        np.testing.assert_allclose(fp.scores, -best)


class TestModelValidation:
    def test_valid_models(self, rng):
        for head_kind in HeadKind:
            for kind in DistanceKind:
                random_model(rng, head_kind=head_kind.value, kind=kind.value)

    def test_rbf_norm_requires_masking(self, rng):
        model = random_model(rng, head_kind="rbf_norm")
        model.head.negative_masked = False
        with pytest.raises(PreconditionError) as info:
            model.validate()
        assert info.value.field == "head.negative_masked"

    def test_glvq_class_without_prototype(self, rng):
        model = random_model(rng, head_kind="glvq", C=3, M=1)
        model.head.labels = np.array([0, 1, 1])
        with pytest.raises(PreconditionError):
            model.validate()

    def test_components_outside_box(self, rng):
        model = random_model(rng)
        model.components.translations[0, 0] = 1.5
        with pytest.raises(PreconditionError) as info:
            model.validate()
        assert info.value.field == "components"

    def test_unclipped_components_may_leave_box(self, rng):
        model = random_model(rng, clip=False)
        model.components.translations[0, 0] = 1.5
        model.validate()

    def test_wrong_head_type(self, rng):
        model = random_model(rng)
        model.head = RBFHead(weights=np.zeros((3, model.K)), bias=np.zeros(3))
        with pytest.raises(PreconditionError):
            model.validate()

    def test_non_orthonormal_basis(self, rng):
        model = random_model(rng, kind="tangent", n=4, r=2)
        model.components.bases[0] *= 2.0
        with pytest.raises(PreconditionError) as info:
            model.validate()
        assert info.value.field == "bases"

    def test_glvq_has_no_temperature_parameter(self, rng):
        model = random_model(rng, head_kind="glvq")
        assert isinstance(model.head, GLVQHead)
        assert "raw_temperatures" not in model.parameters()


class TestPredict:
    def test_ties_resolve_to_lowest_class(self):
        cs = _points([[0.0, 0.0]])
        model = Model(head_kind=HeadKind.RBF, components=cs,
                      head=RBFHead(weights=np.zeros((3, 1)), bias=np.array([0.2, 0.5, 0.5])))
        np.testing.assert_array_equal(predict(model, np.zeros((2, 2))), [1, 1])

    def test_chunked_scores_match(self, rng):
        model = random_model(rng, head_kind="original_cbc")
        X = rng.random((600, model.n))
        np.testing.assert_allclose(model_scores(model, X), forward(model, X).scores)
