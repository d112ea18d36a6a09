import numpy as np
import pytest

from core.certification import (
    ContrastCoefficients,
    certified_bounds,
    certify_dataset,
    certify_glvq,
    certify_sample,
    certify_sample_scaled,
    contrast_coefficients,
    flip_ratio,
    glvq_margins,
    kappa_rule,
    robustness_margins,
    squared_radius,
)
from core.errors import CertificationError, ConfigurationError
from core.geometry import DistanceKind
from core.model import ComponentSet, cbc_concept_probabilities, model_scores, predict
from tests.conftest import random_model

# true class detects its component fully; the contrast mostly reasons negatively
EXAMPLE_D = [0.9]
EXAMPLE_Y = ([1.0], [0.0])
EXAMPLE_C = ([0.2], [0.8])


def _log_ratio(coeffs, t_linear=0.0):
    t, _, _ = flip_ratio(coeffs.A, coeffs.B, coeffs.C, t_linear)
    return float(np.log(t))


class TestContrastCoefficients:
    def test_worked_example(self):
        coeffs = contrast_coefficients(EXAMPLE_D, EXAMPLE_Y, EXAMPLE_C)
        assert coeffs.A == pytest.approx(-0.18)
        assert coeffs.B == pytest.approx(-0.8)
        assert coeffs.C == pytest.approx(1.62)
        assert _log_ratio(coeffs) == pytest.approx(np.log((np.sqrt(1.8064) - 0.8) / 0.36), rel=1e-12)
        assert _log_ratio(coeffs) == pytest.approx(0.41288, abs=1e-5)

    def test_linear_case(self):
        coeffs = contrast_coefficients([0.9], ([1.0], [0.0]), ([0.0], [1.0]))
        assert coeffs.A == pytest.approx(0.0)
        assert _log_ratio(coeffs, t_linear=0.9 * (1.0 + 1.0)) == pytest.approx(np.log(1.8))

    def test_sum_is_probability_gap(self, rng):
        for _ in range(50):
            probs = rng.dirichlet(np.ones(6), size=2)
            head_y, head_c = (probs[0, :3], probs[0, 3:]), (probs[1, :3], probs[1, 3:])
            d = rng.random(3)
            coeffs = contrast_coefficients(d, head_y, head_c)
            p = cbc_concept_probabilities(d, probs[:, None, :3], probs[:, None, 3:])[0, :, 0]
            assert coeffs.gap == pytest.approx(p[0] - p[1])

    def test_sign_contract(self, rng):
        for _ in range(50):
            probs = rng.dirichlet(np.ones(8), size=2)
            coeffs = contrast_coefficients(rng.random(4), (probs[0, :4], probs[0, 4:]), (probs[1, :4], probs[1, 4:]))
            assert coeffs.A <= 0
            assert coeffs.C >= 0
            assert -1.0 <= coeffs.B <= 1.0
            assert coeffs.discriminant >= 0

    def test_log_ratio_sign_follows_gap(self):
        assert _log_ratio(ContrastCoefficients(A=-0.5, B=0.0, C=0.4)) < 0
        assert _log_ratio(ContrastCoefficients(A=-0.4, B=0.0, C=0.5)) > 0
        assert _log_ratio(ContrastCoefficients(A=-0.5, B=0.0, C=0.5)) == pytest.approx(0.0)

    def test_larger_detections_scale_the_margin(self):
        # f(z) = C e^-z + A e^z + B is nonincreasing in z
        coeffs = ContrastCoefficients(A=-0.3, B=0.1, C=0.6)
        z = np.linspace(0.0, 3.0, 50)
        f = coeffs.C * np.exp(-z) + coeffs.A * np.exp(z) + coeffs.B
        assert np.all(np.diff(f) <= 0)
        root = _log_ratio(coeffs)
        assert coeffs.C * np.exp(-root) + coeffs.A * np.exp(root) + coeffs.B == pytest.approx(0.0, abs=1e-12)

    def test_flip_ratio_is_elementwise(self, rng):
        probs = rng.dirichlet(np.ones(6), size=(8, 2))
        d = rng.random((8, 3))
        coeffs = [contrast_coefficients(d[k], (p[0, :3], p[0, 3:]), (p[1, :3], p[1, 3:])) for k, p in enumerate(probs)]
        A, B, C = (np.array([getattr(c, name) for c in coeffs]) for name in "ABC")
        t, sqrt_disc, linear = flip_ratio(A, B, C, np.ones(8))
        assert not np.any(linear)
        np.testing.assert_allclose(sqrt_disc, np.sqrt([c.discriminant for c in coeffs]))
        np.testing.assert_allclose(np.log(t), [_log_ratio(c) for c in coeffs], rtol=1e-12)

    def test_linear_mask(self):
        _, _, linear = flip_ratio([0.0, -0.2], [0.1, 0.1], [0.3, 0.3], 2.0)
        np.testing.assert_array_equal(linear, [True, False])

    def test_negative_discriminant(self):
        with pytest.raises(CertificationError, match="discriminant"):
            flip_ratio(-1.0, 0.0, -1.0, 0.0)


class TestKappaRules:
    @pytest.mark.parametrize("kind,factor", [
        ("euclidean", 1.0),
        ("tangent", 0.5),
        ("constrained_tangent", 0.5),
        ("squared_euclidean", 1.0 / 3.0),
        ("squared_tangent", 1.0 / 3.0),
    ])
    def test_factor_is_linear_in_sigma(self, kind, factor):
        rule = kappa_rule(kind)
        assert rule.kappa(0.6) == pytest.approx(factor * 0.6)
        assert rule.kappa(2.4) == pytest.approx(4.0 * rule.kappa(0.6))

    def test_root_form_radius(self):
        radius, _ = squared_radius(0.413, 2.0, kappa_rule("squared_euclidean"))
        assert radius == pytest.approx(0.2593, abs=1e-4)
        halved, _ = squared_radius(0.413, 2.0, kappa_rule("squared_tangent"))
        assert halved == pytest.approx(0.5 * radius)

    def test_non_squared_kinds_have_no_root_form(self):
        assert not kappa_rule(DistanceKind.TANGENT).root_form
        assert kappa_rule(DistanceKind.SQUARED_TANGENT).root_form


class TestRobustnessMargins:
    @pytest.mark.parametrize("kind", ["euclidean", "squared_euclidean", "tangent"])
    def test_sign_of_delta_matches_gap(self, rng, kind):
        model = random_model(rng, kind=kind, K=5, C=3, M=2)
        X = rng.random((1000, model.n))
        y = rng.integers(0, model.C, 1000)
        margins = robustness_margins(model, X, y)
        decided = np.abs(margins.gap) > 1e-9
        np.testing.assert_array_equal(np.sign(margins.delta[decided]), np.sign(margins.gap[decided]))

    def test_correct_matches_prediction(self, rng):
        model = random_model(rng)
        X = rng.random((50, model.n))
        y = rng.integers(0, model.C, 50)
        margins = robustness_margins(model, X, y)
        np.testing.assert_array_equal(margins.correct, predict(model, X) == y)

    def test_single_sample_matches_batch(self, rng):
        model = random_model(rng, kind="constrained_tangent")
        X = rng.random((5, model.n))
        y = np.array([0, 1, 2, 0, 1])
        margins = robustness_margins(model, X, y)
        for index in range(5):
            assert certify_sample(model, X[index], y[index]) == pytest.approx(margins.delta[index])

    def test_scaled_bound_is_none_when_misclassified(self, rng):
        model = random_model(rng, kind="squared_euclidean")
        X = rng.random((30, model.n))
        y = rng.integers(0, model.C, 30)
        margins = robustness_margins(model, X, y)
        for index in range(30):
            bound = certify_sample_scaled(model, X[index], y[index])
            if margins.correct[index]:
                assert bound is not None and bound >= 0
            else:
                assert bound is None

    def test_rejects_heads_without_certificate(self, rng):
        for head_kind in ("rbf", "original_cbc", "glvq"):
            model = random_model(rng, head_kind=head_kind)
            with pytest.raises(ConfigurationError):
                robustness_margins(model, rng.random((2, model.n)), [0, 1])


def _first_flip(model, x, y, direction, limit, steps=200):
    """Smallest radius along one direction (to bisection accuracy) at which the prediction leaves y."""
    radii = np.linspace(0.0, limit, steps + 1)[1:]
    flipped = predict(model, x + radii[:, None] * direction) != y
    if not flipped.any():
        return None
    high = radii[int(np.argmax(flipped))]
    low = 0.0
    for _ in range(40):
        mid = 0.5 * (low + high)
        if predict(model, (x + mid * direction)[None, :])[0] != y:
            high = mid
        else:
            low = mid
    return high


class TestBoundValidity:
    """No perturbation smaller than the certificate changes the prediction."""

    @pytest.mark.parametrize("kind", [
        "euclidean", "tangent", "constrained_tangent", "squared_euclidean", "squared_tangent",
    ])
    def test_directional_flips_lie_outside_the_bound(self, rng, kind):
        model = random_model(rng, kind=kind, n=2, K=4, C=2, M=2, r=1, sigma_range=(0.05, 0.2), clip=False)
        # class 0 reasons positively on components 0 and 1, class 1 on 2 and 3
        model.head.raw = 0.5 * rng.normal(size=model.head.raw.shape)
        model.head.raw[0, :, 0:2] += 4.0
        model.head.raw[1, :, 2:4] += 4.0
        X = rng.random((40, 2))
        y = predict(model, X)
        bounds = certified_bounds(model, X, y)
        directions = rng.standard_normal((64, 2))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        checked = 0
        for x, label, bound in zip(X, y, bounds):
            if not bound > 0:
                continue
            for direction in directions:
                flip = _first_flip(model, x, label, direction, limit=3.0 * bound + 1.0)
                if flip is not None:
                    assert bound <= flip + 1e-9
                    checked += 1
        assert checked > 0


class TestGLVQCertificate:
    def _components(self):
        return ComponentSet.from_temperatures("euclidean", [[0.0], [4.0]], [1.0, 1.0], clip=False)

    def test_hypothesis_margin(self):
        assert certify_glvq([1.0], 0, self._components(), [0, 1]) == pytest.approx(1.0)

    def test_misclassified_is_negative(self):
        assert certify_glvq([1.0], 1, self._components(), [0, 1]) == pytest.approx(-1.0)

    def test_decision_boundary(self):
        assert certify_glvq([2.0], 0, self._components(), [0, 1]) == pytest.approx(0.0)

    def test_squared_kind_certifies_with_plain_distance(self):
        cs = ComponentSet.from_temperatures("squared_euclidean", [[0.0], [4.0]], [1.0], clip=False)
        np.testing.assert_allclose(glvq_margins([[1.0], [3.5]], [0, 1], cs, [0, 1]), [1.0, 1.5])

    def test_glvq_bound_is_valid(self, rng):
        model = random_model(rng, head_kind="glvq", n=2, C=3, M=2)
        X = rng.random((30, 2))
        y = predict(model, X)
        bounds = certified_bounds(model, X, y)
        for x, label, bound in zip(X, y, bounds):
            for direction in np.eye(2):
                for sign in (1.0, -1.0):
                    flip = _first_flip(model, x, label, sign * direction, limit=2.0)
                    if flip is not None:
                        assert bound <= flip + 1e-9


class TestCertifyDataset:
    def test_zero_epsilon_equals_clean_accuracy(self, rng):
        model = random_model(rng)
        X = rng.random((200, model.n))
        y = rng.integers(0, model.C, 200)
        report = certify_dataset(model, X, y, [0.0])
        assert report.certified[0].accuracy == pytest.approx(report.clean_accuracy)
        assert report.clean_accuracy == pytest.approx(np.mean(predict(model, X) == y))

    def test_monotone_in_epsilon(self, rng):
        model = random_model(rng, kind="squared_tangent", n=4, r=2)
        X = rng.random((100, model.n))
        y = predict(model, X)
        report = certify_dataset(model, X, y, [0.0, 0.01, 0.05, 0.1, 1.0, 100.0])
        accuracies = [point.accuracy for point in report.certified]
        assert all(a >= b for a, b in zip(accuracies, accuracies[1:]))
        assert accuracies[-1] == 0.0
        assert report.kappa == pytest.approx(model.components.sigma_min / 3.0)

    def test_glvq_report(self, rng):
        model = random_model(rng, head_kind="glvq")
        X = rng.random((50, model.n))
        report = certify_dataset(model, X, predict(model, X), [0.0, 0.1])
        assert report.kappa is None
        assert report.clean_accuracy == 1.0
        assert len(report.bounds) == 50

    def test_rbf_has_no_certificate(self, rng):
        model = random_model(rng, head_kind="rbf")
        with pytest.raises(ConfigurationError):
            certify_dataset(model, rng.random((5, model.n)), np.zeros(5, dtype=int), [0.1])

    def test_chunked_bounds(self, rng):
        model = random_model(rng)
        X = rng.random((300, model.n))
        y = predict(model, X)
        np.testing.assert_allclose(certified_bounds(model, X, y), robustness_margins(model, X, y).bound)
