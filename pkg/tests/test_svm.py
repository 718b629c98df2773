import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkphase.experiment import ExperimentConfig, make_grid, select_training
from qkphase.ising import ChainSpec
from qkphase.kernel import GramMatrix, KernelKind, build_gram, center, kernel_rows
from qkphase.scaling import sign_changes
from qkphase.svm import (
    ConvergenceError,
    Protocol,
    TrainingSet,
    decision,
    decision_scan,
    dual_objective,
    load_model,
    save_model,
    train,
)

from oracles import projected_gradient_dual, rbf_problem


def raw_gram(k, points=None):
    k = np.asarray(k, dtype=float)
    pts = tuple(points) if points is not None else tuple(np.linspace(0.3, 1.7, k.shape[0]))
    return GramMatrix(KernelKind.FIDELITY_PER_SITE, 10, pts, k)


@pytest.fixture(scope="module")
def delta1_model():
    grid = make_grid(ExperimentConfig())
    ts = select_training(grid, "d1")
    g = build_gram(KernelKind.FIDELITY_PER_SITE, ts.points, ChainSpec(400))
    return ts, train(g, ts.labels)


class TestTrainingSet:
    def test_valid(self):
        ts = TrainingSet([0.8, 1.2], [-1, 1], "d1")
        assert len(ts) == 2 and ts.protocol is Protocol.INTERVAL_D1

    def test_single_class(self):
        with pytest.raises(ValueError):
            TrainingSet([0.8, 0.9], [-1, -1], "d1")

    def test_inconsistent_label(self):
        with pytest.raises(ValueError):
            TrainingSet([0.8, 1.2], [1, -1], "d1")

    def test_critical_point_is_negative_class(self):
        with pytest.raises(ValueError):
            TrainingSet([1.0, 1.2], [1, 1], "d1")
        assert TrainingSet([1.0, 1.2], [-1, 1], "d1").labels[0] == -1


class TestTwoPointExample:
    def setup_method(self):
        self.model = train(raw_gram(np.eye(2), [0.8, 1.2]), [-1, 1], c_param=10.0)

    def test_multipliers_and_bias(self):
        np.testing.assert_allclose(self.model.alphas, [1.0, 1.0], atol=1e-12)
        assert self.model.bias == pytest.approx(0.0, abs=1e-12)
        assert self.model.support_indices.tolist() == [0, 1]

    def test_decision(self):
        assert decision(self.model, 0.8, [1.0, 0.0]) == pytest.approx(-1.0, abs=1e-12)
        assert decision(self.model, 1.2, [0.0, 1.0]) == pytest.approx(1.0, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            decision(self.model, 0.8, [1.0, 0.0, 0.0])


class TestTrainErrors:
    def test_single_class(self):
        with pytest.raises(ValueError):
            train(raw_gram(np.eye(3)), [1, 1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            train(raw_gram(np.eye(3)), [1, -1])

    def test_centered_rejected(self):
        with pytest.raises(ValueError):
            train(center(raw_gram(np.eye(3))), [1, -1, 1])

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            train(raw_gram(np.eye(2)), [-1, 1], c_param=0.0)
        with pytest.raises(ValueError):
            train(raw_gram(np.eye(2)), [-1, 1], tol=-1.0)

    def test_iteration_cap_reports_violation(self):
        k, y = rbf_problem(3, 30)
        with pytest.raises(ConvergenceError) as info:
            train(raw_gram(k), y, max_iter=1)
        assert info.value.iterations == 1
        assert info.value.violation > 1e-6


class TestDualProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 25), st.floats(0.1, 100.0))
    def test_feasibility(self, seed, m, c):
        k, y = rbf_problem(seed, m)
        model = train(raw_gram(k), y, c_param=c)
        a = model.alphas
        assert np.all(a >= 0) and np.all(a <= c)
        assert abs(a @ y) < 1e-8 * a.sum()
        assert model.support_indices.size > 0
        assert model.kkt_violation < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 20), st.floats(0.1, 10.0))
    def test_matches_projected_gradient_oracle(self, seed, m, c):
        k, y = rbf_problem(seed, m)
        model = train(raw_gram(k), y, c_param=c, tol=1e-9)
        ref = projected_gradient_dual(k, y, c)
        got, want = dual_objective(model.alphas, y, k), dual_objective(ref, y, k)
        assert got == pytest.approx(want, rel=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 25))
    def test_functional_margin(self, seed, m):
        k, y = rbf_problem(seed, m)
        model = train(raw_gram(k), y, c_param=5.0, tol=1e-8)
        d = k @ model.coef + model.bias
        below_c = model.alphas < model.c_param
        assert np.all(y[below_c] * d[below_c] >= 1 - 1e-6)

    def test_permutation_equivariance(self):
        k, y = rbf_problem(11, 18)
        pts = np.linspace(0.3, 1.7, 18)
        base = train(raw_gram(k, pts), y, tol=1e-10)
        perm = np.random.default_rng(1).permutation(18)
        other = train(raw_gram(k[np.ix_(perm, perm)], pts[perm]), y[perm], tol=1e-10)
        queries = np.random.default_rng(2).uniform(size=(5, 18))
        d_base = queries @ base.coef + base.bias
        d_perm = queries[:, perm] @ other.coef + other.bias
        np.testing.assert_allclose(d_base, d_perm, atol=1e-7)

    def test_indefinite_gram(self):
        # fractional powers of a Gram need not be PSD; eta <= 0 updates must still be valid
        k = np.array([[1.0, 0.9, 0.2, 0.99], [0.9, 1.0, 0.95, 0.1],
                      [0.2, 0.95, 1.0, 0.9], [0.99, 0.1, 0.9, 1.0]])
        assert np.linalg.eigvalsh(k)[0] < 0
        y = np.array([-1.0, -1.0, 1.0, 1.0])
        model = train(raw_gram(k), y)
        assert model.min_gram_eigenvalue < 0
        assert np.all((model.alphas >= 0) & (model.alphas <= model.c_param))
        assert abs(model.alphas @ y) < 1e-8 * max(model.alphas.sum(), 1e-300)


class TestPhysicalTraining:
    def test_training_points_classified(self, delta1_model):
        ts, model = delta1_model
        d = np.array([v for _, v in decision_scan(model, ts.points)])
        assert np.array_equal(np.sign(d), ts.labels)

    def test_support_vectors_on_inner_margins(self, delta1_model):
        ts, model = delta1_model
        sv = ts.points[model.support_indices]
        assert np.all((sv > 0.85) & (sv < 0.9) | (sv > 1.2) & (sv < 1.25))

    def test_scan_has_single_crossing_near_one(self, delta1_model):
        _, model = delta1_model
        grid = make_grid(ExperimentConfig())
        roots = sign_changes(decision_scan(model, grid))
        assert len(roots) == 1 and abs(roots[0] - 1.0) < 0.05

    def test_scan_point_matches_decision(self, delta1_model):
        ts, model = delta1_model
        i = int(model.support_indices[0])
        j = float(ts.points[i])
        row = kernel_rows(KernelKind.FIDELITY_PER_SITE, ChainSpec(400), [j], ts.points)[0]
        ((jj, v),) = decision_scan(model, [j])
        assert jj == j and v == pytest.approx(decision(model, j, row), rel=1e-14)

    def test_fidelity_kernel_fails_at_n1200(self):
        grid = make_grid(ExperimentConfig())
        ts = select_training(grid, "d1")
        g = build_gram(KernelKind.FIDELITY, ts.points, ChainSpec(1200))
        model = train(g, ts.labels)
        assert len(sign_changes(decision_scan(model, grid))) != 1


class TestSerialization:
    def test_json_round_trip(self, tmp_path, delta1_model):
        _, model = delta1_model
        path = tmp_path / "model.json"
        save_model(path, model)
        data = json.loads(path.read_text())
        assert data["kernel"] == "FIDELITY_PER_SITE" and data["n_sites"] == 400
        assert "kkt_violation" in data["diagnostics"]
        back = load_model(path)
        assert np.array_equal(back.alphas, model.alphas)
        assert back.bias == model.bias
        assert np.array_equal(back.gram.entries, model.gram.entries)
        grid = np.linspace(0.25, 1.75, 31)
        assert decision_scan(back, grid) == decision_scan(model, grid)
