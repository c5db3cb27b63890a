import math

import numpy as np
import pytest

from drscreen.domain import DrGrade
from drscreen.errors import DomainError, ModelFormatError, TrainError
from drscreen.svm import (
    BinarySvm,
    Kernel,
    KernelKind,
    SvmModel,
    TrainConfig,
    classify_binary,
    decision,
    decision_many,
    dual_objective,
    identity_preprocess,
    kernel_eval,
    load_model,
    model_to_doc,
    predict,
    predict_batch,
    resolve_gamma,
    save_model,
    smo_train_binary,
    train_multiclass,
)

from qp_oracle import (
    oracle_gram,
    oracle_objective,
    oracle_train_decisions,
    random_instance,
    solve_dual,
)

TIGHT = TrainConfig(C=10.0, kernel=KernelKind.LINEAR, tol=1e-10, seed=0)


def two_point_machine():
    X = np.array([[1.0], [-1.0]])
    y = np.array([1.0, -1.0])
    return smo_train_binary(X, y, TIGHT)


class TestKernels:
    def test_rbf_zero_distance(self):
        k = Kernel(KernelKind.RBF, gamma=0.7)
        assert kernel_eval(k, np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 1.0

    def test_linear_dot(self):
        k = Kernel(KernelKind.LINEAR)
        assert kernel_eval(k, np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 5.0

    def test_rbf_hand_value(self):
        # gamma 0.5, squared distance 2 -> exp(-1)
        k = Kernel(KernelKind.RBF, gamma=0.5)
        v = kernel_eval(k, np.array([1.0, 1.0]), np.array([0.0, 0.0]))
        assert v == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_dimension_mismatch(self):
        k = Kernel(KernelKind.LINEAR)
        with pytest.raises(DomainError):
            kernel_eval(k, np.array([1.0]), np.array([1.0, 2.0]))

    def test_rbf_requires_gamma(self):
        with pytest.raises(DomainError):
            Kernel(KernelKind.RBF, gamma=None)
        with pytest.raises(DomainError):
            Kernel(KernelKind.RBF, gamma=-1.0)

    def test_scale_heuristic(self):
        X = np.array([[0.0, 0.0], [2.0, 2.0]])  # var = 1, d = 2
        assert resolve_gamma(None, X) == pytest.approx(0.5)
        assert resolve_gamma(0.3, X) == 0.3


class TestAnalyticTwoPoint:
    def test_alphas_and_bias(self):
        m = two_point_machine()
        alphas = np.abs(m.dual_coefs)
        assert np.allclose(np.sort(alphas), [0.5, 0.5], atol=1e-9)
        assert abs(m.bias) <= 1e-9

    def test_decision_is_identity(self):
        m = two_point_machine()
        for x in (-3.0, -1.0, 0.0, 0.5, 2.0):
            assert decision(m, np.array([x])) == pytest.approx(x, abs=1e-9)

    def test_sign_convention_at_zero(self):
        m = two_point_machine()
        assert classify_binary(m, np.array([0.0])) == 1
        assert classify_binary(m, np.array([0.5])) == 1
        assert classify_binary(m, np.array([-3.0])) == -1


class TestSmoPreconditions:
    def test_single_class_rejected(self):
        with pytest.raises(TrainError):
            smo_train_binary(np.array([[1.0], [2.0]]), np.array([1.0, 1.0]), TIGHT)

    def test_nonpositive_c_rejected(self):
        with pytest.raises(TrainError):
            TrainConfig(C=0.0)
        with pytest.raises(TrainError):
            TrainConfig(C=-3.0)

    def test_bad_labels_rejected(self):
        with pytest.raises(TrainError):
            smo_train_binary(np.array([[1.0], [2.0]]), np.array([0.0, 1.0]), TIGHT)


class TestSmoAgainstQpOracle:
    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(40):
            X, y, C, kind, gamma = random_instance(rng)
            cfg = TrainConfig(
                C=C,
                kernel=KernelKind(kind),
                gamma=gamma,
                tol=1e-9,
                max_passes=5000,
                seed=7,
            )
            machine = smo_train_binary(X, y, cfg)

            K = oracle_gram(X, kind, gamma)
            a_star = solve_dual(K, y, C)
            d_smo = dual_objective(machine)
            d_star = oracle_objective(a_star, K, y)
            assert d_smo == pytest.approx(d_star, abs=1e-6)

            f_oracle = oracle_train_decisions(a_star, K, y, C)
            f_smo = decision_many(machine, X)
            assert np.array_equal(f_smo >= 0.0, f_oracle >= 0.0)

    def test_dual_feasibility_exact(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            X, y, C, kind, gamma = random_instance(rng)
            cfg = TrainConfig(
                C=C, kernel=KernelKind(kind), gamma=gamma, tol=1e-9, seed=1
            )
            m = smo_train_binary(X, y, cfg)
            alphas = np.abs(m.dual_coefs)
            assert (alphas > 0.0).all()
            assert (alphas <= C).all()
            assert abs(m.dual_coefs.sum()) <= 1e-9

    def test_kkt_residuals_within_tol(self):
        rng = np.random.default_rng(4)
        tol = 1e-8
        for _ in range(25):
            X, y, C, kind, gamma = random_instance(rng)
            cfg = TrainConfig(
                C=C, kernel=KernelKind(kind), gamma=gamma, tol=tol,
                max_passes=5000, seed=3,
            )
            m = smo_train_binary(X, y, cfg)
            # reconstruct full alpha from the stored support indices
            alpha = np.zeros(len(y))
            alpha[list(m.support_indices)] = np.abs(m.dual_coefs)
            eps = 1e-10 * max(1.0, C)  # float dust at a bound counts as bound
            r = y * decision_many(m, X) - 1.0
            viol = np.maximum(
                np.where(alpha < C - eps, -r, 0.0),
                np.where(alpha > eps, r, 0.0),
            )
            assert float(np.maximum(viol, 0.0).max()) <= tol

    def test_separable_rbf_perfect_training_accuracy(self):
        X = np.array([[0.0, 0.0], [0.2, 0.1], [3.0, 3.0], [2.8, 3.2]])
        y = np.array([-1.0, -1.0, 1.0, 1.0])
        cfg = TrainConfig(C=10.0, kernel=KernelKind.RBF, gamma=0.5, tol=1e-6, seed=0)
        m = smo_train_binary(X, y, cfg)
        pred = np.where(decision_many(m, X) >= 0.0, 1.0, -1.0)
        assert np.array_equal(pred, y)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(30, 3))
        y = np.where(X[:, 0] + 0.3 * rng.normal(size=30) > 0, 1.0, -1.0)
        if (y > 0).all() or (y < 0).all():
            y[0] *= -1
        cfg = TrainConfig(C=1.0, kernel=KernelKind.RBF, gamma=1.0, tol=1e-6, seed=42)
        m1 = smo_train_binary(X, y, cfg)
        m2 = smo_train_binary(X, y, cfg)
        assert np.array_equal(m1.dual_coefs, m2.dual_coefs)
        assert np.array_equal(m1.support_vectors, m2.support_vectors)
        assert m1.bias == m2.bias


def toy_multiclass(seed=0, grades=(0, 1, 2)):
    rng = np.random.default_rng(seed)
    X, ys = [], []
    for g in grades:
        X.append(rng.normal(loc=3.0 * g, scale=0.4, size=(12, 2)))
        ys.extend([DrGrade(g)] * 12)
    return np.vstack(X), ys


class TestMulticlass:
    def test_pair_machine_counts(self):
        X, ys = toy_multiclass(grades=(0, 1))
        model = train_multiclass(X, ys, TrainConfig(seed=0))
        assert len(model.machines) == 1

        X, ys = toy_multiclass(grades=(0, 1, 2, 3, 4))
        model = train_multiclass(X, ys, TrainConfig(seed=0))
        assert len(model.machines) == 10

    def test_absent_grade_excluded(self, caplog):
        X, ys = toy_multiclass(grades=(0, 2, 4))
        with caplog.at_level("WARNING"):
            model = train_multiclass(X, ys, TrainConfig(seed=0))
        assert model.classes == (DrGrade.NO_DR, DrGrade.MODERATE, DrGrade.PROLIFERATIVE_DR)
        assert len(model.machines) == 3
        assert "MILD" in caplog.text

    def test_single_grade_rejected(self):
        X, ys = toy_multiclass(grades=(2,))
        with pytest.raises(TrainError):
            train_multiclass(X, ys, TrainConfig(seed=0))

    def test_learns_separated_clusters(self):
        X, ys = toy_multiclass(grades=(0, 1, 2, 3, 4))
        model = train_multiclass(X, ys, TrainConfig(C=10.0, seed=0))
        pred = predict_batch(model, X)
        acc = np.mean([p == t for p, t in zip(pred, ys)])
        assert acc == 1.0

    def test_predict_votes_majority(self):
        X, ys = toy_multiclass(grades=(0, 1, 2))
        model = train_multiclass(X, ys, TrainConfig(C=10.0, seed=0))
        grade, votes, scores = predict(model, np.array([0.0, 0.0]))
        assert grade == DrGrade.NO_DR
        assert votes[DrGrade.NO_DR] == 2
        assert set(scores) == set(model.classes)


def constant_machine(value: float) -> BinarySvm:
    # a single support vector at the origin makes the decision value constant
    return BinarySvm(
        support_vectors=np.zeros((1, 2)),
        dual_coefs=np.array([1.0]),
        bias=value,
        kernel=Kernel(KernelKind.LINEAR),
        C=1.0,
    )


def cyclic_model() -> SvmModel:
    a, b, c = DrGrade.MILD, DrGrade.MODERATE, DrGrade.SEVERE
    machines = {
        (a, b): constant_machine(1.0),  # MODERATE beats MILD
        (b, c): constant_machine(1.0),  # SEVERE beats MODERATE
        (a, c): constant_machine(-1.0),  # MILD beats SEVERE
    }
    return SvmModel(
        classes=(a, b, c), machines=machines, preprocess=identity_preprocess(2)
    )


class TestTieBreaks:
    def test_full_tie_resolves_to_most_severe(self):
        # every class gets one vote and a summed score of exactly zero
        model = cyclic_model()
        grade, votes, scores = predict(model, np.array([5.0, -2.0]))
        assert all(v == 1 for v in votes.values())
        assert all(s == 0.0 for s in scores.values())
        assert grade == DrGrade.SEVERE

    def test_winner_invariant_under_positive_rescaling(self):
        model = cyclic_model()
        x = np.array([0.3, 0.4])
        base = predict(model, x)[0]
        for lam in (0.01, 0.5, 3.0, 1000.0):
            scaled = SvmModel(
                classes=model.classes,
                machines={
                    k: BinarySvm(
                        support_vectors=m.support_vectors,
                        dual_coefs=m.dual_coefs * lam,
                        bias=m.bias * lam,
                        kernel=m.kernel,
                        C=m.C,
                    )
                    for k, m in model.machines.items()
                },
                preprocess=model.preprocess,
            )
            assert predict(scaled, x)[0] == base

    def test_zero_decision_votes_more_severe(self):
        a, b = DrGrade.MODERATE, DrGrade.SEVERE
        model = SvmModel(
            classes=(a, b),
            machines={(a, b): constant_machine(0.0)},
            preprocess=identity_preprocess(2),
        )
        assert predict(model, np.zeros(2))[0] == DrGrade.SEVERE


class TestSerialization:
    def test_round_trip_bit_identical_decisions(self, tmp_path):
        X, ys = toy_multiclass(grades=(0, 1, 2, 3, 4))
        model = train_multiclass(X, ys, TrainConfig(C=3.7, seed=5))
        path = tmp_path / "model.svm"
        save_model(model, path)
        loaded = load_model(path)
        grid = np.random.default_rng(0).normal(scale=5.0, size=(100, 2))
        for key in model.machines:
            f1 = decision_many(model.machines[key], grid)
            f2 = decision_many(loaded.machines[key], grid)
            assert np.array_equal(f1, f2)
        assert predict_batch(model, grid) == predict_batch(loaded, grid)

    def test_doc_stable_across_save(self, tmp_path):
        X, ys = toy_multiclass(grades=(0, 1))
        model = train_multiclass(X, ys, TrainConfig(seed=3))
        p1, p2 = tmp_path / "a.svm", tmp_path / "b.svm"
        save_model(model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        X, ys = toy_multiclass(grades=(0, 1))
        model = train_multiclass(X, ys, TrainConfig(seed=3))
        path = tmp_path / "model.svm"
        save_model(model, path)
        path.write_text(path.read_text()[: len(path.read_text()) // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_unsupported_version_rejected(self, tmp_path):
        X, ys = toy_multiclass(grades=(0, 1))
        model = train_multiclass(X, ys, TrainConfig(seed=3))
        doc = model_to_doc(model)
        doc["schema_version"] = 99
        path = tmp_path / "model.svm"
        import json

        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="99"):
            load_model(path)

    def test_missing_field_named(self, tmp_path):
        X, ys = toy_multiclass(grades=(0, 1))
        model = train_multiclass(X, ys, TrainConfig(seed=3))
        doc = model_to_doc(model)
        del doc["machines"][0]["bias"]
        path = tmp_path / "model.svm"
        import json

        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="bias"):
            load_model(path)
