import json

import numpy as np
import pytest

from drscreen.dataset_io import SplitSpec, generate_synthetic_dataset
from drscreen.domain import DrGrade, LesionClass
from drscreen.errors import DomainError, LoadError, RunError
from drscreen.features import PreprocessConfig
from drscreen.pipeline import (
    GridSpec,
    RunConfig,
    evaluate,
    grid_search,
    read_count_table,
    report_from_confusion,
    run_config_from_doc,
    run_config_to_doc,
    run_training,
    stratified_kfold,
    train_from_counts,
    write_count_table,
)
from drscreen.svm import KernelKind, TrainConfig, save_model, train_multiclass

SMALL_GRID = GridSpec(C=(1.0, 10.0), gamma=(None,), kernel=(KernelKind.RBF,))


def small_config(manifest, out_dir, **kwargs):
    defaults = dict(
        manifest=manifest,
        out_dir=out_dir,
        grid=SMALL_GRID,
        cv_folds=3,
        seed=11,
        include_timestamps=False,
    )
    defaults.update(kwargs)
    return RunConfig(**defaults)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(out, n_per_grade=12, image_size=64, seed=5)
    return out


@pytest.fixture(scope="module")
def run_result(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = small_config(synth_dir / "manifest.json", out)
    return config, run_training(config)


class TestCountTable:
    def test_round_trip(self, tmp_path):
        ids = ["a", "b"]
        X = np.array([[1, 2, 0, 0, 0, 0, 0], [0.5, 0, 0, 0, 1, 0, 3]], dtype=float)
        grades = [DrGrade.MILD, DrGrade.PROLIFERATIVE_DR]
        p = tmp_path / "counts.csv"
        write_count_table(p, ids, X, grades)
        ids2, X2, grades2 = read_count_table(p)
        assert ids2 == ids and grades2 == grades
        assert np.array_equal(X2, X)

    def test_header_enforced(self, tmp_path):
        p = tmp_path / "counts.csv"
        p.write_text("image,stuff\n")
        with pytest.raises(LoadError):
            read_count_table(p)


class TestEvaluate:
    def test_hand_computed_confusion(self):
        # 3-class case placed at grades 0,1,2 of the 5x5 matrix
        confusion = np.zeros((5, 5), dtype=int)
        confusion[:3, :3] = [[2, 1, 0], [0, 2, 0], [0, 1, 2]]
        report = report_from_confusion(confusion)
        assert report.accuracy == pytest.approx(6 / 8)
        p0, r0, _ = report.per_class[DrGrade.NO_DR]
        assert p0 == pytest.approx(1.0)
        assert r0 == pytest.approx(2 / 3)

    def test_all_correct(self):
        confusion = np.diag([3, 3, 3, 3, 3])
        report = report_from_confusion(confusion)
        assert report.accuracy == 1.0
        assert np.all(report.confusion - np.diag(np.diag(report.confusion)) == 0)
        assert report.macro_f1 == 1.0

    def test_single_class_truth_perfect(self):
        confusion = np.zeros((5, 5), dtype=int)
        confusion[2, 2] = 7
        report = report_from_confusion(confusion)
        assert report.macro_f1 == 1.0  # averaged over the one present class

    def test_confusion_identities_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            confusion = rng.integers(0, 9, size=(5, 5))
            report = report_from_confusion(confusion)
            total = confusion.sum()
            assert report.accuracy == pytest.approx(np.trace(confusion) / total)
            for g in DrGrade:
                i = int(g)
                tp = confusion[i, i]
                p, r, _ = report.per_class[g]
                col, row = confusion[:, i].sum(), confusion[i, :].sum()
                assert p == pytest.approx(tp / col if col else 0.0)
                assert r == pytest.approx(tp / row if row else 0.0)

    def test_empty_rejected(self):
        X = np.zeros((4, 2))
        model = train_multiclass(
            np.array([[0.0, 0], [0, 1], [5, 5], [5, 6]]),
            [DrGrade.NO_DR, DrGrade.NO_DR, DrGrade.SEVERE, DrGrade.SEVERE],
            TrainConfig(seed=0),
        )
        with pytest.raises(DomainError):
            evaluate(model, np.zeros((0, 2)), [])

    def test_referable_view(self):
        confusion = np.zeros((5, 5), dtype=int)
        confusion[0, 0] = 5  # non-referable, correct side
        confusion[1, 3] = 2  # non-referable predicted referable: wrong side
        confusion[3, 4] = 3  # referable stays referable: right side
        report = report_from_confusion(confusion)
        assert report.referable_accuracy == pytest.approx(8 / 10)


class TestStratifiedKfold:
    def test_every_fold_has_every_class(self):
        grades = [DrGrade(i % 5) for i in range(50)]
        for train_idx, test_idx in stratified_kfold(grades, 5, seed=0):
            assert {int(grades[i]) for i in test_idx} == set(range(5))
            assert len(set(train_idx) & set(test_idx)) == 0

    def test_infeasible_folds_suggest_smaller_k(self):
        grades = [DrGrade.NO_DR] * 10 + [DrGrade.MILD] * 2
        with pytest.raises(DomainError, match="cv_folds <= 2"):
            stratified_kfold(grades, 3, seed=0)


@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(1)
    X, y = [], []
    for g in range(3):
        X.append(rng.normal(loc=4.0 * g, scale=0.3, size=(12, 2)))
        y.extend([DrGrade(g)] * 12)
    return np.vstack(X), y


class TestGridSearch:
    def test_single_point_grid(self, separable):
        X, y = separable
        grid = GridSpec(C=(1.0,), gamma=(0.5,), kernel=(KernelKind.RBF,))
        best, table = grid_search(X, y, grid, 3, seed=0)
        assert (best.C, best.gamma) == (1.0, 0.5)
        assert len(table) == 1
        assert len(table[0]["fold_accuracy"]) == 3

    def test_duplicate_points_collapse_to_first(self, separable):
        X, y = separable
        grid = GridSpec(C=(1.0, 1.0), gamma=(0.5, 0.5), kernel=(KernelKind.RBF,))
        best, table = grid_search(X, y, grid, 3, seed=0)
        assert len(table) == 1

    def test_tie_breaks_to_smaller_c_then_gamma(self, separable):
        X, y = separable
        # fully separable: every point reaches the same CV accuracy
        grid = GridSpec(C=(10.0, 0.1), gamma=(1.0, 0.01), kernel=(KernelKind.RBF,))
        best, table = grid_search(X, y, grid, 3, seed=0)
        accs = {row["mean_accuracy"] for row in table}
        if len(accs) == 1:
            assert best.C == 0.1
            assert best.gamma == 0.01

    def test_separable_counts_reach_high_accuracy(self, separable):
        X, y = separable
        best, table = grid_search(X, y, SMALL_GRID, 3, seed=0)
        assert max(row["mean_accuracy"] for row in table) >= 0.9


class TestRunTraining:
    def test_end_to_end_synthetic(self, run_result):
        config, result = run_result
        assert result.report_test.accuracy >= 0.9
        assert (result.artifacts_dir / "counts.csv").exists()
        assert (result.artifacts_dir / "model.svm").exists()
        assert (result.artifacts_dir / "cv_table.csv").exists()
        assert (result.artifacts_dir / "report_train.json").exists()
        assert (result.artifacts_dir / "report_test.txt").exists()
        assert (result.artifacts_dir / "run_config.json").exists()

    def test_counts_match_annotations(self, run_result, synth_dir):
        from drscreen.dataset_io import load_dataset

        config, result = run_result
        ids, X, grades = read_count_table(result.artifacts_dir / "counts.csv")
        ds = load_dataset(synth_dir)
        for image_id, row in zip(ids, X):
            truth = ds.annotations[image_id]
            for cls in LesionClass:
                assert row[int(cls)] == sum(
                    1 for d in truth if d.lesion_class == cls
                )

    def test_deterministic_rerun(self, run_result, synth_dir, tmp_path):
        config, result = run_result
        config2 = small_config(synth_dir / "manifest.json", tmp_path / "run2")
        run_training(config2)
        for name in ("counts.csv", "model.svm", "report_train.json",
                     "report_test.json", "cv_table.csv"):
            a = (result.artifacts_dir / name).read_bytes()
            b = (tmp_path / "run2" / name).read_bytes()
            assert a == b, name

    def test_count_table_retrain_identical_model(self, run_result, tmp_path):
        config, result = run_result
        ids, X, grades = read_count_table(result.artifacts_dir / "counts.csv")
        trained = train_from_counts(ids, X, grades, config, tuple(LesionClass))
        save_model(trained.model, tmp_path / "model2.svm")
        assert (tmp_path / "model2.svm").read_bytes() == (
            result.artifacts_dir / "model.svm"
        ).read_bytes()

    def test_no_leakage_from_test_rows(self, run_result):
        config, result = run_result
        from drscreen.svm import _preprocess_to_doc, model_to_doc

        ids, X, grades = read_count_table(result.artifacts_dir / "counts.csv")
        base = train_from_counts(ids, X, grades, config, tuple(LesionClass))
        test_rows = {i for i, image_id in enumerate(ids) if image_id in set(base.test_ids)}
        X_mut = X.copy()
        for i in test_rows:
            X_mut[i] += 17.0  # vandalize every test-split row
        mutated = train_from_counts(ids, X_mut, grades, config, tuple(LesionClass))
        assert mutated.best_point == base.best_point
        assert json.dumps(_preprocess_to_doc(mutated.model.preprocess)) == json.dumps(
            _preprocess_to_doc(base.model.preprocess)
        )
        assert json.dumps(model_to_doc(mutated.model)["machines"]) == json.dumps(
            model_to_doc(base.model)["machines"]
        )

    def test_single_grade_dataset_fails_at_train(self, tmp_path):
        out = tmp_path / "mono"
        generate_synthetic_dataset(out, n_per_grade=12, image_size=64, seed=1)
        labels = (out / "labels.csv").read_text().splitlines()
        keep = [labels[0]] + [l for l in labels[1:] if l.endswith(",0")]
        (out / "labels.csv").write_text("\n".join(keep) + "\n")
        # drop annotations for removed records so the manifest still loads
        kept_ids = {l.split(",")[0] for l in keep[1:]}
        for p in (out / "annotations").glob("*.txt"):
            if p.stem not in kept_ids:
                p.unlink()
        config = small_config(out / "manifest.json", tmp_path / "runx")
        with pytest.raises(RunError, match="train"):
            run_training(config)


class TestRunConfigDoc:
    def test_round_trip(self, tmp_path):
        config = RunConfig(
            manifest=tmp_path / "m.json",
            out_dir=tmp_path / "out",
            preprocess=PreprocessConfig(select_k=5, scale=True, pca_components=2),
            split=SplitSpec(0.25, seed=9, stratified=True),
            grid=GridSpec(C=(1.0,), gamma=(None, 0.5), kernel=(KernelKind.RBF,)),
            cv_folds=4,
            seed=3,
            include_timestamps=False,
        )
        doc = run_config_to_doc(config)
        back = run_config_from_doc(json.loads(json.dumps(doc)))
        assert run_config_to_doc(back) == doc

    def test_bad_doc_rejected(self):
        with pytest.raises(LoadError):
            run_config_from_doc({})
