import numpy as np
import pytest

from drscreen.dataset_io import (
    Dataset,
    SplitSpec,
    draw_lesion_counts,
    generate_synthetic_dataset,
    grade_from_counts,
    load_dataset,
    load_labels,
    read_annotation_file,
    stratified_split,
    write_annotation_file,
    write_labels,
)
from drscreen.domain import (
    BBox,
    Detection,
    DrGrade,
    GradedRecord,
    Laterality,
    LesionClass,
)
from drscreen.errors import DomainError, GenerationError, LoadError, ParseError, SplitError


class TestLoadLabels:
    def test_parses_rows_in_order(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("image,level\n10_left,0\n10_right,4\n")
        records = load_labels(p)
        assert records[0] == GradedRecord("10_left", DrGrade.NO_DR, Laterality.LEFT)
        assert records[1] == GradedRecord(
            "10_right", DrGrade.PROLIFERATIVE_DR, Laterality.RIGHT
        )

    def test_out_of_range_level_names_line(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("image,level\nok,1\nx,7\n")
        with pytest.raises(LoadError, match="line 3"):
            load_labels(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("image,grade\nx,1\n")
        with pytest.raises(LoadError, match="level"):
            load_labels(p)

    def test_duplicate_image_id(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("image,level\na,1\na,2\n")
        with pytest.raises(LoadError, match="duplicate"):
            load_labels(p)

    def test_unparsable_level(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("image,level\na,two\n")
        with pytest.raises(LoadError, match="line 2"):
            load_labels(p)

    def test_round_trip_with_writer(self, tmp_path):
        records = [
            GradedRecord("a_left", DrGrade.MILD, Laterality.LEFT),
            GradedRecord("b", DrGrade.SEVERE),
        ]
        p = tmp_path / "labels.csv"
        write_labels(records, p)
        assert load_labels(p) == records


class TestAnnotationFiles:
    def test_five_field_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0.5 0.5 0.2 0.1\n")
        (det,) = read_annotation_file(p)
        assert det.lesion_class == LesionClass.MICROANEURYSM
        assert (det.box.cx, det.box.cy, det.box.w, det.box.h) == (0.5, 0.5, 0.2, 0.1)
        assert det.confidence == 1.0

    def test_six_field_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("6 0.5 0.5 0.5 0.5 0.9\n")
        (det,) = read_annotation_file(p)
        assert det.lesion_class == LesionClass.PROLIFERATIVE
        assert det.confidence == 0.9

    @pytest.mark.parametrize(
        "line",
        [
            "0 1.5 0.5 0.2 0.1",  # cx out of range
            "7 0.5 0.5 0.2 0.1",  # class id out of range
            "0 0.5 0.5 0.0 0.1",  # degenerate width
            "0 0.5 0.5 -0.2 0.1",  # negative width
            "0 0.5 0.5 0.2",  # wrong field count
            "0 0.5 0.5 0.2 0.1 0.9 extra",  # wrong field count
            "0 0.5 0.5 0.2 0.1 1.5",  # confidence out of range
            "x 0.5 0.5 0.2 0.1",  # non-numeric class
        ],
    )
    def test_malformed_lines_name_line_one(self, tmp_path, line):
        p = tmp_path / "a.txt"
        p.write_text(line + "\n")
        with pytest.raises(ParseError) as err:
            read_annotation_file(p)
        assert err.value.line == 1

    def test_empty_writes_empty_file(self, tmp_path):
        p = tmp_path / "a.txt"
        write_annotation_file([], p)
        assert p.read_text() == ""
        assert read_annotation_file(p) == []

    def test_confidence_flag_controls_field_count(self, tmp_path):
        det = Detection(LesionClass.IRMA, BBox(0.5, 0.5, 0.25, 0.25), 0.75)
        p = tmp_path / "a.txt"
        write_annotation_file([det], p, include_confidence=False)
        assert len(p.read_text().split()) == 5
        write_annotation_file([det], p, include_confidence=True)
        assert len(p.read_text().split()) == 6

    def test_read_write_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(0)
        dets = []
        for _ in range(50):
            w = round(float(rng.uniform(0.01, 0.5)), 6)
            h = round(float(rng.uniform(0.01, 0.5)), 6)
            dets.append(
                Detection(
                    LesionClass(int(rng.integers(0, 7))),
                    BBox(
                        round(float(rng.uniform(0, 1)), 6),
                        round(float(rng.uniform(0, 1)), 6),
                        w,
                        h,
                    ),
                    round(float(rng.uniform(0, 1)), 6),
                )
            )
        p = tmp_path / "a.txt"
        write_annotation_file(dets, p, include_confidence=True)
        assert read_annotation_file(p) == dets
        # and the text itself round-trips byte-exactly
        first = p.read_bytes()
        write_annotation_file(read_annotation_file(p), p, include_confidence=True)
        assert p.read_bytes() == first


def make_records(counts_per_grade):
    records = []
    for grade, n in counts_per_grade.items():
        for i in range(n):
            records.append(GradedRecord(f"g{int(grade)}_{i}", grade))
    return records


class TestStratifiedSplit:
    def test_exact_per_grade_counts(self):
        records = make_records({g: 10 for g in DrGrade})
        train, test = stratified_split(records, SplitSpec(0.2, seed=1))
        assert len(test) == 10 and len(train) == 40
        for g in DrGrade:
            assert sum(1 for r in test if r.grade == g) == 2

    def test_deterministic_per_seed(self):
        records = make_records({g: 10 for g in DrGrade})
        a = stratified_split(records, SplitSpec(0.2, seed=7))
        b = stratified_split(records, SplitSpec(0.2, seed=7))
        assert a == b
        c = stratified_split(records, SplitSpec(0.2, seed=8))
        assert a != c

    def test_partition_no_loss_no_duplication(self):
        rng = np.random.default_rng(5)
        records = make_records(
            {g: int(rng.integers(6, 30)) for g in DrGrade}
        )
        train, test = stratified_split(records, SplitSpec(0.25, seed=3))
        assert sorted(r.image_id for r in train + test) == sorted(
            r.image_id for r in records
        )
        for g in DrGrade:
            n_g = sum(1 for r in records if r.grade == g)
            got = sum(1 for r in test if r.grade == g)
            assert abs(got - n_g * 0.25) <= 1.0

    def test_non_stratified_size(self):
        records = make_records({DrGrade.NO_DR: 100})
        train, test = stratified_split(
            records, SplitSpec(0.2, seed=0, stratified=False)
        )
        assert len(test) == 20 and len(train) == 80

    def test_tiny_grade_errors_with_name(self):
        records = make_records({DrGrade.NO_DR: 10, DrGrade.SEVERE: 1})
        with pytest.raises(SplitError, match="SEVERE"):
            stratified_split(records, SplitSpec(0.2, seed=0))

    def test_empty_rejected(self):
        with pytest.raises(SplitError):
            stratified_split([], SplitSpec(0.2, seed=0))

    def test_bad_fraction_rejected(self):
        with pytest.raises(DomainError):
            SplitSpec(test_fraction=0.0)


class TestSyntheticRules:
    def test_rule_table_examples(self):
        rng = np.random.default_rng(0)
        assert sum(draw_lesion_counts(DrGrade.NO_DR, rng).values()) == 0
        for _ in range(20):
            mild = draw_lesion_counts(DrGrade.MILD, rng)
            assert mild[LesionClass.MICROANEURYSM] >= 1
            assert sum(v for c, v in mild.items() if c != LesionClass.MICROANEURYSM) == 0
            severe = draw_lesion_counts(DrGrade.SEVERE, rng)
            assert severe[LesionClass.HEMORRHAGE] >= 5
            assert severe[LesionClass.IRMA] + severe[LesionClass.VENOUS_BEADING] >= 1
            prolif = draw_lesion_counts(DrGrade.PROLIFERATIVE_DR, rng)
            assert prolif[LesionClass.PROLIFERATIVE] >= 1

    def test_counts_always_recover_grade(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            grade = DrGrade(int(rng.integers(0, 5)))
            counts = draw_lesion_counts(grade, rng)
            assert grade_from_counts(counts) == grade

    def test_grade_from_counts_accepts_vectors(self):
        assert grade_from_counts([0, 0, 0, 0, 0, 0, 0]) == DrGrade.NO_DR
        assert grade_from_counts([3, 0, 0, 0, 0, 0, 1]) == DrGrade.PROLIFERATIVE_DR


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    ds = generate_synthetic_dataset(out, n_per_grade=4, image_size=64, seed=9)
    return out, ds


class TestSyntheticDataset:
    def test_counts_and_files(self, dataset):
        out, ds = dataset
        assert len(ds.records) == 20
        assert len(list((out / "images").glob("*.png"))) == 20
        assert len(list((out / "annotations").glob("*.txt"))) == 20

    def test_grade_rules_hold(self, dataset):
        _, ds = dataset
        for record in ds.records:
            dets = ds.annotations[record.image_id]
            if record.grade == DrGrade.NO_DR:
                assert dets == ()
            if record.grade == DrGrade.MILD:
                assert {d.lesion_class for d in dets} == {LesionClass.MICROANEURYSM}
            if record.grade == DrGrade.PROLIFERATIVE_DR:
                assert any(
                    d.lesion_class == LesionClass.PROLIFERATIVE for d in dets
                )

    def test_label_recoverable_from_annotations(self, dataset):
        _, ds = dataset
        for record in ds.records:
            counts = {cls: 0 for cls in LesionClass}
            for d in ds.annotations[record.image_id]:
                counts[d.lesion_class] += 1
            assert grade_from_counts(counts) == record.grade

    def test_no_overlapping_boxes(self, dataset):
        _, ds = dataset
        for dets in ds.annotations.values():
            corners = [d.box.corners() for d in dets]
            for i in range(len(corners)):
                for j in range(i + 1, len(corners)):
                    ax1, ay1, ax2, ay2 = corners[i]
                    bx1, by1, bx2, by2 = corners[j]
                    disjoint = (
                        ax2 <= bx1 or bx2 <= ax1 or ay2 <= by1 or by2 <= ay1
                    )
                    assert disjoint

    def test_manifest_round_trip(self, dataset):
        out, ds = dataset
        loaded = load_dataset(out)
        assert loaded.records == ds.records
        assert set(loaded.annotations) == set(ds.annotations)
        for image_id in ds.annotations:
            assert loaded.annotations[image_id] == ds.annotations[image_id]

    def test_deterministic_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic_dataset(a, n_per_grade=2, image_size=64, seed=4)
        generate_synthetic_dataset(b, n_per_grade=2, image_size=64, seed=4)
        for pa in sorted(a.rglob("*")):
            if pa.is_file():
                pb = b / pa.relative_to(a)
                assert pb.read_bytes() == pa.read_bytes(), pa.name

    def test_label_flip_knob(self, tmp_path):
        ds = generate_synthetic_dataset(
            tmp_path / "noisy", n_per_grade=30, image_size=64, seed=2,
            label_flip_rate=0.5,
        )
        flipped = 0
        for record in ds.records:
            counts = {cls: 0 for cls in LesionClass}
            for d in ds.annotations[record.image_id]:
                counts[d.lesion_class] += 1
            if grade_from_counts(counts) != record.grade:
                flipped += 1
        assert 0 < flipped < len(ds.records)

    def test_parameter_validation(self, tmp_path):
        with pytest.raises(GenerationError):
            generate_synthetic_dataset(tmp_path / "x", n_per_grade=0)
        with pytest.raises(GenerationError):
            generate_synthetic_dataset(tmp_path / "x", n_per_grade=1, image_size=32)


class TestDatasetInvariants:
    def test_orphan_annotations_rejected(self, tmp_path):
        with pytest.raises(DomainError):
            Dataset(
                records=(GradedRecord("a", DrGrade.NO_DR),),
                annotations={"b": ()},
                image_dir=tmp_path,
            )
