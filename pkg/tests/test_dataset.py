import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mammo_age.dataset import (
    MammogramRecord,
    Side,
    Status,
    View,
    balanced_sample,
    filter_outliers,
    ingest,
    load_manifest,
    parse_record,
    summarize,
    write_manifest,
)
from mammo_age.errors import ConflictError, ManifestError, ParseError


def rec(case="A_0001_1", side=Side.LEFT, view=View.CC, status=Status.NORMAL, age=50, w=200, h=300):
    return MammogramRecord(case, side, view, status, age, f"{status.label}/{case}.png", w, h)


records_st = st.lists(
    st.builds(
        rec,
        case=st.from_regex(r"[A-D]_[0-9]{4}_1", fullmatch=True),
        side=st.sampled_from(Side),
        view=st.sampled_from(View),
        status=st.sampled_from(Status),
        age=st.one_of(st.none(), st.integers(1, 129)),
    ),
    max_size=40,
)


class TestParseRecord:
    def test_left_cc_with_hint(self):
        r = parse_record("C_0107_1.LEFT_CC.jpg", Status.CANCER, "67", size=(200, 300))
        assert (r.case_id, r.side, r.view, r.status, r.age) == ("C_0107_1", Side.LEFT, View.CC,
                                                               Status.CANCER, 67)
        assert r.key == "C_0107_1.LEFT_CC"

    def test_status_from_folder(self):
        r = parse_record("data/Benign/0003/B_0003_1.RIGHT_MLO.png", size=(10, 10))
        assert r.status is Status.BENIGN and r.side is Side.RIGHT and r.view is View.MLO

    def test_empty_age_is_absent(self):
        assert parse_record("x.LEFT_CC.png", Status.NORMAL, "", size=(1, 1)).age is None

    def test_non_integer_age_is_absent(self):
        assert parse_record("x.LEFT_CC.png", Status.NORMAL, "6x", size=(1, 1)).age is None

    def test_bad_view_token(self):
        with pytest.raises(ParseError) as exc:
            parse_record("A_0001_1.RIGHT_XX.png", Status.NORMAL, size=(1, 1))
        assert exc.value.token == "XX"

    def test_bad_side_token(self):
        with pytest.raises(ParseError) as exc:
            parse_record("A_0001_1.TOP_CC.png", Status.NORMAL, size=(1, 1))
        assert exc.value.token == "TOP"

    def test_not_matching_grammar(self):
        with pytest.raises(ParseError):
            parse_record("readme.txt", Status.NORMAL, size=(1, 1))

    def test_folder_conflict(self):
        with pytest.raises(ConflictError):
            parse_record("Cancer/A_0001_1.LEFT_CC.png", Status.NORMAL, size=(1, 1))

    def test_size_read_from_image(self, archive):
        f = next((archive / "Normal").rglob("*.LEFT_CC.png"))
        from PIL import Image

        with Image.open(f) as im:
            assert parse_record(f).width == im.size[0]


class TestFilterOutliers:
    def test_one_year_old_removed(self):
        kept, removed = filter_outliers([rec(age=1)], 18, 99)
        assert kept == [] and len(removed) == 1

    def test_interior_kept(self):
        kept, removed = filter_outliers([rec(age=57)], 18, 99)
        assert len(kept) == 1 and removed == []

    def test_absent_age_kept(self):
        kept, _ = filter_outliers([rec(age=None)], 18, 99)
        assert len(kept) == 1

    def test_bounds_inclusive(self):
        kept, _ = filter_outliers([rec(age=18), rec(case="b", age=99)], 18, 99)
        assert len(kept) == 2

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            filter_outliers([], 50, 50)

    @given(records_st)
    def test_partition_and_idempotence(self, records):
        kept, removed = filter_outliers(records, 18, 99)
        assert len(kept) + len(removed) == len(records)
        assert [r for r in records if r in kept] == kept  # order preserved
        assert filter_outliers(kept, 18, 99)[0] == kept

    @given(records_st)
    def test_filtered_means_within_bounds(self, records):
        kept, _ = filter_outliers(records, 18, 99)
        for row in summarize(kept).rows:
            if row.age_mean is not None:
                assert 18 <= row.age_mean <= 99


class TestSummarize:
    def test_two_ages(self):
        s = summarize([rec(age=50), rec(case="b", age=60)])
        row = s.row("Normal")
        assert row.image_count == 2
        assert row.age_mean == 55.0
        assert row.age_std == pytest.approx(math.sqrt(50), abs=1e-12)

    def test_empty(self):
        s = summarize([])
        assert all(r.image_count == 0 and r.age_mean is None for r in s.rows)
        assert s.histogram == {}

    def test_single_age_std_undefined(self):
        assert summarize([rec(age=50)]).row("Normal").age_std is None

    @given(records_st)
    def test_total_and_histogram(self, records):
        s = summarize(records)
        assert s.row("Total").image_count == sum(r.image_count for r in s.rows[:-1])
        assert sum(s.histogram.values()) == sum(r.age is not None for r in records)
        assert all(r.age_std is None or r.age_std >= 0 for r in s.rows)

    def test_row_order_matches_table(self):
        assert [r.label for r in summarize([]).rows] == ["Normal", "Cancer", "Benign", "Total"]


class TestBalancedSample:
    def test_singletons(self):
        rs = [rec(case="a", status=Status.NORMAL), rec(case="b", status=Status.CANCER),
              rec(case="c", status=Status.BENIGN)]
        for seed in range(5):
            assert sorted(r.case_id for r in balanced_sample(rs, seed)) == ["a", "b", "c"]

    def test_deterministic(self):
        rs = [rec(case=f"{s.value}{i}", status=s, age=40 + i) for s in Status for i in range(10 + len(s.value))]
        assert balanced_sample(rs, 3) == balanced_sample(rs, 3)

    def test_unknown_age_not_eligible(self):
        rs = [rec(case="a", status=s) for s in Status] + [rec(case="z", age=None)]
        assert all(r.age is not None for r in balanced_sample(rs, 0))

    def test_empty_class(self):
        with pytest.raises(ValueError, match="Benign"):
            balanced_sample([rec(status=Status.NORMAL), rec(case="b", status=Status.CANCER)], 0)

    @given(st.lists(st.sampled_from(Status), min_size=3, max_size=60), st.integers(0, 2**63))
    @settings(max_examples=60)
    def test_equal_class_counts(self, statuses, seed):
        rs = [rec(case=f"c{i}", status=s, age=40) for i, s in enumerate(statuses)]
        if len(set(statuses)) < 3:
            with pytest.raises(ValueError):
                balanced_sample(rs, seed)
            return
        out = balanced_sample(rs, seed)
        counts = [sum(r.status is s for r in out) for s in Status]
        assert len(set(counts)) == 1
        assert counts[0] == min(statuses.count(s) for s in Status)
        assert len({r.case_id for r in out}) == len(out)  # without replacement


class TestManifest:
    def test_round_trip(self, tmp_path):
        rs = [rec(case="a", age=50), rec(case="b", side=Side.RIGHT, view=View.MLO, status=Status.CANCER, age=None),
              rec(case="c", status=Status.BENIGN, age=71)]
        p = tmp_path / "m.csv"
        write_manifest(rs, p)
        assert load_manifest(p) == rs

    def test_header(self, tmp_path):
        p = tmp_path / "m.csv"
        write_manifest([], p)
        assert p.read_text() == "path,case_id,side,view,status,age,width,height\n"
        assert load_manifest(p) == []

    def test_bad_age_reports_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,case_id,side,view,status,age,width,height\n"
                     "a.png,a,L,CC,normal,50,10,10\n"
                     "b.png,b,L,CC,normal,abc,10,10\n")
        with pytest.raises(ManifestError) as exc:
            load_manifest(p)
        assert exc.value.line == 3

    def test_duplicate_key(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,case_id,side,view,status,age,width,height\n"
                     "a.png,a,L,CC,normal,50,10,10\n"
                     "b.png,a,L,CC,cancer,51,10,10\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(p)

    @given(records_st)
    @settings(max_examples=40)
    def test_byte_stable(self, tmp_path_factory, records):
        unique = list({r.key: r for r in records}.values())
        d = tmp_path_factory.mktemp("m")
        write_manifest(unique, d / "1.csv")
        write_manifest(load_manifest(d / "1.csv"), d / "2.csv")
        assert (d / "1.csv").read_bytes() == (d / "2.csv").read_bytes()


def test_ingest(archive, tmp_path):
    kept, removed = ingest(archive, tmp_path / "m.csv")
    assert len(kept) == 24 and removed == []
    loaded = load_manifest(tmp_path / "m.csv")
    assert loaded == kept
    s = summarize(loaded)
    assert [r.image_count for r in s.rows] == [8, 10, 6, 24]
    assert s.row("Normal").age_mean == pytest.approx(57.0)


def test_ingest_removes_outliers_and_skips_masks(archive, tmp_path):
    from conftest import save_gray

    odd = save_gray(archive / "Normal" / "A_0099_1" / "A_0099_1.LEFT_CC.png", [[0, 1], [2, 3]])
    odd.with_name(odd.name + ".json").write_text('{"age": 1}')
    save_gray(archive / "Normal" / "A_0099_1" / "A_0099_1.LEFT_CC_Mask.png", [[0]])
    kept, removed = ingest(archive, tmp_path / "m.csv")
    assert [r.case_id for r in removed] == ["A_0099_1"]
    assert len(kept) == 24


def test_ingest_ics_and_age_table(tmp_path):
    from conftest import save_gray

    root = tmp_path / "Cancer" / "case1"
    save_gray(root / "C_0001_1.LEFT_CC.png", [[1, 2]])
    save_gray(root / "C_0001_1.RIGHT_CC.png", [[1, 2]])
    (root / "C_0001_1.ics").write_text("filename C_0001_1\nPATIENT_AGE 66\n")
    kept, _ = ingest(tmp_path, tmp_path / "m.csv")
    assert {r.age for r in kept} == {66}

    from mammo_age.dataset import load_age_table

    table = tmp_path / "ages.csv"
    table.write_text("fileName,Age\nC_0001_1.LEFT_CC.png,70\n")
    kept, _ = ingest(tmp_path, tmp_path / "m.csv", age_table=load_age_table(table))
    assert sorted(r.age for r in kept) == [66, 70]
