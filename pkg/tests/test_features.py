from datetime import date

import numpy as np
import pytest

from oracles import iqr_keep_oracle, median_oracle, recount_tags_oracle
from vidpop.errors import AllMissing, DegenerateRange, DomainError
from vidpop.features import (
    CANONICAL_FEATURES,
    FeatureMatrix,
    FrequencyTable,
    assemble_feature_matrix,
    classify_daypart,
    derive_time_features,
    expm1_value,
    fit_median_stats,
    fit_tag_frequency,
    impute_video_meta,
    iqr_filter,
    is_us_holiday,
    log1p_value,
    tag_features,
    tokenize_tags,
    train_time_range,
)
from vidpop.ingest import Record, RecordTable


def _rec(vid, author, **kw):
    base = dict(
        video_id=vid,
        author_id=author,
        create_time=1650000000,
        caption="",
        author_follower_count=10,
        author_following_count=10,
        author_total_heart_count=10,
        author_total_video_count=10,
    )
    base.update(kw)
    return Record(**base)


def _full_meta(**kw):
    meta = dict(duration_s=10.0, frame_count=300.0, fps=30.0, width=540.0, height=960.0)
    meta.update(kw)
    return meta


class TestMedianStats:
    def test_odd_count(self):
        table = RecordTable(
            [_rec(f"v{i}", "a1", **_full_meta(duration_s=d)) for i, d in enumerate([10.0, 30.0, 20.0])]
        )
        stats = fit_median_stats(table)
        assert stats.per_author["a1"]["duration_s"] == 20.0 == median_oracle([10, 30, 20])

    def test_even_count_midpoint(self):
        table = RecordTable(
            [_rec(f"v{i}", "a2", **_full_meta(duration_s=d)) for i, d in enumerate([10.0, 20.0])]
        )
        stats = fit_median_stats(table)
        assert stats.per_author["a2"]["duration_s"] == 15.0 == median_oracle([10, 20])

    def test_single_row(self):
        table = RecordTable([_rec("v1", "a1", **_full_meta(duration_s=7.0))])
        stats = fit_median_stats(table)
        assert stats.per_author["a1"]["duration_s"] == 7.0
        assert stats.global_medians["duration_s"] == 7.0

    def test_all_missing_field(self):
        table = RecordTable([_rec("v1", "a1", duration_s=5.0)])  # other meta left missing
        with pytest.raises(AllMissing):
            fit_median_stats(table)

    def test_matches_oracle_on_seeded_groups(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            vals = rng.uniform(0, 100, size=rng.integers(1, 12)).tolist()
            table = RecordTable(
                [_rec(f"v{i}", "a", **_full_meta(duration_s=v)) for i, v in enumerate(vals)]
            )
            stats = fit_median_stats(table)
            assert stats.per_author["a"]["duration_s"] == median_oracle(vals)


class TestImputation:
    def _stats_table(self):
        rows = [
            _rec("v1", "a1", **_full_meta(duration_s=20.0)),
            _rec("v2", "a1", **_full_meta(duration_s=20.0)),
            _rec("v3", "a2", **_full_meta(duration_s=50.0, fps=30.0)),
        ]
        return RecordTable(rows)

    def test_per_author_fill(self):
        stats = fit_median_stats(self._stats_table())
        table = RecordTable([_rec("x", "a1", **_full_meta(duration_s=None))])
        out = impute_video_meta(table, stats)
        assert out.rows[0].duration_s == 20.0

    def test_global_fallback_for_unseen_author(self):
        stats = fit_median_stats(self._stats_table())
        table = RecordTable([_rec("x", "zz", **_full_meta(fps=None))])
        out = impute_video_meta(table, stats)
        assert out.rows[0].fps == stats.global_medians["fps"] == 30.0

    def test_identity_when_nothing_missing(self):
        stats = fit_median_stats(self._stats_table())
        table = RecordTable([_rec("x", "a1", **_full_meta())])
        out = impute_video_meta(table, stats)
        assert out.rows == table.rows

    def test_never_alters_present_values(self, small_bundle):
        stats = fit_median_stats(small_bundle.train)
        out = impute_video_meta(small_bundle.train, stats)
        for before, after in zip(small_bundle.train.rows, out.rows):
            for f in ("duration_s", "frame_count", "fps", "width", "height"):
                if before.meta(f) is not None:
                    assert after.meta(f) == before.meta(f)
                else:
                    assert after.meta(f) is not None


class TestTimeFeatures:
    def test_earliest_is_zero(self):
        tf = derive_time_features(100, 100, 200)
        assert tf.post_age_norm == 0.0

    def test_linear_midpoint(self):
        assert derive_time_features(150, 100, 200).post_age_norm == 0.5

    def test_extrapolates_past_one(self):
        assert derive_time_features(250, 100, 200).post_age_norm == 1.5

    def test_degenerate_range(self):
        with pytest.raises(DegenerateRange):
            derive_time_features(100, 100, 100)

    def test_utc_calendar_fields(self):
        # 2022-07-04 15:30:00 UTC
        tf = derive_time_features(1656948600, 0, 1)
        assert (tf.year, tf.month, tf.day, tf.hour) == (2022, 7, 4, 15)
        assert tf.is_us_holiday is True

    def test_train_time_range(self, small_bundle):
        lo, hi = train_time_range(small_bundle.train)
        times = [r.create_time for r in small_bundle.train.rows]
        assert lo == min(times) and hi == max(times)


class TestDaypart:
    @pytest.mark.parametrize("hour,expected", [(3, "sleeping"), (10, "working"), (20, "leisure"),
                                               (0, "sleeping"), (6, "sleeping"), (7, "leisure"),
                                               (8, "leisure"), (9, "working"), (16, "working"),
                                               (17, "leisure"), (23, "leisure")])
    def test_boundaries(self, hour, expected):
        assert classify_daypart(hour) == expected


class TestHolidays:
    @pytest.mark.parametrize(
        "d,expected",
        [
            (date(2022, 7, 4), True),
            (date(2022, 7, 5), False),
            (date(2022, 11, 24), True),   # 4th Thursday of Nov 2022
            (date(2022, 11, 17), False),  # 3rd Thursday
            (date(2022, 1, 17), True),    # 3rd Monday of Jan
            (date(2022, 5, 30), True),    # last Monday of May
            (date(2022, 5, 23), False),
            (date(2022, 9, 5), True),     # 1st Monday of Sep
            (date(2022, 10, 10), True),   # 2nd Monday of Oct
            (date(2022, 2, 21), True),    # 3rd Monday of Feb
            (date(2023, 6, 19), True),
            (date(2023, 12, 25), True),
            (date(2023, 12, 26), False),
        ],
    )
    def test_rules(self, d, expected):
        assert is_us_holiday(d) is expected

    def test_thanksgiving_against_calendar_walk(self):
        for year in range(2019, 2026):
            thursdays = [date(year, 11, d) for d in range(1, 31) if date(year, 11, d).weekday() == 3]
            assert is_us_holiday(thursdays[3]) is True


class TestTokenizer:
    def test_empty(self):
        assert tokenize_tags("") == ([], [])

    def test_lowercase_duplicates_order(self):
        assert tokenize_tags("Go #Fun #fun @Bob_1 now") == (["fun", "fun"], ["bob_1"])

    def test_boundary_rule(self):
        assert tokenize_tags("mail a@b #x9!") == (["x9"], [])

    def test_marker_after_punctuation(self):
        assert tokenize_tags("wow!#yes ok.@who") == (["yes"], ["who"])

    def test_mention_allows_dots(self):
        assert tokenize_tags("@alice.w hi") == ([], ["alice.w"])

    def test_whitespace_invariance(self, small_bundle):
        for r in small_bundle.train.rows[:50]:
            base = tokenize_tags(r.caption)
            assert tokenize_tags("   " + r.caption + " \t ") == base


class TestTagFrequency:
    def test_occurrence_counts(self):
        table = fit_tag_frequency(["#a #a", "#a @b"])
        assert table.hashtag_freq == {"a": 3}
        assert table.mention_freq == {"b": 1}
        assert table.corpus_size == 2

    def test_empty_corpus(self):
        table = fit_tag_frequency([])
        assert table.hashtag_freq == {} and table.mention_freq == {} and table.corpus_size == 0

    def test_tagless_caption(self):
        table = fit_tag_frequency(["no tags here"])
        assert table.hashtag_freq == {} and table.corpus_size == 1

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(1)
        pool = ["#a", "#B", "@c.d", "plain", "x#notag", "#a#b", "mail a@b", "@@m", "#_"]
        for _ in range(200):
            captions = [
                " ".join(rng.choice(pool, size=rng.integers(0, 8)))
                for _ in range(rng.integers(0, 10))
            ]
            table = fit_tag_frequency(captions)
            h, m = recount_tags_oracle(captions)
            assert table.hashtag_freq == h
            assert table.mention_freq == m


class TestTagFeatures:
    def test_duplicates_add_frequency_twice(self):
        freq = FrequencyTable(hashtag_freq={"a": 10}, mention_freq={}, corpus_size=5)
        assert tag_features("#a #a", freq) == (2, 0, 20.0, 0.0)

    def test_unknown_key_contributes_zero(self):
        freq = FrequencyTable(hashtag_freq={}, mention_freq={}, corpus_size=0)
        assert tag_features("@x", freq) == (0, 1, 0.0, 0.0)

    def test_empty_caption(self):
        freq = FrequencyTable(hashtag_freq={"a": 1}, mention_freq={"b": 2}, corpus_size=1)
        assert tag_features("", freq) == (0, 0, 0.0, 0.0)


class TestLogTransforms:
    def test_zero(self):
        assert log1p_value(0.0) == 0.0

    def test_e_minus_one(self):
        assert log1p_value(np.e - 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_round_trip(self):
        assert expm1_value(log1p_value(12345.678)) == pytest.approx(12345.678, abs=1e-6)

    def test_round_trip_relative_error_bound(self):
        xs = np.logspace(0, 12, 200)
        back = expm1_value(log1p_value(xs))
        assert np.all(np.abs(back - xs) / xs < 1e-9)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            log1p_value(-0.5)
        with pytest.raises(DomainError):
            expm1_value(-1.0)


class TestIqrFilter:
    def test_textbook_example(self):
        mask = iqr_filter([1, 2, 3, 4, 100], k=1.5)
        assert mask.tolist() == [True, True, True, True, False]
        assert mask.tolist() == iqr_keep_oracle([1, 2, 3, 4, 100], 1.5)

    def test_degenerate_spread(self):
        assert iqr_filter([5, 5, 5, 5]).all()

    def test_single_element(self):
        assert iqr_filter([1.0]).tolist() == [True]

    def test_matches_quantile_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            vals = rng.lognormal(2.0, 1.5, size=rng.integers(1, 40))
            k = float(rng.choice([1.0, 1.5, 3.0]))
            assert iqr_filter(vals, k).tolist() == iqr_keep_oracle(vals, k)


class TestAssembly:
    def _artifacts(self, bundle):
        stats = fit_median_stats(bundle.train)
        freq = fit_tag_frequency(
            [r.caption for r in bundle.train.rows] + [r.caption for r in bundle.test.rows]
        )
        t_range = train_time_range(bundle.train)
        return stats, freq, t_range

    def test_canonical_22_columns(self, small_bundle):
        stats, freq, t_range = self._artifacts(small_bundle)
        fm = assemble_feature_matrix(small_bundle.train, stats, freq, t_range)
        assert fm.names == list(CANONICAL_FEATURES)
        assert fm.values.shape == (100, 22)

    def test_deterministic(self, small_bundle):
        stats, freq, t_range = self._artifacts(small_bundle)
        a = assemble_feature_matrix(small_bundle.train, stats, freq, t_range)
        b = assemble_feature_matrix(small_bundle.train, stats, freq, t_range)
        assert np.array_equal(a.values, b.values)

    def test_imputed_cell_equals_median(self, small_bundle):
        stats, freq, t_range = self._artifacts(small_bundle)
        fm = assemble_feature_matrix(small_bundle.train, stats, freq, t_range)
        col = fm.names.index("duration_s")
        for i, r in enumerate(small_bundle.train.rows):
            if r.duration_s is None:
                expected = stats.per_author.get(r.author_id, {}).get(
                    "duration_s", stats.global_medians["duration_s"]
                )
                assert fm.values[i, col] == expected
                break
        else:
            pytest.fail("expected at least one missing duration in the fixture")

    def test_permutation_equivariance(self, small_bundle):
        stats, freq, t_range = self._artifacts(small_bundle)
        fm = assemble_feature_matrix(small_bundle.train, stats, freq, t_range)
        rng = np.random.default_rng(3)
        perm = rng.permutation(len(small_bundle.train))
        shuffled = RecordTable([small_bundle.train.rows[i] for i in perm])
        fm2 = assemble_feature_matrix(shuffled, stats, freq, t_range)
        assert np.array_equal(fm2.values, fm.values[perm])
        assert fm2.row_ids == [fm.row_ids[i] for i in perm]

    def test_csv_round_trip(self, tmp_path, small_bundle):
        stats, freq, t_range = self._artifacts(small_bundle)
        fm = assemble_feature_matrix(small_bundle.train, stats, freq, t_range)
        fm.to_csv(tmp_path / "f.csv")
        back = FeatureMatrix.from_csv(tmp_path / "f.csv")
        assert back.names == fm.names
        assert back.row_ids == fm.row_ids
        assert np.array_equal(back.values, fm.values)
