from pathlib import Path

import numpy as np
import pytest

from vidpop.ablate import (
    AblationTable,
    SubsetSpec,
    enumerate_subsets,
    highlight_best,
    parse_subset,
    run_ablation,
)
from vidpop.errors import BadLabel, DuplicateSource, MissingSource
from vidpop.fusion import TrainConfig

DATA = Path(__file__).parent / "data"

FAST_CFG = TrainConfig(max_epochs=3, patience=1, batch_size=16, val_fraction=0.25, dropout_rate=0.1, seed=0)
NET_OPTS = dict(unified_width=6, head_widths=[4, 1])


class TestParseSubset:
    def test_basic(self):
        assert parse_subset("3+4").sources == (3, 4)

    def test_canonicalizes_order(self):
        spec = parse_subset("4+3")
        assert spec.sources == (3, 4)
        assert spec.label == "3+4"

    def test_duplicate(self):
        with pytest.raises(DuplicateSource):
            parse_subset("3+3")

    @pytest.mark.parametrize("bad", ["", "0", "7", "1+", "+1", "1++2", "a+b", "1 2"])
    def test_bad_labels(self, bad):
        with pytest.raises(BadLabel):
            parse_subset(bad)


class TestEnumerate:
    def test_two_sources(self):
        labels = [s.label for s in enumerate_subsets({3, 4})]
        assert labels == ["3", "4", "3+4"]

    def test_six_sources_power_set(self):
        subsets = enumerate_subsets(set(range(1, 7)))
        labels = [s.label for s in subsets]
        assert len(labels) == 63
        assert len(set(labels)) == 63
        sizes = [len(s.sources) for s in subsets]
        assert sizes == sorted(sizes)

    def test_listed_mode_preserves_file_order(self, tmp_path):
        f = tmp_path / "labels.txt"
        f.write_text("3+4\n1\n2+3+4+6\n", encoding="utf-8")
        labels = [s.label for s in enumerate_subsets(set(range(1, 7)), mode="listed", labels_file=f)]
        assert labels == ["3+4", "1", "2+3+4+6"]

    def test_listed_mode_rejects_unavailable_source(self, tmp_path):
        f = tmp_path / "labels.txt"
        f.write_text("5\n", encoding="utf-8")
        with pytest.raises(MissingSource):
            enumerate_subsets({3, 4}, mode="listed", labels_file=f)


class TestHighlightBest:
    def test_reference_grid(self):
        table = AblationTable.from_csv(DATA / "ablation_reference.csv")
        best = highlight_best(table)
        assert best["share"] == {"label": "3+4", "mape": 78.92}
        assert best["heart"] == {"label": "3+4", "mape": 79.55}
        assert best["comment"] == {"label": "2+3+4+6", "mape": 73.04}
        assert best["play"] == {"label": "1+2+3+4+6", "mape": 76.11}

    def test_single_row(self):
        table = AblationTable(rows={"1+2": {"share": 5.0, "heart": 6.0, "comment": 7.0, "play": 8.0}})
        best = highlight_best(table)
        assert all(v["label"] == "1+2" for v in best.values())

    def test_tie_breaks_lexicographically(self):
        rows = {
            "2": {"share": 5.0, "heart": 1.0, "comment": 1.0, "play": 1.0},
            "1+2": {"share": 5.0, "heart": 2.0, "comment": 2.0, "play": 2.0},
        }
        best = highlight_best(AblationTable(rows=rows))
        assert best["share"]["label"] == "1+2"  # "1+2" < "2"


class TestRunAblation:
    def test_small_grid_finite_and_deterministic(self, tiny_bundle):
        subsets = [parse_subset("3"), parse_subset("4"), parse_subset("3+4")]
        t1 = run_ablation(tiny_bundle, subsets, cfg=FAST_CFG, seed=5, **NET_OPTS)
        assert sorted(t1.rows) == ["3", "3+4", "4"]
        for label in t1.rows:
            for col in ("share", "heart", "comment", "play"):
                assert t1.rows[label][col] is not None
                assert np.isfinite(t1.rows[label][col])
        t2 = run_ablation(tiny_bundle, subsets, cfg=FAST_CFG, seed=5, **NET_OPTS)
        assert t1.rows == t2.rows

    def test_cell_values_independent_of_roster(self, tiny_bundle):
        pair = run_ablation(tiny_bundle, [parse_subset("3"), parse_subset("5")], cfg=FAST_CFG, seed=5, **NET_OPTS)
        solo = run_ablation(tiny_bundle, [parse_subset("5")], cfg=FAST_CFG, seed=5, **NET_OPTS)
        assert pair.rows["5"] == solo.rows["5"]

    def test_resume_from_checkpoints(self, tiny_bundle, tmp_path):
        subsets = [parse_subset(s) for s in ("3", "4", "3+4")]
        full = run_ablation(tiny_bundle, subsets, cfg=FAST_CFG, seed=5,
                            checkpoint_dir=tmp_path / "fresh", **NET_OPTS)
        # interrupted run: first subset only, then resume with the full roster
        run_ablation(tiny_bundle, subsets[:1], cfg=FAST_CFG, seed=5,
                     checkpoint_dir=tmp_path / "resume", **NET_OPTS)
        resumed = run_ablation(tiny_bundle, subsets, cfg=FAST_CFG, seed=5,
                               checkpoint_dir=tmp_path / "resume", **NET_OPTS)
        assert resumed.rows == full.rows

    def test_missing_source_rejected(self, tiny_bundle):
        bundle = tiny_bundle
        subsets = [SubsetSpec(sources=(1, 2))]
        restricted = type(bundle)(
            train=bundle.train, test=bundle.test,
            embeddings={1: bundle.embeddings[1]},
            missing_ids=bundle.missing_ids,
        )
        with pytest.raises(MissingSource):
            run_ablation(restricted, subsets, cfg=FAST_CFG, seed=0, **NET_OPTS)

    def test_failed_cell_records_marker_without_aborting(self, tiny_bundle, monkeypatch):
        import vidpop.ablate as mod
        from vidpop.errors import DivergedLoss

        real = mod._train_cell

        def flaky(bundle, subset, target, *args, **kwargs):
            if subset.label == "4" and target == "heart":
                raise DivergedLoss("injected divergence")
            return real(bundle, subset, target, *args, **kwargs)

        monkeypatch.setattr(mod, "_train_cell", flaky)
        table = run_ablation(tiny_bundle, [parse_subset("3"), parse_subset("4")],
                             cfg=FAST_CFG, seed=5, **NET_OPTS)
        assert table.rows["4"]["heart"] is None
        assert "injected divergence" in table.errors["4"]["heart"]
        assert table.rows["3"]["heart"] is not None  # grid completed

    def test_csv_round_trip(self, tiny_bundle, tmp_path):
        table = run_ablation(tiny_bundle, [parse_subset("3")], cfg=FAST_CFG, seed=5, **NET_OPTS)
        table.to_csv(tmp_path / "a.csv")
        back = AblationTable.from_csv(tmp_path / "a.csv")
        for col, v in back.rows["3"].items():
            assert v == pytest.approx(table.rows["3"][col], abs=1e-6)
