import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from tmlga.dataio import parse_manifest
from tmlga.errors import EmptyInputError, ParameterError
from tmlga.evaluation import (AblationRow, AblationTable, EvalReport, PredictionRecord, accuracy_at,
                              evaluate_records, mean_tiou, read_predictions, tiou, write_predictions)

times = st.floats(0, 60, allow_nan=False).map(lambda x: round(x, 3))


def rec(pred, gt, vid="v", query="q"):
    return PredictionRecord(vid, query, pred, gt)


class TestTiou:
    def test_examples(self):
        assert tiou((2, 8), (4, 10)) == 0.5
        assert tiou((1, 3), (1, 3)) == 1.0
        assert tiou((0, 1), (2, 3)) == 0.0

    def test_inverted_prediction(self):
        assert tiou((8, 2), (4, 10)) == 0.5
        assert tiou((8, 2), (4, 10), strict_inverted_zero=True) == 0.0

    @given(times, times, times, times)
    def test_matches_grid_oracle(self, a, b, c, d):
        gt = (min(c, d), max(c, d))
        if gt[1] - gt[0] < 1e-3:
            gt = (gt[0], gt[0] + 1.0)
        assert abs(tiou((a, b), gt) - oracles.tiou_grid((a, b), gt)) <= 2e-3

    @given(times, times, times, times)
    def test_bounds_and_symmetry(self, a, b, c, d):
        x, y = (min(a, b), max(a, b)), (min(c, d), max(c, d))
        v = tiou(x, y)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(tiou(y, x), abs=1e-12)


class TestAccuracy:
    def test_perfect(self):
        rs = [rec((1, 2), (1, 2)), rec((0, 5), (0, 5))]
        for a in (0.1, 0.5, 1.0):
            assert accuracy_at(rs, a) == 1.0

    def test_inclusive_threshold(self):
        assert accuracy_at([rec((2, 8), (4, 10))], 0.5) == 1.0

    def test_hand_count(self):
        # tIoUs 0.6 and 0.4
        rs = [rec((0, 6), (0, 10)), rec((0, 4), (0, 10))]
        assert accuracy_at(rs, 0.5) == 0.5

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            accuracy_at([], 0.5)
        with pytest.raises(ParameterError):
            accuracy_at([rec((0, 1), (0, 1))], 0.0)

    @given(st.lists(st.tuples(times, times, times), min_size=1, max_size=20),
           st.floats(0.01, 1), st.floats(0.01, 1))
    def test_monotone_in_alpha(self, triples, a1, a2):
        rs = [rec((a, b), (c, c + 1.0)) for a, b, c in triples]
        lo, hi = min(a1, a2), max(a1, a2)
        assert accuracy_at(rs, lo) >= accuracy_at(rs, hi)


class TestMeanTiou:
    def test_examples(self):
        assert mean_tiou([rec((0, 1), (0, 1)), rec((0, 1), (2, 3))]) == 0.5
        rs = [rec((0, 5), (0, 10)), rec((0, 2.5), (0, 10)), rec((0, 7.5), (0, 10))]
        assert mean_tiou(rs) == pytest.approx(0.5, abs=1e-15)


class TestReport:
    def test_json_and_table(self):
        report = evaluate_records([rec((2, 8), (4, 10))])
        assert report.to_json() == {"accuracy": {"0.3": 1.0, "0.5": 1.0, "0.7": 0.0}, "miou": 0.5, "count": 1}
        assert "alpha=0.5" in report.table() and "50.00" in report.table()


class TestPredictionFiles:
    def test_round_trip_with_embedded_ground_truth(self, tmp_path):
        rs = [PredictionRecord("a", "q1", (1.0, 2.0), (1.5, 2.5), (3, 5)), rec((0.0, 1.0), (0.0, 1.0), "b")]
        write_predictions(tmp_path / "p.jsonl", rs)
        assert read_predictions(tmp_path / "p.jsonl") == rs

    def test_manifest_supplies_ground_truth_in_order(self, tmp_path):
        m = parse_manifest({"entries": [{"video_id": "a", "feature_path": "a.tmlf", "l": 250, "fps": 25,
                                         "annotations": [{"query": "q", "t_s": 1, "t_e": 2},
                                                         {"query": "q", "t_s": 5, "t_e": 6}]}]})
        lines = [{"video_id": "a", "query": "q", "t_s_pred": 1, "t_e_pred": 2},
                 {"video_id": "a", "query": "q", "t_s_pred": 5, "t_e_pred": 6}]
        (tmp_path / "p.jsonl").write_text("\n".join(json.dumps(x) for x in lines))
        rs = read_predictions(tmp_path / "p.jsonl", m)
        assert [r.gt for r in rs] == [(1, 2), (5, 6)]
        assert evaluate_records(rs).accuracy_at[0.7] == 1.0

    def test_missing_ground_truth(self, tmp_path):
        (tmp_path / "p.jsonl").write_text(json.dumps({"video_id": "a", "query": "q", "t_s_pred": 1, "t_e_pred": 2}))
        with pytest.raises(ParameterError):
            read_predictions(tmp_path / "p.jsonl")


def test_ablation_table_shape():
    table = AblationTable()
    for seed in (1, 2):
        for name, acc in (("NLL", 0.4), ("KL", 0.5), ("NLL+AL", 0.55), ("KL+AL", 0.6)):
            table.rows.append(AblationRow(name, seed, EvalReport({0.3: acc, 0.5: acc, 0.7: acc}, acc, 10), 1.0))
    out = table.to_json()
    assert len(out["runs"]) == 8
    assert list(out["means"]) == ["NLL", "KL", "NLL+AL", "KL+AL"]
    assert table.mean("KL+AL", 0.5) == 0.6 and table.median("NLL", 0.5) == 0.4
    assert table.table().splitlines()[0].startswith("Method")
