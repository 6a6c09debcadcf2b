import csv
import json

import numpy as np
import pytest

from cateq import bench, synthetic
from cateq.bench import BenchmarkReport, CellResult, GridConfig, QConfig
from cateq.data import PredictionTable, Provenance
from cateq.errors import ConfigError, DataError
from conftest import make_rct


def _rct(n=6000, seed=0):
    x = synthetic.hillstrom_like_features(n, seed)
    cfg = synthetic.SyntheticConfig("interaction", tau_shift=0.5, seed=seed)
    return synthetic.make_dataset(x, cfg, assignment="rct", e1=0.5, name="synth")


def _row(cell, model, q, status="ok", screening=None):
    if screening is None:
        screening = "degenerate" if q is not None and q >= 0 else "ok"
    return CellResult(
        dataset_id="d",
        cell_id=cell,
        size=1,
        treat_frac=0.5,
        layers=1,
        replicate=0,
        model=model,
        status=status,
        q_hat=q,
        screening=screening,
    )


SMALL_GRID = GridConfig(master_seed=1, sizes=(1000,), treat_fracs=(0.5,), layers=(1,), replicates=1)


# ---------------------------------------------------------------------- benchmark


def test_zero_only_roster():
    ds, _ = _rct(4000)
    report = bench.run_benchmark(ds, SMALL_GRID, ["zero"])
    (r,) = report.results
    assert r.q_hat == 0 and r.screening == "degenerate"
    assert report.cells[0]["best"] == "zero" and not report.cells[0]["qualifying"]
    agg = report.aggregate("zero")
    assert agg.degenerate_rate == 1.0 and agg.wins == 0


def test_result_count_and_statuses():
    ds, _ = _rct(8000)
    grid = GridConfig(master_seed=2, sizes=(1000, 1500), treat_fracs=(0.5,), layers=(1,), replicates=3)
    report = bench.run_benchmark(ds, grid, ["zero", "const", "t", "dr"])
    assert len(report.results) == 24
    assert all(r.status == "ok" for r in report.results)
    shares = sum(a.win_share for a in report.aggregates)
    assert shares == pytest.approx(1.0)
    assert {r.cv for r in report.results} == {"doubly_robust"}


def test_true_effect_import_wins():
    ds, truth = _rct(12_000, seed=3)
    oracle = PredictionTable("oracle", truth.tau)
    grid = GridConfig(master_seed=3, sizes=(1000,), treat_fracs=(0.5,), layers=(1, 2), replicates=10)
    report = bench.run_benchmark(ds, grid, ["zero", oracle])
    best = [c["best"] for c in report.cells]
    assert sum(b == "import:oracle" for b in best) >= 0.95 * len(best)


def test_failures_are_recorded_not_raised():
    ds, _ = _rct(4000)
    # 1% treated of a 1000-row estimation set: far below the 0.02 floor on G
    grid = GridConfig(master_seed=0, sizes=(1000,), treat_fracs=(0.001,), layers=(1,), replicates=1)
    report = bench.run_benchmark(ds, grid, ["zero", "t"])
    assert all(r.status == "failed" and r.error for r in report.results)
    assert report.aggregate("t").failed_count == 1
    assert report.aggregate("t").degenerate_count == 1


def test_benchmark_needs_an_rct():
    ds, _ = _rct(4000)
    with pytest.raises(DataError):
        bench.run_benchmark(ds.replace(provenance=Provenance.SYNTHETIC), SMALL_GRID, ["zero"])


def test_roster_validation():
    ds = make_rct(n=100)
    with pytest.raises(ConfigError):
        bench.run_benchmark(ds, SMALL_GRID, [])
    with pytest.raises(ConfigError):
        bench.run_benchmark(ds, SMALL_GRID, ["t", "t_learner"])
    with pytest.raises(DataError):
        bench.run_benchmark(ds, SMALL_GRID, [PredictionTable("short", np.zeros(5))])


def test_plain_criterion_has_no_nuisance_slice():
    ds, _ = _rct(4000)
    report = bench.run_benchmark(ds, SMALL_GRID, ["zero", "t"], QConfig(cv="none"))
    assert {r.n for r in report.results} == {2000}
    report = bench.run_benchmark(ds, SMALL_GRID, ["zero", "t"], QConfig(cv="dr"))
    assert {r.n for r in report.results} == {1600}


def test_grid_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        GridConfig.from_mapping({"sizes": [1000], "bogus": 1})


# ---------------------------------------------------------------------- aggregation


def test_win_share_two_models_three_cells():
    rows = [_row("c1", "A", -2.0), _row("c1", "B", -1.0)]
    rows += [_row("c2", "A", -3.0), _row("c2", "B", -1.0)]
    rows += [_row("c3", "A", -1.0), _row("c3", "B", -4.0)]
    aggs, _ = bench.summarize(rows)
    a, b = aggs
    assert a.win_share == pytest.approx(2 / 3) and b.win_share == pytest.approx(1 / 3)
    assert a.avg_rank == pytest.approx(4 / 3) and b.avg_rank == pytest.approx(5 / 3)


def test_always_degenerate_model_still_ranked():
    rows = []
    for k in range(10):
        rows += [_row(f"c{k}", "good", -1.0), _row(f"c{k}", "bad", 0.5)]
    aggs, cells = bench.summarize(rows)
    bad = aggs[0]
    assert bad.model == "bad" and bad.degenerate_rate == 1.0 and bad.avg_rank == 2.0
    assert all(c["qualifying"] for c in cells)


def test_all_degenerate_cells_do_not_count():
    rows = [_row("c1", "A", 0.1), _row("c1", "B", 0.2), _row("c2", "A", -1.0), _row("c2", "B", -0.5)]
    aggs, cells = bench.summarize(rows)
    assert [c["qualifying"] for c in cells] == [False, True]
    assert aggs[0].wins == 1 and aggs[0].win_share == 1.0
    assert cells[0]["best"] == "A"  # argmin is still reported


def test_ties_break_by_model_id():
    aggs, cells = bench.summarize([_row("c", "b", -1.0), _row("c", "a", -1.0)])
    assert cells[0]["best"] == "a"


def test_failed_model_ranks_last():
    rows = [_row("c", "a", None, status="failed"), _row("c", "b", 0.5), _row("c", "c", -0.1)]
    aggs, _ = bench.summarize(rows)
    ranks = {a.model: a.avg_rank for a in aggs}
    assert ranks == {"a": 3.0, "b": 2.0, "c": 1.0}


def test_ranks_are_a_permutation():
    gen = np.random.default_rng(0)
    rows = [_row(f"c{k}", m, float(gen.normal())) for k in range(30) for m in "abcd"]
    aggs, cells = bench.summarize(rows)
    n_qual = sum(c["qualifying"] for c in cells)
    assert sum(a.avg_rank for a in aggs) * n_qual == pytest.approx(n_qual * (1 + 2 + 3 + 4))


# ------------------------------------------------------------------------- reports


@pytest.fixture(scope="module")
def report():
    ds, _ = _rct(4000)
    grid = GridConfig(master_seed=5, sizes=(1000,), treat_fracs=(0.3, 0.5), layers=(1,), replicates=1)
    return bench.run_benchmark(ds, grid, ["zero", "const", "s_ext"])


def test_json_round_trip(report, tmp_path):
    path = bench.emit_report(report, "json", tmp_path / "r.json")
    back = bench.load_report(path)
    assert back.to_dict() == report.to_dict()
    assert bench.report_json(back) == path.read_text()


def test_json_floats_have_six_digits(report):
    d = json.loads(bench.report_json(report))
    for r in d["results"]:
        assert len(repr(abs(r["q_hat"])).replace(".", "").lstrip("0").rstrip("0").split("e")[0]) <= 6
    assert d["schema_version"] == bench.SCHEMA_VERSION and "rank_convention" in d["metadata"]


def test_csv_row_count(report, tmp_path):
    path = bench.emit_report(report, "csv", tmp_path / "r.csv")
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * 3
    assert list(rows[0]) == bench.CSV_FIELDS


def test_empty_report_csv_is_header_only(tmp_path):
    empty = BenchmarkReport(roster=(), config={}, results=(), aggregates=(), cells=())
    path = bench.emit_report(empty, "csv", tmp_path / "e.csv")
    assert path.read_text() == ",".join(bench.CSV_FIELDS) + "\n"


def test_unknown_format(report, tmp_path):
    with pytest.raises(ConfigError):
        bench.emit_report(report, "xml", tmp_path / "r.xml")


def test_wrong_schema_version():
    with pytest.raises(DataError):
        BenchmarkReport.from_dict({"schema_version": 99})


def test_rounding():
    assert bench._round(1.23456789) == 1.23457
    assert bench._round(float("nan")) is None and bench._round(None) is None


# ---------------------------------------------------------------------- verification


def test_verify_needs_two_models():
    with pytest.raises(ConfigError):
        bench.VerifyConfig(roster=("t",))


def test_small_verification_run():
    cfg = bench.VerifyConfig(
        est_size=1000, eval_sizes=(500, 2000), replicates=2, roster=("zero", "const", "t"), nuisance_size=1000
    )
    rep = bench.run_verification(cfg)
    assert len(rep.table) == 4 and len(rep.rows) == 8
    for row in rep.table:
        assert 0 < row["mrr"] <= 1 and 0 <= row["precision_at_1"] <= 1
    assert len(rep.series("dr", "mrr")) == 2
    assert rep.table_csv().splitlines()[0] == "cv,eval_size,mrr,precision_at_1,rank_correlation,replicates"


def test_trend_statistic():
    assert bench.trend_statistic([1, 2, 4, 8], [0.1, 0.2, 0.3, 0.4]) == pytest.approx(1)
    assert bench.trend_statistic([1, 2, 4, 8], [0.4, 0.3, 0.2, 0.1]) == pytest.approx(-1)
