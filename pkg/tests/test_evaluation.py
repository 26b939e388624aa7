import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bttf import evaluation as ev
from bttf.errors import ConfigError, ContractError
from bttf.gbt import GBTConfig
from bttf.synthetic import hourly_table
from bttf.visionary import VisionaryConfig

import oracles


def test_rmse_examples():
    assert ev.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert abs(ev.rmse([0.0, 0.0], [3.0, 4.0]) - 3.5355339059327378) < 1e-15
    with pytest.raises(ContractError):
        ev.rmse([1.0], [1.0, 2.0])
    with pytest.raises(ContractError):
        ev.rmse([], [])


def test_r2_examples():
    t = np.array([1.0, 4.0, 2.0, 8.0])
    assert ev.r2(t, t) == 1.0
    assert abs(ev.r2(np.full(4, t.mean()), t)) < 1e-15
    with pytest.raises(ContractError):
        ev.r2([1.0, 2.0], [3.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 200))
def test_metrics_match_oracles(seed, n):
    rng = np.random.default_rng(seed)
    truth = rng.normal(0, 10, n)
    pred = truth + rng.normal(0, 3, n)
    a, b = ev.rmse(pred, truth), oracles.rmse(list(pred), list(truth))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(b))
    a, b = ev.r2(pred, truth), oracles.r2(list(pred), list(truth))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


SMALL = dict(
    epochs=[2, 3],
    visionary=VisionaryConfig(batch_size=32),
    gbt=GBTConfig(n_rounds=10, max_depth=3),
)


@pytest.fixture(scope="module")
def table():
    return hourly_table(160, seed=2)


@pytest.fixture(scope="module")
def bench(table, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    arts = {}
    suite = ev.SuiteConfig(**SMALL)
    reports = ev.run_benchmark(table, suite, cache_dir=str(out / "cells"), artifacts=arts, threads=1)
    return suite, reports, arts, out


def test_report_count_and_shared_split(bench):
    _, reports, _, _ = bench
    assert [r.kind for r in reports].count("visionary-only") == 2
    assert [r.kind for r in reports].count("bttf") == 2
    assert len(reports) == 6
    assert len({json.dumps(r.split, sort_keys=True) for r in reports}) == 1


def test_report_identity(bench):
    for r in bench[1]:
        assert abs(r.r2 - (1 - r.n_test * r.rmse ** 2 / r.sst)) < 1e-10
        assert r.rmse >= 0 and r.r2 <= 1
        assert r.evaluated_on == "test"


def test_two_kinds_one_epoch(table):
    suite = ev.SuiteConfig(kinds=["gbt-one-day", "visionary-only"], epochs=[2], gbt=GBTConfig(n_rounds=5))
    assert len(ev.run_benchmark(table, suite, threads=1)) == 2


def test_rerun_is_bitwise_and_cache_resumes(bench, table):
    suite, reports, _, out = bench
    fresh = ev.run_benchmark(table, suite, threads=1)
    assert [r.numerics() for r in fresh] == [r.numerics() for r in reports]
    (out / "cells" / "gbt-one-day-e1-s0.json").unlink()
    arts = {}
    resumed = ev.run_benchmark(table, suite, cache_dir=str(out / "cells"), artifacts=arts, threads=1)
    assert list(arts) == ["gbt-one-day-e1-s0"]
    assert [r.numerics() for r in resumed] == [r.numerics() for r in reports]


def test_parallel_matches_serial(bench, table):
    suite, reports, _, _ = bench
    par = ev.run_benchmark(table, suite, threads=2)
    assert [r.numerics() for r in par] == [r.numerics() for r in reports]


def test_table_has_paper_columns(bench, tmp_path):
    ev.write_reports(bench[1], tmp_path)
    md = (tmp_path / "table.md").read_text()
    assert "RMSE (paper)" in md and "R2 (paper)" in md
    assert "4.4138" in md and "3.9678" in md
    doc = json.loads((tmp_path / "reports.json").read_text())
    assert doc[0]["config"]["k"] == 7


def test_paper_reference_values():
    assert ev.PAPER_TABLE1[("bttf", 200)][:2] == (2.2479, 0.9448)
    assert ev.PAPER_TABLE1[("visionary-only", 200)][:2] == (2.4635, 0.9330)
    assert len(ev.PAPER_TABLE1) == 8


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_exports(bench, tmp_path):
    _, reports, arts, _ = bench
    rep = next(r for r in reports if r.run_id == "bttf-e3-s0")
    files = ev.export_diagnostics(arts["bttf-e3-s0"], tmp_path)
    assert len(files) == 4
    curves = read(tmp_path / "curves.csv")
    assert curves[0] == ["epoch", "train_loss", "val_loss", "epoch_seconds"] and len(curves) == 1 + 3
    assert len(read(tmp_path / "scatter.csv")) == 1 + rep.n_test
    hist = read(tmp_path / "loss_hist.csv")
    assert len(hist) == 21
    imp = read(tmp_path / "importance.csv")[1:]
    scores = [int(s) for _, s in imp]
    assert scores == sorted(scores, reverse=True)
    assert b"\r\n" not in (tmp_path / "scatter.csv").read_bytes()


def test_suite_validation():
    with pytest.raises(ConfigError) as err:
        ev.SuiteConfig(kinds=["lstm"], epochs=[0], gbt=GBTConfig(eta=0.0)).validate()
    assert set(err.value.fields) == {"kinds[lstm]", "epochs", "gbt.eta"}
    s = ev.SuiteConfig(**SMALL)
    assert ev.SuiteConfig.from_dict(s.to_dict()).to_dict() == s.to_dict()
