import csv
import io
import json
import statistics
from dataclasses import replace

import numpy as np
import pytest

from transpar.data import DomainDataset, ShiftScenario
from transpar.errors import ConfigurationError, NumericFailure
from transpar.harness import (
    FULL_CELL,
    METRICS_COLUMNS,
    SCOPE_CELLS,
    TrainConfig,
    evaluate,
    prepare_data,
    run_stage1,
    run_stage2,
    run_suite,
    suite_cells,
)
from transpar.model import NetConfig, init_network
from transpar.reports import emit_reports, metrics_csv

SMALL = ShiftScenario(n_source=200, n_target=200)


def _small(**kw):
    base = dict(scenario=SMALL, hidden=16, disc_hidden=8, epochs=3)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_roundtrip(self):
        cfg = _small(method="dann", scope=("FE",), tau_override=0.5)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_method_dash_alias(self):
        assert TrainConfig.from_dict({"method": "source-only"}).method == "source_only"

    @pytest.mark.parametrize("kw", [
        {"method": "mdd"}, {"scope": []}, {"scope": ["XX"]}, {"epochs": -1},
        {"feature_source": "imagenet"}, {"tau_override": 1.5}, {"lr": 0.0}, {"grid": "huge"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(kw)

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_entropy_only_for_transpar(self):
        assert _small().entropy_weight == 0.1
        assert _small(method="dann").entropy_weight == 0.0
        assert _small(entropy_enabled=False).entropy_weight == 0.0


class TestStage1:
    def test_zero_shift_near_chance(self):
        cfg = TrainConfig(scenario=ShiftScenario(theta=0.0))
        data = prepare_data(cfg)
        taus = [run_stage1(cfg, data, probe_seed=s).tau for s in range(10)]
        assert abs(statistics.median(taus) - 0.75) <= 0.03, taus
        assert all(t <= 0.75 for t in taus)

    def test_separated_blobs(self):
        cfg = TrainConfig(scenario=ShiftScenario(kind="gaussian_translation", translation=(20.0, 0.0)))
        data = prepare_data(cfg)
        taus = [run_stage1(cfg, data, probe_seed=s).tau for s in range(10)]
        assert abs(statistics.median(taus) - 0.4655) <= 0.02, taus

    def test_ratio_file_bytes(self, tmp_path):
        cfg = _small()
        run_stage1(cfg, out_path=tmp_path / "a.json")
        run_stage1(cfg, out_path=tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestEvaluate:
    def _data(self):
        return prepare_data(_small())

    def test_all_correct_and_complement(self):
        data = self._data()
        net = init_network(NetConfig(hidden=4), seed=0)
        net.params["c.w"][...] = 0.0
        net.params["c.b"][...] = [1.0, 0.0]
        ds = data.source_test
        zeros = ds.with_x(ds.x)
        zeros.labels = np.zeros(len(ds), np.int64)
        assert evaluate(net, zeros) == 1.0
        zeros.labels = np.ones(len(ds), np.int64)
        assert evaluate(net, zeros) == 0.0

    def test_empty(self):
        ds = self._data().source_test
        with pytest.raises(ConfigurationError):
            evaluate(init_network(seed=0), DomainDataset(ds.x[:0], ds.labels[:0], "source", "test"))


class TestStage2:
    def test_untrained_is_chance(self):
        accs = []
        for seed in range(10):
            cfg = TrainConfig(scenario=ShiftScenario(theta=0.0), seed=seed, epochs=0, method="dann")
            result = run_stage2(cfg)
            assert result.rows == []
            accs.append(evaluate(result.net, prepare_data(cfg).target_test))
        assert abs(statistics.median(accs) - 0.5) <= 0.1, accs

    def test_source_only(self):
        result = run_stage2(_small(method="source_only"))
        assert all(r.loss_dom == 0.0 and r.tau is None for r in result.rows)
        assert all(0.0 <= r.acc_tgt <= 1.0 for r in result.rows)

    def test_transpar_requires_ratio(self):
        with pytest.raises(ConfigurationError):
            run_stage2(_small())

    def test_rows_and_counts(self):
        cfg = _small()
        ratio = run_stage1(cfg)
        result = run_stage2(cfg, ratio)
        assert [r.epoch for r in result.rows] == [1, 2, 3]
        row = result.rows[-1]
        assert row.tau == ratio.tau
        assert (row.m_f, row.m_c, row.m_d) == (16 * 2 + 16 + 16 * 16 + 16, 16 * 2 + 2, 16 * 8 + 8 + 9)
        assert row.m_f_t == int(ratio.tau * row.m_f)
        assert row.m_d_t == int((1 - ratio.tau) * row.m_d)
        assert result.label_reads == 0

    def test_guard_untouched(self):
        cfg = _small(method="dann")
        data = prepare_data(cfg)
        run_stage2(cfg, data=data)
        assert data.target_train.label_reads == 0

    def test_guard_trips(self):
        cfg = _small(method="dann", epochs=1)
        data = prepare_data(cfg)

        def peek(iteration, net, mask):
            data.target_train.y

        with pytest.raises(AssertionError):
            run_stage2(cfg, data=data, on_step=peek)

    def test_degenerate_matches_dann(self):
        base = _small(epochs=4, alpha=0.0)
        dann = run_stage2(replace(base, method="dann"))
        tp = run_stage2(replace(base, tau_override=1.0, dd_adversarial=False))
        for a, b in zip(dann.rows, tp.rows):
            assert abs(a.loss_src - b.loss_src) <= 1e-9
            assert abs(a.loss_dom - b.loss_dom) <= 1e-9
        assert np.max(np.abs(dann.net.flat - tp.net.flat)) <= 1e-9

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_keeps_rows(self):
        cfg = _small(method="dann", lr=1e200, epochs=3)
        with pytest.raises(NumericFailure) as info:
            run_stage2(cfg)
        assert isinstance(info.value.rows, list)

    def test_one_shot_last_zeroes(self):
        cfg = _small(mode="one_shot_last")
        result = run_stage2(cfg, run_stage1(cfg))
        f_t = result.rows[-1].m_f_t
        assert np.count_nonzero(result.net.weights("FE")) <= f_t
        assert result.rows[-1].decay_norm_f == 0.0


class TestSuite:
    def test_cells(self):
        cells = suite_cells()
        for scope in SCOPE_CELLS:
            assert f"transpar_dann/scope={scope}/mode=iterative/criterion=both" in cells
        for mode in ("one_shot_start", "one_shot_last"):
            assert f"transpar_dann/scope=FE+SH+DD/mode={mode}/criterion=both" in cells
        for crit in ("weight_only", "grad_only"):
            assert f"transpar_dann/scope=FE+SH+DD/mode=iterative/criterion={crit}" in cells
        assert {"source_only", "dann", FULL_CELL} <= set(cells)
        assert len(suite_cells("full")) == 2 + 7 * 3 * 3

    def test_needs_two_seeds(self):
        with pytest.raises(ConfigurationError):
            run_suite(_small(), [0])

    def test_minimal_grid_complete(self, tmp_path):
        cells = {k: v for k, v in suite_cells().items() if k in ("source_only", "dann", FULL_CELL)}
        cfg = _small(epochs=2)
        report = run_suite(cfg, list(range(10)), cells=cells)
        assert len(report.runs) == 30 and report.complete()
        paths = emit_reports(report, tmp_path)
        rows = list(csv.reader(io.StringIO(paths["metrics"].read_text())))
        assert rows[0] == METRICS_COLUMNS
        assert rows[0] == ("run_id,epoch,loss_src,loss_ent,loss_dom,acc_src,acc_tgt,tau,m_f,m_f_t,"
                           "m_c,m_c_t,m_d,m_d_t,decay_norm_f,decay_norm_c,decay_norm_d").split(",")
        assert len(rows) - 1 == 30 * 2
        suite = json.loads(paths["suite"].read_text())
        assert set(suite["cells"]) == set(cells)
        assert "source_only" in paths["summary"].read_text()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failure_recorded(self):
        cells = {"dann": {"method": "dann"}, "boom": {"method": "dann", "lr": 1e200}}
        report = run_suite(_small(epochs=1), [0, 1], cells=cells)
        assert report.complete()
        assert {r.status for r in report.cell_runs("boom")} == {"failed"}
        assert {r.status for r in report.cell_runs("dann")} == {"ok"}

    def test_unwritable_dir(self, tmp_path):
        cells = {"dann": {"method": "dann"}}
        report = run_suite(_small(epochs=1), [0, 1], cells=cells)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ConfigurationError):
            emit_reports(report, blocker / "sub")

    def test_parallel_matches_serial(self):
        cells = {k: v for k, v in suite_cells().items() if k in ("dann", FULL_CELL)}
        a = run_suite(_small(epochs=1), [0, 1], cells=cells)
        b = run_suite(_small(epochs=1), [0, 1], cells=cells, jobs=2)
        assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
        assert json.dumps(a.aggregates(), sort_keys=True) == json.dumps(b.aggregates(), sort_keys=True)
