import csv
import json
import math

import numpy as np
import pytest

from palign import cli
from palign.encoder_sim import PartialDataset
from palign.errors import ConfigError, ReportIOError
from palign.harness import (
    RESULTS_HEADER,
    SweepSpec,
    parse_config,
    run_sweep,
    summarize,
    write_report,
)
from palign.trainer import TrainConfig, build_problem

TINY_SWEEP = {
    "q_values": [0.3],
    "objectives": ["proden"],
    "alignment": "both",
    "seeds": [0],
    "base": {"epochs": 3},
    "world": {"C": 4, "d": 16, "e": 8, "M": 4, "M_h": 4, "shots": 6, "test_per_class": 10, "tau": 0.05},
}


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config("{}", env={})
        assert cfg == TrainConfig()
        assert (cfg.align.lam, cfg.align.T_prime, cfg.align.beta) == (0.5, 25, 1.0)
        assert (cfg.lr0, cfg.epochs, cfg.batch, cfg.world.M, cfg.world.shots) == (0.002, 50, 32, 16, 16)

    def test_q_out_of_range(self):
        with pytest.raises(ConfigError, match="q out of range"):
            parse_config('{"q": 1.5}', env={})

    def test_merge(self):
        cfg = parse_config('{"objective":"pico","align":{"lambda":0.7}}', env={})
        assert cfg.objective == "pico" and cfg.align.lam == 0.7
        assert cfg.align.T_prime == 25 and cfg.lr0 == 0.002

    @pytest.mark.parametrize(
        "doc, path",
        [('{"bogus": 1}', "bogus"), ('{"align": {"zeta": 1}}', "align.zeta"), ('{"epochs": "x"}', "epochs"),
         ('{"world": {"C": 2.5}}', "world.C"), ('{"use_alignment": 1}', "use_alignment")],
    )
    def test_errors_carry_path(self, doc, path):
        with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
            parse_config(doc, env={})

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_config("{not json", env={})

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"q": 0.1}')
        cfg = parse_config(str(path), overrides={"align.beta": 0.0, "world.tau": 0.03}, env={})
        assert (cfg.q, cfg.align.beta, cfg.world.tau) == (0.1, 0.0, 0.03)

    def test_env_seed(self):
        assert parse_config("{}", env={"PALIGN_SEED": "17"}).seed == 17
        spec = parse_config('{"seeds": [0, 1, 2]}', "sweep", env={"PALIGN_SEED": "10"})
        assert spec.seeds == (10, 11, 12)

    def test_sweep_defaults(self):
        spec = parse_config("{}", "sweep", env={})
        assert spec.q_values == (0.1, 0.3, 0.5) and len(spec.seeds) == 4
        with pytest.raises(ConfigError):
            parse_config('{"q_values": []}', "sweep", env={})


@pytest.fixture(scope="module")
def tiny_rows():
    return run_sweep(parse_config(TINY_SWEEP, "sweep", env={}), 1)


class TestSweep:
    def test_row_count(self, tiny_rows):
        assert len(tiny_rows) == 4
        assert [r.objective for r in tiny_rows] == ["proden", "proden", "supervised", "zeroshot"]
        assert all(0 <= r.final_test_acc <= 1 for r in tiny_rows)

    def test_count_formula(self):
        doc = dict(TINY_SWEEP, q_values=[0.1, 0.5], objectives=["cc", "cavl"], seeds=[0, 1])
        rows = run_sweep(parse_config(doc, "sweep", env={}), 1)
        assert len(rows) == 2 * 2 * 2 * 2 + 2 * 2

    def test_parallel_matches_serial(self, tiny_rows):
        doc = dict(TINY_SWEEP, objectives=["proden", "pico"], seeds=[0, 1])
        spec = parse_config(doc, "sweep", env={})
        serial = run_sweep(spec, 1)
        parallel = run_sweep(spec, 4)
        key = lambda r: r.run_id
        assert sorted(serial, key=key) == sorted(parallel, key=key)

    def test_paired_design(self):
        spec = parse_config(TINY_SWEEP, "sweep", env={})
        from palign.harness import sweep_jobs

        train = [j.cfg for j in sweep_jobs(spec) if j.kind == "train"]
        vanilla, aligned = train
        assert vanilla.use_alignment is False and aligned.use_alignment is True
        w0, d0, _ = build_problem(vanilla)
        w1, d1, _ = build_problem(aligned)
        assert w0.fingerprint() == w1.fingerprint()
        np.testing.assert_array_equal(d0.candidates, d1.candidates)
        np.testing.assert_array_equal(d0.train_x, d1.train_x)

    def test_failure_recorded(self):
        doc = dict(TINY_SWEEP, world=dict(TINY_SWEEP["world"], target_zs=[0.0, 0.05]))
        rows = run_sweep(parse_config(doc, "sweep", env={}), 1)
        assert all(r.error and "E_CALIBRATION" in r.error for r in rows)
        assert len(summarize(rows)["failures"]) == 4


class TestReport:
    def test_empty(self, tmp_path):
        with pytest.raises(ReportIOError, match="nothing to write"):
            write_report([], tmp_path)

    def test_files(self, tiny_rows, tmp_path):
        write_report(tiny_rows[:2], tmp_path)
        lines = (tmp_path / "results.csv").read_text().splitlines()
        assert lines[0] == ",".join(RESULTS_HEADER)
        assert len(lines) == 3
        assert len(list((tmp_path / "curves").glob("*.csv"))) == 2

    def test_summary_means(self, tiny_rows, tmp_path):
        write_report(tiny_rows, tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        rows = list(csv.DictReader(open(tmp_path / "results.csv")))
        for cell in summary["cells"]:
            accs = [float(r["final_test_acc"]) for r in rows
                    if r["objective"] == cell["objective"] and r["alignment"] == cell["alignment"]
                    and float(r["q"]) == cell["q"]]
            assert abs(cell["mean"] - sum(accs) / len(accs)) <= 1e-12

    def test_round_trip_floats(self, tiny_rows, tmp_path):
        write_report(tiny_rows, tmp_path)
        rows = list(csv.DictReader(open(tmp_path / "results.csv")))
        assert [float(r["final_test_acc"]) for r in rows] == [r.final_test_acc for r in tiny_rows]

    def test_byte_identical_rerun(self, tmp_path):
        spec = parse_config(TINY_SWEEP, "sweep", env={})
        write_report(run_sweep(spec, 1), tmp_path / "a")
        write_report(run_sweep(spec, 1), tmp_path / "b")
        for name in ("results.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestCLI:
    def _config(self, tmp_path, doc):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_sweep(self, tmp_path, capsys):
        cfg = self._config(tmp_path, TINY_SWEEP)
        assert cli.main(["sweep", "--config", cfg, "--parallel", "2", "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "results.csv").exists()

    def test_run_with_overrides(self, tmp_path, capsys):
        cfg = self._config(tmp_path, {"world": TINY_SWEEP["world"]})
        assert cli.main(["run", "--config", cfg, "--epochs=2", "--objective=cc", "--out", str(tmp_path / "r")]) == 0
        out = capsys.readouterr().out
        assert out.count("epoch ") == 2
        assert (tmp_path / "r" / "cc_q0.3_off_s0.csv").exists()

    def test_stats(self, tmp_path, capsys):
        cfg = self._config(tmp_path, {"q": 0.0, "world": TINY_SWEEP["world"]})
        assert cli.main(["stats", "--config", cfg, "--dump", str(tmp_path / "d.json")]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats == {"flip_rate": 0.0, "avg_set_size": 1.0, "coverage": 1.0}
        data = PartialDataset.load(tmp_path / "d.json")
        assert data.candidates.sum() == data.n_train

    def test_calibrate(self, tmp_path, capsys):
        cfg = self._config(tmp_path, {"world": {"target_zs": [0.6, 0.9]}})
        assert cli.main(["calibrate", "--config", cfg]) == 0
        out = json.loads(capsys.readouterr().out)
        assert 0.0 <= out["sigma_img"] <= 4.0

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck", "--trials", "2"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["run", "--config", '{"q": 2}']) == 2
        assert "E_CONFIG" in capsys.readouterr().err

    def test_bad_override(self):
        assert cli.main(["run", "--epochs", "3"]) == 2
