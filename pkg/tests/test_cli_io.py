import csv
import json
import math

import numpy as np
import pytest

from welfare_mte import __version__
from welfare_mte.cli import main
from welfare_mte.config import load_config, parse_window
from welfare_mte.dataset import Dataset, read_dataset, write_dataset
from welfare_mte.errors import ConfigurationError, ParseError, SchemaError

WORLD_EST = """\
estimator:
  x_terms: [const, age, black]
  z_terms: [zindex]
  beta_terms: [const, age, black]
  lambda_terms: []
  wage_terms: [const, age, black]
scenarios:
  - label: base
    p_target: 0.45
"""


def write(path, text):
    path.write_text(text)
    return path


def simulate(tmp_path, world="homogeneous", seed=2, n_states=25, agents=200):
    cfg = write(tmp_path / "sim.yaml", f"mode: simulate\nseed: {seed}\npopulation:\n  world: {world}\n"
                                      f"  n_states: {n_states}\n  agents_per_state: {agents}\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")]) == 0
    return tmp_path / "sim" / "dataset.csv"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    return simulate(tmp_path_factory.mktemp("sim"))


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        lw = rng.normal(size=5)
        lw[2] = np.nan
        d = Dataset({"hours": np.array([0, 10.5, 40, 1e-7, 3.0]), "log_wage": lw, "x": rng.normal(size=5) * 1e6})
        write_dataset(d, tmp_path / "d.csv")
        back = read_dataset(tmp_path / "d.csv", validate=False)
        assert back.names == d.names
        for c in d.names:
            assert np.array_equal(back[c], d[c], equal_nan=True)

    def test_simulated_file_validates(self, sim_csv):
        d = read_dataset(sim_csv)
        assert d.n == 5000 and "z1" in d.instrument_names and d.oracle_names

    def _edit(self, src, dst, row, col, value):
        rows = list(csv.reader(open(src)))
        j = rows[0].index(col)
        rows[row - 1][j] = value
        with open(dst, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        return dst

    def test_participates_must_be_binary(self, sim_csv, tmp_path):
        p = self._edit(sim_csv, tmp_path / "bad.csv", 4, "participates", "2")
        with pytest.raises(SchemaError, match="row 2"):
            read_dataset(p)

    def test_non_numeric_cell(self, sim_csv, tmp_path):
        p = self._edit(sim_csv, tmp_path / "bad.csv", 7, "age", "forty")
        with pytest.raises(ParseError) as exc:
            read_dataset(p)
        assert exc.value.row == 7 and exc.value.column == "age"

    def test_empty_required_cell(self, sim_csv, tmp_path):
        p = self._edit(sim_csv, tmp_path / "bad.csv", 3, "hours", "")
        with pytest.raises(ParseError) as exc:
            read_dataset(p)
        assert exc.value.row == 3 and exc.value.column == "hours"

    def test_empty_wage_is_missing(self, sim_csv, tmp_path):
        p = self._edit(sim_csv, tmp_path / "ok.csv", 3, "log_wage", "")
        assert math.isnan(read_dataset(p)["log_wage"][1])

    def test_ragged_row(self, tmp_path):
        p = write(tmp_path / "r.csv", "a,b\n1,2\n3\n")
        with pytest.raises(ParseError) as exc:
            read_dataset(p, validate=False)
        assert exc.value.row == 3

    def test_missing_column(self, tmp_path):
        with pytest.raises(SchemaError, match="cluster_id"):
            read_dataset(write(tmp_path / "m.csv", "hours,participates\n1,0\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            read_dataset(write(tmp_path / "e.csv", ""))


class TestConfig:
    def test_window(self):
        assert parse_window("0.2:0.7") == (0.2, 0.7)
        for bad in ("0.7:0.2", "a:b", "0.5"):
            with pytest.raises(ConfigurationError):
                parse_window(bad)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(write(tmp_path / "c.yaml", "mode: estimate\nestimatr: {}\n"))

    def test_shipped_configs_load(self):
        from pathlib import Path

        for p in sorted((Path(__file__).parents[1] / "configs").glob("*.yaml")):
            load_config(p)


class TestCommands:
    def test_version(self, capsys):
        with pytest.raises(SystemExit):
            main(["--version"])
        assert __version__ in capsys.readouterr().out

    def test_homogeneous_curve_flat(self, sim_csv, tmp_path):
        cfg = write(tmp_path / "est.yaml", WORLD_EST)
        assert main(["estimate", "--config", str(cfg), "--input", str(sim_csv), "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "mte_curve.csv")
        mte = np.array([float(r["mte"]) for r in rows])
        assert len(rows) == 41 and np.all(np.abs(mte + 8) < 6)
        for name in ("first_stage.csv", "second_stage.csv", "diagnostics.csv", "mte_curve.svg"):
            assert (tmp_path / "o" / name).exists()

    def test_counterfactual_table(self, sim_csv, tmp_path):
        cfg = write(tmp_path / "est.yaml", WORLD_EST)
        out = tmp_path / "cf"
        assert main(["counterfactual", "--config", str(cfg), "--input", str(sim_csv), "--out", str(out), "--boot", "60"]) == 0
        (row,) = read_csv(out / "reform_table.csv")
        assert row["scenario"] == "base" and float(row["lo95"]) <= float(row["mte"]) <= float(row["hi95"])

    def test_missing_input_leaves_nothing(self, tmp_path, capsys):
        out = tmp_path / "never"
        assert main(["estimate", "--input", str(tmp_path / "nope.csv"), "--out", str(out)]) == 1
        rec = json.loads(capsys.readouterr().err)
        assert rec["status"] == "error" and rec["stage"] == "read"
        assert not out.exists()

    def test_failed_stage_leaves_nothing(self, sim_csv, tmp_path, capsys):
        # the default estimator needs a varying guarantee, which the world lacks
        out = tmp_path / "never"
        assert main(["estimate", "--input", str(sim_csv), "--out", str(out)]) == 1
        rec = json.loads(capsys.readouterr().err)
        assert rec["stage"] == "estimate" and rec["error"] == "RankDeficiencyError"
        assert not out.exists()

    def test_bad_window_flag(self, sim_csv, tmp_path, capsys):
        assert main(["estimate", "--input", str(sim_csv), "--window", "0.8:0.2", "--out", str(tmp_path / "x")]) == 1
        assert json.loads(capsys.readouterr().err)["stage"] == "config"

    def test_simulate_needs_population(self, tmp_path, capsys):
        assert main(["simulate", "--out", str(tmp_path / "x")]) == 1
        assert json.loads(capsys.readouterr().err)["error"] == "ConfigurationError"


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_reruns_byte_identical(sim_csv, tmp_path, monkeypatch):
    cfg = write(tmp_path / "est.yaml", WORLD_EST)
    runs = []
    for k, workers in enumerate(("1", "1", "2")):
        monkeypatch.setenv("WELFARE_MTE_WORKERS", workers)
        out = tmp_path / f"run{k}"
        assert main(["counterfactual", "--config", str(cfg), "--input", str(sim_csv), "--out", str(out),
                     "--boot", "60", "--seed", "7"]) == 0
        runs.append(_snapshot(out))
    assert runs[0] == runs[1] == runs[2]


def test_simulate_byte_identical(tmp_path):
    snaps = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        snaps.append(_snapshot(simulate(tmp_path / name, world="u_shaped", seed=5).parent))
    assert snaps[0] == snaps[1]
