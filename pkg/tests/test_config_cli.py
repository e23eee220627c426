import csv
import dataclasses
import json

import numpy as np
import pytest

from qflsim import config as cfgmod
from qflsim.attacks import AttackConfig
from qflsim.cli import (
    RESULT_HEADER,
    SUMMARY_HEADER,
    ExperimentGrid,
    GridResult,
    emit_results,
    fmt,
    main,
    run_grid,
)
from qflsim.data import DatasetSpec, load_dataset
from qflsim.federation import FederationConfig
from qflsim.qsim import ConfigurationError

BLOBS = DatasetSpec("synthetic_blobs", blob_classes=3, blob_per_class=40, blob_dim=6, test_size=30)
BASE = FederationConfig(n_clients=5, rounds=2, dataset=BLOBS, n_data_wires=3, entangling_depth=2, lr=1e-2)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfigFile:
    def test_parse(self):
        entries = cfgmod.parse_text("federation.q = 0.2  # attackers\n\n# comment\nattack.kind = pauli\n")
        assert entries == {"federation.q": "0.2", "attack.kind": "pauli"}

    def test_build(self):
        entries = cfgmod.parse_text(
            "federation.n_clients = 7\nfederation.audit_clip = true\nattack.kind = bitflip\nattack.period = 4\n"
            "attack.wire_set = 0, 2\ncrafting.top_k = 1\ndefense.rule = mkrum\ndefense.krum_f = 2\n"
            "dataset.id = synthetic_blobs\nfederation.shots = none\n")
        cfg = cfgmod.build_config(entries)
        assert cfg.n_clients == 7 and cfg.audit_clip is True and cfg.shots is None
        assert cfg.attack.kind == "bitflip" and cfg.attack.period == 4 and cfg.attack.wire_set == (0, 2)
        assert cfg.crafting.top_k == 1 and cfg.defense == "mkrum" and cfg.krum_f == 2
        assert cfg.dataset.id == "synthetic_blobs"

    @pytest.mark.parametrize("text", ["federation.q 0.2", "q = 0.2", "federation.bogus = 1", "weird.key = 1",
                                      "federation.n_clients = five", "defense.nope = 1", "federation.attack = x"])
    def test_errors(self, text):
        with pytest.raises(ConfigurationError):
            cfgmod.build_config(cfgmod.parse_text(text))

    def test_grid_entries(self):
        entries = cfgmod.parse_text("grid.q_values = 0.0, 0.2\ngrid.seeds = 1,2\n")
        assert cfgmod.grid_entries(entries) == {"q_values": ["0.0", "0.2"], "seeds": ["1", "2"]}

    def test_echo_round_trip(self):
        cfg = dataclasses.replace(FederationConfig(q=0.2, defense="krum"), attack=AttackConfig("pauli", period=5))
        echoed = cfgmod.echo(cfg)
        assert echoed["federation.q"] == 0.2 and echoed["defense.rule"] == "krum"
        assert echoed["attack.period"] == 5
        text = "\n".join(f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}" for k, v in echoed.items())
        assert cfgmod.build_config(cfgmod.parse_text(text)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            cfgmod.read_file(tmp_path / "nope.cfg")


class TestFormatting:
    def test_fmt(self):
        assert fmt(None) == "" and fmt(0.1) == "0.1" and fmt(np.float64(1 / 3)) == repr(1 / 3)
        assert fmt(3) == "3" and fmt(float("nan")) == "nan"

    def test_grid_order(self):
        grid = ExperimentGrid(("grover", "pauli"), ("fedavg", "krum"), (0.0, 0.2), (0.9,), (0,))
        assert grid.cells()[:3] == [("grover", "fedavg", 0.0, 0.9), ("grover", "fedavg", 0.2, 0.9),
                                    ("grover", "krum", 0.0, 0.9)]


@pytest.fixture(scope="module")
def data():
    return load_dataset(BLOBS, 0)


@pytest.fixture(scope="module")
def grid_result(data):
    grid = ExperimentGrid(("grover",), ("fedavg", "mkrum"), (0.0, 0.2), (0.9,), (0, 1))
    return run_grid(grid, BASE, data)


class TestGrid:
    def test_row_count(self, grid_result):
        assert len(grid_result.rows) == BASE.rounds * 2 * 4

    def test_baseline_rows(self, grid_result):
        base = [c for c in grid_result.summary if c.q == 0.0]
        assert all(c.attack == "none" and c.accuracy_drop == 0.0 for c in base)

    def test_summary_means(self, grid_result):
        for cell in grid_result.summary:
            rows = [r for r in grid_result.rows
                    if (r.attack, r.defense, r.q, r.rho) == (cell.attack, cell.defense, cell.q, cell.rho)]
            assert len(rows) == cell.n_rows
            assert abs(np.mean([r.accuracy for r in rows]) - cell.mean_accuracy) <= 1e-9
            assert abs(np.mean([r.loss for r in rows]) - cell.mean_loss) <= 1e-9

    def test_drop_against_own_baseline(self, grid_result):
        for cell in grid_result.summary:
            assert cell.accuracy_drop == pytest.approx(cell.baseline_final_accuracy - cell.final_accuracy_mean)

    def test_record_names(self, grid_result):
        assert {c.defense for c in grid_result.summary} == {"fedavg", "mkrum"}

    def test_single_cell(self, data, tmp_path):
        res = run_grid(ExperimentGrid(("grover",), ("fedavg",), (0.2,), (0.9,), (0,)),
                       dataclasses.replace(BASE, rounds=1), data)
        paths = emit_results(res, tmp_path)
        assert len(read_csv(paths["results"])) == 2 and len(read_csv(paths["summary"])) == 2
        assert json.loads(paths["manifest"].read_text())["config"]["federation.rounds"] == 1

    def test_failing_cell_recorded(self, data):
        # krum with f=1 needs n >= 4; two clients cannot satisfy it
        base = dataclasses.replace(BASE, n_clients=2, rounds=1)
        res = run_grid(ExperimentGrid(("grover",), ("krum", "fedavg"), (0.5,), (0.9,), (0,)), base, data)
        status = {c.defense: c.status for c in res.summary}
        assert status["krum"].startswith("error") and status["fedavg"] == "ok"


class TestEmit:
    def test_empty(self, tmp_path):
        paths = emit_results(GridResult(), tmp_path)
        assert paths["results"].read_text() == ",".join(RESULT_HEADER) + "\n"
        assert paths["summary"].read_text() == ",".join(SUMMARY_HEADER) + "\n"

    def test_headers(self, grid_result, tmp_path):
        paths = emit_results(grid_result, tmp_path)
        assert read_csv(paths["results"])[0] == list(RESULT_HEADER)
        assert len(paths["log"].read_text().splitlines()) == len(grid_result.rows)

    def test_deterministic(self, data, tmp_path):
        grid = ExperimentGrid(("pauli",), ("fedavg",), (0.0, 0.2), (0.9,), (0,))
        for name in ("a", "b"):
            emit_results(run_grid(grid, BASE, data), tmp_path / name)
        for f in ("results.csv", "summary.csv", "manifest.json", "rounds.jsonl"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_results(GridResult(), blocker / "sub")


class TestMain:
    def test_run(self, tmp_path, capsys):
        code = main(["run", "--dataset", "synthetic_blobs", "--attack", "grover", "--q", "0.2", "--rounds", "1",
                     "--clients", "4", "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "results.csv")
        assert rows[0] == list(RESULT_HEADER) and len(rows) == 2
        assert "wrote" in capsys.readouterr().out

    def test_config_file_and_override(self, tmp_path):
        conf = tmp_path / "c.cfg"
        conf.write_text("federation.rounds = 3\nfederation.n_clients = 4\ndataset.id = synthetic_blobs\n"
                        "grid.q_values = 0.25\n")
        assert main(["run", "--config", str(conf), "--rounds", "1", "--out", str(tmp_path / "o")]) == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["federation.rounds"] == 1
        assert manifest["grid"]["q_values"] == [0.25]

    def test_check(self, capsys):
        assert main(["check", "--cases", "5"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 8

    def test_partition_stats(self, capsys):
        assert main(["partition-stats", "--dataset", "synthetic_blobs", "--clients", "3"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("client,n,class_0") and len(out) == 5

    def test_bad_config(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
        assert "error" in capsys.readouterr().err
