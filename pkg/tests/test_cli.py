import csv
import io

import numpy as np
import pytest

from simexp.cli import main
from simexp.harness import SweepConfig


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(
        "master_seed = 5\nseeds = 1\nbetas = [0.5]\nn_obs = [300]\nn_exp = [20]\n"
        "n_eval = 10\nn_true = 6\nb_true = 6\nd_dense = 64\nd_psi = 6\nd_compress = 5\n"
        'methods = ["EXP_ONLY", "OBS_ONLY", "CVCI"]\n'
    )
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCli:
    def test_print_config_round_trip(self, tiny_config, capsys):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        code, out, _ = run(["print-config", "--config", tiny_config, "--master-seed", 9], capsys)
        assert code == 0
        cfg = SweepConfig.from_dict(tomllib.loads(out))
        assert cfg.master_seed == 9 and cfg.methods == ["EXP_ONLY", "OBS_ONLY", "CVCI"]

    def test_run_cell(self, tiny_config, capsys):
        argv = ["run-cell", "--config", tiny_config, "--beta", 0.5, "--n-obs", 300, "--n-exp", 20]
        code, out, _ = run(argv, capsys)
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [r["method"] for r in rows] == ["EXP_ONLY", "OBS_ONLY", "CVCI"]
        assert all(0 <= float(r["regret"]) <= 1 for r in rows)
        assert run(argv, capsys)[1] == out

    def test_generate(self, tiny_config, tmp_path, capsys):
        out_dir = tmp_path / "gen"
        argv = ["generate", "--config", tiny_config, "--out", out_dir, "--beta", 0.5, "--n-obs", 300, "--n-exp", 20]
        assert run(argv, capsys)[0] == 0
        with open(out_dir / "obs.csv") as fh:
            obs = list(csv.DictReader(fh))
        assert len(obs) == 300
        with open(out_dir / "truth.csv") as fh:
            truth = list(csv.DictReader(fh))
        assert len({r["eval_context"] for r in truth}) == 10
        assert all(0 <= float(r["q_true"]) <= 1 for r in truth)
        import scipy.sparse as sp

        assert sp.load_npz(out_dir / "exp_mediators.npz").shape[0] == 20

    def test_sweep_and_report(self, tiny_config, tmp_path, capsys):
        out_dir = tmp_path / "sw"
        code, out, _ = run(["sweep", "--config", tiny_config, "--out", out_dir], capsys)
        assert code == 0 and "3 reports" in out
        before = (out_dir / "aggregate.csv").read_bytes()
        (out_dir / "aggregate.csv").unlink()
        assert run(["report", "--out", out_dir], capsys)[0] == 0
        assert (out_dir / "aggregate.csv").read_bytes() == before

    def test_bad_config_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("methods = []\n")
        code, _, err = run(["print-config", "--config", bad], capsys)
        assert code == 2 and "empty method list" in err

    def test_missing_config_exit_code(self, tmp_path, capsys):
        code, _, err = run(["print-config", "--config", tmp_path / "nope.toml"], capsys)
        assert code == 2 and err.startswith("error:")

    def test_report_without_cells(self, tmp_path, capsys):
        assert run(["report", "--out", tmp_path], capsys)[0] == 1

    def test_coding_cell_needs_grid_values(self, tiny_config, capsys):
        with pytest.raises(SystemExit):
            main(["run-cell", "--config", str(tiny_config), "--mode", "coding"])
