import pytest

from dwff.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run


def write_cfg(path, root, **extra):
    lines = {
        "out": str(root / "run"),
        "data.dir": str(root / "data"),
        "data.n_scenes": "8",
        "data.h_p": "8",
        "data.w_p": "8",
        "train.epochs": "1",
    }
    lines.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


def test_usage_errors(tmp_path, capsys):
    assert run([]) == EXIT_USAGE
    assert run(["bogus"]) == EXIT_USAGE
    assert run(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.colour = red\n")
    assert run(["train", "--config", str(bad)]) == EXIT_USAGE
    assert run(["gradcheck", "--mode", "XWFF"]) == EXIT_USAGE
    assert run(["train", "--seed", "-1"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_pipeline_commands(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "a.cfg", tmp_path)
    assert run(["gen-data", "--config", cfg]) == EXIT_OK
    assert run(["gen-data", "--config", cfg]) == EXIT_RUNTIME
    assert "--force" in capsys.readouterr().err
    assert run(["gen-data", "--config", cfg, "--force"]) == EXIT_OK
    assert run(["train", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "run" / "loss_log.csv").exists()
    assert run(["train", "--config", cfg]) == EXIT_RUNTIME
    assert run(["eval", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "run" / "metrics.csv").read_text().startswith("class,abbrev,")
    assert run(["entropy", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "run" / "entropy" / "histogram.svg").exists()
    assert run(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "nope")]) == EXIT_RUNTIME


def test_eval_rejects_mismatched_checkpoint(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "a.cfg", tmp_path)
    assert run(["gen-data", "--config", cfg]) == EXIT_OK
    assert run(["train", "--config", cfg]) == EXIT_OK
    other = write_cfg(tmp_path / "b.cfg", tmp_path, **{"model.c_fus": "16"})
    assert run(["eval", "--config", other, "--out", str(tmp_path / "ev")]) == EXIT_RUNTIME
    assert "checkpoint" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["DWFF", "NWFF-2"])
def test_gradcheck_tiny(tmp_path, capsys, mode):
    cfg = write_cfg(
        tmp_path / "g.cfg",
        tmp_path,
        **{"data.c_in": "3", "data.h_p": "3", "data.w_p": "3", "model.c_fus": "4", "model.groups": "2", "model.hidden": "5"},
    )
    assert run(["gradcheck", "--config", cfg, "--mode", mode]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_fail_exit_code(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path / "g.cfg",
        tmp_path,
        **{"data.c_in": "3", "data.h_p": "3", "data.w_p": "3", "model.c_fus": "4", "model.groups": "2", "model.hidden": "5",
           "gradcheck.tol": "1e-30"},
    )
    assert run(["gradcheck", "--config", cfg]) == EXIT_RUNTIME
    assert "FAIL" in capsys.readouterr().out
