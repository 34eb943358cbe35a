import numpy as np
import pytest

from dwff import pipeline
from dwff.decoder import FusionMode
from dwff.metrics import read_report_csv
from conftest import small_config


def test_generate_is_deterministic(tmp_path):
    a, b = small_config(tmp_path / "a"), small_config(tmp_path / "b")
    pipeline.generate_dataset(a, a.data_dir)
    pipeline.generate_dataset(b, b.data_dir)
    files_a = sorted(q.relative_to(tmp_path / "a") for q in (tmp_path / "a").rglob("*") if q.is_file())
    files_b = sorted(q.relative_to(tmp_path / "b") for q in (tmp_path / "b").rglob("*") if q.is_file())
    assert files_a == files_b and len(files_a) > 8 * 5
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_seed_changes_data(tmp_path):
    a, b = small_config(tmp_path / "a"), small_config(tmp_path / "b", seed=1)
    sa, la = pipeline.make_scene_stack(a, 0)
    sb, lb = pipeline.make_scene_stack(b, 0)
    assert not np.array_equal(sa.levels[0].data, sb.levels[0].data)


def test_collision_refused(small_data):
    with pytest.raises(pipeline.PathCollisionError):
        pipeline.generate_dataset(small_data, small_data.data_dir)


def test_plan_steps(tmp_path):
    cfg = small_config(tmp_path, train_batch=4, train_accum=2, train_epochs=3)
    assert pipeline.plan_steps(cfg, 6) == (1, 3)
    assert pipeline.plan_steps(cfg.replace(train_steps=10), 6) == (1, 10)


def test_train_writes_logs_and_checkpoints(small_data, tmp_path):
    res = pipeline.train(small_data, tmp_path)
    assert res["steps"] == 4 and len(res["loss_rows"]) == 4
    header = (tmp_path / "loss_log.csv").read_text().splitlines()[0]
    assert header == "step,dice,focal,seg,l2,entropy,total"
    for tag in ("final", "best", "last_good"):
        assert (tmp_path / f"checkpoint_{tag}.dwf").exists()
    rep = pipeline.run_eval(small_data, tmp_path / "checkpoint_final", tmp_path / "ev")
    assert read_report_csv((tmp_path / "ev" / "metrics.csv").read_text()) == rep


def test_train_restartable_from_checkpoint(small_data, tmp_path):
    res = pipeline.train(small_data, tmp_path)
    params, manifest = pipeline.load_params(small_data, tmp_path / "checkpoint_final")
    assert manifest["meta"]["mode"] == "DWFF" and manifest["optimizer_step"] == res["steps"]
    for n in params.names():
        assert params[n].data.tobytes() == res["params"][n].data.tobytes()


def test_nwff_training_leaves_unused_levels(small_data, tmp_path):
    res = pipeline.train(small_data, tmp_path, FusionMode("NWFF", 1))
    from dwff.decoder import DecoderParams

    init = DecoderParams.init(small_data.decoder_config(), small_data.seed)
    assert res["params"]["proj.0.weight"].data.tobytes() == init["proj.0.weight"].data.tobytes()
    assert res["params"]["proj.3.weight"].data.tobytes() != init["proj.3.weight"].data.tobytes()


def test_ablation_final_losses_match_logs(small_data, tmp_path):
    modes = [FusionMode("NWFF", 1), FusionMode("DWFF")]
    res = pipeline.run_ablation(small_data, tmp_path, modes)
    for mode in ("NWFF-1", "DWFF"):
        last = (tmp_path / mode / "loss_log.csv").read_text().splitlines()[-1].split(",")
        assert res["losses"][mode] == (float(last[6]), float(last[3]))
    rows = (tmp_path / "final_losses.csv").read_text().splitlines()
    assert rows[0] == "method,final_total,final_seg" and len(rows) == 3
