import numpy as np
import pytest

from se3flow.cli import main
from se3flow.model import load_checkpoint
from se3flow.tasks import load_dataset


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["generate", "--task", "rotating_triangle", "--n", "4", "--n-test", "2",
                 "--seed", "3407", "--out", str(out)]) == 0
    return out


def _train1(data_dir, out, *extra):
    return main(["train", "--stage", "1", "--dataset", str(data_dir / "rotating_triangle_train.bin"),
                 "--epochs", "2", "--lr", "0.02", "--batch-size", "8", "--hidden", "8",
                 "--out", str(out), *extra])


def test_generate(data_dir, tmp_path):
    ds = load_dataset(data_dir / "rotating_triangle_train.bin")
    assert len(ds) == 4 and ds[0].cloud.shape == (100, 3)
    other = tmp_path / "again"
    main(["generate", "--task", "rotating_triangle", "--n", "4", "--n-test", "2",
          "--seed", "3407", "--out", str(other)])
    for name in ("rotating_triangle_train.bin", "rotating_triangle_test.bin"):
        assert (other / name).read_bytes() == (data_dir / name).read_bytes()


def test_generate_minimal(tmp_path):
    assert main(["generate", "--task", "painting", "--n", "1", "--n-test", "1",
                 "--out", str(tmp_path)]) == 0
    assert len(load_dataset(tmp_path / "painting_train.bin")) == 1


def test_train_deterministic_and_outputs(data_dir, tmp_path):
    assert _train1(data_dir, tmp_path / "a") == 0
    assert _train1(data_dir, tmp_path / "b") == 0
    a, b = (tmp_path / d / "flow1.ckpt" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    model = load_checkpoint(a)
    assert model.train_config["task"] == "rotating_triangle"
    assert (tmp_path / "a" / "flow1_loss.csv").read_text().startswith("epoch,mean_loss,lr")
    assert "[flow1]" in (tmp_path / "a" / "flow1_effective.ini").read_text()


def test_train_zero_epochs_writes_init(data_dir, tmp_path):
    assert main(["train", "--stage", "1", "--dataset",
                 str(data_dir / "rotating_triangle_train.bin"),
                 "--epochs", "0", "--hidden", "8", "--out", str(tmp_path)]) == 0
    assert load_checkpoint(tmp_path / "flow1.ckpt").n_params > 0


def test_config_file_and_flag_override(data_dir, tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(f"""[experiment]
train = {data_dir / 'rotating_triangle_train.bin'}
out = {tmp_path / 'runs'}

[flow1]
epochs = 5
learning_rate = 0.01
hidden = 6
batch_size = 16
""")
    assert main(["train", "--config", str(ini), "--stage", "1", "--epochs", "1"]) == 0
    model = load_checkpoint(tmp_path / "runs" / "flow1.ckpt")
    assert model.train_config["epochs"] == 1
    assert model.train_config["learning_rate"] == 0.01
    assert model.layer_sizes[1] == 6
    ini.write_text("[flow1]\nwarp_speed = 9\n")
    assert main(["train", "--config", str(ini), "--stage", "1"]) == 2


def test_stage2_pipeline_and_eval(data_dir, tmp_path):
    runs = tmp_path / "runs"
    assert _train1(data_dir, runs) == 0
    train_bin = str(data_dir / "rotating_triangle_train.bin")
    assert main(["synthesize-reflow", "--checkpoint", str(runs / "flow1.ckpt"), "--dataset",
                 train_bin, "--n", "6", "--steps", "3", "--out", str(runs / "r.npz")]) == 0
    assert main(["train", "--stage", "2", "--dataset", train_bin, "--flow1",
                 str(runs / "flow1.ckpt"), "--reflow", str(runs / "r.npz"), "--epochs", "2",
                 "--lr", "0.01", "--batch-size", "8", "--out", str(runs)]) == 0
    assert load_checkpoint(runs / "flow2.ckpt").stage == 2
    test_bin = str(data_dir / "rotating_triangle_test.bin")
    ev_args = ["eval", "--checkpoint", str(runs / "flow2.ckpt"), "--dataset", test_bin,
               "--steps", "1,2", "--seeds", "3407..3408"]
    assert main(ev_args + ["--out", str(tmp_path / "e1")]) == 0
    assert main(ev_args + ["--out", str(tmp_path / "e2")]) == 0
    for name in ("per_action.csv", "aggregate.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    rows = (tmp_path / "e1" / "aggregate.csv").read_text().splitlines()
    assert rows[0] == "task,model,steps,mean,std,n" and len(rows) == 3


def test_stage2_requires_stage1(data_dir, tmp_path):
    assert main(["train", "--stage", "2", "--dataset",
                 str(data_dir / "rotating_triangle_train.bin"), "--out", str(tmp_path)]) == 2


def test_task_mismatch_rejected(data_dir, tmp_path):
    _train1(data_dir, tmp_path)
    main(["generate", "--task", "painting", "--n", "1", "--n-test", "1", "--out", str(tmp_path)])
    assert main(["eval", "--checkpoint", str(tmp_path / "flow1.ckpt"), "--dataset",
                 str(tmp_path / "painting_test.bin"), "--steps", "1", "--seeds", "1"]) == 2


def test_usage_errors(capsys):
    assert_exit(["frobnicate"], 1)
    assert_exit(["generate"], 1)
    assert_exit(["eval", "--checkpoint", "x", "--steps", "a,b"], 1)


def assert_exit(argv, code):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == code


def test_missing_files(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--dataset", str(tmp_path / "none.bin")]) == 2


def test_import_external(tmp_path, capsys):
    csv = tmp_path / "t1.csv"
    csv.write_text("door_opening,ET-SEED,,,2.360\ndoor_opening,Flow 2,,,0.450\n")
    assert main(["import-external", "--csv", str(csv), "--out", str(tmp_path / "t.txt")]) == 0
    first = (tmp_path / "t.txt").read_bytes()
    main(["import-external", "--csv", str(csv), "--out", str(tmp_path / "t.txt")])
    assert (tmp_path / "t.txt").read_bytes() == first
    assert b"2.360" in first
    csv.write_text("door_opening,2.360\n")
    assert main(["import-external", "--csv", str(csv)]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SE3FLOW_OUTPUT_ROOT", str(tmp_path))
    assert main(["generate", "--task", "door_opening", "--n", "1", "--n-test", "1"]) == 0
    assert (tmp_path / "data" / "door_opening_train.bin").exists()


def test_numeric_failure_exit_code(data_dir, tmp_path):
    from se3flow.model import DriftModel, save_checkpoint

    model = DriftModel.initialize((4,), np.random.default_rng(0),
                                  train_config={"task": "rotating_triangle"})
    model.weights[0][:] = np.nan
    save_checkpoint(model, tmp_path / "nan.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "nan.ckpt"), "--dataset",
                 str(data_dir / "rotating_triangle_test.bin"), "--steps", "2",
                 "--seeds", "1"]) == 3
