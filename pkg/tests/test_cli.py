import json

import pytest

from aeris.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from aeris.datagen import load_dataset, load_manifest


@pytest.fixture(scope="module")
def shapes_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "shapes"
    assert main(["gen-data", "--n", "12", "--size", "64", "--seed", "1", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def checkpoint(shapes_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    args = ["train", "--data", str(shapes_dir), "--mode", "aeris", "--epochs", "1", "--batch-size", "4",
            "--scale-range", "1,2", "--out", str(out)]
    assert main(args) == EXIT_OK
    return out / "final.ckpt"


def test_gen_data_outputs(shapes_dir):
    assert (shapes_dir / "annotations.json").is_file() and (shapes_dir / "manifest.json").is_file()
    assert len(list((shapes_dir / "images").glob("*.png"))) == 12
    cfg = json.loads((shapes_dir / "config.json").read_text())
    assert cfg["n"] == 12 and cfg["seed"] == 1


def test_gen_data_zero_is_usage_error(tmp_path, capsys):
    assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_refuses_non_empty_out(shapes_dir):
    assert main(["gen-data", "--n", "2", "--out", str(shapes_dir)]) == EXIT_USAGE


def test_force_overwrites(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--n", "2", "--size", "64", "--out", str(out)]) == EXIT_OK
    assert main(["gen-data", "--n", "3", "--size", "64", "--out", str(out), "--force"]) == EXIT_OK
    assert len(load_dataset(out)) == 3


def test_unknown_flag_is_usage_error():
    assert main(["gen-data", "--bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_degrade_replay_bit_identical(shapes_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["degrade", "--src", str(shapes_dir), "--preset", "multi", "--seed", "7", "--out", str(out)]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for f in (a / "images").iterdir():
        assert f.read_bytes() == (b / "images" / f.name).read_bytes()


def test_degrade_noise25_manifest(shapes_dir, tmp_path):
    assert main(["degrade", "--src", str(shapes_dir), "--preset", "noise25", "--out", str(tmp_path / "n")]) == 0
    m = load_manifest(tmp_path / "n" / "manifest.json")
    assert {p.sigma for p in m.params.values()} == {25 / 255}


def test_degrade_missing_source_is_data_error(tmp_path):
    assert main(["degrade", "--src", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_bad_annotations_is_data_error(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "annotations.json").write_text("{not json")
    assert main(["degrade", "--src", str(src), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_train_writes_checkpoint_and_log(checkpoint):
    out = checkpoint.parent
    assert checkpoint.is_file()
    lines = (out / "train.log").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("iteration=0 ")
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train_config"]["mode"] == "aeris" and cfg["train_config"]["lam"] == 0.4
    assert cfg["train_config"]["optimizer"] == "adamw" and cfg["train_config"]["lr"] == 3e-3


def test_train_sgd_default_rate(shapes_dir, tmp_path):
    args = ["train", "--data", str(shapes_dir), "--optimizer", "sgd", "--epochs", "0", "--out", str(tmp_path / "s")]
    assert main(args) == EXIT_OK
    cfg = json.loads((tmp_path / "s" / "config.json").read_text())["train_config"]
    assert cfg["optimizer"] == "sgd" and cfg["lr"] == 0.02


def test_train_clean_never_degrades(shapes_dir, tmp_path, capsys):
    args = ["train", "--data", str(shapes_dir), "--mode", "clean", "--epochs", "1", "--batch-size", "4",
            "--out", str(tmp_path / "c")]
    assert main(args) == EXIT_OK
    assert "degradation calls=0" in capsys.readouterr().out


def test_train_mixed_mode_alias(shapes_dir, tmp_path):
    args = ["train", "--data", str(shapes_dir), "--mode", "deg+n", "--epochs", "0", "--out", str(tmp_path / "m")]
    assert main(args) == EXIT_OK
    assert json.loads((tmp_path / "m" / "config.json").read_text())["train_config"]["mode"] == "deg_plus_clean"


def test_config_file_and_override(shapes_dir, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochs": 0, "lambda": 0.7, "scale-range": [1, 3], "mode": "aeris"}))
    args = ["train", "--data", str(shapes_dir), "--config", str(conf), "--lambda", "0.9", "--out", str(tmp_path / "t")]
    assert main(args) == EXIT_OK
    resolved = json.loads((tmp_path / "t" / "config.json").read_text())["train_config"]
    assert resolved["lam"] == 0.9 and resolved["epochs"] == 0 and resolved["scale_range"] == [1, 3]


def test_config_unknown_key(shapes_dir, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochz": 1}))
    assert main(["train", "--data", str(shapes_dir), "--config", str(conf)]) == EXIT_USAGE


def test_output_root_env(shapes_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("AERIS_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["degrade", "--src", str(shapes_dir), "--preset", "down2"]) == EXIT_OK
    assert (tmp_path / "root" / "degraded-down2" / "manifest.json").is_file()


def test_eval_oracle(shapes_dir, tmp_path, capsys):
    deg = tmp_path / "deg"
    main(["degrade", "--src", str(shapes_dir), "--preset", "multi", "--out", str(deg)])
    capsys.readouterr()
    assert main(["eval", "--data", str(deg), "--oracle", "--out", str(tmp_path / "e")]) == EXIT_OK
    assert "AP    100.00" in capsys.readouterr().out
    assert (tmp_path / "e" / "results.csv").read_text().startswith("metric,value,bucket,ratio,seed")


def test_eval_missing_checkpoint_is_usage_error(shapes_dir, tmp_path):
    assert main(["eval", "--data", str(shapes_dir), "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_USAGE
    assert main(["eval", "--data", str(shapes_dir)]) == EXIT_USAGE


def test_eval_with_checkpoint(shapes_dir, checkpoint, tmp_path):
    deg = tmp_path / "deg"
    main(["degrade", "--src", str(shapes_dir), "--preset", "down2", "--out", str(deg)])
    assert main(["eval", "--data", str(deg), "--checkpoint", str(checkpoint)]) == EXIT_OK


def test_scale_curve(shapes_dir, tmp_path):
    deg = tmp_path / "deg"
    main(["degrade", "--src", str(shapes_dir), "--preset", "down2", "--out", str(deg)])
    out = tmp_path / "curve"
    assert main(["scale-curve", "--data", str(deg), "--oracle", "--ratios", "1,2", "--out", str(out)]) == EXIT_OK
    assert (out / "scale_curve.svg").is_file() and (out / "scale_curve.csv").is_file()


def test_bench(checkpoint, tmp_path, capsys):
    assert main(["bench", "--checkpoint", str(checkpoint), "--size", "64,64", "--runs", "5", "--warmup", "2",
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    assert "FPS median=" in capsys.readouterr().out
    r = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert r["n_runs"] == 5 and r["median"] > 0


def test_bench_twice_is_stable(checkpoint):
    from aeris.checkpoint import load_model
    from aeris.evaluation import fps_benchmark

    model, _ = load_model(checkpoint)
    # a discarded pass first; in a long-lived, memory-heavy process the allocator needs time to settle
    fps_benchmark(model, (64, 64), n_runs=50)
    a = fps_benchmark(model, (64, 64), n_runs=100)
    b = fps_benchmark(model, (64, 64), n_runs=100)
    assert abs(a["median"] - b["median"]) / max(a["median"], b["median"]) < 0.10


def test_bench_missing_checkpoint(tmp_path):
    assert main(["bench", "--checkpoint", str(tmp_path / "x.ckpt")]) == EXIT_USAGE
