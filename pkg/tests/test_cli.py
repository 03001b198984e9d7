import json
import os

import numpy as np
import pytest

from glare.cli import main, parse_k_list, resolve_config
from glare.errors import UsageError
from glare.report import read_jsonl

TRAIN_ARGS = ["--epochs", "2", "--lr", "1e-3", "--k-regions", "4",
              "--set", "model.fine_hidden=8", "--set", "model.fine_out=8",
              "--set", "model.region_hidden=8", "--set", "model.region_out=8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "d.jsonl")
    assert main(["synth", "--classes", "3", "--per-class", "8", "--landmarks", "12", "--seed", "1",
                 "--out", path]) == 0
    return path


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    assert main(["train", "--data", data, "--out", out, "--seed", "2"] + TRAIN_ARGS) == 0
    return out


def test_synth_counts_and_determinism(tmp_path, capsys):
    a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    assert main(["synth", "--classes", "7", "--per-class", "200", "--seed", "1", "--out", a]) == 0
    assert main(["synth", "--classes", "7", "--per-class", "200", "--seed", "1", "--out", b]) == 0
    with open(a) as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 1 + 1400
    assert open(a, "rb").read() == open(b, "rb").read()
    assert os.path.exists(a + ".config.ini")


def test_synth_bad_count_is_usage_error(tmp_path):
    assert main(["synth", "--per-class", "0", "--out", str(tmp_path / "x.jsonl")]) == 2


def test_train_outputs(trained, capsys):
    hist = read_jsonl(os.path.join(trained, "history.jsonl"))
    assert [r["epoch"] for r in hist] == [1, 2]
    assert os.path.exists(os.path.join(trained, "checkpoint.json"))
    assert os.path.exists(os.path.join(trained, "config.ini"))


def test_train_prints_param_count(data, tmp_path, capsys):
    main(["train", "--data", data, "--out", str(tmp_path)] + TRAIN_ARGS)
    assert capsys.readouterr().out.startswith("param_count ")


def test_train_rerun_is_byte_identical(data, trained, tmp_path):
    again = str(tmp_path / "again")
    assert main(["train", "--config", os.path.join(trained, "config.ini"), "--out", again]) == 0
    for name in ("checkpoint.json", "history.jsonl"):
        assert open(os.path.join(trained, name), "rb").read() == open(os.path.join(again, name), "rb").read()


def test_train_lr_zero_keeps_init(data, tmp_path):
    from glare.model import checkpoint_loads, init_params
    from glare.seeding import subseed
    out = str(tmp_path)
    assert main(["train", "--data", data, "--out", out, "--seed", "4"] + TRAIN_ARGS + ["--lr", "0"]) == 0
    model = checkpoint_loads(open(os.path.join(out, "checkpoint.json")).read())
    assert np.array_equal(model.params.flat, init_params(model.config, subseed(4, "init")).flat)


def test_train_missing_dataset_is_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 3


def test_train_class_conflict_is_usage_error(data, tmp_path):
    assert main(["train", "--data", data, "--out", str(tmp_path), "--set", "model.n_classes=5"]) == 2


def test_eval_reproduces_best_val(data, trained, tmp_path):
    out = str(tmp_path)
    assert main(["eval", "--checkpoint", os.path.join(trained, "checkpoint.json"), "--data", data,
                 "--split", "val", "--out", out]) == 0
    metrics = json.load(open(os.path.join(out, "metrics.json")))
    hist = read_jsonl(os.path.join(trained, "history.jsonl"))
    assert metrics["accuracy"] == max(r["val_accuracy"] for r in hist)
    csv_rows = open(os.path.join(out, "confusion.csv")).read().splitlines()
    assert len(csv_rows) == 4
    assert "overall" in open(os.path.join(out, "metrics.txt")).read()


def test_eval_corrupted_checkpoint_is_schema_error(data, trained, tmp_path):
    bad = str(tmp_path / "bad.json")
    text = open(os.path.join(trained, "checkpoint.json")).read()
    open(bad, "w").write(text[:100])
    assert main(["eval", "--checkpoint", bad, "--data", data, "--out", str(tmp_path)]) == 4


def test_eval_width_mismatch_is_schema_error(data, trained, tmp_path):
    ckpt = os.path.join(trained, "checkpoint.json")
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path),
                 "--set", "model.fine_out=3"]) == 4


def test_infer_rows(data, trained, tmp_path):
    ckpt = os.path.join(trained, "checkpoint.json")
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["infer", "--checkpoint", ckpt, "--input", data, "--out", out1]) == 0
    assert main(["infer", "--checkpoint", ckpt, "--input", data, "--out", out2]) == 0
    rows = read_jsonl(os.path.join(out1, "predictions.jsonl"))
    assert len(rows) == 24
    for r in rows:
        assert abs(sum(r["probabilities"]) - 1.0) <= 1e-9
        assert r["predicted"] == int(np.argmax(r["probabilities"]))
    assert open(os.path.join(out1, "predictions.jsonl"), "rb").read() == \
        open(os.path.join(out2, "predictions.jsonl"), "rb").read()


def test_infer_single_unlabelled_sample(data, trained, tmp_path):
    lines = open(data).read().splitlines()
    rec = json.loads(lines[1])
    del rec["label"]
    one = str(tmp_path / "one.jsonl")
    open(one, "w").write(lines[0] + "\n" + json.dumps(rec) + "\n")
    out = str(tmp_path / "o")
    assert main(["infer", "--checkpoint", os.path.join(trained, "checkpoint.json"), "--input", one,
                 "--out", out]) == 0
    assert len(read_jsonl(os.path.join(out, "predictions.jsonl"))) == 1


def test_infer_width_mismatch_is_schema_error(trained, tmp_path):
    lines = [json.dumps({"n_landmarks": 12, "n_classes": 3, "f_raw": 5}),
             json.dumps({"id": "x", "landmarks": np.random.default_rng(0).normal(size=(12, 3)).tolist(),
                         "appearance": np.zeros((12, 5)).tolist()})]
    path = str(tmp_path / "w.jsonl")
    open(path, "w").write("\n".join(lines) + "\n")
    assert main(["infer", "--checkpoint", os.path.join(trained, "checkpoint.json"), "--input", path,
                 "--out", str(tmp_path)]) == 4


def test_ablate_features_report(data, tmp_path):
    out = str(tmp_path)
    assert main(["ablate", "features", "--data", data, "--out", out, "--seeds", "1",
                 "--modes", "joint,position,appearance"] + TRAIN_ARGS[:2] + TRAIN_ARGS[4:]) == 0
    rows = read_jsonl(os.path.join(out, "ablation_features.jsonl"))
    assert [r["setting"] for r in rows] == ["joint", "position", "appearance"]


def test_ablate_regions_row_count(data, tmp_path):
    out = str(tmp_path)
    assert main(["ablate", "regions", "--data", data, "--out", out, "--seeds", "1", "--k", "2..4",
                 "--epochs", "1"]) == 0
    assert len(read_jsonl(os.path.join(out, "ablation_regions.jsonl"))) == 3


def test_ablate_quotient_has_ratio_column(data, tmp_path):
    out = str(tmp_path)
    assert main(["ablate", "quotient", "--data", data, "--out", out, "--seeds", "1", "--epochs", "1"]) == 0
    assert "message_ratio" in open(os.path.join(out, "ablation_quotient.txt")).read()
    rows = read_jsonl(os.path.join(out, "ablation_quotient.jsonl"))
    # [DERIVED] (N * k_nn) / (k * k_q) with N = 12 and the defaults k_nn = 8, k = 8, k_q = 3
    assert rows[0]["extra"]["message_ratio"] == pytest.approx(12 * 8 / 24)


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "nonsense"])
    assert exc.value.code == 2


def test_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochs = 7\nlr = 0.5\n[model]\nk_regions = 5\n")
    app = resolve_config(str(ini), ["train.epochs=9"], {"train.lr": "0.25"})
    assert app.train.epochs == 9
    assert app.train.lr == 0.25
    assert app.model.k_regions == 5
    assert app.train.batch_size == 32


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(UsageError):
        resolve_config(None, ["model.nope=1"])
    with pytest.raises(UsageError):
        resolve_config(None, ["train.seed=1"])
    ini = tmp_path / "c.ini"
    ini.write_text("[extra]\nx = 1\n")
    with pytest.raises(UsageError):
        resolve_config(str(ini))
    with pytest.raises(UsageError):
        resolve_config(None, ["model.k_regions=abc"])


def test_config_echo_round_trips(tmp_path):
    app = resolve_config(None, ["model.use_quotient=false", "train.lr=0.002", "run.seed=9"])
    ini = tmp_path / "echo.ini"
    ini.write_text(app.to_ini())
    again = resolve_config(str(ini))
    assert again.model == app.model
    assert again.train_config() == app.train_config()
    assert again.run == app.run
    assert "seed = " not in app.to_ini().split("[train]")[1].split("[")[0]


def test_parse_k_list():
    assert parse_k_list("5..10") == [5, 6, 7, 8, 9, 10]
    assert parse_k_list("5, 8,9") == [5, 8, 9]
    with pytest.raises(ValueError):
        parse_k_list("a..b")
