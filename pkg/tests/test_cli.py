import json

import numpy as np
import pytest

from hybridbnn import autodiff as ad
from hybridbnn import cli, data, presets
from hybridbnn.cli import main
from hybridbnn.gp_layer import GPLayer
from hybridbnn.nn_layers import DenseLayer, GaussianHead, VariationalDenseLayer
from hybridbnn.training import predict

FAST = ["--epochs", "2", "--num-inducing", "4", "--mc-samples", "4"]


def test_generate_data_is_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["generate-data", "--n", "200", "--seed", "3", "--out", str(a)]) == 0
    assert main(["generate-data", "--n", "200", "--seed", "3", "--out", str(b)]) == 0
    lines = a.read_text().splitlines()
    assert lines[0] == "x,y" and len(lines) == 201
    assert a.read_bytes() == b.read_bytes()
    x, y = data.read_dataset(a)
    assert np.all((x >= 0) & (x <= 1))


def test_generated_noise_level_at_zero():
    x, y = data.generate(10_000, 4, x=0.0)
    assert 0.045 <= np.std(y - data.true_function(x)) <= 0.055


def test_generate_data_rejects_small_n(tmp_path):
    assert main(["generate-data", "--n", "3", "--out", str(tmp_path / "d.csv")]) == 2


def test_train_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--preset", "hfbnn", "--out", str(out), *FAST, "--seed", "1"]) == 0
    summary = json.loads((out / "model_summary.json").read_text())
    assert summary["preset"] == "hfbnn" and summary["seed"] == 1
    assert [layer["type"] for layer in summary["layers"]] == ["dense", "dense", "dense", "gp"]
    trace = (out / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,loss" and trace[1].startswith("1,") and len(trace) == 3


def _types(model):
    return [type(layer) for layer in model.layers]


def test_preset_layer_lists():
    x = np.linspace(0, 1, 20)[:, None]
    dnn = presets.build("dnn", x)
    assert _types(dnn) == [DenseLayer] * 3
    assert [layer.output_dim for layer in dnn.layers] == [100, 100, 1]
    assert [layer.activation for layer in dnn.layers] == ["relu", "relu", "linear"]
    assert _types(presets.build("hbnn-replace", x)) == [DenseLayer, DenseLayer, VariationalDenseLayer, GaussianHead]
    assert _types(presets.build("hbnn-append", x)) == [DenseLayer] * 3 + [VariationalDenseLayer, GaussianHead]
    hf = presets.build("hfbnn", x)
    assert _types(hf) == [DenseLayer] * 3 + [GPLayer]
    assert hf.layers[-1].kernel.name == "squared_exponential" and hf.layers[-1].num_inducing == 20
    assert _types(presets.build("hfbnn-deep", x)) == [DenseLayer] * 3 + [GPLayer, GPLayer]
    assert presets.build("hfbnn-arccosine", x).layers[-1].kernel.name == "arc_cosine"
    assert presets.build("hbnn-append", x).layers[3].kl_weight == pytest.approx(1 / 20)


def test_deep_gp_layers_are_independent():
    model = presets.build("hfbnn-deep", np.linspace(0, 1, 20)[:, None])
    inner, outer = model.gp_layers
    assert not {id(p) for p in inner.parameters()} & {id(p) for p in outer.parameters()}
    ids = [id(p) for p in model.parameters()]
    assert len(ids) == len(set(ids))


def test_predict_grid_and_round_trip(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--preset", "hfbnn", "--out", str(out), *FAST]) == 0
    assert main(["predict", "--out", str(out), "--grid=-0.5,1.5,7"]) == 0
    cols = data.read_csv(out / "predictions.csv", cli.PREDICTION_HEADER)
    x, mean, var, lo, hi = cols
    np.testing.assert_allclose(x, np.linspace(-0.5, 1.5, 7))
    assert np.all(var > 0) and np.all(lo <= mean) and np.all(mean <= hi)
    model, cfg, _ = cli.restore_model(out)
    pred = predict(model, x[:, None], cfg.train_config())
    np.testing.assert_array_equal(pred["mean"], mean)
    np.testing.assert_array_equal(pred["variance"], var)


def test_restored_model_matches_trained(tmp_path):
    cfg = cli.RunConfig(preset="hbnn-append", epochs=2, mc_samples=4, out=str(tmp_path)).validate()
    x, y = cli.load_data(cfg)
    trained = cli.train_one(cfg, "hbnn-append", x, y, tmp_path)["_model"]
    restored, cfg2, _ = cli.restore_model(tmp_path)
    for a, b in zip(trained.parameters(), restored.parameters()):
        np.testing.assert_array_equal(a.value, b.value)
    xs = np.linspace(0, 1, 5)[:, None]
    np.testing.assert_array_equal(predict(trained, xs, cfg.train_config())["mean"],
                                  predict(restored, xs, cfg2.train_config())["mean"])


def test_predict_empty_grid_and_deterministic_model(tmp_path):
    out = tmp_path / "dnn"
    assert main(["train", "--preset", "dnn", "--out", str(out), "--epochs", "1"]) == 0
    assert main(["predict", "--out", str(out), "--grid", "0,1,0"]) == 0
    assert (out / "predictions.csv").read_text().splitlines() == [",".join(cli.PREDICTION_HEADER)]
    assert main(["predict", "--out", str(out), "--grid", "0,1,4"]) == 0
    _, mean, var, lo, hi = data.read_csv(out / "predictions.csv", cli.PREDICTION_HEADER)
    np.testing.assert_array_equal(var, 0.0)
    np.testing.assert_array_equal(lo, mean)
    summary = json.loads((out / "model_summary.json").read_text())
    assert summary["metrics"]["nlpd"] is None


def test_compare_records_each_preset(tmp_path, monkeypatch):
    real_build = presets.build

    def flaky(name, *args, **kwargs):
        if name == "hbnn-replace":
            raise ValueError("injected failure")
        return real_build(name, *args, **kwargs)

    monkeypatch.setattr(presets, "build", flaky)
    out = tmp_path / "cmp"
    assert main(["compare", "--presets", "dnn,hbnn-replace,hfbnn", "--out", str(out), *FAST]) == 0
    result = json.loads((out / "comparison.json").read_text())
    assert list(result) == ["dnn", "hbnn-replace", "hfbnn"]
    assert "injected failure" in result["hbnn-replace"]["error"]
    assert {"rmse", "nlpd", "coverage_95", "final_loss"} <= set(result["hfbnn"])
    assert (out / "hfbnn_predictions.csv").is_file()


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    assert len(lines) >= 6 and all(line.endswith("PASS") for line in lines)


def test_gradcheck_catches_corrupted_adjoint(monkeypatch, capsys):
    real = ad.solve_lower

    def wrong(L, B):
        x = real(L, B)
        # same value, doubled gradient
        return 2.0 * x - ad.const(x.value)

    monkeypatch.setattr(ad, "solve_lower", wrong)
    assert main(["gradcheck"]) != 0
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["train", "--kernel", "matern"],
    ["train", "--epochs", "0"],
    ["train", "--num-inducing", "0"],
    ["train", "--data", "/nonexistent.csv"],
    ["train", "--grid", "0,1"],
    ["compare", "--presets", "dnn,bogus"],
    ["predict", "--out", "/nonexistent-dir"],
])
def test_config_errors_exit_2(argv, tmp_path):
    if "--out" not in argv:
        argv = argv + ["--out", str(tmp_path / "o")]
    assert main(argv) == 2


def test_config_file_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"preset": "dnn", "learning_rate": 0.1}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_config_file_and_flags_merge(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"preset": "dnn", "epochs": 5}))
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--epochs", "1", "--batch-size", "0"])
    cfg = cli.resolve_config(args)
    assert cfg.preset == "dnn" and cfg.epochs == 1 and cfg.batch_size is None
