import argparse

import numpy as np
import pytest

from flowpredict import cli, data, model


def _subparsers():
    parser = cli.build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def test_all_subcommands_present():
    assert set(_subparsers()) == {"synth", "codebook", "frame-codebook", "train", "predict", "eval",
                                  "nn-eval", "viz", "train-multi", "predict-multi", "gradcheck"}


@pytest.mark.parametrize("name", sorted(_subparsers()))
def test_help_documents_every_default(name, capsys):
    sub = _subparsers()[name]
    formatter = sub._get_formatter()
    for action in sub._actions:
        if action.option_strings == ["-h", "--help"]:
            continue
        text = formatter._expand_help(action)
        assert "default" in text, f"{name} {action.option_strings}: {text!r}"
    with pytest.raises(SystemExit) as exc:
        cli.main([name, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--iter", "3"])  # no abbreviations
    assert exc.value.code == 1


def test_missing_file_is_data_error(tmp_path):
    assert cli.main(["viz", "--flo", str(tmp_path / "none.flo"), "--out", str(tmp_path / "o.ppm")]) == 2
    (tmp_path / "bad.flo").write_bytes(b"garbage!")
    assert cli.main(["viz", "--flo", str(tmp_path / "bad.flo"), "--out", str(tmp_path / "o.ppm")]) == 2


def test_viz_zero_flow_is_white(tmp_path):
    data.write_flo(np.zeros((5, 7, 2)), tmp_path / "z.flo")
    assert cli.main(["viz", "--flo", str(tmp_path / "z.flo"), "--out", str(tmp_path / "z.ppm")]) == 0
    img = data.read_image(tmp_path / "z.ppm")
    assert img.shape == (5, 7, 3) and np.all(img == 1.0)


def test_gradcheck_exits_zero(capsys):
    assert cli.main(["gradcheck", "--preset", "tiny"]) == 0
    assert "max relative error" in capsys.readouterr().out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "train"), "--count", "6", "--seed", "1", "--steps", "2"]) == 0
    assert cli.main(["synth", "--out", str(root / "test"), "--count", "3", "--seed", "2"]) == 0
    assert cli.main(["codebook", "--manifest", str(root / "train/manifest.txt"), "--preset", "tiny",
                     "--out", str(root / "cb.txt")]) == 0
    return root


def test_eval_oracle_gives_zero_epe(dataset, tmp_path):
    out = tmp_path / "r.csv"
    code = cli.main(["eval", "--manifest", str(dataset / "test/manifest.txt"), "--codebook",
                     str(dataset / "cb.txt"), "--preset", "tiny", "--predictor", "oracle", "--out", str(out)])
    assert code == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    epe = [r for r in rows if r[0] == "EPE"]
    assert len(epe) == 3 and all(float(r[2]) == 0.0 for r in epe)


def test_eval_needs_checkpoint_for_model(dataset):
    assert cli.main(["eval", "--manifest", str(dataset / "test/manifest.txt"), "--codebook",
                     str(dataset / "cb.txt"), "--preset", "tiny"]) == 1


def test_train_is_idempotent_and_nan_exits_3(dataset, tmp_path):
    base = ["train", "--manifest", str(dataset / "train/manifest.txt"), "--codebook", str(dataset / "cb.txt"),
            "--preset", "tiny", "--iters", "3", "--seed", "4"]
    assert cli.main(base + ["--out", str(tmp_path / "a.bin"), "--log", str(tmp_path / "a.csv")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "b.bin"), "--log", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    net = model.FlowModel(model.preset_config("tiny"), seed=0)
    net.params["fc2.bias"][:] = np.nan
    net.save(tmp_path / "nan.bin")
    assert cli.main(base + ["--checkpoint", str(tmp_path / "nan.bin"), "--out", str(tmp_path / "c.bin")]) == 3


def test_predict_and_multiframe_pipeline(dataset, tmp_path):
    ck = tmp_path / "m.bin"
    assert cli.main(["train", "--manifest", str(dataset / "train/manifest.txt"), "--codebook",
                     str(dataset / "cb.txt"), "--preset", "tiny", "--iters", "2", "--out", str(ck)]) == 0
    image = data.read_manifest(dataset / "test/manifest.txt")[0].image
    for name in ("a", "b"):
        assert cli.main(["predict", "--image", str(image), "--checkpoint", str(ck), "--codebook",
                         str(dataset / "cb.txt"), "--preset", "tiny", "--out", str(tmp_path / f"{name}.ppm"),
                         "--flow-out", str(tmp_path / f"{name}.flo")]) == 0
    assert (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes()
    assert data.read_flo(tmp_path / "a.flo").shape == (8, 8, 2)

    seq = str(dataset / "train/sequences.txt")
    assert cli.main(["frame-codebook", "--manifest", seq, "--preset", "tiny", "--steps", "2",
                     "--clusters", "3", "--grid", "4x4", "--out", str(tmp_path / "f.txt")]) == 0
    assert cli.main(["train-multi", "--manifest", seq, "--checkpoint", str(ck), "--codebook",
                     str(tmp_path / "f.txt"), "--preset", "tiny", "--steps", "2", "--hidden", "8",
                     "--iters", "20", "--out", str(tmp_path / "mf.bin")]) == 0
    assert cli.main(["predict-multi", "--image", str(image), "--checkpoint", str(ck), "--multi-checkpoint",
                     str(tmp_path / "mf.bin"), "--codebook", str(tmp_path / "f.txt"), "--preset", "tiny",
                     "--out", str(tmp_path / "steps")]) == 0
    assert sorted(p.name for p in (tmp_path / "steps").iterdir()) == [
        "step_01.flo", "step_01.ppm", "step_02.flo", "step_02.ppm"]
    # wrong step count against the checkpoint is a data error
    assert cli.main(["train-multi", "--manifest", seq, "--checkpoint", str(ck), "--codebook",
                     str(tmp_path / "f.txt"), "--preset", "tiny", "--steps", "3", "--hidden", "8",
                     "--iters", "2", "--out", str(tmp_path / "x.bin")]) == 2


def test_nn_eval_runs(dataset, tmp_path):
    out = tmp_path / "nn.csv"
    assert cli.main(["nn-eval", "--manifest", str(dataset / "test/manifest.txt"), "--train-manifest",
                     str(dataset / "train/manifest.txt"), "--codebook", str(dataset / "cb.txt"),
                     "--preset", "tiny", "--out", str(out)]) == 0
    assert out.read_text().startswith("metric,")
