import numpy as np
import pytest

from fewseq.cli import main

SPEC = """
seed = 3
synthetic.num_classes = 10
synthetic.samples_per_class = 6
synthetic.frame_dim = 6
synthetic.frames_min = 4
synthetic.frames_max = 6
synthetic.noise_sigma = 0.2
synthetic.base_fraction = 0.5
"""

CONFIG = """
seed = 3
data.path = {data}
episode.way = 3
episode.frames = 4
encoder.dim = 16
encoder.hidden = 12
transformer.heads = 2
transformer.ff_dim = 20
text.informativeness = 1.0
train.episodes = 30
train.log_every = 10
eval.episodes = 10
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.cfg"
    spec.write_text(SPEC)
    data = root / "data.fsards"
    assert main(["gen-data", "--spec", str(spec), "--out", str(data)]) == 0
    config = root / "run.cfg"
    config.write_text(CONFIG.format(data=data))
    ckpt = root / "model.fsarcp"
    assert main(["train", "--config", str(config), "--out", str(ckpt)]) == 0
    return root, data, ckpt


class TestPipeline:
    def test_gen_train_eval(self, workspace, capsys, tmp_path):
        root, data, ckpt = workspace
        out = tmp_path / "result.txt"
        code = main([
            "eval", "--ckpt", str(ckpt), "--data", str(data),
            "--way", "3", "--shot", "1", "--episodes", "12",
            "--mode", "fewshot", "--out", str(out),
        ])
        assert code == 0
        printed = capsys.readouterr().out
        assert "mean_accuracy=" in printed and "ci95=" in printed
        record = out.read_text()
        for key in ("record = eval", "config_hash = ", "seed = ", "mean_accuracy = ", "ci95_halfwidth = "):
            assert key in record

    def test_eval_modes_and_beta(self, workspace, tmp_path):
        root, data, ckpt = workspace
        for mode in ("ensemble", "zeroshot"):
            out = tmp_path / f"{mode}.txt"
            args = [
                "eval", "--ckpt", str(ckpt), "--data", str(data),
                "--way", "3", "--shot", "1", "--episodes", "6",
                "--mode", mode, "--out", str(out),
            ]
            if mode == "ensemble":
                args += ["--beta", "0.5"]
            assert main(args) == 0
            assert out.exists()

    def test_zeroshot_alias(self, workspace, tmp_path, capsys):
        root, data, ckpt = workspace
        out = tmp_path / "zs.txt"
        code = main([
            "zeroshot", "--ckpt", str(ckpt), "--data", str(data),
            "--way", "3", "--shot", "1", "--episodes", "6", "--out", str(out),
        ])
        assert code == 0
        assert "mode=zeroshot" in capsys.readouterr().out

    def test_export_features(self, workspace, tmp_path):
        root, data, ckpt = workspace
        out = tmp_path / "features.npz"
        code = main([
            "export-features", "--ckpt", str(ckpt), "--data", str(data),
            "--out", str(out), "--split", "novel",
        ])
        assert code == 0
        blob = np.load(out)
        assert {"video_ids", "class_ids", "class_names", "raw", "modulated"} <= set(blob.files)
        assert blob["raw"].shape == blob["modulated"].shape

    def test_bench_runs(self, capsys):
        assert main(["bench", "--batch", "4", "--rows", "4", "--cols", "4", "--repeats", "2"]) == 0
        out = capsys.readouterr().out
        assert "numpy" in out


class TestErrors:
    def test_unknown_flag_usage_exit(self, capsys):
        assert main(["eval", "--nonsense"]) == 2

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("seed = 1\nmystery.key = 2\n")
        ckpt = tmp_path / "m.fsarcp"
        assert main(["train", "--config", str(bad), "--out", str(ckpt)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_seed(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("episode.way = 5\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "m")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_dataset_is_io_error(self, workspace, tmp_path, capsys):
        root, data, ckpt = workspace
        code = main([
            "eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "nope.fsards"),
            "--way", "3", "--shot", "1", "--episodes", "2",
            "--out", str(tmp_path / "r.txt"),
        ])
        assert code == 5

    def test_corrupt_dataset_is_data_error(self, workspace, tmp_path):
        root, data, ckpt = workspace
        bad = tmp_path / "bad.fsards"
        bad.write_bytes(b"FSARDS1\nframe_dim 6\nclasses 1\nclass 0 a base\nvideos 1\nend_header\n\x00\x00")
        code = main([
            "eval", "--ckpt", str(ckpt), "--data", str(bad),
            "--way", "3", "--shot", "1", "--episodes", "2",
            "--out", str(tmp_path / "r.txt"),
        ])
        assert code == 3

    def test_way_too_large_is_data_error(self, workspace, tmp_path):
        root, data, ckpt = workspace
        code = main([
            "eval", "--ckpt", str(ckpt), "--data", str(data),
            "--way", "50", "--shot", "1", "--episodes", "2",
            "--out", str(tmp_path / "r.txt"),
        ])
        assert code == 3
