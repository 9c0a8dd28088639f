"""Config files, manifests, and the train/eval/kfold/inspect commands.

Commands run in-process through cli.main so exit codes and output can be
asserted cheaply; one subprocess smoke test covers the `python -m` entry.
"""

import subprocess
import sys

import numpy as np
import pytest

import datagen
from test_model import enumerate_parameter_shapes
from unionnet.cli import main
from unionnet.config import (
    RunConfig,
    config_mapping,
    load_run_config,
    parse_kv_file,
    resolve_config,
    write_manifest,
)
from unionnet.data import load_image_folder
from unionnet.errors import ValidationError
from unionnet.model import UnionNet, parameter_count_closed_form
from unionnet.optim import NadamState, PlateauState
from unionnet.train import TrainCheckpoint, evaluate, load_checkpoint, save_checkpoint


def write_config(path, **fields) -> str:
    lines = [f"{key} = {value}" for key, value in fields.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


class TestConfigFile:
    def test_parse_ignores_comments_and_blanks(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# a comment\n\nwidth = 8\ndataset = cifar10\n")
        assert parse_kv_file(path) == {"width": "8", "dataset": "cifar10"}

    def test_parse_errors_carry_line_numbers(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("width = 8\nnot a pair\n")
        with pytest.raises(ValidationError, match=r"run\.cfg:2"):
            parse_kv_file(path)

    def test_duplicate_key_is_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("width = 8\nwidth = 9\n")
        with pytest.raises(ValidationError, match="duplicate key 'width'"):
            parse_kv_file(path)

    def test_cifar10_protocol_defaults(self):
        cfg = resolve_config({"dataset": "cifar10", "data_dir": "d"})
        assert (cfg.lr, cfg.beta1, cfg.factor) == (0.01, 0.5, 0.9)
        assert (cfg.patience, cfg.batch_size, cfg.epochs) == (3, 32, 100)
        assert (cfg.width, cfg.num_classes, cfg.input_size) == (128, 10, 32)

    def test_image_folder_protocol_defaults(self):
        cfg = resolve_config({"dataset": "image-folder", "data_dir": "d"})
        assert (cfg.beta1, cfg.factor, cfg.epochs) == (0.9, 0.8, 37)
        assert (cfg.num_classes, cfg.input_size) == (17, 64)

    def test_overrides_win_over_file_values(self):
        mapping = {"dataset": "image-folder", "data_dir": "a", "seed": "4"}
        cfg = resolve_config(mapping, seed_override=9, data_override="b")
        assert cfg.seed == 9 and cfg.data_dir == "b"

    @pytest.mark.parametrize("mapping,field", [
        ({"data_dir": "d"}, "dataset"),
        ({"dataset": "imagenet", "data_dir": "d"}, "dataset"),
        ({"dataset": "cifar10"}, "data_dir"),
        ({"dataset": "cifar10", "data_dir": "d", "width": "0"}, "width"),
        ({"dataset": "cifar10", "data_dir": "d", "width": "129"}, "width"),
        ({"dataset": "cifar10", "data_dir": "d", "width": "wide"}, "width"),
        ({"dataset": "cifar10", "data_dir": "d", "lr": "fast"}, "lr"),
        ({"dataset": "cifar10", "data_dir": "d", "input_size": "64"}, "input_size"),
        ({"dataset": "cifar10", "data_dir": "d", "num_classes": "4"}, "num_classes"),
        ({"dataset": "image-folder", "data_dir": "d", "input_size": "15"}, "input_size"),
        ({"dataset": "cifar10", "data_dir": "d", "epochs": "-1"}, "epochs"),
        ({"dataset": "cifar10", "data_dir": "d", "batch_size": "0"}, "batch_size"),
        ({"dataset": "cifar10", "data_dir": "d", "seed": "-2"}, "seed"),
        ({"dataset": "cifar10", "data_dir": "d", "augment": "cutout"}, "augment"),
        ({"dataset": "cifar10", "data_dir": "d", "val_fraction": "1.0"}, "val_fraction"),
        ({"dataset": "cifar10", "data_dir": "d", "gpu": "1"}, "gpu"),
    ])
    def test_validation_errors_name_the_field(self, mapping, field):
        with pytest.raises(ValidationError, match=field):
            resolve_config(mapping)

    def test_manifest_is_a_loadable_echo(self, tmp_path):
        cfg = resolve_config({
            "dataset": "image-folder", "data_dir": "d", "width": "4",
            "lr": "0.003", "epochs": "5", "augment": "horizontal-flip",
        })
        manifest = tmp_path / "manifest.txt"
        write_manifest(cfg, manifest)
        assert load_run_config(manifest) == cfg

    def test_manifest_echoes_the_cifar10_protocol(self, tmp_path):
        cfg = resolve_config({"dataset": "cifar10", "data_dir": "d"})
        manifest = tmp_path / "manifest.txt"
        write_manifest(cfg, manifest)
        text = manifest.read_text()
        for line in ("lr = 0.01", "beta1 = 0.5", "factor = 0.9",
                     "patience = 3", "batch_size = 32", "epochs = 100"):
            assert line in text

    def test_mapping_covers_every_field(self):
        cfg = RunConfig(dataset="cifar10", data_dir="d")
        assert set(config_mapping(cfg)) == set(cfg.__dataclass_fields__)


@pytest.fixture(scope="module")
def toy_run(tiny_folder, tmp_path_factory):
    """A completed 2-epoch training run on the tiny folder."""
    root = tmp_path_factory.mktemp("toy_run")
    out_dir = root / "out"
    config = write_config(
        root / "run.cfg",
        dataset="image-folder", data_dir=tiny_folder, out_dir=out_dir,
        width=2, num_classes=2, input_size=16, epochs=2, batch_size=4,
        seed=1, val_fraction=0.2,
    )
    assert main(["train", "--config", config]) == 0
    return {"config": config, "out": out_dir, "data": tiny_folder}


class TestTrainCommand:
    def test_toy_run_emits_all_artifacts(self, toy_run, capsys):
        out = toy_run["out"]
        history = (out / "history.csv").read_text().splitlines()
        assert len(history) == 3  # header + one line per epoch
        for name in ("manifest.txt", "best.ckpt", "last.ckpt", "report.txt", "report.json"):
            assert (out / name).exists(), name

    def test_stdout_reports_best_epoch_and_accuracy(self, tiny_folder, tmp_path, capsys):
        config = write_config(
            tmp_path / "run.cfg",
            dataset="image-folder", data_dir=tiny_folder, out_dir=tmp_path / "out",
            width=2, num_classes=2, input_size=16, epochs=1, batch_size=4,
        )
        assert main(["train", "--config", config]) == 0
        stdout = capsys.readouterr().out
        assert "precision" in stdout and "best epoch:" in stdout
        assert "held-out accuracy:" in stdout

    def test_rerun_from_manifest_reproduces_history(self, toy_run, tmp_path):
        manifest = (toy_run["out"] / "manifest.txt").read_text().splitlines()
        redirected = [
            f"out_dir = {tmp_path / 'replay'}" if ln.startswith("out_dir") else ln
            for ln in manifest
        ]
        config = tmp_path / "replay.cfg"
        config.write_text("\n".join(redirected) + "\n")
        assert main(["train", "--config", str(config)]) == 0
        assert (tmp_path / "replay" / "history.csv").read_bytes() == \
               (toy_run["out"] / "history.csv").read_bytes()

    def test_missing_data_dir_names_the_field(self, tmp_path, capsys):
        config = write_config(
            tmp_path / "run.cfg",
            dataset="image-folder", data_dir=tmp_path / "nowhere", out_dir=tmp_path / "o",
        )
        assert main(["train", "--config", config]) == 2
        assert "data_dir" in capsys.readouterr().err

    def test_config_parse_error_exits_2(self, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("dataset = cifar10\ndataset = cifar10\n")
        assert main(["train", "--config", str(config)]) == 2
        assert "duplicate key" in capsys.readouterr().err

    def test_negative_seed_flag_exits_2(self, toy_run, capsys):
        code = main(["train", "--config", toy_run["config"], "--seed", "-3"])
        assert code == 2
        assert "seed" in capsys.readouterr().err

    def test_resume_checkpoint_shape_mismatch_exits_2(self, toy_run, tmp_path, capsys):
        config = write_config(
            tmp_path / "wide.cfg",
            dataset="image-folder", data_dir=toy_run["data"], out_dir=tmp_path / "o",
            width=4, num_classes=2, input_size=16, epochs=3, batch_size=4,
        )
        ckpt = str(toy_run["out"] / "last.ckpt")
        assert main(["train", "--config", config, "--checkpoint", ckpt]) == 2
        assert "width" in capsys.readouterr().err


class TestEvalCommand:
    def test_accuracy_matches_library_evaluation(self, toy_run, capsys):
        code = main([
            "eval", "--checkpoint", str(toy_run["out"] / "best.ckpt"),
            "--data", str(toy_run["data"]), "--config", toy_run["config"],
        ])
        assert code == 0
        stdout = capsys.readouterr().out
        ckpt = load_checkpoint(toy_run["out"] / "best.ckpt")
        folder = load_image_folder(toy_run["data"], 16)
        want = evaluate(ckpt.net, folder, means=ckpt.means).metrics.accuracy
        assert stdout.strip().splitlines()[-1] == f"accuracy: {want:.4f}"

    def test_ten_class_report_has_ten_rows(self, tmp_path, capsys):
        datagen.make_image_folder(tmp_path / "data", num_classes=10, per_class=1, size=8)
        net = UnionNet.create(width=1, num_classes=10, seed=0)
        ckpt = TrainCheckpoint(
            net=net, epoch=0, base_seed=0, lr=0.01,
            opt_state=NadamState.for_params(net.parameters()),
            plateau_state=PlateauState(), best_metric=0.0, best_epoch=-1, means=None,
        )
        save_checkpoint(ckpt, tmp_path / "w.ckpt")
        code = main(["eval", "--checkpoint", str(tmp_path / "w.ckpt"),
                     "--data", str(tmp_path / "data")])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        class_rows = [ln for ln in lines if ln.startswith("class_")]
        assert len(class_rows) == 10

    def test_corrupted_checkpoint_exits_1_with_crc_message(self, toy_run, tmp_path, capsys):
        blob = bytearray((toy_run["out"] / "best.ckpt").read_bytes())
        blob[60] ^= 0x10
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        code = main(["eval", "--checkpoint", str(bad), "--data", str(toy_run["data"])])
        assert code == 1
        assert "checksum mismatch" in capsys.readouterr().err

    def test_class_count_mismatch_exits_2(self, toy_run, tmp_path, capsys):
        datagen.make_image_folder(tmp_path / "d3", num_classes=3, per_class=1, size=8)
        code = main(["eval", "--checkpoint", str(toy_run["out"] / "best.ckpt"),
                     "--data", str(tmp_path / "d3")])
        assert code == 2
        assert "classes" in capsys.readouterr().err

    def test_missing_data_directory_exits_2(self, toy_run, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(toy_run["out"] / "best.ckpt"),
                     "--data", str(tmp_path / "gone")])
        assert code == 2


@pytest.fixture(scope="module")
def kfold_folder(tmp_path_factory):
    root = tmp_path_factory.mktemp("kfold_data")
    datagen.make_image_folder(root, num_classes=2, per_class=80, size=8, seed=21)
    return root


class TestKfoldCommand:
    def kfold_config(self, path, data_dir, out_dir, epochs=0, seed=3):
        return write_config(
            path, dataset="image-folder", data_dir=data_dir, out_dir=out_dir,
            width=1, num_classes=2, input_size=8, epochs=epochs, batch_size=32,
            seed=seed,
        )

    def test_summary_lists_ten_folds_and_their_mean(self, kfold_folder, tmp_path, capsys):
        out = tmp_path / "out"
        config = self.kfold_config(tmp_path / "k.cfg", kfold_folder, out)
        assert main(["kfold", "--config", config]) == 0
        summary = (out / "summary.txt").read_text().splitlines()
        assert len(summary) == 11
        accs = []
        for i, line in enumerate(summary[:10]):
            head, _, value = line.partition(": accuracy=")
            assert head == f"fold {i}"
            accs.append(float(value))
        assert summary[10] == f"mean accuracy over 10 folds: {np.mean(accs):.4f}"
        assert capsys.readouterr().out == "\n".join(summary) + "\n"

    def test_fold_dump_rotates_deciles(self, kfold_folder, tmp_path):
        out = tmp_path / "out"
        config = self.kfold_config(tmp_path / "k.cfg", kfold_folder, out)
        assert main(["kfold", "--config", config]) == 0
        folds = (out / "folds.txt").read_text().splitlines()
        assert folds[0] == "fold 0: test=D0 val=D1 train=D2,D3,D4,D5,D6,D7,D8,D9"
        assert folds[9] == "fold 9: test=D9 val=D0 train=D1,D2,D3,D4,D5,D6,D7,D8"

    def test_fixed_seed_reproduces_the_summary(self, kfold_folder, tmp_path):
        for sub in ("a", "b"):
            config = self.kfold_config(
                tmp_path / f"{sub}.cfg", kfold_folder, tmp_path / sub
            )
            assert main(["kfold", "--config", config]) == 0
        assert (tmp_path / "a" / "summary.txt").read_bytes() == \
               (tmp_path / "b" / "summary.txt").read_bytes()

    def test_cifar10_dataset_is_rejected(self, tmp_path, capsys):
        config = write_config(
            tmp_path / "k.cfg", dataset="cifar10", data_dir=tmp_path, out_dir=tmp_path / "o",
        )
        assert main(["kfold", "--config", config]) == 2
        assert "image-folder" in capsys.readouterr().err

    def test_wrong_per_class_count_exits_2(self, tiny_folder, tmp_path, capsys):
        config = write_config(
            tmp_path / "k.cfg", dataset="image-folder", data_dir=tiny_folder,
            out_dir=tmp_path / "o", width=1, num_classes=2, input_size=8,
        )
        assert main(["kfold", "--config", config]) == 2
        assert "80 samples per class" in capsys.readouterr().err


class TestInspectCommand:
    def config_for_width(self, tmp_path, width):
        return write_config(
            tmp_path / "i.cfg", dataset="cifar10", data_dir="unused", width=width,
        )

    def test_full_width_report(self, tmp_path, capsys):
        assert main(["inspect", "--config", self.config_for_width(tmp_path, 128)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert "parameters: 4004362" in lines
        assert "serialized size: 16017448 bytes" in lines
        assert "composite depth: 4" in lines
        assert "physical convolutions: 31" in lines
        assert "receptive fields: 3,5,7,9" in lines

    def test_width_8_count_matches_enumeration(self, tmp_path, capsys):
        assert main(["inspect", "--config", self.config_for_width(tmp_path, 8)]) == 0
        stdout = capsys.readouterr().out
        oracle = sum(int(np.prod(s)) for s in enumerate_parameter_shapes(8, 10))
        assert f"parameters: {oracle}" in stdout
        assert oracle == parameter_count_closed_form(8, 10)

    def test_module_entry_point_smoke(self, tmp_path):
        config = self.config_for_width(tmp_path, 1)
        proc = subprocess.run(
            [sys.executable, "-m", "unionnet", "inspect", "--config", config],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0
        assert "composite depth: 4" in proc.stdout
