import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from decoseg.checkpoint import load_checkpoint, save_checkpoint
from decoseg.classnet import ClassNetParams
from decoseg.cli import main
from decoseg.inference import read_label_mask, save_label_mask, segment_image
from decoseg.bridging import BridgeParams
from decoseg.segnet import SegNetParams
from decoseg.synth import BACKGROUND, load_dataset

FAST = ["--set", "image_size=32x32", "--set", "n_weak=10", "--set", "n_strong=4", "--set", "n_test=3",
        "--set", "num_classes=3", "--set", "cls_epochs=2", "--set", "seg_epochs=2",
        "--set", "seg_max_steps=4", "--set", "n_p=1", "--set", "strong_per_class=0"]


def run(*argv):
    return main([str(a) for a in argv])


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    lines = [f"{FAST[i + 1]}" for i in range(0, len(FAST), 2)]
    lines += [f"data = {root / 'data'}", f"cls_checkpoint = {root / 'cls.ckpt'}",
              f"seg_checkpoint = {root / 'seg.ckpt'}"]
    cfg.write_text("\n".join(l.replace("=", " = ", 1) for l in lines) + "\n")
    assert run("gen-data", "--config", cfg) == 0
    assert run("train-cls", "--config", cfg) == 0
    assert run("train-seg", "--config", cfg) == 0
    return root, cfg


class TestGenData:
    def test_deterministic_and_creates_dirs(self, tmp_path):
        a, b = tmp_path / "x" / "a", tmp_path / "y" / "b"
        assert run("gen-data", "--data", a, *FAST) == 0
        assert run("gen-data", "--data", b, *FAST) == 0
        for f in sorted(p.relative_to(a) for p in a.rglob("*.png")):
            assert (a / f).read_bytes() == (b / f).read_bytes()
        assert (a / "index.json").read_bytes() == (b / "index.json").read_bytes()

    def test_invalid_class_count(self, tmp_path, capsys):
        assert run("gen-data", "--data", tmp_path, "--set", "num_classes=9") == 1
        assert "num_classes" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        (tmp_path / "f").write_text("")
        assert run("gen-data", "--data", tmp_path / "f" / "d", *FAST) == 2


class TestTraining:
    def test_cls_outputs(self, workspace):
        root, _ = workspace
        rows = _read_csv(root / "cls.loss.csv")
        assert rows[0] == ["epoch", "loss"]
        assert len(rows) - 1 == 2
        ClassNetParams.from_arrays(load_checkpoint(root / "cls.ckpt"))

    def test_seg_outputs(self, workspace):
        root, _ = workspace
        arrays = load_checkpoint(root / "seg.ckpt")
        BridgeParams.from_arrays(arrays)
        SegNetParams.from_arrays(arrays)
        rows = _read_csv(root / "seg.loss.csv")
        assert [r[0] for r in rows[1:]] == ["1", "2"]

    def test_seg_leaves_classifier_bytes(self, workspace, tmp_path):
        root, cfg = workspace
        before = (root / "cls.ckpt").read_bytes()
        out = tmp_path / "seg2.ckpt"
        assert run("train-seg", "--config", cfg, "--set", f"seg_checkpoint={out}") == 0
        assert (root / "cls.ckpt").read_bytes() == before
        # same config and seed: identical checkpoint
        assert out.read_bytes() == (root / "seg.ckpt").read_bytes()

    def test_custom_loss_log(self, workspace, tmp_path):
        _, cfg = workspace
        log = tmp_path / "logs" / "seg.csv"
        assert run("train-seg", "--config", cfg, "--set", f"seg_checkpoint={tmp_path / 's.ckpt'}",
                   "--loss-log", log) == 0
        assert len(_read_csv(log)) == 3

    def test_missing_classifier(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        assert run("train-seg", "--config", cfg, "--set", f"cls_checkpoint={tmp_path / 'none.ckpt'}") == 2
        assert "none.ckpt" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        assert run("train-cls", "--data", tmp_path / "nothing") == 2

    def test_not_enough_strong_images(self, workspace, tmp_path):
        _, cfg = workspace
        assert run("train-seg", "--config", cfg, "--set", "strong_per_class=50",
                   "--set", f"seg_checkpoint={tmp_path / 's.ckpt'}") == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        code = run("train-cls", "--config", cfg, "--set", "cls_lr=1e300",
                   "--set", f"cls_checkpoint={tmp_path / 'c.ckpt'}")
        assert code == 3
        assert "numeric" in capsys.readouterr().err


class TestInferEval:
    def test_infer_directory(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("infer", "--config", cfg, "--input", root / "data" / "test" / "images",
                   "--out", tmp_path / "o") == 0
        masks = sorted(p.name for p in (tmp_path / "o").glob("*_mask.png"))
        assert masks == ["test_00000_mask.png", "test_00001_mask.png", "test_00002_mask.png"]

    def test_infer_empty_label_image(self, workspace, tmp_path):
        root, cfg = workspace
        arrays = load_checkpoint(root / "cls.ckpt")
        arrays["cls.fc2.bias"] = np.full_like(arrays["cls.fc2.bias"], -1e3)
        save_checkpoint(tmp_path / "mute.ckpt", arrays)
        img = root / "data" / "test" / "images" / "test_00000.png"
        assert run("infer", "--config", cfg, "--set", f"cls_checkpoint={tmp_path / 'mute.ckpt'}",
                   "--input", img, "--out", tmp_path / "o") == 0
        mask = read_label_mask(tmp_path / "o" / "test_00000_mask.png")
        assert mask.shape == (32, 32) and np.all(mask == BACKGROUND)

    def test_infer_wrong_size(self, workspace, tmp_path):
        _, cfg = workspace
        Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "small.png")
        assert run("infer", "--config", cfg, "--input", tmp_path / "small.png", "--out", tmp_path) == 2

    def test_eval_table_and_report(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        report = tmp_path / "r.json"
        assert run("eval", "--config", cfg, "--report", report) == 0
        out = capsys.readouterr().out
        assert "background" in out and "mean" in out
        data = json.loads(report.read_text())
        assert 0.0 <= data["mean_iou"] <= 1.0

    def test_eval_perfect_prediction(self, workspace, tmp_path, capsys):
        """Ground truth replaced by the model's own output scores mIoU 1."""
        import shutil
        root, cfg = workspace
        data = tmp_path / "data"
        shutil.copytree(root / "data", data)
        cls = ClassNetParams.from_arrays(load_checkpoint(root / "cls.ckpt"))
        arrays = load_checkpoint(root / "seg.ckpt")
        bridge, seg = BridgeParams.from_arrays(arrays), SegNetParams.from_arrays(arrays)
        manifest = json.loads((data / "index.json").read_text())
        for entry in manifest["examples"]:
            if entry["split"] != "test":
                continue
            ex = load_dataset(root / "data", ids=[entry["id"]])[0]
            pred = segment_image(ex.image, cls, bridge, seg).label_mask
            save_label_mask(pred, data / entry["mask"])
            entry["labels"] = [int(np.any(pred == c)) for c in range(3)]
        (data / "index.json").write_text(json.dumps(manifest))
        assert run("eval", "--config", cfg, "--data", data, "--report", tmp_path / "r.json") == 0
        assert json.loads((tmp_path / "r.json").read_text())["mean_iou"] == 1.0

    def test_eval_weak_split_rejected(self, workspace, tmp_path):
        _, cfg = workspace
        assert run("eval", "--config", cfg, "--split", "weak", "--report", tmp_path / "r.json") == 2


class TestMisc:
    def test_gradcheck_passes(self, capsys):
        assert run("gradcheck", "--seeds", "1") == 0
        out = capsys.readouterr().out
        assert "FAIL " not in out and "0 failure(s)" in out
        assert {"conv2d", "deconv2d", "maxpool2d", "unpool2d", "seg_path"} <= {
            line.split()[1] for line in out.splitlines() if line.startswith("PASS")}

    def test_gradcheck_impossible_tolerance(self, capsys):
        assert run("gradcheck", "--seeds", "1", "--tol", "1e-30") == 3

    def test_augment_preview(self, workspace, tmp_path):
        _, cfg = workspace
        out = tmp_path / "crops"
        assert run("augment-preview", "--config", cfg, "--set", "n_p=2", "--out", out, "--count", 2) == 0
        rows = _read_csv(out / "crops.csv")[1:]
        assert len(rows) == len(list(out.glob("crop????.png"))) == len(list(out.glob("*_mask.png")))
        with Image.open(out / "crop0000_mask.png") as im:
            assert set(np.unique(np.asarray(im))) <= {0, 255}

    def test_usage_errors(self, capsys):
        assert run("gen-data", "--set", "nonsense=1") == 1
        assert run("gen-data", "--set", "novalue") == 1
        with pytest.raises(SystemExit) as exc:
            run("no-such-command")
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            run("infer", "--out", "x")
        assert exc.value.code == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "decoseg", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "train-seg" in proc.stdout
