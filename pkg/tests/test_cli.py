import filecmp
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from motionbox.cli import main
from motionbox.imaging import read_png
from motionbox.model import prepare_flow, prepare_image
from motionbox.training import flow_features, load_model, load_split
from motionbox.visualize import OUTPUTS, activation_heatmaps, contrast_ratio, normalize01

TINY_YAML = """\
scene:
  height: 48
  width: 48
  camouflage: true
  min_size: 10
  max_size: 18
  max_speed: 3.0
  max_instances: 2
model:
  widths: [4, 6, 8]
  mask_branch_width: 4
  mask_branch_layers: 1
  c_mask: 4
  head_width: 4
train:
  iterations: 4
  batch_size: 2
  log_interval: 1
"""


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_YAML)
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--n", "10", "--out", str(data)]) == 0
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return {"root": root, "cfg": str(cfg), "data": str(data), "ckpt": str(run / "model_final.mswt")}


def test_gen_data_count_and_summary(workspace, capsys, tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", workspace["cfg"], "--n", "10", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "wrote 10 images" in text and "camouflage fraction: 1.00" in text
    doc = json.loads((out / "annotations.json").read_text())
    assert len(doc["images"]) == 10
    assert same_tree(str(out), workspace["data"])


def test_gen_data_val_split_is_disjoint(workspace, tmp_path):
    out = tmp_path / "val"
    assert main(["gen-data", "--config", workspace["cfg"], "--split", "val", "--n", "2", "--out", str(out)]) == 0
    ids = [im["id"] for im in json.loads((out / "annotations.json").read_text())["images"]]
    assert min(ids) >= 100_000


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "3"])
    assert exc.value.code == 2


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("train:\n  iters: 3\n")
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--config", str(p), "--n", "1", "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
    assert "'iters'" in capsys.readouterr().err


def test_zero_iterations_writes_initial_checkpoint(workspace, tmp_path):
    out = tmp_path / "r0"
    assert main(["train", "--config", workspace["cfg"], "--data", workspace["data"], "--out", str(out), "--iterations", "0"]) == 0
    assert sorted(os.listdir(out)) == ["model_final.mswt", "run_config.json", "train_log.jsonl"]
    assert (out / "train_log.jsonl").read_text() == ""


def test_train_is_deterministic(workspace, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", workspace["cfg"], "--data", workspace["data"], "--out", str(out)]) == 0
    assert filecmp.cmp(out / "model_final.mswt", workspace["ckpt"], shallow=False)


def test_resume_continues_step_count(workspace, tmp_path):
    out = tmp_path / "more"
    args = ["train", "--config", workspace["cfg"], "--data", workspace["data"], "--out", str(out)]
    assert main(args + ["--iterations", "6", "--resume", workspace["ckpt"]]) == 0
    steps = [json.loads(line)["step"] for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert steps == [5, 6]


def test_train_missing_resume_fails(workspace, tmp_path):
    args = ["train", "--config", workspace["cfg"], "--data", workspace["data"], "--out", str(tmp_path / "x")]
    assert main(args + ["--resume", str(tmp_path / "nope.mswt")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_reports_step(workspace, tmp_path, capsys):
    bad = tmp_path / "explode.yaml"
    bad.write_text(TINY_YAML.replace("log_interval: 1", "log_interval: 1\n  lr: 1.0e+300\n  grad_clip: 0.0"))
    args = ["train", "--config", str(bad), "--data", workspace["data"], "--out", str(tmp_path / "boom")]
    assert main(args) == 1
    assert "training failed at step" in capsys.readouterr().err


def test_eval_twice_identical(workspace, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", "--checkpoint", workspace["ckpt"], "--data", workspace["data"], "--out", str(a)]) == 0
    assert main(["eval", "--checkpoint", workspace["ckpt"], "--data", workspace["data"], "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert set(doc["mask"]) == {"AP", "AP50", "AP75", "APs", "APm", "APl"}
    assert "mask" in capsys.readouterr().out


def test_eval_missing_checkpoint(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.mswt"), "--data", workspace["data"]]) == 1


def test_ablate_fusion_five_rows(workspace, tmp_path):
    out = tmp_path / "abl"
    args = ["ablate", "--config", workspace["cfg"], "--axes", "fusion", "--data", workspace["data"], "--out", str(out)]
    assert main(args + ["--iterations", "1"]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert len(rows) == 6  # header + 5 variants
    assert rows[1].startswith("detection fusion: max") and rows[-1].startswith("mask fusion: concat")
    assert (out / "ablation.txt").exists()


def test_ablate_unknown_axis(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--axes", "colour", "--data", workspace["data"], "--out", str(tmp_path / "a")])
    assert exc.value.code == 2


def test_visualize_six_pngs(workspace, tmp_path):
    out = tmp_path / "vis"
    assert main(["visualize", "--checkpoint", workspace["ckpt"], "--data", workspace["data"], "--index", "0", "--out", str(out)]) == 0
    files = sorted(os.listdir(out))
    assert len(files) == 6
    assert files == sorted(f"00000_{name}.png" for name in OUTPUTS)
    assert read_png(str(out / "00000_pairs.png")).shape == (192, 192, 3)


def test_visualize_index_out_of_range(workspace, tmp_path):
    args = ["visualize", "--checkpoint", workspace["ckpt"], "--data", workspace["data"], "--out", str(tmp_path)]
    assert main(args + ["--index", "10"]) == 1


def test_heatmaps_normalized(workspace):
    model, run = load_model(workspace["ckpt"])
    r = load_split(workspace["data"])[0]
    _, feats = model.predict(prepare_image(r.frame), prepare_flow(flow_features(r, "rgb")))
    for h in activation_heatmaps(feats, r.hw):
        assert h.min() == 0.0 and h.max() == 1.0
    assert np.array_equal(normalize01(np.full((2, 2), 3.0)), np.zeros((2, 2)))


def test_flow_stream_separates_camouflaged_objects(workspace):
    model, run = load_model(workspace["ckpt"])
    for r in load_split(workspace["data"])[:5]:
        fg = np.zeros(r.hw, dtype=bool)
        for inst in r.instances:
            fg |= inst.mask
        _, feats = model.predict(prepare_image(r.frame), prepare_flow(flow_features(r, "rgb")))
        heat_img, heat_flow = activation_heatmaps(feats, r.hw)
        assert contrast_ratio(heat_flow, fg) > contrast_ratio(heat_img, fg)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "motionbox", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout


@pytest.mark.slow
def test_default_config_smoke_run_under_five_minutes(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--n", "20", "--out", str(data)]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "run"), "--iterations", "200"]) == 0
    assert time.perf_counter() - t0 < 300
