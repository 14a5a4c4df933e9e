import csv
import json

import pytest
import torch

from swfd.cli import main
from swfd.data import load_delta, load_image, to_levels


def write_config(tmp_path, zoo, limit=3, extra=""):
    path = tmp_path / "run.toml"
    path.write_text(f"""
[attack]
max_iters = 4
checkpoints = [2]
use_salient_branch = true

[ti]
kernel_size = 1

[wfd]
enabled = true

[model]
surrogate = "toy_convnet"
victims = ["toy_resnet", "toy_plainnet", "toy_convnet"]
checkpoint_dir = "{zoo / 'checkpoints'}"

[data]
manifest = "{zoo / 'data' / 'manifest.csv'}"
limit = {limit}
{extra}
""")
    return path


@pytest.fixture
def attack_dir(tmp_path, toy_zoo):
    cfg = write_config(tmp_path, toy_zoo)
    out = tmp_path / "adv"
    assert main(["attack", "--config", str(cfg), "--output-dir", str(out)]) == 0
    return cfg, out


def test_attack_outputs(attack_dir, toy_examples):
    cfg, out = attack_dir
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["values"]["attack.max_iters"] == 4
    assert resolved["attack"]["use_salient_branch"] is True
    for ex in toy_examples[:3]:
        adv = load_image(out / f"{ex.id}_adv.png")
        diff = to_levels(adv) - to_levels(ex.image)
        assert diff.abs().max() <= 16
        assert torch.equal(torch.round(load_delta(out / f"{ex.id}_delta.bin") * 255).long(), diff)
        assert (out / f"{ex.id}_delta@2.bin").is_file()
        sidecar = json.loads((out / f"{ex.id}.json").read_text())
        assert sidecar["target_label"] == ex.target_label and sidecar["iterations"] == 4


def test_override_one_iteration(tmp_path, toy_zoo):
    cfg = write_config(tmp_path, toy_zoo, limit=1)
    out = tmp_path / "one"
    assert main(["attack", "--config", str(cfg), "--override", "max_iters=1", "--output-dir", str(out)]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["examples"][0]["iterations"] == 1


def test_seed_determines_outputs(tmp_path, toy_zoo):
    cfg = write_config(tmp_path, toy_zoo, limit=1)
    outs = []
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        main(["attack", "--config", str(cfg), "--seed", str(seed), "--output-dir", str(tmp_path / name)])
        outs.append((tmp_path / name / "img0000_delta.bin").read_bytes())
    assert outs[0] == outs[1] != outs[2]


def test_exit_codes(tmp_path, toy_zoo):
    cfg = write_config(tmp_path, toy_zoo)
    out = str(tmp_path / "x")
    assert main(["attack", "--config", str(cfg), "--override", "attack.bogus=1", "--output-dir", out]) == 1
    assert main(["attack", "--config", str(tmp_path / "nope.toml"), "--output-dir", out]) == 1
    assert main(["attack", "--config", str(cfg), "--override", f"model.checkpoint_dir='{tmp_path}'",
                 "--output-dir", out]) == 2
    assert main(["attack", "--config", str(cfg), "--override", "model.surrogate='alexnet'", "--output-dir", out]) == 2


def test_checkpoint_dir_from_environment(tmp_path, toy_zoo, monkeypatch):
    cfg = write_config(tmp_path, toy_zoo, limit=1)
    text = cfg.read_text().replace(f'checkpoint_dir = "{toy_zoo / "checkpoints"}"', "")
    cfg.write_text(text)
    monkeypatch.setenv("SWFD_CHECKPOINT_DIR", str(toy_zoo / "checkpoints"))
    assert main(["attack", "--config", str(cfg), "--override", "max_iters=1", "--output-dir",
                 str(tmp_path / "env")]) == 0
    monkeypatch.setenv("SWFD_CHECKPOINT_DIR", str(tmp_path / "empty"))
    assert main(["attack", "--config", str(cfg), "--output-dir", str(tmp_path / "env2")]) == 2


def test_eval_three_victims(attack_dir, tmp_path):
    cfg, adv = attack_dir
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--adv-dir", str(adv), "--output-dir", str(out)]) == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    # three victims, each scored at the stored checkpoint and the final iterate
    assert len(rows) == 6
    assert {r["victim"] for r in rows} == {"toy_resnet", "toy_plainnet", "toy_convnet"}
    assert {r["iters"] for r in rows} == {"2", "4"}
    assert json.loads((out / "results.json").read_text())["records"]


def test_eval_empty_directory(tmp_path, toy_zoo, caplog):
    cfg = write_config(tmp_path, toy_zoo)
    empty = tmp_path / "empty"
    empty.mkdir()
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--adv-dir", str(empty), "--output-dir", str(out)]) == 0
    assert (out / "results.csv").read_text().strip() == "surrogate,victim,method,loss,iters,n,successes,tasr"
    assert "no adversarial examples" in caplog.text


def test_saliency_outputs(tmp_path, toy_zoo, toy_examples):
    cfg = write_config(tmp_path, toy_zoo)
    ex = toy_examples[0]
    image = toy_zoo / "data" / "img0000.png"
    out = tmp_path / "sal"
    assert main(["saliency", "--config", str(cfg), "--image", str(image), "--label", str(ex.true_label),
                 "--output-dir", str(out)]) == 0
    bbox = json.loads((out / "img0000_bbox.json").read_text())
    assert 0 < bbox["height"] <= 32 and 0 < bbox["width"] <= 32
    assert load_image(out / "img0000_heatmap.png").shape == (3, 32, 32)
    assert load_image(out / "img0000_salient.png").shape == (3, 32, 32)
    assert main(["saliency", "--config", str(cfg), "--image", str(image), "--label", "99",
                 "--output-dir", str(out)]) == 1


def test_stats_identity(attack_dir, tmp_path):
    cfg, adv = attack_dir
    out = tmp_path / "stats"
    assert main(["stats", "--config", str(cfg), "--adv-dir", str(adv), "--adv-dir", str(adv), "--clean",
                 "--class-index", "2", "--plot", "--output-dir", str(out)]) == 0
    with open(out / "stats.csv") as fh:
        rows = list(csv.DictReader(fh))
    first = [r for r in rows[:3]]
    second = [r for r in rows[3:6]]
    assert [(r["mean"], r["variance"]) for r in first] == [(r["mean"], r["variance"]) for r in second]
    assert len(rows) == 9
    assert (out / "distributions.png").is_file()


def test_grid_single_cell(tmp_path, toy_zoo):
    cfg = write_config(tmp_path, toy_zoo, limit=2, extra='[grid]\nmethods = ["CE"]\n')
    out = tmp_path / "grid"
    assert main(["grid", "--config", str(cfg), "--override", "model.victims=['toy_resnet']",
                 "--output-dir", str(out), "--plot"]) == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["CE", "CE"]
    assert json.loads((out / "summary.json").read_text()).keys() == {"CE"}
    assert (out / "tasr_curves.png").is_file()
