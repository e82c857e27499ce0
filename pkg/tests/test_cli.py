import csv
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from deepobf import modelfile
from deepobf.cli import main
from deepobf.config import parse_config
from deepobf.errors import ConfigError
from deepobf.graph import LayerSpec, ModelGraph, init_block_params, sequential_block
from deepobf.zoo import classifier_block

SMALL = """\
[run]
seed = 5
out = {out}

[model]
input = 3x8x8
widths = 4,6
pool_after = 1

[data]
spec = synth:4:3x8x8:24:8:7

[train]
epochs = 3
batch_size = 32

[obfuscate]
round2_channels = 6,6,6
round1_epochs = 2
finetune_epochs = 1
round2_epochs = 2
batch_size = 32

[attack]
kind = transfer_finetune
target = synth:4:3x8x8:12:6:11:shift=1,1
epochs = 2

[timing]
warmup = 1
runs = 3
"""


def write_cfg(tmp_path, text=SMALL, name="run.ini"):
    out = tmp_path / "out"
    p = tmp_path / name
    p.write_text(text.format(out=out))
    return str(p), out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg, out = write_cfg(tmp)
    assert main(["train", "--config", cfg]) == 0
    assert main(["obfuscate", "--config", cfg]) == 0
    return cfg, out


# --- config -----------------------------------------------------------------------------------------


def test_defaults_cover_every_section():
    cfg = parse_config("")
    assert cfg["obfuscate"]["alpha"] == 0.05 and cfg["obfuscate"]["mode"] == "alternating"
    assert cfg["timing"]["runs"] == 1000


def test_unknown_key_reports_line(tmp_path):
    text = "[run]\nseed = 1\n\n[train]\nepochz = 3\n"
    with pytest.raises(ConfigError, match=r":5: \[train\] epochz"):
        parse_config(text, "x.ini")


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match=r":2: \[model\] input"):
        parse_config("[model]\ninput = 3x16\n", "x.ini")


# --- commands ---------------------------------------------------------------------------------------


def test_train_writes_teacher_and_log(trained):
    _, out = trained
    m = modelfile.load(out / "teacher.dobf")
    assert m.input_shape == (3, 8, 8) and m.num_classes == 4
    rows = list(csv.reader(open(out / "train.csv")))
    assert rows[0][0] == "epoch" and len(rows) == 4


def test_obfuscate_outputs(trained):
    _, out = trained
    final = modelfile.load(out / "obfuscated.dobf")
    assert [b.name for b in final.feature_blocks] == ["features"]
    assert not any(n.kind == "concat" for b in final.blocks for n in b.nodes)
    report = list(csv.reader(open(out / "report.csv")))
    assert [r[0] for r in report[1:]] == ["original", "round1", "finetune", "round2"]
    logs = sorted(os.listdir(out / "logs"))
    assert logs == ["finetune-finetune.csv", "round1-sim1.csv", "round1-sim2.csv", "round2-features.csv"]


def test_obfuscate_rerun_gives_same_hash(trained, tmp_path, capsys):
    cfg, out = trained
    first = modelfile.load(out / "obfuscated.dobf").digest()
    other = tmp_path / "again"
    os.makedirs(other)
    shutil.copy(out / "teacher.dobf", other / "teacher.dobf")
    assert main(["obfuscate", "--config", cfg, "--out", str(other)]) == 0
    assert modelfile.load(other / "obfuscated.dobf").digest() == first
    assert f"final model: {first}" in capsys.readouterr().out


def test_interrupted_obfuscate_resumes(trained, tmp_path):
    cfg, out = trained
    other = tmp_path / "resume"
    os.makedirs(other)
    shutil.copy(out / "teacher.dobf", other / "teacher.dobf")
    assert main(["obfuscate", "--config", cfg, "--out", str(other), "--stop-after", "round1:1"]) == 0
    assert not (other / "obfuscated.dobf").exists()
    assert main(["obfuscate", "--config", cfg, "--out", str(other)]) == 0
    assert modelfile.load(other / "obfuscated.dobf").digest() == modelfile.load(out / "obfuscated.dobf").digest()


def test_eval_prints_table(trained, capsys):
    cfg, out = trained
    assert main(["eval", "--config", cfg, "--model", str(out / "obfuscated.dobf"), "--runs", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["model", "acc.", "size", "(B)", "time", "(us)"]
    assert lines[1].startswith("obfuscated.dobf")


def test_eval_class_mismatch_exit_3(trained):
    cfg, out = trained
    assert main(["eval", "--config", cfg, "--model", str(out / "teacher.dobf"), "--data", "synth:3:3x8x8:4:2:1"]) == 3


def test_attack_with_baseline_appends_declination(trained, capsys):
    cfg, out = trained
    args = ["attack", "--config", cfg, "--model", str(out / "obfuscated.dobf"), "--baseline", str(out / "teacher.dobf")]
    assert main(args) == 0
    assert main(args) == 0
    text = capsys.readouterr().out
    assert text.count("best test accuracy") == 4
    rows = list(csv.reader(open(out / "declination.csv")))
    assert rows[0][0] == "network" and len(rows) == 3


def test_missing_model_exit_2(tmp_path):
    assert main(["eval", "--model", str(tmp_path / "nope.dobf")]) == 2


def test_corrupt_model_exit_2(tmp_path, trained):
    _, out = trained
    raw = (out / "teacher.dobf").read_bytes()
    bad = tmp_path / "bad.dobf"
    bad.write_bytes(raw[: len(raw) // 2])
    assert main(["analyze", "--model", str(bad)]) == 2


def test_config_error_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nepochs = many\n")
    assert main(["train", "--config", str(p)]) == 2
    assert "bad.ini:2" in capsys.readouterr().err


def test_plan_mismatch_exit_3(trained, tmp_path):
    cfg, out = trained
    text = SMALL.replace("round2_channels = 6,6,6", "round2_channels = 6,6,5")
    bad, _ = write_cfg(tmp_path, text, "mismatch.ini")
    assert main(["obfuscate", "--config", bad, "--teacher", str(out / "teacher.dobf"), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_4(tmp_path):
    text = SMALL.replace("epochs = 3\n", "epochs = 2\nlr = 1e38\nmomentum = 0\n", 1)
    cfg, _ = write_cfg(tmp_path, text)
    assert main(["train", "--config", cfg]) == 4


def _two_conv_model(path):
    block = sequential_block("stack", [
        LayerSpec("c1", "conv", in_channels=2, out_channels=3, kernel=3, padding=1),
        LayerSpec("c2", "conv", in_channels=3, out_channels=3, kernel=3),
    ])
    head = classifier_block(3, 2)
    params = {**init_block_params(block, np.random.default_rng(0)), **init_block_params(head, np.random.default_rng(1))}
    modelfile.save(ModelGraph([block, head], params, (2, 8, 8), 2), path)


def test_analyze_reports_five_by_five(tmp_path, capsys):
    path = tmp_path / "two.dobf"
    _two_conv_model(path)
    assert main(["analyze", "--model", str(path)]) == 0
    text = capsys.readouterr().out
    assert "receptive field 5×5" in text
    assert "kernel 5×5" in text


def test_analyze_reports_nonlinear_block(trained, capsys):
    _, out = trained
    assert main(["analyze", "collapse", "--model", str(out / "teacher.dobf"), "--block", "incep1"]) == 0
    assert "not linear" in capsys.readouterr().out
    assert main(["analyze", "--model", str(out / "teacher.dobf"), "--block", "nope"]) == 2


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "deepobf.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "obfuscate", "eval", "attack", "analyze"):
        assert cmd in r.stdout
    assert "--stop-after" not in r.stdout
