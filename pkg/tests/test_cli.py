import json
import subprocess
import sys

import pytest

from spotkit.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

SCENES = "image_size = 16\npatch_size = 4\nobjects_max = 3\nsize_min = 4\nsize_max = 8\nmin_visible = 6\n"
TRAIN = ("epochs = 1\nbatch_size = 8\nwarmup_steps = 1\nd_enc = 16\nenc_heads = 2\nd_u = 16\n"
         "slot_mlp_hidden = 32\nd_dec = 12\nmlp_dec_hidden = 32\nk = 3\n")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenes.cfg").write_text(SCENES)
    assert main(["gen-data", "--spec", str(root / "scenes.cfg"), "--out", str(root / "data"),
                 "--count", "16", "--seed", "4"]) == EXIT_OK
    (root / "s1.cfg").write_text(TRAIN + f"data = {root / 'data'}\n")
    assert main(["train", "--config", str(root / "s1.cfg"), "--out", str(root / "teacher")]) == EXIT_OK
    return root


def test_gen_data_writes_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest


def test_stage2_train(workspace):
    cfg = workspace / "s2.cfg"
    cfg.write_text(TRAIN + f"data = {workspace / 'data'}\nstage = 2\nteacher = {workspace / 'teacher'}\n")
    assert main(["train", "--config", str(cfg), "--out", str(workspace / "student")]) == EXIT_OK
    assert (workspace / "student" / "meta.json").exists()


@pytest.mark.parametrize("source", ["decoder", "slot", "max", "ens"])
def test_eval_sources(workspace, source, capsys):
    out = workspace / f"eval_{source}.json"
    assert main(["eval", "--ckpt", str(workspace / "teacher"), "--data", str(workspace / "data"),
                 "--source", source, "--json", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert {"mbo_i", "mbo_c", "miou", "fg_ari", "n"} <= set(report)
    assert 0 <= report["mbo_i"] <= 1
    assert json.loads(capsys.readouterr().out) == report


def test_eval_is_deterministic(workspace):
    paths = [workspace / f"det{i}.json" for i in range(2)]
    for p in paths:
        main(["eval", "--ckpt", str(workspace / "teacher"), "--data", str(workspace / "data"), "--source", "slot",
              "--json", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_grad_map(workspace):
    out = workspace / "grad.json"
    assert main(["grad-map", "--ckpt", str(workspace / "teacher"), "--data", str(workspace / "data"),
                 "--mode", "random", "--limit", "4", "--out", str(out)]) == EXIT_OK
    gmap = json.loads(out.read_text())
    assert gmap["mode"] == "random" and gmap["samples"] == 4
    assert len(gmap["values"]) == 4 and min(min(r) for r in gmap["values"]) >= 0


def test_render(workspace):
    out = workspace / "r.png"
    assert main(["render", "--ckpt", str(workspace / "teacher"), "--data", str(workspace / "data"),
                 "--index", "2", "--source", "slot", "--out", str(out)]) == EXIT_OK
    assert out.read_bytes().startswith(b"\x89PNG")


def test_usage_errors(workspace, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["eval", "--ckpt", "x", "--data", "y", "--source", "bogus"]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(workspace / "z"), "--count", "0"]) == EXIT_USAGE
    assert main(["render", "--ckpt", str(workspace / "teacher"), "--data", str(workspace / "data"),
                 "--index", "99", "--out", str(workspace / "q.png")]) == EXIT_USAGE
    bad = workspace / "bad.cfg"
    bad.write_text("epochs = 1\nmystery = 2\n")
    assert main(["train", "--config", str(bad), "--out", str(workspace / "nope")]) == EXIT_USAGE
    assert "mystery" in capsys.readouterr().err


def test_runtime_errors(workspace):
    assert main(["eval", "--ckpt", str(workspace / "absent"), "--data", str(workspace / "data")]) == EXIT_RUNTIME
    assert main(["render", "--ckpt", str(workspace / "teacher"), "--data", str(workspace / "data"),
                 "--out", str(workspace / "no" / "dir" / "x.png")]) == EXIT_RUNTIME


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "spotkit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "grad-map" in proc.stdout
