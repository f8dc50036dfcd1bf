"""End-to-end command-line behavior, run in process via cli.main."""

import os

import numpy as np
import pytest

from textground import cli
from textground.checkpoint import load_checkpoint, save_checkpoint
from textground.ppm import read_pgm, read_ppm

TINY_CONFIG = """\
# small geometry so the whole pipeline runs in well under a second
image.size = 64
backbone.channels = 8,16,32,64
backbone.heads = 2,2,4,4
latent.channels = 2
fusion.mix_dim = 16
denoiser.width = 16
diffusion.steps = 10
guidance.steps = 2
guidance.repeats = 1
data.count = 4
train.epochs = 2
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: config file, generated scenes, one trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = str(root / "run.cfg")
    with open(cfg_path, "w") as f:
        f.write(TINY_CONFIG)
    data_dir = str(root / "data")
    assert cli.main(["--config", cfg_path, "--out", data_dir, "gen-data"]) == 0
    ckpt = str(root / "fusion.bin")
    assert cli.main(["--config", cfg_path, "--out", ckpt,
                     "train", "--data", data_dir, "--epochs", "2"]) == 0
    return {"root": root, "cfg": cfg_path, "data": data_dir, "ckpt": ckpt}


def first_image(ws):
    return os.path.join(ws["data"], "scene_0000.ppm")


# -- argument surface -------------------------------------------------------


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        cli.build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    assert cli.main(["--help"]) == 0


def test_missing_command_is_usage_error():
    assert cli.main([]) == 1


def test_unknown_config_key_is_usage_error(tmp_path):
    bad = str(tmp_path / "bad.cfg")
    open(bad, "w").write("no.such.key = 1\n")
    assert cli.main(["--config", bad, "gen-data", "--n", "1"]) == 1


def test_bad_config_value_is_usage_error(tmp_path):
    bad = str(tmp_path / "bad.cfg")
    open(bad, "w").write("train.epochs = soon\n")
    assert cli.main(["--config", bad, "gen-data", "--n", "1"]) == 1


# -- gen-data ---------------------------------------------------------------


def test_gen_data_outputs_and_determinism(ws, tmp_path, capfd):
    files = set(os.listdir(ws["data"]))
    assert files == {f"scene_{i:04d}.ppm" for i in range(4)} | {"manifest.tsv"}
    rows = cli.read_manifest(os.path.join(ws["data"], "manifest.tsv"))
    assert len(rows) == 4

    again = str(tmp_path / "again")
    assert cli.main(["--config", ws["cfg"], "--out", again, "gen-data"]) == 0
    out = capfd.readouterr().out
    assert "4 scenes" in out
    for name in ("scene_0000.ppm", "manifest.tsv"):
        a = open(os.path.join(ws["data"], name), "rb").read()
        b = open(os.path.join(again, name), "rb").read()
        assert a == b


def test_gen_data_zero_scenes(tmp_path, capfd):
    out_dir = str(tmp_path / "empty")
    assert cli.main(["--out", out_dir, "gen-data", "--n", "0", "--size", "64"]) == 0
    assert "0 scenes" in capfd.readouterr().out
    assert cli.read_manifest(os.path.join(out_dir, "manifest.tsv")) == []


def test_gen_data_seed_changes_content(ws, tmp_path):
    other = str(tmp_path / "other")
    assert cli.main(["--config", ws["cfg"], "--seed", "100", "--out", other, "gen-data"]) == 0
    a = open(first_image(ws), "rb").read()
    b = open(os.path.join(other, "scene_0000.ppm"), "rb").read()
    assert a != b


# -- train ------------------------------------------------------------------


def test_train_logs_and_checkpoint(ws, tmp_path, capfd):
    ckpt = str(tmp_path / "ck.bin")
    rc = cli.main(["--config", ws["cfg"], "--out", ckpt,
                   "train", "--data", ws["data"], "--epochs", "2"])
    assert rc == 0
    lines = [ln for ln in capfd.readouterr().out.splitlines() if ln]
    assert len(lines) == 2
    for i, ln in enumerate(lines):
        epoch, loss = ln.split("\t")
        assert int(epoch) == i + 1  # epochs are reported 1-based
        assert np.isfinite(float(loss))
    state = load_checkpoint(ckpt)
    assert any(k.startswith("param/fusion.") for k in state)
    assert any(k.startswith("adam_m/") for k in state)


def test_train_resume_matches_straight_run(ws, tmp_path, capfd):
    one = str(tmp_path / "one.bin")
    two = str(tmp_path / "two.bin")
    straight = str(tmp_path / "straight.bin")
    base = ["--config", ws["cfg"]]
    assert cli.main(base + ["--out", one, "train", "--data", ws["data"], "--epochs", "1"]) == 0
    assert cli.main(base + ["--out", two, "train", "--data", ws["data"], "--epochs", "1",
                            "--resume", one]) == 0
    out = capfd.readouterr().out
    assert cli.main(base + ["--out", straight, "train", "--data", ws["data"], "--epochs", "2"]) == 0
    assert open(two, "rb").read() == open(straight, "rb").read()
    # the resumed run picked up at epoch 2 rather than restarting at 1
    resumed_lines = [ln for ln in out.splitlines() if ln]
    assert resumed_lines[-1].split("\t")[0] == "2"


@pytest.mark.parametrize("target", ["autoencoder", "denoiser"])
def test_train_other_targets(ws, tmp_path, target):
    ckpt = str(tmp_path / f"{target}.bin")
    rc = cli.main(["--config", ws["cfg"], "--out", ckpt,
                   "train", "--data", ws["data"], "--target", target, "--epochs", "1"])
    assert rc == 0
    assert os.path.exists(ckpt)


def test_train_missing_data_is_data_error(ws, tmp_path):
    rc = cli.main(["--config", ws["cfg"], "--out", str(tmp_path / "x.bin"),
                   "train", "--data", str(tmp_path / "nowhere")])
    assert rc == 2


def test_train_manifest_with_missing_image(ws, tmp_path):
    data = tmp_path / "broken"
    data.mkdir()
    open(data / "manifest.tsv", "w").write("ghost.ppm\tred circle [left of blue square]\t0.1,0.1,0.2,0.2\n")
    rc = cli.main(["--config", ws["cfg"], "--out", str(tmp_path / "x.bin"),
                   "train", "--data", str(data)])
    assert rc == 2


# -- run --------------------------------------------------------------------


def test_run_outputs(ws, tmp_path, capfd):
    out_dir = str(tmp_path / "run")
    rc = cli.main(["--config", ws["cfg"], "--out", out_dir,
                   "run", "--ckpt", ws["ckpt"], "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]"])
    assert rc == 0
    assert "guided steps: 2" in capfd.readouterr().out
    img = read_ppm(os.path.join(out_dir, "output.ppm"))
    assert img.shape == (64, 64, 3)
    g = read_pgm(os.path.join(out_dir, "guidance.pgm"))
    assert g.shape == (2, 2)  # stage-4 grid at 64 px
    rows = open(os.path.join(out_dir, "trace.tsv")).read().splitlines()
    assert len(rows) == 10  # one per diffusion step
    assert all(len(r.split("\t")) == 4 for r in rows)


def test_run_is_deterministic(ws, tmp_path):
    a_dir, b_dir = str(tmp_path / "a"), str(tmp_path / "b")
    args = ["--config", ws["cfg"], "run", "--ckpt", ws["ckpt"], "--image", first_image(ws),
            "--caption", "red circle [left of blue square]"]
    assert cli.main(["--out", a_dir] + args[:2] + args[2:]) == 0
    assert cli.main(["--out", b_dir] + args[:2] + args[2:]) == 0
    for name in ("output.ppm", "guidance.pgm", "trace.tsv"):
        assert open(os.path.join(a_dir, name), "rb").read() == \
            open(os.path.join(b_dir, name), "rb").read()


def test_run_no_guidance_flag(ws, tmp_path, capfd):
    out_dir = str(tmp_path / "ng")
    rc = cli.main(["--config", ws["cfg"], "--no-guidance", "--out", out_dir,
                   "run", "--ckpt", ws["ckpt"], "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]"])
    assert rc == 0
    assert "guided steps: 0" in capfd.readouterr().out
    rows = open(os.path.join(out_dir, "trace.tsv")).read().splitlines()
    for r in rows:
        _, before, after, _ = r.split("\t")
        assert before == after


def test_run_oov_caption_is_data_error(ws, tmp_path):
    rc = cli.main(["--config", ws["cfg"], "--out", str(tmp_path / "o"),
                   "run", "--ckpt", ws["ckpt"], "--image", first_image(ws),
                   "--caption", "mauve blob [near the thing]"])
    assert rc == 2


def test_run_missing_checkpoint_is_data_error(ws, tmp_path):
    rc = cli.main(["--config", ws["cfg"], "--out", str(tmp_path / "o"),
                   "run", "--ckpt", str(tmp_path / "ghost.bin"), "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]"])
    assert rc == 2


def test_run_nan_checkpoint_is_numeric_error(ws, tmp_path):
    state = load_checkpoint(ws["ckpt"])
    victim = next(k for k in state if k.startswith("param/fusion."))
    state[victim] = np.full_like(state[victim], np.nan)
    poisoned = str(tmp_path / "nan.bin")
    save_checkpoint(poisoned, state)
    rc = cli.main(["--config", ws["cfg"], "--out", str(tmp_path / "o"),
                   "run", "--ckpt", poisoned, "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]"])
    assert rc == 3


# -- eval -------------------------------------------------------------------


def test_eval_report(ws, tmp_path, capfd):
    report = str(tmp_path / "report.tsv")
    rc = cli.main(["--config", ws["cfg"], "--out", report,
                   "eval", "--ckpt", ws["ckpt"], "--data", ws["data"]])
    assert rc == 0
    assert "scenes: 4" in capfd.readouterr().out
    lines = open(report).read().splitlines()
    assert len(lines) == 5  # 4 scenes + mean row
    assert lines[-1].startswith("mean\t")
    for ln in lines[:-1]:
        name, iou_s, size_s, dist_s = ln.split("\t")
        assert name.startswith("scene_")
        assert 0.0 <= float(iou_s) <= 1.0
        assert 0.0 <= float(size_s) <= 100.0
        assert 0.0 <= float(dist_s) <= 100.0
    mean_iou = float(lines[-1].split("\t")[1])
    assert mean_iou == pytest.approx(np.mean([float(l.split("\t")[1]) for l in lines[:-1]]), abs=1e-6)


# -- dump-attn --------------------------------------------------------------


def test_dump_attn_heads_and_mean(ws, tmp_path, capfd):
    out_dir = str(tmp_path / "attn")
    rc = cli.main(["--config", ws["cfg"], "--out", out_dir,
                   "dump-attn", "--ckpt", ws["ckpt"], "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]", "--stage", "4"])
    assert rc == 0
    assert "4 head maps" in capfd.readouterr().out  # stage-4 head count from the config
    heads = [read_pgm(os.path.join(out_dir, f"stage4_head{h}.pgm")) for h in range(4)]
    mean = read_pgm(os.path.join(out_dir, "stage4_mean.pgm"))
    assert all(m.shape == (2, 2) for m in heads) and mean.shape == (2, 2)
    assert max(m.max() for m in heads) == 1.0  # shared peak decodes to white
    stacked = np.mean(heads, axis=0)
    assert np.max(np.abs(stacked - mean)) <= 1.0 / 255 + 1e-9


def test_dump_attn_stage_one_grid(ws, tmp_path):
    out_dir = str(tmp_path / "attn1")
    rc = cli.main(["--config", ws["cfg"], "--out", out_dir,
                   "dump-attn", "--ckpt", ws["ckpt"], "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]", "--stage", "1"])
    assert rc == 0
    assert read_pgm(os.path.join(out_dir, "stage1_head0.pgm")).shape == (16, 16)


def test_dump_attn_bad_stage(ws, tmp_path):
    rc = cli.main(["--config", ws["cfg"], "--out", str(tmp_path / "x"),
                   "dump-attn", "--ckpt", ws["ckpt"], "--image", first_image(ws),
                   "--caption", "red circle [left of blue square]", "--stage", "9"])
    assert rc == 1
