import subprocess
import sys

from mitml.cli import main

TINY_CFG = "epochs=1\nstage_channels=4,4,8,8,8\nbatch_identities=4\naugment=false\nmode=baseline\n"


def test_usage_errors_exit_2(capsys):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["eval", "--data", "x", "--ckpt", "y", "--direction", "sideways"]) == 2
    assert main(["--threads", "0", "gradcheck"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_log_level_is_a_usage_error(monkeypatch, capsys):
    monkeypatch.setenv("MITML_LOG", "chatty")
    assert main(["gradcheck", "--module", "conv", "--seeds", "1"]) == 2
    assert "MITML_LOG" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path), "--ckpt", str(tmp_path / "none.mckp")]) == 1
    assert "failed" in capsys.readouterr().err


def test_bad_config_is_a_usage_error(tmp_path, small_corpus):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate=1\n")
    assert main(["train", "--data", str(small_corpus), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--ids", "4", "--seed", "1", "--tracklets", "1"]) == 0
    assert (tmp_path / "d" / "manifest.csv").exists()
    assert main(["gen-data", "--out", str(tmp_path / "e"), "--ids", "2", "--seed", "1"]) == 2


def test_gradcheck_module(capsys):
    assert main(["gradcheck", "--module", "conv", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "conv.conv2d_s2p1" in out and "3/3" in out


def test_train_then_eval(tmp_path, small_corpus, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    run = tmp_path / "run"
    assert main(["train", "--data", str(small_corpus), "--config", str(cfg), "--out", str(run), "--shuffle-frames"]) == 0
    for name in ("config.txt", "losses.csv", "final.mckp", "metrics.csv"):
        assert (run / name).exists()
    assert "shuffle_frames=true" in (run / "config.txt").read_text()
    capsys.readouterr()
    assert main(["eval", "--data", str(small_corpus), "--ckpt", str(run / "final.mckp"), "--direction", "v2i"]) == 0
    out = capsys.readouterr().out
    assert "direction,r1,r5,r10,r20,map,num_queries" in out and "vis_to_ir" in out and "ir_to_vis" not in out
    out_csv = tmp_path / "m.csv"
    assert main(["eval", "--data", str(small_corpus), "--ckpt", str(run / "final.mckp"), "--out", str(out_csv)]) == 0
    assert out_csv.read_text() == (run / "metrics.csv").read_text()


def test_ablate_writes_csv(tmp_path, small_corpus, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = tmp_path / "abl"
    assert main(["ablate", "--sweep", "pooling", "--data", str(small_corpus), "--out", str(out), "--config", str(cfg)]) == 0
    lines = (out / "ablate_pooling.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 2
    assert {l.split(",")[1] for l in lines[1:]} == {"average", "max", "softmax_weighted"}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mitml", "ablate", "--sweep", "depth"], capture_output=True, text=True)
    assert res.returncode == 2
