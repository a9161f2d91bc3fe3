import numpy as np
import pytest

from focalforge import cli
from focalforge import io as ffio
from focalforge import scenes
from focalforge import fusion_net as fn
from focalforge.fusion_net import FusionModelConfig, FusionNet, save_model


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_unknown_subcommand_is_usage_error(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert cli.main(["eval", "--bogus", "1"]) == 1


def test_no_subcommand_is_usage_error():
    assert cli.main([]) == 1


def test_fuse_missing_stack_is_runtime_error(tmp_path, capsys):
    assert cli.main(["fuse", "--stack", str(tmp_path / "missing"), "--out", str(tmp_path / "o.png")]) == 2
    assert "missing" in capsys.readouterr().err


def test_seed_env_fallback(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "13")
    assert cli.resolve_seed(None) == 13
    assert cli.resolve_seed(5) == 5
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    with pytest.raises(cli.UsageError):
        cli.resolve_seed(None)


@pytest.mark.parametrize("text,pool", [("1/2", 2), ("1/16", 16), ("0.25", 4), ("1", 1)])
def test_parse_ratio(text, pool):
    assert cli.parse_ratio(text) == pool


def test_parse_ratio_rejects():
    with pytest.raises(cli.UsageError):
        cli.parse_ratio("2/3")


def test_synth_fuse_eval_pipeline(tmp_path):
    out = tmp_path / "syn"
    assert cli.main(["synth", "--scenes", "3", "--size", "32", "--layers", "4", "--drop", "0.5",
                     "--seed", "3", "--out", str(out)]) == 0
    assert (out / "focalforge_synth.cfg").is_file()
    assert "seed = 3" in (out / "focalforge_synth.cfg").read_text()
    assert sorted(p.name for p in (out / "stacks").iterdir()) == ["0000", "0001", "0002"]

    ckpt = tmp_path / "net.pt"
    save_model(ckpt, FusionNet(FusionModelConfig(widths=(8, 8, 8, 8), feat_dim=8)))
    for method in ("laplacian", "average", "net"):
        args = ["fuse", "--stack", str(out / "stacks"), "--method", method, "--out", str(tmp_path / method)]
        if method == "net":
            args += ["--ckpt", str(ckpt), "--save-map", str(tmp_path / "maps")]
        assert cli.main(args) == 0
        assert len(list((tmp_path / method).glob("*.png"))) == 3
    grid = ffio.read_grid(tmp_path / "maps" / "0000.ffd")
    assert grid.shape == (32, 32) and grid.min() >= 0

    single = tmp_path / "one.png"
    assert cli.main(["fuse", "--stack", str(out / "stacks" / "0001"), "--out", str(single),
                     "--save-map", str(tmp_path / "one.ffd")]) == 0
    assert ffio.read_png(single).shape == (32, 32, 3)

    report = tmp_path / "report.csv"
    assert cli.main(["eval", "--pred", str(tmp_path / "laplacian"), "--gt", str(out / "gt"),
                     "--out", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0].startswith("case,ssim") and lines[-1].startswith("MEAN")


def test_synth_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--scenes", "2", "--size", "24", "--drop", "0.4", "--seed", "9",
                         "--out", str(tmp_path / name)]) == 0
    for f in sorted((tmp_path / "a" / "stacks").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_fuse_net_without_ckpt_is_usage_error(tmp_path):
    assert cli.main(["fuse", "--stack", str(tmp_path), "--method", "net", "--out", str(tmp_path / "x.png")]) == 1


def test_train_fusion_with_config(tmp_path):
    scenes.write_dataset(tmp_path / "data", scenes.make_dataset(6, seed=0, size=32))
    cfg = tmp_path / "fusion.cfg"
    cfg.write_text("# tiny\nbatch_size = 2\nepochs = 1\nimage_size = 32\nwidths = 8, 8, 8, 8\nfeat_dim = 8\n")
    ckpt = tmp_path / "ck" / "net.pt"
    assert cli.main(["train-fusion", "--data", str(tmp_path / "data"), "--config", str(cfg),
                     "--out", str(ckpt), "--seed", "1"]) == 0
    assert ckpt.is_file()
    assert (tmp_path / "ck" / "train_fusion_log.csv").is_file()
    text = (tmp_path / "ck" / "focalforge_train_fusion.cfg").read_text()
    assert "model.feat_dim = 8" in text and "train.seed = 1" in text

    # the echoed run config is itself a valid config
    again = tmp_path / "again" / "net.pt"
    assert cli.main(["train-fusion", "--data", str(tmp_path / "data"), "--config",
                     str(tmp_path / "ck" / "focalforge_train_fusion.cfg"), "--out", str(again)]) == 0
    assert fn.load_model(again).config == fn.load_model(ckpt).config


def test_train_fusion_bad_config_key(tmp_path):
    scenes.write_dataset(tmp_path / "data", scenes.make_dataset(2, seed=0, size=32))
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 3\n")
    assert cli.main(["train-fusion", "--data", str(tmp_path / "data"), "--config", str(cfg),
                     "--out", str(tmp_path / "n.pt")]) == 2


def test_diffusion_pipeline_smoke(tmp_path):
    data = tmp_path / "data"
    pairs = scenes.make_dataset(4, seed=1, size=32)
    scenes.write_dataset(data, pairs)
    vcfg = tmp_path / "vae.cfg"
    vcfg.write_text("steps = 3\nbatch_size = 2\nwidths = 8, 8\n")
    dcfg = tmp_path / "den.cfg"
    dcfg.write_text("steps = 3\nbatch_size = 2\nT = 10\nwidths = 8, 16, 16\ntime_dim = 16\n")
    ccfg = tmp_path / "ctl.cfg"
    ccfg.write_text("steps = 3\nphase1_steps = 2\nbatch_size = 2\n")
    assert cli.main(["train-vae", "--data", str(data), "--config", str(vcfg), "--out", str(tmp_path / "v.pt")]) == 0
    assert cli.main(["train-diffusion", "--data", str(data), "--vae", str(tmp_path / "v.pt"),
                     "--config", str(dcfg), "--out", str(tmp_path / "d.pt")]) == 0
    for sub in ("fused", "gt"):
        (tmp_path / "pairs" / sub).mkdir(parents=True)
    for i, (img, _) in enumerate(pairs):
        ffio.write_png(tmp_path / "pairs" / "gt" / f"{i}.png", img)
        ffio.write_png(tmp_path / "pairs" / "fused" / f"{i}.png", np.clip(img * 0.9, 0, 1))
    assert cli.main(["train-control", "--pairs", str(tmp_path / "pairs"), "--vae", str(tmp_path / "v.pt"),
                     "--diffusion", str(tmp_path / "d.pt"), "--config", str(ccfg),
                     "--out", str(tmp_path / "c.pt")]) == 0
    restore = ["restore", "--input", str(tmp_path / "pairs" / "fused" / "0.png"), "--vae", str(tmp_path / "v.pt"),
               "--diffusion", str(tmp_path / "d.pt"), "--control", str(tmp_path / "c.pt"), "--steps", "5",
               "--seed", "2"]
    assert cli.main(restore + ["--out", str(tmp_path / "r1.png")]) == 0
    assert cli.main(restore + ["--out", str(tmp_path / "r2.png")]) == 0
    assert (tmp_path / "r1.png").read_bytes() == (tmp_path / "r2.png").read_bytes()
    assert ffio.read_png(tmp_path / "r1.png").shape == (32, 32, 3)


def test_restore_missing_checkpoint(tmp_path):
    img = tmp_path / "x.png"
    ffio.write_png(img, np.zeros((16, 16, 3)))
    assert cli.main(["restore", "--input", str(img), "--vae", str(tmp_path / "no.pt"), "--diffusion",
                     str(tmp_path / "no.pt"), "--control", str(tmp_path / "no.pt"), "--out",
                     str(tmp_path / "o.png")]) == 2


def test_bench_baselines_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["bench", "--seed", "7", "--scenes", "2", "--size", "32", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "bench.csv").read_bytes() == (tmp_path / "b" / "bench.csv").read_bytes()
    header = (tmp_path / "a" / "bench.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "method" and "dropped-L5_ssim" in header
    md = (tmp_path / "a" / "bench.md").read_text()
    assert "| laplacian |" in md and "| average |" in md


def test_bench_partial_restore_flags(tmp_path):
    assert cli.main(["bench", "--vae", "x.pt", "--out", str(tmp_path)]) == 1


def test_ablate_mechanics(tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--scenes", "4", "--size", "32", "--epochs", "1", "--loops", "0",
                     "--ratios", "1/2,1/4,1/8,1/16", "--out", str(out)]) == 0
    rows = (out / "ablate.csv").read_text().splitlines()
    assert rows[0] == "sweep,setting,params,val_ssim,val_psnr"
    assert [r.split(",")[1] for r in rows[1:]] == ["0", "1/2", "1/4", "1/8", "1/16"]


def test_ablate_rejects_bad_ratio(tmp_path):
    assert cli.main(["ablate", "--ratios", "1/3", "--out", str(tmp_path)]) == 1
