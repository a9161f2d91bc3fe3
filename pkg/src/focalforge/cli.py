"""``focalforge`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes its
resolved configuration as ``focalforge_<subcommand>.cfg`` next to its output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import logging
import os
import sys
import typing
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import io as ffio

log = logging.getLogger("focalforge")

SEED_ENV = "FOCALFORGE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ----------------------------------------------------------------


def resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def write_run_config(out_dir: Path, args: argparse.Namespace, **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    # command-line values are echoed under "args." and skipped when the file is read back
    values = {f"args.{k}": v for k, v in vars(args).items() if k != "func"}
    values.update(extra)
    lines = [f"# focalforge {__version__}"]
    for k in sorted(values):
        v = values[k]
        if isinstance(v, Path):
            v = v.resolve()
        elif isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    path = out_dir / f"focalforge_{args.command.replace('-', '_')}.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def _out_dir_of(path: Path) -> Path:
    return path if path.suffix == "" else path.parent


def _split_config(path: Optional[Path], *classes, **overrides):
    """Build several dataclasses from one key-value file.

    A bare key goes to the first class declaring it; ``train.`` and ``model.`` prefixes (as in the
    echoed run config) address the first and second class directly.
    """
    raw = ffio.parse_kv(path.read_text()) if path is not None else {}
    prefixes = dict(zip(("train.", "model."), classes))
    values = [{} for _ in classes]
    unknown = []
    for key, v in raw.items():
        if key.startswith("args."):
            continue
        pre = next((p for p in prefixes if key.startswith(p)), None)
        name = key[len(pre):] if pre else key
        owners = [prefixes[pre]] if pre else classes
        cls = next((c for c in owners if name in {f.name for f in dataclasses.fields(c)}), None)
        if cls is None:
            unknown.append(key)
        else:
            values[classes.index(cls)][name] = v
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    built = []
    for cls, vals in zip(classes, values):
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        vals = {k: ffio._coerce(v, hints[k]) for k, v in vals.items()}
        vals.update({k: v for k, v in overrides.items() if v is not None and k in names})
        built.append(cls(**vals))
    return built


def _stack_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"stack directory not found: {root}")
    if any(root.glob("layer_*.png")):
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("layer_*.png")))
    if not dirs:
        raise FileNotFoundError(f"no stacks (layer_*.png) under {root}")
    return dirs


def _png_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if files:
            return files
    raise FileNotFoundError(f"no PNG input at {path}")


def _fmt(x: float, digits: int = 4) -> str:
    return f"{x:.{digits}f}"


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    from . import scenes
    from .stack_synth import drop_layers, save_stack, synthesize_stack

    rng = np.random.default_rng(args.seed)
    if args.images is not None:
        pairs, names = scenes.read_dataset(args.images, args.depths)
    elif args.scenes:
        pairs = [scenes.make_scene(rng, args.size) for _ in range(args.scenes)]
        names = [f"{i:04d}" for i in range(len(pairs))]
    else:
        raise UsageError("synth needs --images (with --depths) or --scenes N")
    if not 0.0 <= args.drop <= 0.5:
        raise UsageError("--drop must be in [0, 0.5]")
    out = args.out
    write_run_config(out, args)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    for name, (img, depth) in zip(names, pairs):
        frac = float(rng.uniform(0.0, args.drop)) if args.drop > 0 else 0.0
        stack = drop_layers(synthesize_stack(img, depth, args.layers, args.blur_gain), frac, rng)
        save_stack(out / "stacks" / name, stack, depth, blur_gain=args.blur_gain, seed=args.seed,
                   drop_fraction=round(frac, 6), source=name)
        ffio.write_png(out / "gt" / f"{name}.png", img)
    log.info("wrote %d stacks to %s", len(pairs), out / "stacks")
    return 0


def _fuse_one(stack, method, model, mode, window):
    from . import baselines
    from .fusion_net import run_fusion

    if method == "average":
        return baselines.average_fuse(stack), None
    if method == "laplacian":
        fused, index = baselines.laplacian_argmax_fuse(stack, window)
        return fused, index
    fused, probs = run_fusion(model, stack, mode)
    return fused, np.argmax(probs, axis=0)


def cmd_fuse(args) -> int:
    from .fusion_net import load_model
    from .stack_synth import load_stack

    method = args.method or ("net" if args.ckpt else "laplacian")
    if method == "net" and args.ckpt is None:
        raise UsageError("--method net needs --ckpt")
    if method == "average" and args.save_map is not None:
        raise UsageError("--save-map is unavailable for --method average")
    dirs = _stack_dirs(args.stack)
    model = load_model(args.ckpt) if method == "net" else None
    batch = len(dirs) > 1 or args.out.suffix.lower() != ".png"
    write_run_config(args.out if batch else args.out.parent, args, method=method)
    for d in dirs:
        fused, index = _fuse_one(load_stack(d), method, model, args.mode, args.window)
        if batch:
            args.out.mkdir(parents=True, exist_ok=True)
            ffio.write_png(args.out / f"{d.name}.png", fused)
            if args.save_map is not None:
                args.save_map.mkdir(parents=True, exist_ok=True)
                ffio.write_grid(args.save_map / f"{d.name}.ffd", index)
        else:
            ffio.write_png(args.out, fused)
            if args.save_map is not None:
                ffio.write_grid(args.save_map, index)
    log.info("fused %d stack(s) with %s", len(dirs), method)
    return 0


def cmd_train_fusion(args) -> int:
    from . import scenes
    from .fusion_net import FusionModelConfig
    from .train_fusion import TrainingConfig, train

    cfg, mcfg = _split_config(args.config, TrainingConfig, FusionModelConfig, seed=args.seed, epochs=args.epochs)
    data, _ = scenes.read_dataset(args.data / "images", args.data / "depths")
    val = scenes.read_dataset(args.val / "images", args.val / "depths")[0] if args.val else None
    out_dir = _out_dir_of(args.out)
    write_run_config(out_dir, args, **{f"train.{k}": v for k, v in dataclasses.asdict(cfg).items()},
                     **{f"model.{k}": v for k, v in mcfg.to_dict().items()})
    res = train(data, cfg, mcfg, val_dataset=val, out=args.out, log_path=out_dir / "train_fusion_log.csv")
    log.info("best val ssim %.4f after %d steps", res.best_val_ssim, res.steps)
    return 0


def _read_images(path: Path) -> list[np.ndarray]:
    d = path / "images" if (path / "images").is_dir() else path
    return [ffio.read_png(f) for f in _png_files(d)]


def cmd_train_vae(args) -> int:
    from .diffusion import AutoencoderConfig, DiffusionTrainConfig, train_autoencoder

    cfg, mcfg = _split_config(args.config, DiffusionTrainConfig, AutoencoderConfig, seed=args.seed, steps=args.steps)
    images = _read_images(args.data)
    out_dir = _out_dir_of(args.out)
    write_run_config(out_dir, args, **{f"train.{k}": v for k, v in dataclasses.asdict(cfg).items()},
                     **{f"model.{k}": v for k, v in dataclasses.asdict(mcfg).items()})
    train_autoencoder(images, cfg, mcfg, out=args.out, log_path=out_dir / "train_vae_log.csv")
    return 0


def cmd_train_diffusion(args) -> int:
    from .diffusion import DenoiserConfig, DiffusionTrainConfig, load_autoencoder, train_denoiser

    cfg, mcfg = _split_config(args.config, DiffusionTrainConfig, DenoiserConfig, seed=args.seed, steps=args.steps)
    vae = load_autoencoder(args.vae)
    if mcfg.latent_channels != vae.config.latent_channels:
        raise ValueError("denoiser latent_channels must match the autoencoder")
    images = _read_images(args.data)
    out_dir = _out_dir_of(args.out)
    write_run_config(out_dir, args, **{f"train.{k}": v for k, v in dataclasses.asdict(cfg).items()},
                     **{f"model.{k}": v for k, v in dataclasses.asdict(mcfg).items()})
    train_denoiser(images, vae, cfg, mcfg, out=args.out, log_path=out_dir / "train_diffusion_log.csv")
    return 0


def _load_backbone(vae_path: Path, diffusion_path: Path):
    from .diffusion import load_autoencoder, load_denoiser

    vae = load_autoencoder(vae_path)
    denoiser, sched_cfg = load_denoiser(diffusion_path)
    return vae, denoiser, sched_cfg


def cmd_train_control(args) -> int:
    from . import ifcontrolnet as ic
    from .diffusion import make_schedule

    (cfg,) = _split_config(args.config, ic.ControlTrainConfig, seed=args.seed, steps=args.steps)
    fused_dir, gt_dir = args.pairs / "fused", args.pairs / "gt"
    files = _png_files(fused_dir)
    pairs = []
    for f in files:
        g = gt_dir / f.name
        if not g.is_file():
            raise FileNotFoundError(f"missing ground truth for {f.name}: {g}")
        pairs.append((ffio.read_png(f), ffio.read_png(g)))
    vae, denoiser, sched_cfg = _load_backbone(args.vae, args.diffusion)
    ic.freeze(vae)
    ic.freeze(denoiser)
    schedule = make_schedule(sched_cfg["T"], sched_cfg["beta_start"], sched_cfg["beta_end"])
    out_dir = _out_dir_of(args.out)
    write_run_config(out_dir, args, **{f"train.{k}": v for k, v in dataclasses.asdict(cfg).items()})
    ic.train_control(pairs, vae, denoiser, schedule, cfg, out=args.out, log_path=out_dir / "train_control_log.csv")
    return 0


def cmd_restore(args) -> int:
    from . import ifcontrolnet as ic

    files = _png_files(args.input)
    vae, denoiser, sched_cfg = _load_backbone(args.vae, args.diffusion)
    branch = ic.load_control(args.control)
    schedule = ic.sampling_schedule(sched_cfg, args.steps, args.sigma_mode)
    batch = args.input.is_dir()
    write_run_config(args.out if batch else args.out.parent, args)
    for f in files:
        restored = ic.restore(ffio.read_png(f), vae, denoiser, branch, schedule, args.seed)
        if batch:
            ffio.write_png(args.out / f.name, restored)
        else:
            ffio.write_png(args.out, restored)
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    report = evaluate(args.pred, args.gt)
    write_run_config(args.out.parent, args)
    report.to_csv(args.out)
    for c in report.cases:
        if c.error:
            log.warning("%s: %s", c.case, c.error)
    print(f"cases {len(report.ok)}/{len(report.cases)}  ssim {report.mean('ssim'):.4f}  "
          f"psnr {report.mean('psnr'):.2f}")
    return 0


# -- bench / ablate ---------------------------------------------------------

# desk-scale stand-ins for the benchmark datasets: (name, layers, drop fraction)
BENCH_SETS = (("sparse-L3", 3, 0.0), ("dense-L7", 7, 0.0), ("dropped-L5", 5, 0.4))


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def cmd_bench(args) -> int:
    from . import scenes
    from .fusion_net import load_model
    from .metrics import evaluate
    from .stack_synth import drop_layers, load_stack, save_stack, synthesize_stack

    restore_args = (args.vae, args.diffusion, args.control)
    if any(restore_args) and not all(restore_args):
        raise UsageError("restoration needs --vae, --diffusion and --control together")
    if all(restore_args) and args.fusion_ckpt is None:
        raise UsageError("restoration needs --fusion-ckpt")
    out = args.out
    write_run_config(out, args)

    methods = ["average", "laplacian"]
    model = None
    if args.fusion_ckpt is not None:
        model = load_model(args.fusion_ckpt)
        methods.append("net")
    if all(restore_args):
        from . import ifcontrolnet as ic

        vae, denoiser, sched_cfg = _load_backbone(args.vae, args.diffusion)
        branch = ic.load_control(args.control)
        schedule = ic.sampling_schedule(sched_cfg, args.steps)
        methods.append("net+restore")

    seqs = np.random.SeedSequence(args.seed).spawn(len(BENCH_SETS))
    summary: dict[tuple[str, str], tuple[float, float]] = {}
    case_rows = []
    for (name, L, drop), ss in zip(BENCH_SETS, seqs):
        rng = np.random.default_rng(ss)
        root = out / name
        for i in range(args.scenes):
            img, depth = scenes.make_scene(rng, args.size)
            stack = drop_layers(synthesize_stack(img, depth, L, args.blur_gain), drop, rng)
            save_stack(root / "stacks" / f"{i:04d}", stack, depth, blur_gain=args.blur_gain, seed=args.seed)
            (root / "gt").mkdir(parents=True, exist_ok=True)
            ffio.write_png(root / "gt" / f"{i:04d}.png", img)
        stack_dirs = _stack_dirs(root / "stacks")
        for method in methods:
            pred = root / method
            pred.mkdir(parents=True, exist_ok=True)
            for d in stack_dirs:
                stack = load_stack(d)
                if method == "net+restore":
                    fused = ffio.read_png(root / "net" / f"{d.name}.png")
                    img = ic.restore(fused, vae, denoiser, branch, schedule, args.seed)
                else:
                    img, _ = _fuse_one(stack, method, model, args.mode, 9)
                ffio.write_png(pred / f"{d.name}.png", img)
            report = evaluate(pred, root / "gt")
            report.to_csv(root / f"report_{method}.csv")
            summary[(method, name)] = (report.mean("ssim"), report.mean("psnr"))
            for c in report.cases:
                case_rows.append([name, method, c.case, _fmt(c.ssim, 6), _fmt(c.psnr, 4)])

    header = ["method"] + [f"{n}_{m}" for n, _, _ in BENCH_SETS for m in ("ssim", "psnr")]
    rows = [[m] + [_fmt(v, 4) for n, _, _ in BENCH_SETS for v in summary[(m, n)]] for m in methods]
    _write_csv(out / "bench.csv", header, rows)
    _write_csv(out / "bench_cases.csv", ["dataset", "method", "case", "ssim", "psnr"], case_rows)
    md_header = ["Method"] + [f"{n} {m}" for n, _, _ in BENCH_SETS for m in ("SSIM", "PSNR")]
    (out / "bench.md").write_text(_markdown_table(md_header, rows))
    print(_markdown_table(md_header, rows), end="")
    return 0


def parse_ratio(text: str) -> int:
    """``"1/4"`` or ``"0.25"`` -> pooling factor 4."""
    try:
        r = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"bad pooling ratio {text!r}") from None
    if r <= 0 or r > 1 or r.numerator != 1:
        raise UsageError(f"pooling ratio must be 1/k, got {text!r}")
    return r.denominator


def cmd_ablate(args) -> int:
    from . import scenes
    from .fusion_net import SACA_POOLS, FusionModelConfig, FusionNet
    from .train_fusion import TrainingConfig, train

    pools = [parse_ratio(r) for r in args.ratios.split(",")]
    bad = [p for p in pools if p not in SACA_POOLS]
    if bad:
        raise UsageError(f"unsupported pooling ratios 1/{bad}; choose from {['1/%d' % p for p in SACA_POOLS]}")
    loops = [int(x) for x in args.loops.split(",")]
    if args.pca and 1 not in pools:
        pools.append(1)
    if args.data is not None:
        data, _ = scenes.read_dataset(args.data / "images", args.data / "depths")
    else:
        data = scenes.make_dataset(args.scenes, args.seed, args.size)
    out = args.out
    write_run_config(out, args)
    cfg = TrainingConfig(epochs=args.epochs, seed=args.seed, image_size=args.size)

    runs = []
    for n in loops:
        runs.append(("loops", str(n), FusionModelConfig(loops=n, saca_pool=4)))
    for p in pools:
        label = "1 (PCA)" if p == 1 else f"1/{p}"
        runs.append(("ratio", label, FusionModelConfig(loops=1, saca_pool=p)))
    rows = []
    for sweep, label, mcfg in runs:
        res = train(data, cfg, mcfg)
        n_params = sum(p.numel() for p in FusionNet(mcfg).parameters())
        rows.append([sweep, label, str(n_params), _fmt(res.best_val_ssim, 6),
                     _fmt(max(h["val_psnr"] for h in res.history), 4)])
        log.info("%s=%s val ssim %.4f", sweep, label, res.best_val_ssim)
    header = ["sweep", "setting", "params", "val_ssim", "val_psnr"]
    _write_csv(out / "ablate.csv", header, rows)
    (out / "ablate.md").write_text(_markdown_table(header, rows))
    print(_markdown_table(header, rows), end="")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="focalforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"focalforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help=f"RNG seed (default ${SEED_ENV} or 0)")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "synthesize focal stacks from image/depth pairs")
    sp.add_argument("--images", type=Path, help="directory of RGB PNGs")
    sp.add_argument("--depths", type=Path, help="directory of .ffd depth grids matched by file stem")
    sp.add_argument("--scenes", type=int, default=0, help="generate N synthetic scenes instead of reading --images")
    sp.add_argument("--size", type=int, default=64, help="side length of generated scenes")
    sp.add_argument("--layers", type=int, default=5, help="layers per stack")
    sp.add_argument("--blur-gain", type=float, default=1.5, help="defocus sigma per bin of depth distance")
    sp.add_argument("--drop", type=float, default=0.0, help="maximum fraction of layers dropped per stack")
    sp.add_argument("--out", type=Path, required=True, help="output directory (stacks/ and gt/)")

    sp = add("train-fusion", cmd_train_fusion, "train the fusion network")
    sp.add_argument("--data", type=Path, required=True, help="directory with images/ and depths/")
    sp.add_argument("--val", type=Path, help="held-out directory in the --data layout")
    sp.add_argument("--config", type=Path, help="key = value file; train.* and model.* keys")
    sp.add_argument("--epochs", type=int, help="override the configured epoch count")
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")

    sp = add("fuse", cmd_fuse, "fuse one stack directory or a directory of stacks")
    sp.add_argument("--stack", type=Path, required=True, help="stack directory, or a directory of stack directories")
    sp.add_argument("--method", choices=("net", "laplacian", "average"), help="default net when --ckpt is given, else laplacian")
    sp.add_argument("--ckpt", type=Path, help="fusion checkpoint for --method net")
    sp.add_argument("--mode", choices=("soft", "hard"), help="soft weighting or hard selection (default from checkpoint)")
    sp.add_argument("--window", type=int, default=9, help="focus-measure window for --method laplacian")
    sp.add_argument("--out", type=Path, required=True, help="PNG for one stack, directory for many")
    sp.add_argument("--save-map", type=Path, help="write the hard layer-index map as an FFD1 grid")

    sp = add("train-vae", cmd_train_vae, "train the latent autoencoder")
    sp.add_argument("--data", type=Path, required=True, help="directory of RGB PNGs (or images/ subdirectory)")
    sp.add_argument("--config", type=Path, help="key = value training/model file")
    sp.add_argument("--steps", type=int, help="override the configured step count")
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")

    sp = add("train-diffusion", cmd_train_diffusion, "train the latent denoiser")
    sp.add_argument("--data", type=Path, required=True, help="directory of RGB PNGs (or images/ subdirectory)")
    sp.add_argument("--vae", type=Path, required=True, help="trained autoencoder checkpoint")
    sp.add_argument("--config", type=Path, help="key = value training/model file")
    sp.add_argument("--steps", type=int, help="override the configured step count")
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")

    sp = add("train-control", cmd_train_control, "train the restoration control branch")
    sp.add_argument("--pairs", type=Path, required=True, help="directory with fused/ and gt/ PNGs")
    sp.add_argument("--vae", type=Path, required=True, help="trained autoencoder checkpoint")
    sp.add_argument("--diffusion", type=Path, required=True, help="trained denoiser checkpoint")
    sp.add_argument("--config", type=Path, help="key = value training file")
    sp.add_argument("--steps", type=int, help="override the configured step count")
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")

    sp = add("restore", cmd_restore, "restore fused images with the control branch")
    sp.add_argument("--input", type=Path, required=True, help="fused PNG or directory of PNGs")
    sp.add_argument("--vae", type=Path, required=True)
    sp.add_argument("--diffusion", type=Path, required=True)
    sp.add_argument("--control", type=Path, required=True)
    sp.add_argument("--steps", type=int, default=200, help="sampling steps (respaced when below the trained T)")
    sp.add_argument("--sigma-mode", choices=("beta", "posterior"), default="beta", help="per-step noise level")
    sp.add_argument("--out", type=Path, required=True, help="PNG for one input, directory for many")

    sp = add("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--pred", type=Path, required=True, help="predicted PNG or directory")
    sp.add_argument("--gt", type=Path, required=True, help="ground-truth PNG or directory with matching names")
    sp.add_argument("--out", type=Path, required=True, help="output CSV")

    sp = add("bench", cmd_bench, "end-to-end synth, fuse, restore and eval benchmark")
    sp.add_argument("--out", type=Path, default=Path("bench_out"), help="report directory")
    sp.add_argument("--scenes", type=int, default=10, help="scenes per dataset")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--blur-gain", type=float, default=1.5)
    sp.add_argument("--fusion-ckpt", type=Path, help="adds the learned fusion method")
    sp.add_argument("--mode", choices=("soft", "hard"), help="fusion mode for the learned method")
    sp.add_argument("--vae", type=Path, help="with --diffusion and --control, adds net+restore")
    sp.add_argument("--diffusion", type=Path)
    sp.add_argument("--control", type=Path)
    sp.add_argument("--steps", type=int, default=200, help="restoration sampling steps")

    sp = add("ablate", cmd_ablate, "refinement-loop and pooling-ratio sweeps")
    sp.add_argument("--data", type=Path, help="directory with images/ and depths/ instead of generated scenes")
    sp.add_argument("--scenes", type=int, default=200, help="generated scenes when --data is absent")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--epochs", type=int, default=6, help="epochs per setting")
    sp.add_argument("--loops", default="0,1", help="comma-separated refinement-loop counts")
    sp.add_argument("--ratios", default="1/2,1/4,1/8,1/16", help="comma-separated pooling ratios such as 1/4")
    sp.add_argument("--pca", action="store_true", help="also run pixel-wise attention (ratio 1)")
    sp.add_argument("--out", type=Path, default=Path("ablate_out"), help="report directory")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("focalforge: error: a subcommand is required")
        args.seed = resolve_seed(args.seed)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed % 2**32)
    try:
        import torch

        torch.manual_seed(args.seed)
        return args.func(args)
    except UsageError as e:
        print(f"focalforge {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"focalforge {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
