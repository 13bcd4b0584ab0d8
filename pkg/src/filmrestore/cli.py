"""Command-line entry point: ``filmrestore {synth,train,restore,eval}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigurationError, CorruptDatasetError, FilmRestoreError

log = logging.getLogger("filmrestore")

METRIC_COLUMNS = ("clip_id", "psnr_full", "psnr_masked", "ssim_full")


def _kv(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value lines)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", dest="overrides", type=_kv, action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="filmrestore", description="Patch-based diffusion restoration of old film.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic defect dataset")
    s.add_argument("--num-clips", type=int)
    s.add_argument("--source-dir", help="directory of clean clips (one frame folder per clip)")

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--dataset", help="dataset root (overrides dataset_root)")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", action="store_true", help="continue from stage<N>_latest.pt")

    r = sub.add_parser("restore", parents=[common], help="restore a clip or every clip of a dataset")
    r.add_argument("--input", required=True, help="frame folder, sample folder or dataset root")
    r.add_argument("--checkpoint", help="stage-2 checkpoint (default <checkpoint_dir>/stage2.pt)")
    r.add_argument("--caption", default=None)
    r.add_argument("--debug-dir", help="write pre-restored reference and sampler previews here")

    e = sub.add_parser("eval", parents=[common], help="score restored clips against a dataset")
    e.add_argument("--dataset", required=True, help="dataset root with clean frames and masks")
    e.add_argument("--restored", help="root with one restored frame folder per clip (default: score degraded input)")
    e.add_argument("--no-previews", action="store_true")
    return p


def _config(args) -> RunConfig:
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    from .experiment import synth_config
    from .synthdata import load_template_pack, read_frames, synthesize_dataset

    out = Path(args.out)
    sources = None
    source_dir = args.source_dir or cfg.source_dir
    if source_dir:
        dirs = sorted(d for d in Path(source_dir).iterdir() if d.is_dir())
        if not dirs:
            raise ConfigurationError(f"no clip folders in {source_dir}")
        sources = [read_frames(d) for d in dirs]
    pack = load_template_pack(cfg.template_dir) if cfg.template_dir else None
    scfg = replace(synth_config(cfg), template_pack=pack or None)
    n = args.num_clips if args.num_clips is not None else cfg.num_clips
    ids = synthesize_dataset(out, n, cfg.seed, scfg, cfg.frames, cfg.height, cfg.width, sources)
    print(f"wrote {len(ids)} samples to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .plotting import loss_curves
    from .training import Trainer

    updates = {"stage": args.stage, "checkpoint_dir": args.out}
    if args.dataset:
        updates["dataset_root"] = args.dataset
    if args.steps is not None:
        updates["steps"] = args.steps
    cfg.update_checked(updates)
    result = Trainer(cfg).train(args.stage, resume=args.resume)
    log_name = "stage0_loss.csv" if args.stage == 0 else f"stage{args.stage}_loss.csv"
    loss_curves(Path(args.out) / log_name, Path(args.out) / f"stage{args.stage}_loss.png")
    (Path(args.out) / f"stage{args.stage}_config.txt").write_text(cfg.dump())
    last = result.history[-1].l_total if result.history else float("nan")
    print(f"stage {args.stage}: {len(result.history)} steps, final loss {last:.5f}, checkpoint {result.checkpoint}")
    return 0


def _restore_targets(inp: Path, out: Path):
    if (inp / "manifest.txt").exists():
        return [(inp, out)]
    samples = sorted(d for d in inp.iterdir() if d.is_dir() and (d / "manifest.txt").exists()) if inp.is_dir() else []
    if samples:
        return [(d, out / d.name) for d in samples]
    return [(inp, out)]


def cmd_restore(args, cfg: RunConfig) -> int:
    from .inference import InferenceConfig, Restorer
    from .plotting import step_strip
    from .synthdata import parse_manifest, read_frames, write_frames
    from .training import load_model

    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.checkpoint_dir) / "stage2.pt"
    model = load_model(ckpt)
    restorer = Restorer(model, cfg=InferenceConfig.from_run_config(cfg))
    inp, out = Path(args.input), Path(args.out)
    if not inp.exists():
        raise ConfigurationError(f"input {inp} does not exist")
    for src, dst in _restore_targets(inp, out):
        caption = args.caption
        frames_dir = src
        if (src / "manifest.txt").exists():
            meta = parse_manifest(src / "manifest.txt")
            caption = caption if caption is not None else meta.get("caption", "")
            frames_dir = src / "degraded"
        video = read_frames(frames_dir)
        debug = {} if args.debug_dir else None
        restored = restorer.restore_video(video, caption or "", debug=debug)
        write_frames(restored, dst)
        if debug is not None:
            ddir = Path(args.debug_dir) / (src.name if src != inp else "clip")
            if debug["pre_restored"] is not None:
                write_frames(debug["pre_restored"], ddir / "pre_restored")
            if debug["steps"]:
                imgs = [restorer.decode_preview(z) for _, z in debug["steps"]]
                step_strip(ddir / "sampler_steps.png", imgs, [f"t={t}" for t, _ in debug["steps"]])
        print(f"restored {frames_dir} -> {dst}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .metrics import clip_report
    from .plotting import preview_grid
    from .synthdata import list_samples, read_frames, read_sample

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = list_samples(args.dataset)
    if not samples:
        raise CorruptDatasetError(f"no samples in {args.dataset}")
    rows = []
    for sdir in samples:
        sample = read_sample(sdir)
        if args.restored:
            rdir = Path(args.restored) / sdir.name
            restored = read_frames(rdir)
            if restored.shape != sample.clean.shape:
                raise CorruptDatasetError(f"{rdir}: shape {restored.shape} != clean {sample.clean.shape}")
        else:
            restored = sample.degraded
        rep = clip_report(restored, sample.clean, sample.mask)
        rows.append((sdir.name, rep["psnr_full"], rep["psnr_masked"], rep["ssim_full"]))
        if not args.no_previews:
            preview_grid(out / f"preview_{sdir.name}.png", sample.degraded, restored, sample.clean, sample.mask,
                         title=f"{sdir.name}  PSNR {rep['psnr_full']:.2f} dB")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [f"{v:.6f}" for v in r[1:]])
        means = [float(np.nanmean([r[i] for r in rows])) for i in (1, 2, 3)]
        w.writerow(["mean"] + [f"{v:.6f}" for v in means])
    (out / "metrics_notes.txt").write_text(
        "PSNR/SSIM only; LPIPS, BRISQUE and FVD need pretrained networks and are not computed.\n")
    print(f"psnr_full={means[0]:.3f} psnr_masked={means[1]:.3f} ssim_full={means[2]:.4f} ({len(rows)} clips)")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "restore": cmd_restore, "eval": cmd_eval}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"filmrestore: configuration error: {exc}", file=sys.stderr)
        return 2
    except (FilmRestoreError, OSError, RuntimeError, ValueError) as exc:
        print(f"filmrestore: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
