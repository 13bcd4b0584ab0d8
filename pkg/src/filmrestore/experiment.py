"""Scaled-down end-to-end run: synthesize, train all stages, restore held-out clips, score them.

    python -m filmrestore.experiment --config configs/toy.cfg --out runs/toy
"""
from __future__ import annotations

import argparse
import csv
import logging
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .inference import InferenceConfig, Restorer
from .backbone import decode_latent, encode_latent
from .metrics import clip_report, psnr
from .synthdata import SynthConfig, list_samples, read_sample, synthesize_dataset, write_frames
from .training import PatchSampler, Trainer, load_model

log = logging.getLogger(__name__)


def synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(
        min_frames=cfg.min_frames,
        num_defects=(cfg.defects_min, cfg.defects_max),
        rescale_range=(cfg.rescale_min, cfg.rescale_max),
        quality_range=(cfg.quality_min, cfg.quality_max),
        grain_range=(cfg.grain_min, cfg.grain_max),
        mask_threshold=cfg.mask_threshold,
        caption=cfg.caption or None,
    )


def score_dir(restored_root, dataset_root) -> list:
    """Rows ``(clip_id, restored report, degraded report)`` for every clip."""
    from .synthdata import read_frames

    rows = []
    for sdir in list_samples(dataset_root):
        s = read_sample(sdir)
        restored = read_frames(Path(restored_root) / sdir.name)
        rows.append((sdir.name, clip_report(restored, s.clean, s.mask), clip_report(s.degraded, s.clean, s.mask)))
    return rows


def run_toy_experiment(workdir, cfg: RunConfig, train_clips: int = 32, test_clips: int = 8) -> dict:
    work = Path(workdir)
    timings = {}
    began = time.time()
    scfg = synth_config(cfg)
    train_root, test_root = work / "train", work / "heldout"
    synthesize_dataset(train_root, train_clips, cfg.seed, scfg, cfg.frames, cfg.height, cfg.width)
    synthesize_dataset(test_root, test_clips, cfg.seed + 1, scfg, cfg.frames, cfg.height, cfg.width)
    timings["synth"] = time.time() - began

    run = RunConfig(cfg, dataset_root=str(train_root), checkpoint_dir=str(work / "checkpoints"))
    sampler = PatchSampler(train_root, run.patch_frames, run.patch_size, run.stride)
    for stage in (0, 1, 2):
        t = time.time()
        res = Trainer(run, sampler).train(stage)
        timings[f"stage{stage}"] = time.time() - t
        log.info("stage %d done in %.0fs, final loss %.4f", stage, timings[f"stage{stage}"], res.history[-1].l_total)

    t = time.time()
    model = load_model(work / "checkpoints" / "stage2.pt")
    restorer = Restorer(model, cfg=InferenceConfig.from_run_config(run))
    ae_psnr = []
    for sdir in list_samples(test_root):
        s = read_sample(sdir)
        write_frames(restorer.restore_video(s.degraded, s.caption), work / "restored" / sdir.name)
        ae_psnr.append(psnr(decode_latent(model.autoencoder, encode_latent(model.autoencoder, s.clean)), s.clean))
    timings["restore"] = time.time() - t

    rows = score_dir(work / "restored", test_root)
    with open(work / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("clip_id", "psnr_full", "psnr_masked", "ssim_full",
                    "degraded_psnr_full", "degraded_psnr_masked", "degraded_ssim_full"))
        for cid, r, d in rows:
            w.writerow([cid] + [f"{v:.4f}" for v in (r["psnr_full"], r["psnr_masked"], r["ssim_full"],
                                                     d["psnr_full"], d["psnr_masked"], d["ssim_full"])])
    mean = lambda key, i: float(np.nanmean([row[i][key] for row in rows]))
    summary = {
        "psnr_full": mean("psnr_full", 1),
        "psnr_masked": mean("psnr_masked", 1),
        "ssim_full": mean("ssim_full", 1),
        "degraded_psnr_full": mean("psnr_full", 2),
        "degraded_psnr_masked": mean("psnr_masked", 2),
        "degraded_ssim_full": mean("ssim_full", 2),
        "autoencoder_psnr": float(np.mean(ae_psnr)),
        "seconds": time.time() - began,
        "timings": timings,
    }
    summary["masked_gain_db"] = summary["psnr_masked"] - summary["degraded_psnr_masked"]
    summary["full_drop_db"] = summary["degraded_psnr_full"] - summary["psnr_full"]
    (work / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in summary.items()))
    return summary


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-clips", type=int, default=32)
    p.add_argument("--test-clips", type=int, default=8)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    s = run_toy_experiment(args.out, cfg, args.train_clips, args.test_clips)
    print(f"masked PSNR {s['degraded_psnr_masked']:.2f} -> {s['psnr_masked']:.2f} dB "
          f"(gain {s['masked_gain_db']:+.2f}); full PSNR {s['degraded_psnr_full']:.2f} -> {s['psnr_full']:.2f} dB "
          f"(drop {s['full_drop_db']:+.2f}); {s['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
