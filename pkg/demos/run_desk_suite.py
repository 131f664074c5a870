"""Train every run the acceptance suite looks for.

Layout written (relative to --root, default ./runs):

    overfit/seed-0/            overfit preset, fixed program, 10k steps
    pattern-mean/seed-{0,1,2}/ pattern preset trained on mean latents
    pattern-ga1/seed-{0,1,2}/  pattern preset, one stop-gradient ascent step
    ood-ga1/seed-{0,1,2}/      ood preset, one ascent step, 100k steps

Every run resumes from its own latest.ckpt, so the script can be killed and
restarted at will. Use --only to pick runs and --estimate to time a few
steps of each and print projected wall-clock without training.
"""
import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

import torch

from lpn.training import Trainer, preset, train

SUITE = {
    "overfit": dict(preset="overfit", seeds=(0,), inner_steps=0),
    "pattern-mean": dict(preset="pattern", seeds=(0, 1, 2), inner_steps=0),
    "pattern-ga1": dict(preset="pattern", seeds=(0, 1, 2), inner_steps=1),
    "ood-ga1": dict(preset="ood", seeds=(0, 1, 2), inner_steps=1),
}


def configs(name, batch_size):
    spec = SUITE[name]
    for seed in spec["seeds"]:
        arch, cfg = preset(spec["preset"], seed=seed, inner_steps=spec["inner_steps"],
                           inner_mode="stop_gradient", batch_size=batch_size)
        yield seed, arch, cfg


def estimate(name, batch_size, probe_steps=3):
    seed, arch, cfg = next(configs(name, batch_size))
    t = Trainer(arch, replace(cfg, eval_every=0, ckpt_every=0))
    t.train_one()  # warm-up
    t0 = time.time()
    for _ in range(probe_steps):
        t.train_one()
    per = (time.time() - t0) / probe_steps
    runs = len(SUITE[name]["seeds"])
    print(f"{name:>13}: {per:6.2f} s/step x {cfg.steps} steps x {runs} runs = {per * cfg.steps * runs / 3600:7.1f} h")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", default="runs")
    ap.add_argument("--only", nargs="*", choices=sorted(SUITE), default=sorted(SUITE))
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--estimate", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)

    if args.estimate:
        for name in args.only:
            estimate(name, args.batch_size)
        return

    for name in args.only:
        for seed, arch, cfg in configs(name, args.batch_size):
            out = Path(args.root) / name / f"seed-{seed}"
            out.mkdir(parents=True, exist_ok=True)
            t0 = time.time()
            trainer = train(arch, cfg, out, resume=True, progress=True)
            print(f"{name} seed {seed}: step {trainer.step} ({time.time() - t0:.0f}s this session)")


if __name__ == "__main__":
    main()
