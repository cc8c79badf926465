"""Compare a refinement stage that fine-tunes its own backbone copy with one on the frozen shared backbone.

Reuses the cached codec and seed-0 coarse model; prints mIoU for both next to the hull baseline.
"""
import argparse
import json
import logging
from dataclasses import replace

import torch

from amodalseg.experiments import DeskExperiment, DeskRecipe, summarize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    base = DeskRecipe().quick() if args.quick else DeskRecipe()
    rows = {}
    for mode in ("finetune", "shared"):
        exp = DeskExperiment(replace(base, refine_backbone=mode))
        rows[mode] = summarize(exp.evaluate_image(args.seed, "full", gt_visible=True))
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
