"""Train every desk-scale artifact (cached) and print the headline numbers as JSON.

    python scripts/desk_recipe.py                 # full recipe, all seeds, image + video
    python scripts/desk_recipe.py --quick         # smoke run in a few minutes
    python scripts/desk_recipe.py --seeds 0 --no-video
"""
import argparse
import json
import logging
import time
from dataclasses import asdict, replace

import torch

from amodalseg.experiments import IMAGE_VARIANTS, VIDEO_VARIANTS, DeskExperiment, DeskRecipe, summarize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--cache", default=None, help="artifact directory (default .acceptance_cache or $AMODALSEG_CACHE)")
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    ap.add_argument("--variants", nargs="+", default=["full", "single_branch", "no_refine"], choices=sorted(IMAGE_VARIANTS))
    ap.add_argument("--no-video", action="store_true")
    ap.add_argument("--retrain", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    recipe = DeskRecipe().quick() if args.quick else DeskRecipe()
    if args.seeds:
        recipe = replace(recipe, seeds=tuple(args.seeds))
    kw = {"retrain": True} if args.retrain else {}
    exp = DeskExperiment(recipe, args.cache, **kw) if args.cache else DeskExperiment(recipe, **kw)

    t0 = time.perf_counter()
    out = {"recipe": asdict(recipe), "codec": exp.codec_roundtrip(), "image": {}, "video": {}}
    for seed in recipe.seeds:
        for variant in args.variants:
            rep = exp.evaluate_image(seed, variant, gt_visible=True)
            out["image"][f"{variant}/seed{seed}"] = summarize(rep)
            logging.info("image %s seed %d: %s", variant, seed, out["image"][f"{variant}/seed{seed}"]["model"])
        out["image"][f"full/seed{seed}/K"] = {
            K: round(exp.evaluate_image(seed, "full", K=K)["model"]["miou_occ"], 4) for K in (1, 3, 8)
        }
        out["image"][f"full/seed{seed}/noisy"] = summarize(exp.evaluate_image(seed, "full", gt_visible=False))["model"]
        out["image"][f"full/seed{seed}/train_seconds"] = round(exp.image_training_seconds(seed), 1)
        if not args.no_video:
            for variant in VIDEO_VARIANTS:
                out["video"][f"{variant}/seed{seed}"] = exp.evaluate_video(seed, variant)
                logging.info("video %s seed %d: %s", variant, seed, out["video"][f"{variant}/seed{seed}"])
    out["wall_seconds"] = round(time.perf_counter() - t0, 1)
    print(json.dumps(out, indent=2, default=str))


if __name__ == "__main__":
    main()
