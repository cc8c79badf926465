from dataclasses import replace

import numpy as np
import pytest

from amodalseg.experiments import DeskExperiment, DeskRecipe, coverage

TINY = replace(
    DeskRecipe().quick(),
    train_scenes=12,
    test_scenes=6,
    codec_scenes=6,
    codec_masks=60,
    heldout_masks=30,
    codec_steps=6,
    transformer_steps=4,
    refine_steps=4,
    video_train=6,
    video_test=6,
    video_steps=3,
    batch_size=4,
    video_batch=2,
    warmup_steps=2,
    seeds=(0,),
)


def test_coverage():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    pred = np.zeros_like(gt)
    pred[0] = True
    pred[3] = True
    assert coverage(pred, gt) == 0.5
    assert coverage(pred, np.zeros_like(gt)) == 1.0


def test_recipe_configs_validate():
    r = DeskRecipe()
    assert r.config("refine", 2, single_branch=True).single_branch
    assert r.config("video").batch_size == r.video_batch
    with pytest.raises(KeyError):
        r.config("nope")


@pytest.fixture(scope="module")
def tiny_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("desk_cache")


def test_artifacts_are_cached_with_training_time(tiny_cache):
    first = DeskExperiment(TINY, tiny_cache, retrain=False)
    first.image_pipeline(0, "full")
    first.video(0, "full")
    files = sorted(p.name for p in tiny_cache.iterdir())
    assert any(f.startswith("codec-") for f in files)
    assert any(f.startswith("refine0-full-") for f in files)
    assert any(f.startswith("video0-full-") for f in files)

    second = DeskExperiment(TINY, tiny_cache, retrain=False)
    assert second.codec()[0].content_hash() == first.codec()[0].content_hash()
    assert second.coarse(0)[0].content_hash() == first.coarse(0)[0].content_hash()
    assert second.image_training_seconds(0) == pytest.approx(first.image_training_seconds(0))
    assert sorted(p.name for p in tiny_cache.iterdir()) == files


def test_changed_recipe_gets_new_artifacts(tiny_cache):
    DeskExperiment(replace(TINY, refine_steps=5), tiny_cache).refine(0, "full")
    assert len([p for p in tiny_cache.iterdir() if p.name.startswith("refine0-full-")]) == 2


def test_no_refine_variant_has_no_stage(tiny_cache):
    exp = DeskExperiment(TINY, tiny_cache)
    assert exp.refine(0, "no_refine") == (None, 0.0)
    report = exp.evaluate_image(0, "no_refine")
    assert set(report) >= {"model", "visible_copy", "convex_hull", "eval_seconds"}


def test_video_report_fields(tiny_cache):
    out = DeskExperiment(TINY, tiny_cache).evaluate_video(0, "full")
    assert {"miou_occ", "covered_fraction", "event_samples", "train_seconds"} <= set(out)
