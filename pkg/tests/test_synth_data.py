import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from amodalseg.metrics import iou
from amodalseg.synth_data import (
    AmodalInstance,
    AnnotationError,
    SceneSpec,
    Shape,
    augment_mask,
    compose,
    dilate,
    erode,
    export_annotations,
    generate_scene,
    generate_video,
    import_annotations,
    occlusion_rate,
    rasterize,
    record_to_instance,
    instance_to_record,
    rle_decode,
    rle_encode,
)
from conftest import disk

GREY = np.array([0.5, 0.5, 0.5], np.float32)


def square(cx, cy, half):
    return Shape("rectangle", cx, cy, half, 1.0, 0.0, GREY)


def test_half_covered_square_has_rate_one_half():
    spec = SceneSpec(height=32, width=32, noise_std=0.0)
    target = square(10, 10, 5)  # pixels 5..14
    occluder = square(15, 10, 5)  # pixels 10..19, covers columns 10..14
    scene = compose([target, occluder], np.array([1, 0]), spec, np.random.default_rng(0), np.zeros(3, np.float32), "img")
    inst = scene.instances[0]
    assert inst.amodal.sum() == 100
    assert inst.visible.sum() == 50
    assert inst.occlusion_rate == 0.5
    assert scene.instances[1].occlusion_rate == 0.0


def test_rasterize_rectangle_pixel_count():
    assert rasterize(square(8, 8, 3), 16, 16).sum() == 36


def test_occlusion_rate_rejects_empty_amodal():
    with pytest.raises(ValueError):
        occlusion_rate(np.zeros((2, 2), bool), np.zeros((2, 2), bool))


@given(seed=st.integers(0, 2**32 - 1))
def test_scene_masks_are_consistent(seed):
    scene = generate_scene(SceneSpec(), np.random.default_rng(seed))
    assert 10 <= len(scene.shapes) <= 20
    covered = np.zeros((64, 64), int)
    union_amodal = np.zeros((64, 64), bool)
    for inst in scene.instances:
        inst.validate()
        covered += inst.visible
        union_amodal |= inst.amodal
    assert covered.max() <= 1  # visible masks never overlap
    assert np.array_equal(covered.astype(bool), union_amodal)
    nearest = int(np.argmin(scene.depth_order))
    inst = next(i for i in scene.instances if i.instance_id == nearest)
    assert inst.occlusion_rate == 0.0


def test_scene_determinism():
    a = generate_scene(SceneSpec(), np.random.default_rng(7))
    b = generate_scene(SceneSpec(), np.random.default_rng(7))
    assert np.array_equal(a.image, b.image)
    assert all(np.array_equal(x.amodal, y.amodal) for x, y in zip(a.instances, b.instances))


@given(seed=st.integers(0, 2**32 - 1), T=st.sampled_from([3, 4, 6]))
def test_occlusion_event_hides_target(seed, T):
    scenes, samples = generate_video(SceneSpec(n_objects=(4, 8)), T, np.random.default_rng(seed), occlusion_event=True)
    assert len(scenes) == T
    events = [s for s in samples if s.event_frames]
    assert len(events) == 1
    sample = events[0]
    for t in sample.event_frames:
        assert sample.frames[t].fully_occluded and sample.frames[t].amodal.any()
        assert sample.frames[t].occlusion_rate == 1.0
    assert all(f.frame_index == t for t, f in enumerate(sample.frames))


def test_video_without_event_has_no_event_frames():
    _, samples = generate_video(SceneSpec(n_objects=(4, 8)), 4, np.random.default_rng(0))
    assert all(not s.event_frames for s in samples)
    with pytest.raises(ValueError):
        generate_video(SceneSpec(), 1, np.random.default_rng(0))


def test_dilating_single_pixel():
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert np.array_equal(np.argwhere(dilate(m, 3)), np.argwhere(np.pad(np.ones((3, 3), bool), 3)))
    assert dilate(m, 5).sum() == 25


def test_erode_dilate_stable_on_disk():
    d = disk(32, 16, 16, 10)  # 20 px diameter
    for k in (3, 5):
        assert iou(dilate(erode(d, k), k), d) >= 0.9
        assert iou(erode(dilate(d, k), k), d) >= 0.9


@given(seed=st.integers(0, 10_000))
def test_augment_is_binary_and_close(seed):
    d = disk(32, 16, 16, 10)
    out = augment_mask(d, np.random.default_rng(seed))
    assert out.dtype == bool and out.shape == d.shape
    assert iou(out, d) > 0.5


def test_augment_empty_mask_stays_empty():
    assert not augment_mask(np.zeros((5, 5), bool), np.random.default_rng(0)).any()


@given(hnp.arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_rle_roundtrip(mask):
    rle = rle_encode(mask)
    json.dumps(rle)
    assert np.array_equal(rle_decode(rle), mask)


def test_rle_rejects_gaps():
    with pytest.raises(ValueError):
        rle_decode({"size": [2, 2], "runs": [[1, 0, 2], [0, 3, 1]]})
    with pytest.raises(ValueError):
        rle_decode({"size": [2, 2], "runs": [[1, 0, 2]]})


def test_annotation_roundtrip(tmp_path):
    scene = generate_scene(SceneSpec(), np.random.default_rng(3), image_id="a")
    n = export_annotations(scene.instances, tmp_path / "ann.jsonl")
    back = import_annotations(tmp_path / "ann.jsonl")
    assert n == len(back) == len(scene.instances)
    for x, y in zip(scene.instances, back):
        assert np.array_equal(x.visible, y.visible) and np.array_equal(x.amodal, y.amodal)
        assert (x.bbox, x.category, x.occlusion_rate, x.instance_id) == (y.bbox, y.category, y.occlusion_rate, y.instance_id)


def test_annotation_errors_name_the_record(tmp_path):
    scene = generate_scene(SceneSpec(), np.random.default_rng(3), image_id="a")
    rec = instance_to_record(scene.instances[0])
    bad = dict(rec)
    del bad["bbox"]
    with pytest.raises(AnnotationError, match="record 4"):
        record_to_instance(bad, 4)
    swapped = dict(rec, visible_mask=rle_encode(np.ones_like(scene.instances[0].amodal)))
    with pytest.raises(AnnotationError, match="not contained"):
        record_to_instance(swapped, 0)
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps(rec) + "\n{oops\n")
    with pytest.raises(AnnotationError, match="record 1"):
        import_annotations(path)


def test_annotation_png_mask_reference(tmp_path):
    from PIL import Image

    inst = generate_scene(SceneSpec(), np.random.default_rng(5)).instances[0]
    rec = instance_to_record(inst)
    for key, m in (("visible_mask", inst.visible), ("amodal_mask", inst.amodal)):
        path = tmp_path / f"{key}.png"
        Image.fromarray(m.astype(np.uint8) * 255).save(path)
        rec[key] = str(path)
    back = record_to_instance(rec)
    assert np.array_equal(back.amodal, inst.amodal)


def test_instance_validate_catches_bad_flags():
    amodal = np.ones((3, 3), bool)
    vis = np.zeros((3, 3), bool)
    inst = AmodalInstance("x", (0, 0, 3, 3), vis, amodal, "c", 1.0, fully_occluded=False)
    with pytest.raises(AnnotationError):
        inst.validate()
    AmodalInstance("x", (0, 0, 3, 3), vis, amodal, "c", 1.0, fully_occluded=True).validate()
