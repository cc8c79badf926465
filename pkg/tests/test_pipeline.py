import numpy as np
import pytest
import torch
from PIL import Image

from amodalseg import pipeline as P
from amodalseg.checkpoint import CheckpointError
from amodalseg.config import CodecConfig, ModelConfig, TrainConfig
from amodalseg.datasets import build_image_set, build_video_set
from amodalseg.mask_vq import DivergenceError, MaskCodec, save_codec
from amodalseg.synth_data import SceneSpec, generate_scene
from amodalseg.visualize import AMODAL_COLOR, VISIBLE_COLOR, colorize, render_panel

CODEC = CodecConfig(input_size=16, factor=2, codebook_size=8, n_z=4, hidden=16)
MODEL = ModelConfig(d=16, heads=2, layers=1, mlp_ratio=2, frames=4, backbone_stages=1)


def tiny(**kw):
    base = dict(iterations=6, batch_size=4, log_every=2, checkpoint_every=2, codec=CODEC, model=MODEL, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return build_image_set(4, seed=0, size=16)


@pytest.fixture(scope="module")
def trained(data):
    torch.manual_seed(0)
    codec = MaskCodec(CODEC).eval()
    model, _ = P.train_transformer(codec, data, tiny())
    net, _ = P.train_refine(codec, model, data, tiny(stage="refine"))
    return P.Pipeline(codec, model, net, tiny())


def test_transformer_training_is_deterministic(data):
    codec = MaskCodec(CODEC).eval()
    m1, h1 = P.train_transformer(codec, data, tiny())
    m2, h2 = P.train_transformer(codec, data, tiny())
    assert h1 == h2
    assert m1.content_hash() == m2.content_hash()
    assert {"stage", "step", "nll", "total"} <= set(h1[0])


def test_codec_frozen_during_transformer_training(data):
    codec = MaskCodec(CODEC).eval()
    before = codec.content_hash()
    P.train_transformer(codec, data, tiny())
    assert codec.content_hash() == before


def test_refine_training_freezes_upstream(trained, data):
    before = trained.coarse.content_hash(), trained.codec.content_hash()
    P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", iterations=2))
    assert (trained.coarse.content_hash(), trained.codec.content_hash()) == before


def test_finetuned_refine_backbone_starts_from_coarse_backbone(trained, data):
    stage, _ = P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", iterations=0))
    shared = trained.coarse.backbone.state_dict()
    assert all(torch.equal(v, shared[k]) for k, v in stage.backbone.state_dict().items())
    stage, _ = P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", iterations=3))
    assert any(not torch.equal(v, shared[k]) for k, v in stage.backbone.state_dict().items())


def test_shared_refine_backbone_uses_coarse_features(trained, data):
    stage, _ = P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", refine_backbone="shared"))
    assert stage.backbone is None
    assert not any(k.startswith("backbone.") for k in stage.state_dict())
    pipe = P.Pipeline(trained.codec, trained.coarse, stage, tiny(refine_backbone="shared"))
    out = pipe.predict(data.images[:3], data.visible[:3])
    with torch.no_grad():
        feats = trained.coarse.backbone(torch.as_tensor(data.images[:3]))
        direct = stage.net(feats, out["coarse"]).amodal
    assert torch.allclose(out["amodal"], direct)


def test_refine_loss_logged_per_term(trained, data):
    _, hist = P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", iterations=2))
    assert {"amodal", "visible", "total"} <= set(hist[-1])
    _, hist = P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", iterations=2, single_branch=True))
    assert "visible" not in hist[-1]
    with pytest.raises(ValueError):
        P.train_refine(trained.codec, trained.coarse, data, tiny(stage="refine", no_refine=True))


def test_divergence_restores_last_good_state(data, monkeypatch):
    codec = MaskCodec(CODEC).eval()
    model = P.new_coarse_model(tiny())
    start = model.content_hash()
    calls = {"n": 0}
    real = P.masked_nll_loss

    def flaky(*a):
        calls["n"] += 1
        out = real(*a)
        if calls["n"] == 3:
            out.terms["nll"] = out.terms["nll"] * float("nan")
        return out

    monkeypatch.setattr(P, "masked_nll_loss", flaky)
    with pytest.raises(DivergenceError) as exc:
        P.train_transformer(codec, data, tiny(checkpoint_every=100), model=model)
    assert exc.value.step == 3
    assert model.content_hash() == start  # restored to the initial snapshot


def test_evaluate_reports_baselines(trained, data):
    rep = P.evaluate(trained, data, gt_visible=True)
    assert rep["visible_copy"]["miou_occ"] == 0.0
    for row in ("model", "visible_copy", "convex_hull"):
        assert 0 <= rep[row]["miou_full"] <= 1
    assert {"AP", "AP50", "AP75", "AR", "buckets"} <= set(rep["model"])
    noisy = P.evaluate(trained, data, gt_visible=False)
    assert noisy["gt_visible"] is False


def test_evaluate_rejects_empty(trained, data):
    with pytest.raises(ValueError):
        P.evaluate(trained, data.subset([]))


def test_predict_deterministic_and_force_contain(trained, data):
    a = trained.predict(data.images[:3], data.visible[:3], seed=1)["amodal"]
    b = trained.predict(data.images[:3], data.visible[:3], seed=1)["amodal"]
    assert torch.equal(a, b)
    forced = trained.predict(data.images[:3], data.visible[:3], force_contain=True)["amodal"]
    assert ((forced >= 0.5) | ~torch.as_tensor(data.visible[:3])).all()


def test_infer_pastes_back_into_canvas(trained):
    scene = generate_scene(SceneSpec(), np.random.default_rng(0))
    inst = max(scene.instances, key=lambda i: i.visible.sum())
    out = P.infer(trained, scene.image, inst.visible, force_contain=True)
    assert out["amodal"].shape == (64, 64)
    x0, y0, x1, y1 = out["window"]
    outside = out["amodal"].copy()
    outside[y0:y1, x0:x1] = False
    assert not outside.any()
    assert out["amodal"][inst.visible].all()
    assert len(out["trace"]) == trained.cfg.K


def test_convex_hull_baseline():
    m = np.zeros((1, 8, 8), bool)
    m[0, 1, 1] = m[0, 1, 6] = m[0, 6, 1] = True
    hull = P.convex_hull_baseline(m)
    assert hull[0, 2, 2] and hull[0, 1, 3] and not hull[0, 6, 6]
    line = np.zeros((1, 8, 8), bool)
    line[0, 3, 1:5] = True
    assert np.array_equal(P.convex_hull_baseline(line), line)


def test_checkpoints_roundtrip_and_hash_check(trained, tmp_path, data):
    P.save_pipeline(trained, tmp_path)
    loaded = P.load_pipeline(tmp_path)
    a = trained.predict(data.images[:2], data.visible[:2])["amodal"]
    b = loaded.predict(data.images[:2], data.visible[:2])["amodal"]
    assert torch.equal(a, b)
    other = MaskCodec(CODEC)
    torch.nn.init.normal_(other.codebook.weight)
    save_codec(other, tmp_path / P.CODEC_FILE)
    with pytest.raises(CheckpointError, match="codec"):
        P.load_pipeline(tmp_path)


def test_missing_prerequisites(tmp_path, trained):
    with pytest.raises(P.PrerequisiteError):
        P.load_codec_from(tmp_path)
    save_codec(trained.codec, tmp_path / P.CODEC_FILE)
    with pytest.raises(P.PrerequisiteError):
        P.load_coarse(tmp_path, trained.codec)


def test_video_pipeline_runs():
    vdata = build_video_set(3, seed=0, size=16, event_prob=1.0)
    codec = MaskCodec(CODEC).eval()
    cfg = tiny(stage="video")
    model, hist = P.train_video_transformer(codec, vdata, cfg)
    assert hist
    net, _ = P.train_refine(codec, model, vdata, tiny(stage="refine"))
    pipe = P.Pipeline(codec, model, net, cfg)
    out = pipe.predict(vdata.images, vdata.visible)
    assert out["amodal"].shape == vdata.amodal.shape
    rep = P.evaluate(pipe, vdata, gt_visible=True)
    assert rep["model"]["count"] == vdata.amodal.shape[0] * 4


def test_ablation_flags_change_only_their_pathway():
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    full = P.new_refine(tiny())
    single = P.new_refine(tiny(single_branch=True))
    no_attn = P.new_refine(tiny(no_attention=True))
    assert count(full) - count(single) == count(full.net.visible_head)
    assert count(full) - count(no_attn) == full.net.trunk[0].weight.shape[0] * MODEL.d * 9
    v_full = P.new_coarse_model(tiny(), video=True).transformer
    v_noroll = P.new_coarse_model(tiny(no_roll=True), video=True).transformer
    v_nosttb = P.new_coarse_model(tiny(no_sttb=True), video=True).transformer
    assert v_full.roll and not v_noroll.roll and not v_nosttb.roll
    assert count(v_full) == count(v_noroll)
    temporal = sum(count(b.temporal_attn) + count(b.norm_t) for b in v_full.blocks) + v_full.time_pos.numel()
    assert count(v_full) - count(v_nosttb) == temporal


def test_panel_layout_and_trace_crosscheck(trained, data):
    out = trained.predict(data.images[:1], data.visible[:1], K=3, keep_trace=True)
    grid = CODEC.latent_size
    steps = [m[0].numpy() for m in P.decode_trace(trained.codec, out["traces"][0], (1, grid, grid))]
    assert len(steps) == 3
    # final step prediction decodes to the coarse mask
    assert np.allclose(steps[-1], out["coarse"][0].numpy())
    panel = render_panel(data.images[0], data.visible[0], steps, out["amodal"][0].numpy(), data.amodal[0], scale=2, label=False)
    assert panel.size == (7 * 32 + 6 * 2, 32)
    arr = np.asarray(panel)
    vis_tile = arr[:, 34:66]
    assert (vis_tile.reshape(-1, 3) == VISIBLE_COLOR).all(1).sum() == 4 * data.visible[0].sum()


def test_colorize_conventions():
    m = np.array([[True, True], [False, False]])
    v = np.array([[True, False], [False, False]])
    c = colorize(m, v)
    assert tuple(c[0, 0]) == VISIBLE_COLOR and tuple(c[0, 1]) == AMODAL_COLOR
