import numpy as np
import pytest

from mmga import tensor as T
from mmga.masks import MaskSet
from mmga.network import (
    Model,
    ModelConfig,
    load_checkpoint,
    paper_config,
    save_checkpoint,
    toy_config,
    variant_mask_targets,
)
from mmga.tensor import ShapeError, Tensor


def toy_batch(n=2, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((n, 3, 96, 32)).astype(np.float32))


def walk_backbone(model, images, training=False):
    """Stage-by-stage forward, returning the three tapped feature maps."""
    h = T.relu(model.stem.forward(images, training))
    taps = []
    for stage in model.stages[:3]:
        for block in stage:
            h = block.forward(h, training)
        taps.append(h)
    return taps


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="resnet")
    with pytest.raises(ShapeError):
        ModelConfig(input_hw=(100, 32))
    with pytest.raises(ValueError):
        ModelConfig(num_identities=1)
    cfg = toy_config(20)
    assert cfg.d_l == cfg.d_u + cfg.d_b
    assert cfg.d_all == sum(cfg.head_dims)
    assert cfg.attention_grid == (6, 2)
    assert paper_config(751).attention_grid == (24, 8)


def test_paper_preset_shape_chain():
    model = Model(paper_config(751), seed=0)
    rng = np.random.default_rng(0)
    images = Tensor(rng.standard_normal((1, 3, 384, 128)).astype(np.float32))
    x1, x2, x3 = walk_backbone(model, images)
    assert x1.shape == (1, 256, 96, 32)
    assert x2.shape == (1, 512, 48, 16)
    assert x3.shape == (1, 1024, 24, 8)
    out = model.forward(images, training=False)
    assert out.embeddings.f_w.shape == (1, 1024)
    assert out.embeddings.f_u.shape == (1, 512)
    assert out.embeddings.f_b.shape == (1, 512)
    assert out.embeddings.f_l.shape == (1, 1024)
    assert out.embeddings.f_all.shape == (1, 2048)
    assert [a.S.shape for a in out.attention] == [(1, 1, 24, 8)] * 4
    assert [a.A.shape for a in out.attention] == [
        (1, 1024, 24, 8),
        (1, 2048, 24, 8),
        (1, 2048, 24, 8),
        (1, 2048, 24, 8),
    ]


def test_toy_preset_shape_chain():
    model = Model(toy_config(20), seed=0)
    images = toy_batch(3)
    x1, x2, x3 = walk_backbone(model, images)
    assert x2.shape == (3, 32, 12, 4)
    assert x3.shape == (3, 64, 6, 2)
    out = model.forward(images, training=False)
    assert out.embeddings.f_all.shape == (3, 128)
    assert out.logits_w.shape == (3, 20)
    assert out.logits_l.shape == (3, 20)
    assert len(out.attention) == 4


def test_f_all_rows_have_unit_norm():
    model = Model(toy_config(20), seed=1)
    out = model.forward(toy_batch(4, seed=2), training=False)
    norms = np.linalg.norm(out.embeddings.f_all.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)


def test_cold_start_attention_scales_stage3_by_three_quarters():
    model = Model(toy_config(20), seed=3)
    images = toy_batch(2, seed=3)
    _, x2, x3 = walk_backbone(model, images)
    out1 = model.att1.forward(x2)
    np.testing.assert_array_equal(
        out1.A.data, np.full(out1.A.shape, 0.75, dtype=np.float32)
    )
    attended = T.elementwise_mul(x3, out1.A)
    np.testing.assert_allclose(attended.data, 0.75 * x3.data, rtol=1e-6)


def test_eval_forward_is_bit_identical():
    model = Model(toy_config(20), seed=4)
    images = toy_batch(2, seed=5)
    a = model.forward(images, training=False)
    b = model.forward(images, training=False)
    assert a.embeddings.f_all.data.tobytes() == b.embeddings.f_all.data.tobytes()
    assert a.logits_w.data.tobytes() == b.logits_w.data.tobytes()


def test_train_mode_moves_running_stats_eval_mode_does_not():
    model = Model(toy_config(20), seed=6)
    before = model.stem.running_mean.copy()
    model.forward(toy_batch(2, seed=6), training=False)
    np.testing.assert_array_equal(model.stem.running_mean, before)
    model.forward(toy_batch(2, seed=6), training=True)
    assert not np.array_equal(model.stem.running_mean, before)


def test_build_is_deterministic_from_seed():
    a = Model(toy_config(20), seed=9)
    b = Model(toy_config(20), seed=9)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    c = Model(toy_config(20), seed=10)
    diffs = sum(
        not np.array_equal(ta.data, tc.data)
        for (_, ta), (_, tc) in zip(a.named_parameters(), c.named_parameters())
    )
    assert diffs > 0


def test_single_branch_variants():
    base = Model(toy_config(20, "baseline"), seed=0)
    out = base.forward(toy_batch(2), training=False)
    assert out.attention == ()
    assert out.logits_l is None
    assert out.embeddings.f_u is None
    assert out.embeddings.f_all.shape == (2, 64)  # whole-head width

    batt = Model(toy_config(20, "baseline_att"), seed=0)
    out = batt.forward(toy_batch(2), training=False)
    assert len(out.attention) == 2
    assert out.logits_l is None
    assert out.embeddings.f_all.shape == (2, 128)  # matches three-branch width


def test_parameter_count_ordering_across_variants():
    counts = {
        v: Model(toy_config(20, v), seed=0).parameter_count()
        for v in ("baseline", "baseline_att", "mmga")
    }
    assert counts["baseline"] < counts["baseline_att"] < counts["mmga"]


def test_branches_own_disjoint_parameters():
    model = Model(toy_config(20, "mmga"), seed=0)
    ids_by_branch = [
        {id(t) for t in module.parameters()} for module in model.att2.values()
    ]
    assert len(ids_by_branch) == 3
    assert not (ids_by_branch[0] & ids_by_branch[1])
    assert not (ids_by_branch[0] & ids_by_branch[2])


def test_param_groups_split_backbone_from_the_rest():
    model = Model(toy_config(20), seed=0)
    groups = model.param_groups()
    named = dict(model.named_parameters())
    assert set(groups) == {"backbone", "other"}
    assert len(groups["backbone"]) + len(groups["other"]) == len(named)
    backbone_ids = {id(t) for t in groups["backbone"]}
    for name, t in named.items():
        in_backbone = name.startswith(("stem", "stage"))
        assert (id(t) in backbone_ids) == in_backbone


def test_forward_rejects_wrong_extents():
    model = Model(toy_config(20), seed=0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((2, 3, 96, 48), dtype=np.float32)), training=False)


def sample_mask_set(h=6, w=2):
    rng = np.random.default_rng(0)
    whole = rng.uniform(0, 1, size=(h, w)).astype(np.float32)
    upper = np.minimum(whole, rng.uniform(0, 1, size=(h, w)).astype(np.float32))
    bottom = np.clip(whole - upper, 0, 1)
    return MaskSet(whole=whole, upper=upper, bottom=bottom)


def test_variant_mask_targets_orders():
    ms = sample_mask_set()
    four = variant_mask_targets("mmga", ms)
    assert len(four) == 4
    np.testing.assert_array_equal(four[0], ms.whole)
    np.testing.assert_array_equal(four[1], ms.whole)
    np.testing.assert_array_equal(four[2], ms.upper)
    np.testing.assert_array_equal(four[3], ms.bottom)

    split = variant_mask_targets("dmga", ms)
    assert len(split) == 4
    assert not split[2][3:].any()  # upper target zero below the middle line
    assert not split[3][:3].any()
    np.testing.assert_array_equal(split[2] + split[3], ms.whole)

    assert len(variant_mask_targets("wmga", ms)) == 2
    assert variant_mask_targets("baseline", None) == []
    assert variant_mask_targets("baseline_att", None) == []
    with pytest.raises(ValueError):
        variant_mask_targets("mmga", None)
    with pytest.raises(ValueError):
        variant_mask_targets("mystery", ms)


def test_checkpoint_round_trip(tmp_path):
    model = Model(toy_config(20), seed=11)
    model.forward(toy_batch(2, seed=11), training=True)  # move BN stats
    images = toy_batch(2, seed=12)
    want = model.forward(images, training=False)

    ckpt = tmp_path / "ckpt"
    save_checkpoint(model, ckpt, epoch=5)
    loaded, epoch = load_checkpoint(ckpt)
    assert epoch == 5
    assert loaded.config == model.config
    got = loaded.forward(images, training=False)
    np.testing.assert_array_equal(got.embeddings.f_all.data, want.embeddings.f_all.data)
    np.testing.assert_array_equal(got.logits_w.data, want.logits_w.data)


def test_checkpoint_rejects_tensor_name_mismatch(tmp_path):
    model = Model(toy_config(20), seed=13)
    ckpt = tmp_path / "ckpt"
    save_checkpoint(model, ckpt, epoch=1)
    import json

    manifest = json.loads((ckpt / "manifest.json").read_text())
    manifest["config"]["variant"] = "baseline"  # fewer tensors than on disk
    (ckpt / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_checkpoint(ckpt)
