import numpy as np
import pytest

from dyqdetr import diffcore as dc
from dyqdetr.matchloss import Target
from dyqdetr.increngine import train_step
from dyqdetr.model import (DyQDETR, ModelConfig, count_self_attention_scores, group_block_mask, patchify,
                           sine_encoding)
from dyqdetr.optim import AdamW

SMALL = ModelConfig(image_size=16, patch_size=4, d=16, n_heads=2, ffn_dim=32, queries_per_group=3)


def _model(G, cfg=SMALL, seed=0):
    m = DyQDETR(ModelConfig(**{**cfg.__dict__, "seed": seed}))
    for t in range(G):
        m.expand_queries((2 * t, 2 * t + 1))
    rng = np.random.default_rng(seed + 100)
    for g in m.bank:      # distinct groups so the equivalence check is not vacuous
        g.embeddings.data = rng.normal(size=g.embeddings.shape)
    return m


def _images(cfg, n=2, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, cfg.image_size, cfg.image_size, cfg.channels))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=63)
    with pytest.raises(ValueError):
        ModelConfig(d=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(queries_per_group=0)


def test_default_shapes():
    m = DyQDETR()
    m.expand_queries((0, 1, 2, 3))
    img = _images(m.config, 1)
    assert m.encode(img).shape == (1, 64, 64)
    (gp,) = m.forward_all(img)
    assert gp.class_logits.shape == (1, 10, 5)
    assert gp.boxes.shape == (1, 10, 4)
    np.testing.assert_allclose(gp.probabilities().sum(-1), 1.0)
    assert np.all((gp.boxes.data >= 0) & (gp.boxes.data <= 1))


def test_zero_image_gives_finite_features_and_is_deterministic():
    m = DyQDETR(SMALL)
    z = np.zeros((1, 16, 16, 3))
    f1, f2 = m.encode(z).data, m.encode(z).data
    assert np.all(np.isfinite(f1))
    np.testing.assert_array_equal(f1, f2)


def test_wrong_image_shape_raises():
    m = _model(1)
    with pytest.raises(ValueError):
        m.forward_all(np.zeros((1, 8, 8, 3)))


@pytest.mark.parametrize("G", [1, 2, 3, 4])
def test_joint_pass_equals_per_group_passes(G):
    m = _model(G)
    img = _images(SMALL)
    joint = m.forward_all(img)
    single = m.forward_per_group(img)
    for a, b in zip(joint, single):
        assert np.max(np.abs(a.class_logits.data - b.class_logits.data)) < 1e-9
        assert np.max(np.abs(a.boxes.data - b.boxes.data)) < 1e-9


def test_without_mask_groups_interact():
    m = _model(2)
    img = _images(SMALL)
    a = m.forward_all(img, disentangle=False)[0].class_logits.data
    b = m.forward_per_group(img)[0].class_logits.data
    assert np.max(np.abs(a - b)) > 1e-6


@pytest.mark.parametrize("G", range(1, 9))
def test_self_attention_score_counts(G):
    m = _model(G)
    img = _images(SMALL, 1)
    N, h, L = SMALL.queries_per_group, SMALL.n_heads, SMALL.n_decoder_layers
    assert count_self_attention_scores(m, img, True) == G * N * N * h * L
    assert count_self_attention_scores(m, img, False) == G * G * N * N * h * L


def test_group_block_mask():
    mask = group_block_mask([2, 1])
    assert mask[0, 1] == 0 and mask[2, 2] == 0
    assert np.isneginf(mask[0, 2]) and np.isneginf(mask[2, 0])


def test_expand_queries_inherits_and_freezes():
    m = DyQDETR(SMALL)
    m.expand_queries((0, 1))
    assert len(m.bank) == 1 and not m.bank[1].frozen
    m.expand_queries((2,))
    np.testing.assert_array_equal(m.bank[2].embeddings.data, m.bank[1].embeddings.data)
    assert m.bank[2].embeddings is not m.bank[1].embeddings
    m.expand_queries((3,))
    assert [g.index for g in m.bank] == [1, 2, 3]
    assert [g.frozen for g in m.bank] == [True, True, False]
    with pytest.raises(ValueError):
        m.expand_queries((1, 5))
    with pytest.raises(KeyError):
        m.bank[4]


def test_frozen_group_queries_never_move():
    m = _model(2)
    before = m.bank[1].embeddings.data.copy()
    opt = AdamW(m.trainable_parameters(), lr=1e-2)
    img = _images(SMALL)
    tg = [[Target(np.array([0]), np.array([[0.5, 0.5, 0.3, 0.3]]))] * 2,
          [Target(np.array([3]), np.array([[0.3, 0.3, 0.2, 0.2]]))] * 2]
    for _ in range(3):
        train_step(m, opt, img, tg)
    np.testing.assert_array_equal(m.bank[1].embeddings.data, before)


def test_strict_freeze_keeps_old_group_outputs_bitwise():
    m = _model(2)
    img = _images(SMALL)
    old = m.forward_all(img)[0]
    opt = AdamW(m.trainable_parameters(strict=True), lr=1e-2)
    tg = [[Target(np.array([0]), np.array([[0.5, 0.5, 0.3, 0.3]]))] * 2,
          [Target(np.array([3]), np.array([[0.3, 0.3, 0.2, 0.2]]))] * 2]
    for _ in range(3):
        train_step(m, opt, img, tg)
    new = m.forward_all(img)[0]
    np.testing.assert_array_equal(old.class_logits.data, new.class_logits.data)
    np.testing.assert_array_equal(old.boxes.data, new.boxes.data)


def test_checkpoint_round_trip_is_exact_and_byte_stable(tmp_path):
    m = _model(2)
    m.phase = 2
    m.save(tmp_path / "a.zip")
    m2 = DyQDETR.load(tmp_path / "a.zip")
    m2.save(tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    assert m2.phase == 2 and m2.bank.class_sets == m.bank.class_sets
    assert [g.frozen for g in m2.bank] == [g.frozen for g in m.bank]
    img = _images(SMALL)
    for a, b in zip(m.forward_all(img), m2.forward_all(img)):
        np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)


def test_load_rejects_foreign_files(tmp_path):
    import zipfile
    with zipfile.ZipFile(tmp_path / "x.zip", "w") as zf:
        zf.writestr("meta.json", '{"format": "other"}')
    with pytest.raises(ValueError):
        DyQDETR.load(tmp_path / "x.zip")


def test_copy_is_detached():
    m = _model(1)
    c = m.copy()
    c.params["box.1.W"].data += 1.0
    assert not np.array_equal(c.params["box.1.W"].data, m.params["box.1.W"].data)


def test_extend_group_classes_keeps_existing_logits():
    m = _model(1)
    img = _images(SMALL)
    before = m.forward_all(img)[0].class_logits.data
    m.extend_group_classes(1, (7,))
    after = m.forward_all(img)[0].class_logits.data
    assert m.bank[1].class_set == (0, 1, 7)
    np.testing.assert_allclose(after[..., :2], before[..., :2], rtol=0, atol=1e-12)
    np.testing.assert_allclose(after[..., -1], before[..., -1], rtol=0, atol=1e-12)


def test_helpers():
    x = np.arange(2 * 4 * 4 * 1, dtype=float).reshape(2, 4, 4, 1)
    p = patchify(x, 2)
    assert p.shape == (2, 4, 4)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    e = sine_encoding(np.array([[0.25, 0.75]]), 16)
    assert e.shape == (1, 16) and np.all(np.abs(e) <= 1)


def test_full_model_loss_gradient_wrt_decoder_weight():
    from dyqdetr.matchloss import group_set_loss, match_predictions, total_loss
    m = _model(2)
    img = _images(SMALL, 2, seed=3)
    targets = [[Target(np.array([0]), np.array([[0.4, 0.5, 0.3, 0.2]])),
                Target(np.array([1, 0]), np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.25, 0.3]]))],
               [Target(np.array([3]), np.array([[0.6, 0.4, 0.2, 0.3]])),
                Target(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))]]
    sets = [g.class_set for g in m.bank]
    with dc.no_grad():
        matches = [match_predictions(gp, tg) for gp, tg in zip(m.forward_all(img), targets)]

    def f(x):
        m.params["dec.1.ca.q.W"] = x
        preds = m.forward_all(img)
        return total_loss([group_set_loss(gp, tg, matches=mt) for gp, tg, mt in zip(preds, targets, matches)], sets)
    assert dc.finite_diff_check(f, m.params["dec.1.ca.q.W"], 1e-6) < 1e-5
