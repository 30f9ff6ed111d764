import math

import numpy as np
import pytest
from dataclasses import replace

from hsipest.hypercube import STANDARD_WAVELENGTHS, ClassMask, Hypercube, Label, restrict_bands
from hsipest.softplsda import selection_2
from hsipest.synth import SceneSpec, generate_scene
from hsipest.unet import (MAGIC, TrainConfig, UNetError, UNetModel, UNetSpec, _backward,
                          _forward, augment, augment_dataset, build_unet,
                          class_weights_from_masks, conv_backward, conv_forward, flip_h,
                          flip_v, forward, load_model, maxpool_backward, maxpool_forward,
                          pixel_accuracy, predict_image, save_model, train, transform_pair,
                          upsample_backward, upsample_forward, weighted_ce_loss,
                          write_training_log)
from oracles import fd_check, float64_model, naive_conv


def test_conv_matches_direct_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8, 3))
    for k in (1, 3):
        W, b = rng.normal(size=(k, k, 3, 4)), rng.normal(size=4)
        np.testing.assert_allclose(conv_forward(x, W, b)[0], naive_conv(x, W, b), atol=1e-12)


def test_one_level_network_matches_hand_composition():
    spec = UNetSpec(3, base_filters=2, depth=1)
    P = float64_model(spec, 1)
    x = np.random.default_rng(2).normal(size=(1, 8, 8, 3))

    def conv(name, h, relu=True):
        y = naive_conv(h, P[f"{name}.W"], P[f"{name}.b"])
        return np.maximum(y, 0) if relu else y

    e = conv("enc0_b", conv("enc0_a", x))
    pooled = e.reshape(1, 4, 2, 4, 2, -1).max(axis=(2, 4))
    bott = conv("bott_b", conv("bott_a", pooled))
    up = conv("dec0_up", np.kron(bott, np.ones((1, 2, 2, 1))))
    d = conv("dec0_b", conv("dec0_a", np.concatenate([e, up], axis=-1)))
    want = conv("head", d, relu=False)
    got, _ = _forward(P, spec, x, keep=False)
    np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradients(k):
    rng = np.random.default_rng(k)
    x, W, b = rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(k, k, 3, 4)), rng.normal(size=4)
    R = rng.normal(size=(2, 6, 6, 4))
    dx, dW, db = conv_backward(R, (x, W))
    f = lambda: float(np.sum(R * conv_forward(x, W, b)[0]))
    assert fd_check(f, x, dx) < 1e-4
    assert fd_check(f, W, dW) < 1e-4
    assert fd_check(f, b, db) < 1e-4


def test_pool_and_upsample_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 8, 3))
    R = rng.normal(size=(2, 3, 4, 3))
    _, cache = maxpool_forward(x)
    f = lambda: float(np.sum(R * maxpool_forward(x)[0]))
    assert fd_check(f, x, maxpool_backward(R, cache), n_probe=60) < 1e-4
    R2 = rng.normal(size=(2, 12, 16, 3))
    f = lambda: float(np.sum(R2 * upsample_forward(x)))
    assert fd_check(f, x, upsample_backward(R2), n_probe=60) < 1e-4


def test_loss_gradient_4x4():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(4, 4, 2))
    labels = rng.integers(0, 3, size=(4, 4))
    _, g = weighted_ce_loss(logits, labels, (1.0, 3.0))
    f = lambda: weighted_ce_loss(logits, labels, (1.0, 3.0))[0]
    assert fd_check(f, logits, g, n_probe=32) < 1e-4
    assert np.all(g[labels == Label.EXCLUDED] == 0)


@pytest.mark.parametrize("depth", [1, 2])
def test_every_layer_gradient(depth):
    spec = UNetSpec(3, base_filters=2, depth=depth)
    P = float64_model(spec, depth)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 8, 8, 3))
    lab = rng.integers(0, 3, size=(2, 8, 8))
    w = (1.0, 2.5)
    logits, tape = _forward(P, spec, x)
    _, dl = weighted_ce_loss(logits, lab, w)
    grads = _backward(tape, dl)
    f = lambda: weighted_ce_loss(_forward(P, spec, x, keep=False)[0], lab, w)[0]
    for name, *_ in spec.layers():
        for t in ("W", "b"):
            key = f"{name}.{t}"
            assert fd_check(f, P[key], grads[key], n_probe=12) < 1e-4, key


def test_output_shape_and_divisibility():
    m = build_unet(UNetSpec(5, base_filters=2, depth=3))
    x = np.random.default_rng(0).normal(size=(32, 32, 5)).astype(np.float32)
    assert forward(m, x).shape == (32, 32, 2)
    assert forward(m, x[None, :16, :24]).shape == (1, 16, 24, 2)
    with pytest.raises(UNetError):
        forward(m, x[:20, :32])
    with pytest.raises(UNetError):
        forward(m, x[..., :4])


def test_zero_weights_give_uniform_logits():
    m = build_unet(UNetSpec(4, base_filters=2, depth=2))
    zero = replace(m, params={k: np.zeros_like(v) for k, v in m.params.items()})
    out = forward(zero, np.random.default_rng(1).normal(size=(8, 8, 4)))
    assert np.all(out == out[0, 0, 0])


def test_first_layer_weight_counts_and_seeding():
    assert build_unet(UNetSpec(137, 64, 1)).first_layer_weight_count() == 78_912
    assert build_unet(UNetSpec(3, 64, 1)).first_layer_weight_count() == 1_728
    a, b = build_unet(UNetSpec(4, 2, 2), seed=7), build_unet(UNetSpec(4, 2, 2), seed=7)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_unet(UNetSpec(4, 2, 2), seed=8)
    assert not np.array_equal(a.params["enc0_a.W"], c.params["enc0_a.W"])
    lim = math.sqrt(6 / (9 * 4))
    assert np.abs(a.params["enc0_a.W"]).max() <= lim


def test_invalid_specs():
    with pytest.raises(UNetError):
        UNetSpec(0)
    with pytest.raises(UNetError):
        UNetSpec(3, n_classes=3)
    with pytest.raises(UNetError):
        TrainConfig(lr=0)
    with pytest.raises(UNetError):
        TrainConfig(class_weights=(1.0, 0.0))
    m = build_unet(UNetSpec(3, 2, 1))
    bad = dict(m.params)
    bad["head.W"] = bad["head.W"].copy()
    bad["head.W"][0, 0, 0, 0] = np.nan
    with pytest.raises(UNetError):
        UNetModel(m.spec, bad)


def test_class_weights():
    m = np.zeros((101, 1), np.uint8)
    m[0] = Label.TARGET
    assert class_weights_from_masks([m]) == (1.0, 25.0)
    bal = np.array([[0, 1], [1, 0]], np.uint8)
    assert class_weights_from_masks([ClassMask(bal)]) == (1.0, 0.25)
    # excluded pixels do not count
    assert class_weights_from_masks([np.array([[0, 1, 2, 2]], np.uint8)]) == (1.0, 0.25)
    with pytest.raises(UNetError):
        class_weights_from_masks([np.zeros((3, 3), np.uint8)])


def test_loss_values():
    lab = np.array([[0, 1], [1, 0]])
    big = np.where(lab[..., None] == np.arange(2), 20.0, -20.0)
    assert weighted_ce_loss(big, lab)[0] < 1e-3
    assert weighted_ce_loss(np.zeros((2, 2, 2)), lab)[0] == pytest.approx(math.log(2))
    assert weighted_ce_loss(np.zeros((1, 2, 2)), np.full((1, 2), Label.EXCLUDED))[0] == 0.0
    with pytest.raises(UNetError):
        weighted_ce_loss(np.zeros((2, 2, 3)), lab)


def _scene(bg="bark", seed=0, h=32, w=32):
    return generate_scene(SceneSpec(background=bg, seed=seed, height=h, width=w, n_blobs=2, frame=2,
                                    semi_major=(5.0, 6.0), semi_minor=(4.0, 4.5)))


def test_augmentation_counts_and_labels():
    pairs = [_scene(seed=s, h=32, w=32) for s in range(21)]
    out = augment_dataset(pairs, 10, seed=3)
    assert len(out) == 231
    for i, (hc, mask) in enumerate(out):
        src = pairs[i // 11][1]
        assert hc.data.shape == pairs[0][0].data.shape and hc.data.dtype == np.float32
        assert set(np.unique(mask.labels)) <= set(np.unique(src.labels))
    again = augment_dataset(pairs, 10, seed=3)
    assert all(np.array_equal(a[0].data, b[0].data) for a, b in zip(out, again))


def test_flip_twice_is_identity():
    hc, mask = _scene()
    for flip in (flip_h, flip_v):
        np.testing.assert_array_equal(flip(flip(hc.data)), hc.data)
        np.testing.assert_array_equal(flip(flip(mask.labels)), mask.labels)


def test_transform_moves_image_and_mask_together():
    # a cube whose first channel equals the mask code tracks every transform
    hc, mask = _scene(seed=1)
    data = np.concatenate([mask.labels[..., None].astype(np.float32), hc.data], axis=-1)
    for kw in ({"k90": 1}, {"hflip": True, "angle": 10.0}, {"vflip": True, "scale": 1.15},
               {"k90": 3, "angle": -14.0, "scale": 0.85}):
        d, m = transform_pair(data, mask.labels, **kw)
        np.testing.assert_array_equal(d[..., 0], m)
    assert len(augment(hc, mask, 4, seed=0)) == 5
    with pytest.raises(UNetError):
        transform_pair(np.zeros((4, 6, 1)), np.zeros((4, 6)), k90=1)


def test_loss_is_flip_equivariant():
    hc, mask = _scene(seed=2, h=32, w=32)
    m = build_unet(UNetSpec(hc.n_bands, 4, 2), seed=0)
    x = hc.data[None].astype(np.float64)
    lab = mask.labels[None]
    P = {k: v.astype(np.float64) for k, v in m.params.items()}
    # flipping the input and every kernel flips the output exactly
    P_flip = {k: (v[:, ::-1] if k.endswith(".W") else v) for k, v in P.items()}
    for w in ((1.0, 1.0), (1.0, 7.5)):
        a = weighted_ce_loss(_forward(P, m.spec, x, keep=False)[0], lab, w)[0]
        b = weighted_ce_loss(_forward(P_flip, m.spec, x[:, :, ::-1], keep=False)[0],
                             lab[:, :, ::-1], w)[0]
        assert abs(a - b) < 1e-6


def test_overfits_one_image():
    hc, mask = _scene(seed=3, h=32, w=32)
    m = build_unet(UNetSpec(hc.n_bands, 4, 2), seed=1)
    m = train(m, [(hc, mask)], TrainConfig(epochs=200, batch_size=1, seed=0))
    assert pixel_accuracy(m, [(hc, mask)]) >= 0.99
    assert len(m.history) == 200 and m.epoch == 200


def test_training_is_deterministic_and_logged(tmp_path):
    pairs = [_scene(seed=s, h=32, w=32) for s in range(3)]
    m0 = build_unet(UNetSpec(pairs[0][0].n_bands, 2, 2), seed=4)
    a = train(m0, pairs, TrainConfig(epochs=3, seed=9))
    b = train(m0, pairs, TrainConfig(epochs=3, seed=9))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.history == b.history and len(a.history) == 3
    lines = write_training_log(a, tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,pixel_accuracy" and len(lines) == 4


def test_divergence_aborts_with_epoch():
    hc, mask = _scene(seed=5)
    m = build_unet(UNetSpec(hc.n_bands, 2, 1))
    # the first loss is evaluated before any update, so the blow-up shows in epoch 2
    with np.errstate(all="ignore"), pytest.raises(UNetError, match="epoch 2"):
        train(m, [(hc, mask)], TrainConfig(lr=1e30, epochs=2, clip_norm=None))


def test_selection_input_needs_no_other_change():
    hc, mask = _scene(seed=6, h=32, w=32)
    sel = selection_2(STANDARD_WAVELENGTHS)
    small = restrict_bands(hc, sel)
    m = build_unet(UNetSpec(len(sel), 2, 2))
    m = train(m, [(small, mask)], TrainConfig(epochs=1))
    assert m.first_layer_weight_count() == 9 * 62 * 2
    assert predict_image(m, small).labels.shape == mask.labels.shape


def test_tiled_prediction_equals_single_pass():
    hc, mask = _scene(seed=7, h=150, w=136)
    m = build_unet(UNetSpec(hc.n_bands, 2, 2), seed=2)
    m = train(m, [(hc.with_data(hc.data[:64, :56]), ClassMask(mask.labels[:64, :56]))],
              TrainConfig(epochs=2))
    excl = np.zeros_like(mask.labels)
    excl[:5, :5] = Label.EXCLUDED
    whole = predict_image(m, hc, ClassMask(excl))
    tiled = predict_image(m, hc, ClassMask(excl), tile=96)
    np.testing.assert_array_equal(whole.labels, tiled.labels)
    assert np.all(whole.labels[:5, :5] == Label.EXCLUDED)
    assert set(np.unique(whole.labels)) <= {Label.BACKGROUND, Label.TARGET, Label.EXCLUDED}


def test_model_file_round_trip(tmp_path):
    hc, mask = _scene(seed=8, h=32, w=32)
    m = build_unet(UNetSpec(hc.n_bands, 2, 2), seed=3)
    m = replace(train(m, [(hc, mask)], TrainConfig(epochs=1)), bands=tuple(range(hc.n_bands)))
    p = save_model(m, tmp_path / "u.bin")
    assert p.read_bytes()[:len(MAGIC)] == MAGIC
    back = load_model(p)
    assert back.spec == m.spec and back.epoch == 1 and back.bands == m.bands
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
    np.testing.assert_array_equal(back.norm_mean, m.norm_mean)
    np.testing.assert_array_equal(predict_image(back, hc).labels, predict_image(m, hc).labels)
    (tmp_path / "cut.bin").write_bytes(p.read_bytes()[:-8])
    with pytest.raises(UNetError):
        load_model(tmp_path / "cut.bin")
    (tmp_path / "junk.bin").write_bytes(b"nonsense")
    with pytest.raises(UNetError):
        load_model(tmp_path / "junk.bin")


def test_hypercube_input_accepted():
    hc = Hypercube(np.zeros((8, 8, 3), np.float32), np.arange(3.0))
    m = build_unet(UNetSpec(3, 2, 2))
    assert forward(m, hc).shape == (8, 8, 2)
