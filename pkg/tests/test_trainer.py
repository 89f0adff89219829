import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from tristream import tensor as tn
from tristream.backbone import NetworkConfig, load_checkpoint
from tristream.errors import InputError, NumericalError
from tristream.network import build_model
from tristream.sampler import StrideTriple, VideoClip
from tristream.trainer import (SyntheticSpec, TrainConfig, Trainer, gen_detection, gen_synthetic, infer,
                               predict_logits, read_dataset, sgd_step, softmax_np, train, write_dataset)


def tiny_cfg(**kw):
    base = dict(strides=StrideTriple(8, 4, 2), clip_len=8, in_channels=1, slow_channels=(4, 8, 8),
                beta=0.5, blocks=1, head="none", num_classes=4)
    base.update(kw)
    return NetworkConfig(**base)


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------


def test_plain_gradient_descent():
    p, g, v = np.array([1.0, -2.0]), np.array([0.5, 0.5]), np.zeros(2)
    sgd_step([p], [g], [v], TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p, [0.95, -2.05])


def test_zero_grad_zero_velocity_noop():
    p = np.array([3.0, 4.0])
    sgd_step([p], [np.zeros(2)], [np.zeros(2)], TrainConfig(lr=0.5, weight_decay=0.0))
    np.testing.assert_array_equal(p, [3.0, 4.0])


def test_two_steps_on_scalar_quadratic():
    # f(x) = a x^2 / 2, grad a x; lr, momentum m, decay w
    a, lr, m, w, x0 = 2.0, 0.1, 0.9, 0.01, 1.0
    cfg = TrainConfig(lr=lr, momentum=m, weight_decay=w)
    p, v = np.array([x0]), np.zeros(1)
    sgd_step([p], [a * p.copy()], [v], cfg)
    sgd_step([p], [a * p.copy()], [v], cfg)
    v1 = a * x0 + w * x0
    x1 = x0 - lr * v1
    v2 = m * v1 + a * x1 + w * x1
    x2 = x1 - lr * v2
    assert p[0] == pytest.approx(x2, abs=1e-15)
    assert v[0] == pytest.approx(v2, abs=1e-15)


def test_weight_decay_shrinks_norm():
    p = np.array([1.0, -3.0, 2.0])
    before = np.linalg.norm(p)
    sgd_step([p], [np.zeros(3)], [np.zeros(3)], TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.1))
    assert np.linalg.norm(p) < before


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(momentum=1.0), dict(weight_decay=-1e-3), dict(dropout_p=1.0)])
def test_train_config_validation(kw):
    with pytest.raises(InputError):
        TrainConfig(**kw)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _data(n=8, seed=0):
    spec = SyntheticSpec(size=16, object_size=2)
    return gen_synthetic(spec, n, np.random.default_rng(seed))


def test_zero_lr_leaves_parameters():
    model = build_model(tiny_cfg(), 0)
    before = model.state_dict()
    d = _data()
    train(model, d.frames, d.labels, TrainConfig(lr=0.0, epochs=2, batch_size=4))
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])


def test_two_sample_overfit():
    model = build_model(tiny_cfg(), 1)
    d = _data(2, seed=3)
    trainer = Trainer(model, TrainConfig(lr=0.01, dropout_p=0.0))
    for step in range(500):
        loss = trainer.step(lambda: tn.cross_entropy(model(d.frames, trainer.rng), d.labels))
        if loss < 0.01:
            break
    assert loss < 0.01


def test_replay_is_bit_identical(tmp_path):
    d = _data()
    logs = []
    for run in range(2):
        model = build_model(tiny_cfg(head="attention", attn_heads=2), 4, 0.5)
        logs.append(train(model, d.frames, d.labels, TrainConfig(lr=0.01, epochs=2, batch_size=4, seed=9),
                          tmp_path / f"ck{run}", {}))
    assert [r.loss for r in logs[0]] == [r.loss for r in logs[1]]
    a, _ = load_checkpoint(tmp_path / "ck0")
    b, _ = load_checkpoint(tmp_path / "ck1")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_divergence_keeps_last_good_checkpoint(tmp_path):
    d = _data()
    model = build_model(tiny_cfg(), 2)
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        train(model, d.frames, d.labels, TrainConfig(lr=1e30, momentum=0.0, epochs=3, batch_size=4),
              tmp_path / "ck", {})
    state, _ = load_checkpoint(tmp_path / "ck")
    assert all(np.isfinite(v).all() for v in state.values())


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def test_infer_single_clip_matches_single_pass():
    model = build_model(tiny_cfg(), 3)
    d = _data(1)
    probs = infer(model, d.clip(0), n_clips=1)
    direct = softmax_np(predict_logits(model, d.frames))[0]
    np.testing.assert_allclose(probs, direct, atol=1e-6)
    assert abs(probs.sum() - 1.0) <= 1e-6


def test_infer_averages_over_views():
    model = build_model(tiny_cfg(), 4)
    rng = np.random.default_rng(5)
    video = VideoClip(rng.standard_normal((14, 16, 24, 1)).astype(np.float32))
    probs = infer(model, video, n_clips=3, crop=16)
    views = []
    for s in (0, 3, 6):
        for x in (0, 4, 8):
            views.append(softmax_np(predict_logits(model, video.frames[None, s:s + 8, :, x:x + 16]))[0])
    np.testing.assert_allclose(probs, np.mean(views, axis=0), atol=1e-6)
    assert abs(probs.sum() - 1.0) <= 1e-6


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def test_static_object_rejected():
    with pytest.raises(InputError):
        SyntheticSpec(speed=0, noise=0.0)


def test_object_must_fit():
    with pytest.raises(InputError):
        SyntheticSpec(size=8, frames=8, object_size=4)


def test_synthetic_shapes_and_balance():
    d = gen_synthetic(SyntheticSpec(), 400, np.random.default_rng(0))
    assert d.frames.shape == (400, 8, 32, 32, 1) and d.frames.dtype == np.float32
    assert np.bincount(d.labels).tolist() == [100] * 4


def test_motion_direction_matches_label():
    spec = SyntheticSpec(noise=0.0)
    d = gen_synthetic(spec, 40, np.random.default_rng(1))
    for f, lab in zip(d.frames, d.labels):
        def centre(frame):
            ys, xs = np.nonzero(frame[..., 0] > 0.5)
            return ys.mean(), xs.mean()
        (y0, x0), (y1, x1) = centre(f[0]), centre(f[-1])
        dy, dx = np.sign(y1 - y0), np.sign(x1 - x0)
        assert (dy, dx) == [(-1, 0), (1, 0), (0, -1), (0, 1)][lab]


def test_first_frame_probe_at_chance():
    spec = SyntheticSpec()
    tr = gen_synthetic(spec, 1000, np.random.default_rng(10))
    te = gen_synthetic(spec, 1000, np.random.default_rng(11))
    probe = LogisticRegression(max_iter=300)
    probe.fit(tr.frames[:, 0].reshape(1000, -1), tr.labels)
    acc = probe.score(te.frames[:, 0].reshape(1000, -1), te.labels)
    assert acc <= 1 / spec.num_classes + 0.05


def test_detection_boxes_cover_objects():
    spec = SyntheticSpec(noise=0.0)
    d = gen_detection(spec, 6, np.random.default_rng(2))
    S = spec.size
    for frames, boxes in zip(d.frames, d.boxes):
        assert len(boxes) == 2
        for b in boxes:
            x1, y1, x2, y2 = (int(round(v * S)) for v in b.box)
            inside = frames[:, y1:y2, x1:x2, 0] > 0.5
            assert inside.sum() == spec.frames * spec.object_size ** 2


def test_dataset_round_trip(tmp_path):
    d = _data(5)
    manifest = write_dataset(d, tmp_path, "train")
    back = read_dataset(manifest)
    np.testing.assert_array_equal(back.frames, d.frames)
    np.testing.assert_array_equal(back.labels, d.labels)
