import numpy as np
import pytest

from tristream import tensor as tn
from tristream.backbone import NetworkConfig, ResidualBlock
from tristream.detector import (BoxAnnotation, Detection, build_detector, detect, dilated_res5, read_detection_manifest,
                                roi_extract, roi_pool, write_detection_manifest)
from tristream.errors import InputError
from tristream.sampler import StrideTriple
from tristream.tensor import Tensor

from oracles import conv3d_loops, roi_loops


def det_cfg(**kw):
    base = dict(strides=StrideTriple(8, 4, 2), clip_len=8, in_channels=1, slow_channels=(4, 8, 8),
                beta=0.5, blocks=1, num_classes=4)
    base.update(kw)
    return NetworkConfig(**base)


def f64(a):
    return Tensor(np.asarray(a), dtype=np.float64)


# ---------------------------------------------------------------------------
# ROI extraction
# ---------------------------------------------------------------------------


def test_full_frame_constant_pools_to_constant():
    feat = Tensor(np.full((1, 3, 2, 6, 6), 2.5))
    out = roi_pool(roi_extract(feat, [(0.0, 0.0, 1.0, 1.0)], (3, 3)))
    np.testing.assert_allclose(out.data, np.full((1, 3), 2.5))


def test_reference_box_matches_bilinear_oracle():
    rng = np.random.default_rng(0)
    feat = rng.standard_normal((1, 2, 2, 8, 8))
    box = (0.25, 0.25, 0.75, 0.75)
    out = roi_extract(f64(feat), [box], (2, 2)).data[0]
    np.testing.assert_allclose(out, roi_loops(feat, box, 2, 2), atol=1e-5)


def test_box_replicated_over_time():
    rng = np.random.default_rng(1)
    frame = rng.standard_normal((1, 2, 1, 8, 8))
    feat = np.repeat(frame, 4, axis=2)
    out = roi_extract(f64(feat), [(0.1, 0.2, 0.6, 0.9)], (3, 3)).data
    for t in range(4):
        np.testing.assert_array_equal(out[:, :, t], out[:, :, 0])


def test_single_frame_is_2d_roi():
    rng = np.random.default_rng(2)
    feat = rng.standard_normal((1, 1, 1, 4, 4))
    out = roi_extract(f64(feat), [(0.0, 0.0, 0.5, 0.5)], (2, 2)).data[0, 0, 0]
    # samples at pixel centres 0 and 1 of the top-left quarter
    np.testing.assert_allclose(out, feat[0, 0, 0, :2, :2], atol=1e-12)


def test_degenerate_box_widened_with_warning():
    feat = f64(np.arange(16.0).reshape(1, 1, 1, 4, 4))
    with pytest.warns(UserWarning, match="less than one feature cell"):
        out = roi_extract(feat, [(0.5, 0.5, 0.55, 0.9)], (1, 1))
    assert np.isfinite(out.data).all()


def test_invalid_box_rejected():
    with pytest.raises(InputError):
        roi_extract(f64(np.zeros((1, 1, 1, 4, 4))), [(0.6, 0.1, 0.4, 0.5)], (2, 2))


@pytest.mark.parametrize("shift", [(0, 1), (2, 0), (3, 2)])
def test_roi_translation_equivariant(shift):
    rng = np.random.default_rng(3)
    H = W = 8
    dy, dx = shift
    feat = rng.standard_normal((1, 2, 1, H, W))
    big = np.zeros((1, 2, 1, H + dy, W + dx))
    big[..., dy:, dx:] = feat
    box = (0.25, 0.25, 0.75, 0.625)
    moved = ((box[0] * W + dx) / (W + dx), (box[1] * H + dy) / (H + dy),
             (box[2] * W + dx) / (W + dx), (box[3] * H + dy) / (H + dy))
    a = roi_extract(f64(feat), [box], (3, 3)).data
    b = roi_extract(f64(big), [moved], (3, 3)).data
    np.testing.assert_allclose(a, b, atol=1e-10)


# ---------------------------------------------------------------------------
# dilated final stage
# ---------------------------------------------------------------------------


def test_dilated_stage_preserves_extent():
    blocks = [ResidualBlock(np.random.default_rng(4), 4, 8, 3, spatial_stride=1, dilation=2)]
    assert dilated_res5(Tensor(np.zeros((1, 4, 2, 5, 5))), blocks).shape == (1, 8, 2, 5, 5)


def test_dilated_conv_zero_input_gives_bias():
    out = tn.conv3d(Tensor(np.zeros((1, 2, 1, 6, 6))), Tensor(np.ones((3, 2, 1, 3, 3))), Tensor([1.0, -2.0, 0.5]),
                    padding=(0, 2, 2), dilation=(1, 2, 2))
    for c, b in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out.data[0, c] == b)


def test_dilation_equals_zero_inserted_kernel():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 1, 3, 3))
    expanded = np.zeros((3, 2, 1, 5, 5))
    expanded[:, :, :, ::2, ::2] = w
    with tn.precision(np.float64):
        out = tn.conv3d(Tensor(x), Tensor(w), padding=(0, 2, 2), dilation=(1, 2, 2)).data
    np.testing.assert_allclose(out, conv3d_loops(x, expanded, None, (1, 1, 1), (0, 2, 2)), atol=1e-10)


def test_detector_final_stage_is_dilated():
    model = build_detector(det_cfg(), 0)
    last = model.backbone.pathways["slow"].stages[-1][0]
    assert last.conv1.stride == (1, 1, 1) and last.conv1.dilation == (1, 2, 2)


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def _clip(rng, size=16):
    return rng.standard_normal((8, size, size, 1)).astype(np.float32)


BOXES = [BoxAnnotation((0.1, 0.1, 0.5, 0.6), {1}, 0.1, "c"), BoxAnnotation((0.5, 0.2, 0.9, 0.9), {0, 3}, 0.1, "c")]


def test_zero_final_layer_gives_sigmoid_bias():
    model = build_detector(det_cfg(), 1)
    model.fc.weight.data[:] = 0
    model.fc.bias.data = np.array([0.0, 1.0, -1.0, 2.0], dtype=np.float32)
    dets = detect(_clip(np.random.default_rng(0)), BOXES, model)
    for d in dets:
        np.testing.assert_allclose(d.scores, 1 / (1 + np.exp(-model.fc.bias.data)), atol=1e-6)


def test_score_length_matches_classes():
    model = build_detector(det_cfg(num_classes=80), 2)
    dets = detect(_clip(np.random.default_rng(1)), BOXES, model)
    assert [len(d.scores) for d in dets] == [80, 80]
    assert all(0 <= s <= 1 for d in dets for s in d.scores)


def test_detect_replay():
    clip = _clip(np.random.default_rng(2))
    a = detect(clip, BOXES, build_detector(det_cfg(), 5))
    b = detect(clip, BOXES, build_detector(det_cfg(), 5))
    assert all(np.array_equal(x.scores, y.scores) for x, y in zip(a, b))


def test_box_permutation_permutes_detections():
    clip = _clip(np.random.default_rng(3))
    model = build_detector(det_cfg(), 6)
    extra = BoxAnnotation((0.0, 0.3, 0.4, 1.0), {2}, 0.1, "c")
    a = detect(clip, BOXES + [extra], model)
    b = detect(clip, [extra] + BOXES[::-1], model)
    np.testing.assert_allclose(a[0].scores, b[2].scores, atol=1e-6)
    np.testing.assert_allclose(a[1].scores, b[1].scores, atol=1e-6)
    np.testing.assert_allclose(a[2].scores, b[0].scores, atol=1e-6)


def test_gradient_flows_to_backbone_through_roi():
    model = build_detector(det_cfg(), 7)
    clips = np.stack([_clip(np.random.default_rng(4))])
    loss = tn.bce_with_logits(model(clips, [BOXES]), np.array([[0, 1, 0, 0], [1, 0, 0, 1]], dtype=float))
    loss.backward()
    for name, pw in model.backbone.pathways.items():
        assert np.linalg.norm(pw.stem.conv.weight.grad) > 0, name


def test_sigmoid_scores_monotone_in_logits():
    z = np.linspace(-6, 6, 50)
    s = tn.sigmoid(Tensor(z, dtype=np.float64)).data
    assert np.all(np.diff(s) > 0)


def test_annotation_validation():
    with pytest.raises(InputError):
        BoxAnnotation((0.1, 0.1, 0.5, 0.6), set(), 0.0)
    with pytest.raises(InputError):
        BoxAnnotation((0.1, 0.1, 1.5, 0.6), {0}, 0.0)
    with pytest.raises(InputError):
        Detection((0.1, 0.1, 0.5, 0.6), [0.2, 1.3], 0.0)


def test_detection_manifest_round_trip(tmp_path):
    dets = [Detection((0.1, 0.2, 0.3, 0.4), [0.25, 0.5], 1.5, "clipA")]
    items = BOXES + dets
    write_detection_manifest(tmp_path / "d.csv", items)
    back = read_detection_manifest(tmp_path / "d.csv")
    assert [type(b) for b in back] == [BoxAnnotation, BoxAnnotation, Detection]
    assert back[1].class_ids == {0, 3}
    np.testing.assert_allclose(back[2].scores, [0.25, 0.5])
    assert back[2].clip_id == "clipA"
