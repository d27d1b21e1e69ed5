import numpy as np
import pytest
from scipy.special import expit

from nucleo.autodiff import Tape, Tensor, grad_check, smooth_l1, softmax_cross_entropy, sigmoid_bce, weighted_sum
from nucleo.autodiff import ops
from nucleo.detection import (
    FPN,
    BoxHead,
    DetectionTargets,
    DetectorConfig,
    MaskHead,
    MaskRCNN,
    MicroBackbone,
    RPNHead,
    assign_roi_level,
    assign_rpn_targets,
    generate_proposals,
    heads_forward,
    label_anchors,
    multitask_loss,
    pyramid_roi_align,
    roi_align,
    sample_detection_targets,
)
from nucleo.detection.loss import LossBreakdown, rpn_class_logits
from nucleo.geometry import AnchorSpec, generate_anchors, masks_to_boxes
from nucleo.synth import synth_image
from oracles import brute_nms, literal_rpn_labels

SMALL = DetectorConfig(
    backbone_widths=(8, 8, 8, 8), stem_width=8, fpn_channels=8, head_hidden=16, roi_batch=16, rpn_batch=32
)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def synth_case(seed=0, size=64):
    img, masks = synth_image(np.random.default_rng(seed), size)
    return img.transpose(2, 0, 1).astype(np.float64) - 100.0, masks, masks_to_boxes(masks)


class TestBackbone:
    def test_pyramid_dims(self):
        bb = MicroBackbone(dtype=np.float64)
        feats = bb(Tensor(np.zeros((1, 3, 64, 64))))
        assert [f.shape[-1] for f in feats] == [16, 8, 4, 2]

    def test_requires_multiple_of_32(self):
        with pytest.raises(ValueError):
            MicroBackbone()(Tensor(np.zeros((1, 3, 48, 64))))

    def test_parameter_count_fixed(self):
        # backbone 99760 + fpn 44800 + rpn 9743 + box head 218118 + mask head 41153
        assert MaskRCNN(seed=0).num_parameters() == MaskRCNN(seed=5).num_parameters() == 413_574

    def test_zero_image_finite(self):
        m = MaskRCNN(SMALL, dtype=np.float64)
        for p in m.pyramid(np.zeros((3, 64, 64))):
            assert np.all(np.isfinite(p.data))

    def test_stage_tags(self):
        m = MaskRCNN()
        tags = {n.split(".")[0] + ("." + n.split(".")[1] if n.startswith("backbone") else ""): p.stage_tag
                for n, p in m.named_parameters()}
        assert tags["backbone.stem"] == "lower"
        assert {p.stage_tag for n, p in m.named_parameters() if n.startswith("backbone.stages.3")} == {"upper"}
        assert {p.stage_tag for n, p in m.named_parameters() if n.startswith("backbone.stages.1")} == {"lower"}
        assert {p.stage_tag for n, p in m.named_parameters() if not n.startswith("backbone")} == {"head"}


class TestFPN:
    def test_path_isolation(self, rng):
        chans = (4, 4, 4, 4)
        fpn = FPN(chans, channels=4, rng=rng, dtype=np.float64)
        for lat in fpn.lateral[1:]:
            lat.weight.data[:] = 0
            lat.bias.data[:] = 0
        fpn.lateral[0].weight.data[:] = np.eye(4)[:, :, None, None]
        c = [Tensor(rng.normal(size=(1, 4, 16 >> i, 16 >> i))) for i in range(4)]
        p2 = fpn(c)[0].data
        direct = ops.conv2d(c[0], fpn.smooth[0].weight, fpn.smooth[0].bias, 1, 1).data
        np.testing.assert_allclose(p2, direct, atol=1e-12)

    def test_channels_and_grad_reach_laterals(self, rng):
        fpn = FPN((4, 6, 8, 10), channels=5, rng=rng, dtype=np.float64)
        c = [Tensor(rng.normal(size=(1, ch, 16 >> i, 16 >> i))) for i, ch in enumerate((4, 6, 8, 10))]
        with Tape() as tape:
            outs = fpn(c)
            loss = outs[0]
            total = weighted_sum(outs[0], rng.normal(size=outs[0].shape))
        assert {o.shape[1] for o in outs} == {5}
        tape.backward(total)
        for lat in fpn.lateral:
            assert np.abs(lat.weight.grad).sum() > 0
        del loss


class TestRPN:
    def test_output_count_matches_anchors(self):
        m = MaskRCNN(SMALL, dtype=np.float64)
        logits, deltas = m.rpn(m.pyramid(np.zeros((3, 64, 96))))[0]
        from nucleo.detection.rpn import concat_levels

        lg, dl = concat_levels(m.rpn(m.pyramid(np.zeros((3, 64, 96)))))
        anchors, _ = m.anchors(64, 96)
        assert lg.shape == (len(anchors),) and dl.shape == (len(anchors), 4)

    def test_level_permutation(self, rng):
        head = RPNHead(4, 3, rng=rng, dtype=np.float64)
        ps = [Tensor(rng.normal(size=(1, 4, s, s))) for s in (8, 4, 2)]
        a = head(ps)
        b = head(ps[::-1])[::-1]
        for (l1, d1), (l2, d2) in zip(a, b):
            np.testing.assert_array_equal(l1.data, l2.data)
            np.testing.assert_array_equal(d1.data, d2.data)

    def test_gradcheck_head(self, rng):
        head = RPNHead(3, 2, rng=rng, dtype=np.float64)
        x = t64(rng.normal(size=(1, 3, 4, 4)))
        wl, wd = rng.normal(size=32), rng.normal(size=(32, 4))

        def fn(x, *params):
            lg, dl = head.level(x)
            return ops.add(weighted_sum(lg, wl), weighted_sum(dl, wd))

        assert grad_check(fn, [x, *head.parameters()], eps=1e-6) < 1e-4

    def test_exact_anchor_positive(self):
        anchors = np.array([[0, 0, 10, 10], [20, 20, 40, 40], [50, 0, 60, 5]], float)
        labels, deltas = label_anchors(anchors, [[20, 20, 40, 40]])
        assert labels[1] == 1
        np.testing.assert_array_equal(deltas[1], 0)

    def test_no_gt_all_negative(self, rng):
        anchors, _ = generate_anchors(AnchorSpec(), 64, 64)
        labels, deltas = assign_rpn_targets(anchors, np.zeros((0, 4)), batch=32, rng=rng)
        assert set(labels[labels >= 0]) == {0} and (labels == 0).sum() == 32
        np.testing.assert_array_equal(deltas, 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_literal_oracle(self, seed):
        r = np.random.default_rng(seed)
        xy = r.uniform(0, 60, (50, 2))
        anchors = np.concatenate([xy, xy + r.uniform(4, 30, (50, 2))], 1)
        gxy = r.uniform(0, 60, (5, 2))
        gts = np.concatenate([gxy, gxy + r.uniform(4, 30, (5, 2))], 1)
        labels, deltas = label_anchors(anchors, gts, 0.7, 0.3)
        ref_l, ref_d = literal_rpn_labels(anchors, gts, 0.7, 0.3)
        np.testing.assert_array_equal(labels, ref_l)
        np.testing.assert_allclose(deltas, ref_d, atol=1e-12)

    def test_sampling_bounds(self, rng):
        labels = np.array([1] * 200 + [0] * 500 + [-1] * 10)
        from nucleo.detection.rpn import sample_labels

        out = sample_labels(labels, 256, 0.5, rng)
        assert (out == 1).sum() == 128 and (out == 0).sum() == 128


class TestProposals:
    def test_single_anchor(self):
        p = generate_proposals([3.0], np.zeros((1, 4)), [[2, 2, 10, 12]], [0], (32, 32))
        np.testing.assert_allclose(p.boxes, [[2, 2, 10, 12]])
        assert p.objectness[0] == pytest.approx(expit(3.0))

    def test_duplicates_collapse(self):
        anchors = np.array([[2, 2, 10, 12]] * 3, float)
        p = generate_proposals([1.0, 2.0, 0.5], np.zeros((3, 4)), anchors, [0, 0, 0], (32, 32))
        assert len(p) == 1 and p.objectness[0] == pytest.approx(expit(2.0))

    def test_scripted_oracle(self, rng):
        xy = rng.uniform(-10, 60, (100, 2))
        anchors = np.concatenate([xy, xy + rng.uniform(2, 30, (100, 2))], 1)
        logits = rng.normal(size=100)
        deltas = rng.normal(scale=0.3, size=(100, 4))
        got = generate_proposals(logits, deltas, anchors, np.zeros(100, int), (50, 60), 60, 0.6, 25)
        # 1. top-k by score
        order = sorted(range(100), key=lambda i: -logits[i])[:60]
        # 2. decode by hand
        boxes = []
        for i in order:
            a, d = anchors[i], deltas[i]
            w, h = a[2] - a[0], a[3] - a[1]
            cx, cy = a[0] + w / 2 + d[0] * w, a[1] + h / 2 + d[1] * h
            nw, nh = w * np.exp(d[2]), h * np.exp(d[3])
            b = [cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2]
            # 3. clip and drop boxes thinner than one pixel
            b = [min(max(b[0], 0), 60), min(max(b[1], 0), 50), min(max(b[2], 0), 60), min(max(b[3], 0), 50)]
            boxes.append(b)
        alive = [k for k, b in enumerate(boxes) if b[2] - b[0] >= 1 and b[3] - b[1] >= 1]
        scores = [expit(logits[order[k]]) for k in alive]
        # 4. nms then top-k
        kept = brute_nms([boxes[k] for k in alive], scores, 0.6)[:25]
        np.testing.assert_allclose(got.boxes, [boxes[alive[k]] for k in kept], atol=1e-9)


class TestRoiAlign:
    def test_level_assignment(self):
        assert assign_roi_level([[0, 0, 56, 56]]).tolist() == [2]
        assert assign_roi_level([[0, 0, 448, 448]]).tolist() == [5]
        assert assign_roi_level([[0, 0, 112, 112]]).tolist() == [3]
        sides = np.linspace(1, 800, 200)
        lv = assign_roi_level(np.stack([0 * sides, 0 * sides, sides, sides], 1))
        assert np.all(np.diff(lv) >= 0)

    def test_constant_field(self, rng):
        f = Tensor(np.full((1, 2, 8, 8), 3.25))
        rois = np.array([[4, 4, 20, 28], [0.3, 1.7, 31.9, 31.2], [10, 10, 11, 12]])
        out = roi_align(f, rois, 4.0, 7)
        # exact up to rounding of the summed bin weights
        np.testing.assert_allclose(out.data, 3.25, rtol=4 * np.finfo(np.float64).eps, atol=0)

    @staticmethod
    def linear_field(h, w):
        v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return (u + 0.5) + 2 * (v + 0.5)

    def test_linear_field_analytic(self, rng):
        stride, p = 4.0, 7
        f = Tensor(self.linear_field(16, 16)[None, None])
        for _ in range(20):
            lo = rng.uniform(4, 30, 2)
            hi = lo + rng.uniform(2, 28, 2)
            out = roi_align(f, [[lo[0], lo[1], hi[0], hi[1]]], stride, p).data[0, 0]
            bx = (lo[0] + (np.arange(p) + 0.5) * (hi[0] - lo[0]) / p) / stride
            by = (lo[1] + (np.arange(p) + 0.5) * (hi[1] - lo[1]) / p) / stride
            np.testing.assert_allclose(out, bx[None, :] + 2 * by[:, None], atol=1e-6)

    def test_quarter_pixel_shift(self):
        stride = 8.0
        f = Tensor(self.linear_field(16, 16)[None, None])
        roi = np.array([[20.0, 24.0, 60.0, 70.0]])
        base = roi_align(f, roi, stride, 7).data
        shifted = roi_align(f, roi + [0.25, 0, 0.25, 0], stride, 7).data
        np.testing.assert_allclose(shifted - base, 0.25 / stride, atol=1e-9)

    def test_gradcheck_near_edges(self, rng):
        x = t64(rng.normal(size=(1, 2, 6, 6)))
        rois = np.array([[-3.0, -2.0, 10.0, 9.0], [15.0, 14.0, 25.0, 24.5], [0.5, 20.0, 23.9, 23.9]])
        w = rng.normal(size=(3, 2, 4, 4))
        assert grad_check(lambda x: weighted_sum(roi_align(x, rois, 4.0, 4), w), [x], eps=1e-6) < 1e-4

    def test_pyramid_keeps_input_order(self, rng):
        pyr = [Tensor(rng.normal(size=(1, 2, 32 >> i, 32 >> i))) for i in range(4)]
        rois = np.array([[0, 0, 120, 120], [0, 0, 20, 20], [4, 4, 70, 70]], float)
        out = pyramid_roi_align(pyr, rois, (4, 8, 16, 32), 3).data
        lv = assign_roi_level(rois) - 2
        for k in range(3):
            ref = roi_align(pyr[lv[k]], rois[k : k + 1], (4, 8, 16, 32)[lv[k]], 3).data[0]
            np.testing.assert_array_equal(out[k], ref)


class TestHeads:
    def test_empty_rois(self):
        bh, mh = BoxHead(4, 7, 8, dtype=np.float64), MaskHead(4, dtype=np.float64)
        cls, box, mask = heads_forward(bh, mh, Tensor(np.zeros((0, 4, 7, 7))), Tensor(np.zeros((0, 4, 14, 14))))
        assert cls.shape == (0, 2) and box.shape == (0, 4) and mask.shape == (0, 1, 28, 28)

    def test_mask_decoupled_from_class_branch(self, rng):
        bh, mh = BoxHead(4, 7, 8, rng=rng, dtype=np.float64), MaskHead(4, rng=rng, dtype=np.float64)
        pc, pm = Tensor(rng.normal(size=(3, 4, 7, 7))), Tensor(rng.normal(size=(2, 4, 14, 14)))
        before = heads_forward(bh, mh, pc, pm)[2].data
        for p in bh.parameters():
            p.data = rng.normal(size=p.shape)
        after = heads_forward(bh, mh, pc, pm)[2].data
        np.testing.assert_array_equal(before, after)

    def test_gradcheck_both_branches(self, rng):
        bh = BoxHead(2, 3, 4, rng=rng, dtype=np.float64)
        mh = MaskHead(2, n_convs=1, rng=rng, dtype=np.float64)
        pc, pm = t64(rng.normal(size=(2, 2, 3, 3))), t64(rng.normal(size=(1, 2, 3, 3)))
        wc, wb, wm = rng.normal(size=(2, 2)), rng.normal(size=(2, 4)), rng.normal(size=(1, 1, 6, 6))

        def fn(pc, pm, *params):
            c, b, m = heads_forward(bh, mh, pc, pm)
            return ops.add(ops.add(weighted_sum(c, wc), weighted_sum(b, wb)), weighted_sum(m, wm))

        assert grad_check(fn, [pc, pm, *bh.parameters(), *mh.parameters()], eps=1e-6) < 1e-4


def random_loss_inputs(rng, n_anchor=40, r=10, f=3, m=6):
    rpn_labels = rng.integers(-1, 2, n_anchor)
    det = DetectionTargets(
        rois=rng.uniform(0, 30, (r, 4)),
        labels=np.r_[np.ones(f, int), np.zeros(r - f, int)],
        fg_index=np.arange(f),
        box_deltas=rng.normal(size=(f, 4)),
        mask_targets=(rng.random((f, m, m)) < 0.5).astype(float),
    )
    tensors = (
        t64(rng.normal(size=n_anchor)),
        t64(rng.normal(size=(n_anchor, 4))),
        t64(rng.normal(size=(r, 2))),
        t64(rng.normal(size=(r, 4))),
        t64(rng.normal(size=(f, 1, m, m))),
    )
    return tensors, rpn_labels, rng.normal(size=(n_anchor, 4)), det


class TestLoss:
    @pytest.mark.parametrize("seed", range(5))
    def test_total_is_sum_of_terms(self, seed):
        rng = np.random.default_rng(seed)
        (lg, dl, cl, bx, mk), labels, targets, det = random_loss_inputs(rng)
        total, br = multitask_loss(lg, dl, cl, bx, mk, labels, targets, det)
        sampled, pos = np.flatnonzero(labels >= 0), np.flatnonzero(labels == 1)
        l_cls = float(softmax_cross_entropy(rpn_class_logits(lg, sampled), labels[sampled]).data) + float(
            softmax_cross_entropy(cl, det.labels).data
        )
        l_bbox = float(smooth_l1(Tensor(dl.data[pos]), targets[pos]).data) + float(
            smooth_l1(Tensor(bx.data[det.fg_index]), det.box_deltas).data
        )
        l_mask = float(sigmoid_bce(Tensor(mk.data[:, 0]), det.mask_targets).data)
        assert br.l_cls == pytest.approx(l_cls, rel=1e-12)
        assert br.l_bbox == pytest.approx(l_bbox, rel=1e-12)
        assert br.l_mask == pytest.approx(l_mask, rel=1e-12)
        assert float(total.data) == pytest.approx(l_cls + l_bbox + l_mask, rel=1e-14, abs=1e-15)
        assert br.total == br.l_cls + br.l_bbox + br.l_mask

    def test_breakdown_total_not_settable(self):
        with pytest.raises(TypeError):
            LossBreakdown(1.0, 2.0, 3.0, total=0.0)

    def test_saturated_near_zero(self):
        n = 6
        labels = np.array([1, 0, 1, 0, 1, 0])
        lg = Tensor(np.where(labels == 1, 20.0, -20.0))
        det = DetectionTargets(np.zeros((2, 4)), np.array([1, 0]), np.array([0]), np.zeros((1, 4)),
                               np.ones((1, 4, 4)))
        total, _ = multitask_loss(lg, Tensor(np.zeros((n, 4))), Tensor([[-20.0, 20.0], [20.0, -20.0]]),
                                  Tensor(np.zeros((2, 4))), Tensor(np.full((1, 1, 4, 4), 20.0)),
                                  labels, np.zeros((n, 4)), det)
        assert float(total.data) < 1e-6

    def test_no_foreground(self, rng):
        labels = np.zeros(8, int)
        det = DetectionTargets(np.zeros((3, 4)), np.zeros(3, int), np.zeros(0, int), np.zeros((0, 4)),
                               np.zeros((0, 6, 6)))
        total, br = multitask_loss(t64(rng.normal(size=8)), t64(rng.normal(size=(8, 4))),
                                   t64(rng.normal(size=(3, 2))), t64(rng.normal(size=(3, 4))),
                                   Tensor(np.zeros((0, 1, 6, 6))), labels, np.zeros((8, 4)), det)
        assert br.l_bbox == 0.0 and br.l_mask == 0.0
        assert float(total.data) == br.l_cls


class TestTargets:
    def test_gt_rois_are_foreground(self, rng):
        _, masks, boxes = synth_case(3)
        det = sample_detection_targets(np.zeros((0, 4)) + [[0, 0, 1, 1]], boxes, masks, rng)
        assert len(det.fg_index) == len(boxes)
        np.testing.assert_allclose(det.box_deltas, 0, atol=1e-12)
        assert set(np.unique(det.mask_targets)) <= {0.0, 1.0}

    def test_fraction_cap(self, rng):
        _, masks, boxes = synth_case(4)
        props = np.repeat(boxes, 20, axis=0)
        det = sample_detection_targets(props, boxes, masks, rng, batch=16, fg_fraction=0.25)
        assert len(det.fg_index) == 4


class TestModel:
    def test_end_to_end_spot_finite_differences(self):
        image, masks, boxes = synth_case(0)
        m = MaskRCNN(SMALL, seed=0, dtype=np.float64)
        _, _, targets = m.training_losses(image, boxes, masks, np.random.default_rng(1))
        params = m.parameters()
        cr = np.random.default_rng(2)
        coords = [cr.choice(p.data.size, min(5, p.data.size), replace=False) for p in params]
        err = grad_check(lambda *ps: m.training_losses(image, boxes, masks, None, targets)[0], params,
                         eps=1e-6, coords=coords)
        assert err < 1e-3

    def test_objectness_bias_suppresses_everything(self):
        m = MaskRCNN(SMALL, seed=0)
        m.rpn.objectness.bias.data[:] = -20.0
        image, _, _ = synth_case(1)
        assert m.detect(image) == []

    def test_detect_postconditions(self):
        m = MaskRCNN(SMALL, seed=0)
        image, _, _ = synth_case(2)
        dets = m.detect(image, score_threshold=0.0, nms_iou=0.3, max_detections=7)
        assert len(dets) <= 7
        from nucleo.geometry import box_iou

        b = np.array([d.box for d in dets]).reshape(-1, 4)
        iou = box_iou(b, b) - np.eye(len(b))
        assert np.all(iou <= 0.3 + 1e-12)
        assert all(d.mask.shape == (64, 64) for d in dets)

    def test_forward_deterministic(self):
        image, masks, boxes = synth_case(5)
        runs = []
        for _ in range(2):
            m = MaskRCNN(SMALL, seed=3)
            with Tape() as tape:
                total, br, _ = m.training_losses(image, boxes, masks, np.random.default_rng(0))
            tape.backward(total)
            runs.append((br, [p.grad.copy() for p in m.parameters()]))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))

    def test_bad_anchor_strides(self):
        with pytest.raises(ValueError):
            MaskRCNN(DetectorConfig(anchor=AnchorSpec(strides=(8, 16, 32, 64))))
