"""Matrix and plain mask NMS, and the two-stage track/static rule."""

import math

import numpy as np
import pytest

from rovis.nms import Proposal, mask_iou_matrix, matrix_nms, nms_two_stage, plain_nms, suppress
from rovis.rng import Rng


def band(start: int, stop: int, width: int = 20) -> np.ndarray:
    mask = np.zeros((1, width), dtype=bool)
    mask[0, start:stop] = True
    return mask


class TestMatrixNMS:
    def test_identical_masks_decay_second(self):
        masks = np.stack([band(0, 10), band(0, 10)])
        out = matrix_nms(masks, [0.9, 0.8], [0, 0], sigma=2.0)
        assert out[0] == pytest.approx(0.9)
        assert out[1] == pytest.approx(0.8 * math.exp(-0.5))
        assert out[1] == pytest.approx(0.4852, abs=1e-4)

    def test_disjoint_masks_unchanged(self):
        masks = np.stack([band(0, 5), band(5, 10), band(10, 15)])
        np.testing.assert_allclose(matrix_nms(masks, [0.3, 0.9, 0.6], [0, 0, 0]), [0.3, 0.9, 0.6])

    def test_categories_do_not_interact(self):
        masks = np.stack([band(0, 10), band(0, 10)])
        np.testing.assert_allclose(matrix_nms(masks, [0.9, 0.8], [0, 1]), [0.9, 0.8])

    def test_output_in_input_order(self):
        masks = np.stack([band(0, 10), band(0, 10)])
        out = matrix_nms(masks, [0.8, 0.9], [0, 0])
        assert out[1] == pytest.approx(0.9)
        assert out[0] == pytest.approx(0.8 * math.exp(-0.5))

    def test_scores_never_increase(self):
        rng = Rng(20)
        for _ in range(20):
            masks = rng.random((6, 8, 8)) < 0.4
            scores = rng.random(6)
            assert np.all(matrix_nms(masks, scores, [0] * 6) <= scores + 1e-12)

    def test_empty_input(self):
        assert matrix_nms(np.zeros((0, 4, 4), dtype=bool), [], []).shape == (0,)


class TestPlainNMS:
    def test_single_mask_kept(self):
        assert plain_nms(np.stack([band(0, 4)]), [0.3]) == [0]

    def test_identical_masks_keep_higher(self):
        assert plain_nms(np.stack([band(0, 4), band(0, 4)]), [0.4, 0.7]) == [1]

    def test_chain_keeps_ends(self):
        masks = np.stack([band(0, 10), band(2, 12), band(4, 14)])
        iou = mask_iou_matrix(masks)
        assert iou[0, 1] == pytest.approx(2 / 3)
        assert iou[1, 2] == pytest.approx(2 / 3)
        assert iou[0, 2] < 0.6
        assert sorted(plain_nms(masks, [0.9, 0.8, 0.7], iou_threshold=0.6)) == [0, 2]

    def test_priority_breaks_score_ties(self):
        masks = np.stack([band(0, 4), band(0, 4)])
        assert plain_nms(masks, [0.5, 0.5], priority=[1, 0]) == [1]


def prop(origin, key, mask, score, category=0):
    return Proposal(origin, key, mask, score, category)


class TestTwoStage:
    def test_no_tracks_equals_single_stage(self):
        statics = [prop("static", 0, band(0, 10), 0.9), prop("static", 1, band(1, 10), 0.8), prop("static", 2, band(12, 18), 0.7)]
        for mode in ("matrix", "plain"):
            two = nms_two_stage([], statics, mode=mode)
            one = suppress(statics, mode, 2.0, 0.6, 0.5)
            assert [(p.key, p.score) for p in two] == [(p.key, p.score) for p in one]

    def test_track_duplicates_resolved_before_statics(self):
        s = prop("static", 0, band(0, 10), 0.95)
        t1 = prop("track", 0, band(2, 12), 0.9)
        t2 = prop("track", 1, band(4, 14), 0.8)
        staged = nms_two_stage([t1, t2], [s], mode="plain")
        assert [(p.origin, p.key) for p in staged] == [("static", 0)]
        single = suppress([t1, t2, s], "plain", 2.0, 0.6, 0.5)
        assert sorted((p.origin, p.key) for p in single) == [("static", 0), ("track", 1)]

    def test_higher_static_beats_identical_track(self):
        track = prop("track", 0, band(0, 10), 0.69)
        static = prop("static", 3, band(0, 10), 0.70)
        for mode in ("matrix", "plain"):
            survivors = nms_two_stage([track], [static], mode=mode)
            assert [(p.origin, p.key) for p in survivors] == [("static", 3)]

    def test_track_wins_equal_score(self):
        track = prop("track", 0, band(0, 10), 0.7)
        static = prop("static", 3, band(0, 10), 0.7)
        survivors = nms_two_stage([track], [static], mode="plain")
        assert [(p.origin, p.key) for p in survivors] == [("track", 0)]

    def test_none_mode_keeps_everything(self):
        props = [prop("static", i, band(0, 10), 0.9) for i in range(3)]
        assert len(nms_two_stage([], props, mode="none")) == 3

    def test_category_agnostic_suppresses_across_categories(self):
        a = prop("static", 0, band(0, 10), 0.7, category=0)
        b = prop("static", 1, band(0, 10), 0.6, category=1)
        assert len(suppress([a, b], "matrix", 2.0, 0.6, 0.5)) == 2
        assert len(suppress([a, b], "matrix", 2.0, 0.6, 0.5, category_agnostic=True)) == 1

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="nms mode"):
            suppress([prop("static", 0, band(0, 2), 0.9)] * 2, "soft", 2.0, 0.6, 0.5)


class TestScoreThreshold:
    def test_low_scoring_track_dropped_without_overlap(self):
        strong = prop("track", 0, band(0, 6), 0.9)
        weak = prop("track", 1, band(10, 16), 0.45)
        survivors = nms_two_stage([strong, weak], [], mode="matrix")
        assert [(p.key, p.score) for p in survivors] == [(0, 0.9)]

    def test_lone_low_scoring_proposal_dropped(self):
        assert nms_two_stage([prop("track", 0, band(0, 6), 0.45)], [], mode="matrix") == []

    def test_slight_overlap_does_not_change_the_outcome(self):
        strong = prop("track", 0, band(0, 6), 0.9)
        for score, expected in ((0.45, [0]), (0.55, [0, 1])):
            apart = nms_two_stage([strong, prop("track", 1, band(10, 16), score)], [], mode="matrix")
            touching = nms_two_stage([strong, prop("track", 1, band(5, 11), score)], [], mode="matrix")
            assert [p.key for p in apart] == expected
            assert [p.key for p in touching] == expected

    def test_plain_mode_keeps_low_scores(self):
        weak = prop("track", 0, band(0, 6), 0.3)
        assert [p.key for p in nms_two_stage([weak], [], mode="plain")] == [0]
