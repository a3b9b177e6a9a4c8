import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgdet.config import AugmentConfig, SceneGenConfig
from lgdet.data import Box3D, augment, downsample, gen_synthetic_scene
from lgdet.metrics import average_precision, evaluate, iou3d
from lgdet.pointops import sq_dist


def cube(x=0.0, y=0.0, z=0.0, s=1.0, cls=0, score=None):
    return Box3D([x, y, z], [s, s, s], 0.0, cls, score)


boxes = st.builds(lambda c, s: Box3D(c, s), st.lists(st.floats(-3, 3), min_size=3, max_size=3),
                  st.lists(st.floats(0.05, 3), min_size=3, max_size=3))


class TestIoU:
    def test_identical(self):
        assert iou3d(cube(), cube()) == 1.0

    def test_disjoint(self):
        assert iou3d(cube(), cube(x=2.0)) == 0.0

    def test_offset_unit_cubes_is_one_third(self):
        assert iou3d(cube(), cube(x=0.5)) == 1 / 3

    def test_nested(self):
        outer = Box3D([0, 0, 0], [2, 2, 2])
        inner = Box3D([0.25, 0, 0], [1, 0.5, 1])
        assert iou3d(outer, inner) == 0.5 / 8

    @settings(max_examples=200, deadline=None)
    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = iou3d(a, b)
        assert v == iou3d(b, a) and 0.0 <= v <= 1.0

    def test_rotated_rejected(self):
        with pytest.raises(ValueError):
            iou3d(Box3D([0, 0, 0], [1, 1, 1], 0.3), cube())


def hand_case():
    gts = {"s": [cube(0, 0, 0), cube(5, 0, 0)]}
    dets = {"s": [cube(0, 0, 0, score=0.9), cube(9, 9, 9, score=0.8), cube(5, 0, 0, score=0.7)]}
    return dets, gts


class TestAP:
    def test_single_hit(self):
        r = evaluate({"s": [cube(score=0.5)]}, {"s": [cube()]})
        assert r.map25 == 1.0 and r.map50 == 1.0

    def test_single_miss(self):
        r = evaluate({"s": [cube(x=3, score=0.5)]}, {"s": [cube()]})
        assert r.map25 == 0.0

    def test_hand_case_is_five_sixths(self):
        assert evaluate(*hand_case()).map25 == 5 / 6

    def test_pr_envelope_oracle(self):
        # hits at ranks 1 and 3 of 3 with 2 GT: P = 1, 1/2, 2/3 ; R = 1/2, 1/2, 1
        ap, rec, prec = average_precision([True, False, True], 2)
        assert ap == float(Fraction(1, 2) + Fraction(2, 3) * Fraction(1, 2))
        assert rec == [0.5, 0.5, 1.0] and prec == [1.0, 0.5, 2 / 3]

    def test_duplicates_count_once_and_lower_map(self):
        dets, gts = hand_case()
        prev = evaluate(dets, gts).map25
        for k in range(1, 4):
            extra = [cube(0, 0, 0, score=0.75 - 0.01 * j) for j in range(k)]
            r = evaluate({"s": dets["s"] + extra}, gts)
            assert r.map25 < prev
            prev = r.map25

    def test_scene_order_invariance(self):
        rng = np.random.default_rng(0)
        gts, dets = {}, {}
        for s in range(5):
            gts[f"s{s}"] = [cube(*rng.random(3) * 4, cls=int(rng.integers(2))) for _ in range(3)]
            dets[f"s{s}"] = [cube(*rng.random(3) * 4, cls=int(rng.integers(2)), score=float(rng.integers(0, 4) / 4))
                             for _ in range(6)]
        ref = evaluate(dets, gts).ap
        for order in itertools.islice(itertools.permutations(sorted(gts)), 10):
            assert evaluate({k: dets[k] for k in order}, {k: gts[k] for k in order}).ap == ref

    def test_class_without_detections(self):
        r = evaluate({"s": [cube(score=0.5)]}, {"s": [cube(), cube(x=3, cls=1)]})
        assert r.ap[0.25] == {0: 1.0, 1: 0.0} and r.map25 == 0.5

    def test_ap_needs_gt(self):
        with pytest.raises(ValueError):
            average_precision([True], 0)


class TestGeneration:
    def test_deterministic(self):
        a, b = gen_synthetic_scene(7), gen_synthetic_scene(7)
        assert np.array_equal(a.cloud.coords, b.cloud.coords)
        assert np.array_equal(a.cloud.features, b.cloud.features)
        assert [x.to_dict() for x in a.gt_boxes] == [x.to_dict() for x in b.gt_boxes]

    def test_zero_objects(self):
        s = gen_synthetic_scene(3, SceneGenConfig(min_objects=0, max_objects=0))
        assert s.gt_boxes == [] and len(s.cloud) == 2048

    def test_boxes_hold_points_and_do_not_overlap(self):
        for seed in range(100):
            s = gen_synthetic_scene(seed)
            assert len(s.cloud) == 2048
            for i, b in enumerate(s.gt_boxes):
                assert int(b.contains(s.cloud.coords).sum()) >= 50
                assert 0 <= b.class_id < 3
                for other in s.gt_boxes[:i]:
                    assert iou3d(b, other) == 0.0

    def test_class_shapes(self):
        sizes = {0: [], 1: [], 2: []}
        for seed in range(60):
            for b in gen_synthetic_scene(seed).gt_boxes:
                sizes[b.class_id].append(b.size)
        slab, tall = np.array(sizes[1]), np.array(sizes[2])
        assert (slab[:, 2] < slab[:, :2].min(axis=1)).all()
        assert (tall[:, 2] > tall[:, :2].max(axis=1)).all()


class TestAugment:
    scene = gen_synthetic_scene(11)

    def test_identity_draw(self):
        out = augment(self.scene, params=(False, 0.0, 1.0))
        assert np.array_equal(out.cloud.coords, self.scene.cloud.coords)
        assert [b.to_dict() for b in out.gt_boxes] == [b.to_dict() for b in self.scene.gt_boxes]

    def test_double_flip(self):
        twice = augment(augment(self.scene, params=(True, 0.0, 1.0)), params=(True, 0.0, 1.0))
        assert np.array_equal(twice.cloud.coords, self.scene.cloud.coords)
        for a, b in zip(twice.gt_boxes, self.scene.gt_boxes):
            assert np.array_equal(a.center, b.center) and np.array_equal(a.size, b.size)

    def test_scale_multiplies_distances(self):
        s = 1.1
        out = augment(self.scene, params=(False, 0.0, s))
        idx = np.random.default_rng(0).choice(2048, 200, replace=False)
        d0 = np.sqrt(sq_dist(self.scene.cloud.coords[idx], self.scene.cloud.coords[idx]))
        d1 = np.sqrt(sq_dist(out.cloud.coords[idx], out.cloud.coords[idx]))
        assert np.abs(d1 - s * d0).max() < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_membership_preserved(self, seed):
        rng = np.random.default_rng(seed)
        out = augment(self.scene, rng, AugmentConfig())
        for a, b in zip(self.scene.gt_boxes, out.gt_boxes):
            inside = a.contains(self.scene.cloud.coords)
            assert b.contains(out.cloud.coords[inside]).all()

    def test_draw_ranges(self):
        rng = np.random.default_rng(1)
        from lgdet.data import augment_params
        draws = [augment_params(rng, AugmentConfig()) for _ in range(500)]
        thetas = np.degrees([t for _, t, _ in draws])
        scales = [s for _, _, s in draws]
        assert np.abs(thetas).max() <= 18 and 0.85 <= min(scales) and max(scales) <= 1.15
        assert 0.4 < np.mean([f for f, _, _ in draws]) < 0.6


def test_downsample_without_and_with_replacement():
    s = gen_synthetic_scene(2)
    assert len({tuple(r) for r in s.cloud.coords}) == 2048
    small = downsample(s, 500, np.random.default_rng(0))
    assert len({tuple(r) for r in small.cloud.coords}) == 500
    assert len(downsample(s, 3000, np.random.default_rng(0)).cloud) == 3000
