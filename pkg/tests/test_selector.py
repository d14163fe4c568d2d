import numpy as np
import pytest

from keyfrag.numerics import Rng
from keyfrag.selector import (Fragment, SelectConfig, expand_fragment,
                              fragment_indices, fragment_interval, select)


class TestExpandFragment:
    def test_hand_example(self):
        f = expand_fragment(center=20, score=0.5, l_max=8, r_max=8, T=100)
        assert (f.left, f.center, f.right) == (16, 20, 24)

    def test_zero_score_single_point(self):
        f = expand_fragment(center=7, score=0.0, l_max=8, r_max=8, T=50)
        assert (f.left, f.right) == (7, 7)

    def test_left_clamp(self):
        f = expand_fragment(center=2, score=1.0, l_max=8, r_max=0, T=50)
        assert f.left == 1

    def test_right_clamp(self):
        f = expand_fragment(center=49, score=1.0, l_max=0, r_max=8, T=50)
        assert f.right == 50

    def test_ceiling_and_floor(self):
        # 10 - 0.3*8 = 7.6 -> ceil 8; 10 + 0.3*8 = 12.4 -> floor 12
        f = expand_fragment(center=10, score=0.3, l_max=8, r_max=8, T=100)
        assert (f.left, f.right) == (8, 12)

    def test_center_out_of_range(self):
        with pytest.raises(ValueError):
            expand_fragment(center=0, score=0.5, l_max=1, r_max=1, T=10)


class TestSelect:
    def test_top2_no_nms(self):
        frags = select(np.array([0.9, 0.1, 0.8]), SelectConfig(k=2, l_max=0, r_max=0, nms=False))
        assert [f.center for f in frags] == [1, 3]

    def test_tie_break_earlier_index(self):
        frags = select(np.full(5, 0.4), SelectConfig(k=1, l_max=0, r_max=0))
        assert frags[0].center == 1

    def test_matches_brute_force_topk(self):
        rng = Rng(0)
        cfg = SelectConfig(k=5, l_max=3, r_max=3, nms=False)
        for _ in range(200):
            T = int(rng.integers(5, 40))
            scores = rng.uniform(size=T)
            got = sorted(f.center for f in select(scores, cfg))
            want = sorted(int(i) + 1 for i in np.argsort(-scores, kind="stable")[:5])
            assert got == want

    def test_nms_spacing(self):
        rng = Rng(1)
        cfg = SelectConfig(k=10, l_max=4, r_max=6, nms=True)
        for _ in range(50):
            scores = rng.uniform(size=60)
            centers = [f.center for f in select(scores, cfg)]
            for i, a in enumerate(centers):
                for b in centers[i + 1:]:
                    assert abs(a - b) > 6

    def test_count_exact_without_nms(self):
        scores = Rng(2).uniform(size=30)
        assert len(select(scores, SelectConfig(k=10, nms=False))) == 10

    def test_pure_function(self):
        scores = Rng(3).uniform(size=25)
        cfg = SelectConfig(k=4)
        a = select(scores, cfg)
        b = select(scores, cfg)
        assert a == b

    def test_output_sorted_by_center_with_valid_bounds(self):
        scores = Rng(4).uniform(size=40)
        frags = select(scores, SelectConfig(k=6, l_max=8, r_max=8))
        centers = [f.center for f in frags]
        assert centers == sorted(centers)
        for f in frags:
            assert 1 <= f.left <= f.center <= f.right <= 40
            assert 0.0 < f.score < 1.0


class TestFragmentHelpers:
    def test_interval_conversion(self):
        f = Fragment(trial_id="t", center=5, left=3, right=8, score=0.5)
        assert fragment_interval(f) == (2, 8)

    def test_indices_union_deduplicates(self):
        frags = [Fragment("t", 4, 2, 6, 0.5), Fragment("t", 6, 5, 9, 0.5)]
        idx = fragment_indices(frags, T=12)
        assert idx.tolist() == [1, 2, 3, 4, 5, 6, 7, 8]

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            Fragment(trial_id="t", center=2, left=3, right=4, score=0.1)
