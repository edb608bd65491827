# -*- coding: utf-8 -*-
"""
ボックス幾何と空間関係のテスト

Features:
- IoU・和集合・包含率の手計算ケース
- 空間関係の判定とブルートフォース判定との一致
- 正規化とエッジ存在の正解
"""

import math
import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'core'))

from sg_errors import AnnotationError
from sg_geometry import (
    Box, SpatialRelation, box_gap, containment_fraction, edge_exists, iou, normalize_box,
    spatial_relation, union_box,
)


class TestBoxOps(unittest.TestCase):
    """ボックス演算のテスト"""

    def test_iou_identical(self):
        """同一ボックスの IoU は 1"""
        b = Box(10, 10, 20, 30)
        self.assertEqual(iou(b, b), 1.0)

    def test_iou_disjoint(self):
        """離れたボックスの IoU は 0"""
        self.assertEqual(iou(Box(0, 0, 10, 10), Box(20, 20, 5, 5)), 0.0)

    def test_iou_half_overlap(self):
        """半分重なる場合 1/3"""
        self.assertAlmostEqual(iou(Box(0, 0, 10, 10), Box(5, 0, 10, 10)), 50.0 / 150.0, places=12)

    def test_touching_edges_do_not_overlap(self):
        """辺で接するだけなら IoU 0、間隔 0"""
        a, b = Box(0, 0, 10, 10), Box(10, 0, 10, 10)
        self.assertEqual(iou(a, b), 0.0)
        self.assertEqual(box_gap(a, b), 0.0)

    def test_union_box(self):
        """和集合ボックス"""
        self.assertEqual(union_box(Box(0, 0, 10, 10), Box(20, 5, 10, 20)), Box(0, 0, 30, 25))

    def test_containment_fraction(self):
        """包含率は第1引数の面積基準"""
        inner, outer = Box(2, 2, 4, 4), Box(0, 0, 10, 10)
        self.assertEqual(containment_fraction(inner, outer), 1.0)
        self.assertAlmostEqual(containment_fraction(outer, inner), 0.16, places=12)


class TestSpatialRelation(unittest.TestCase):
    """空間関係のテスト"""

    def test_side_by_side(self):
        """横に並ぶボックスは左右"""
        self.assertIs(spatial_relation(Box(0, 0, 10, 10), Box(50, 5, 10, 10)), SpatialRelation.LEFT_RIGHT)

    def test_stacked(self):
        """縦に並ぶボックスは上下"""
        self.assertIs(spatial_relation(Box(0, 0, 10, 10), Box(3, 40, 10, 10)), SpatialRelation.ABOVE_BELOW)

    def test_contained(self):
        """包含は内外（引数の順序によらない）"""
        inner, outer = Box(2, 2, 4, 4), Box(0, 0, 10, 10)
        self.assertIs(spatial_relation(inner, outer), SpatialRelation.INSIDE_OUTSIDE)
        self.assertIs(spatial_relation(outer, inner), SpatialRelation.INSIDE_OUTSIDE)

    def test_diagonal_tie_is_left_right(self):
        """|Δcx| == |Δcy| のときは左右"""
        self.assertIs(spatial_relation(Box(0, 0, 10, 10), Box(30, 30, 10, 10)), SpatialRelation.LEFT_RIGHT)

    def test_threshold_boundary(self):
        """包含率がちょうどしきい値なら内外"""
        a = Box(0, 0, 10, 10)
        b = Box(2, 0, 100, 100)  # a の 80% が b に含まれる
        self.assertAlmostEqual(containment_fraction(a, b), 0.8, places=12)
        self.assertIs(spatial_relation(a, b, inside_threshold=0.8), SpatialRelation.INSIDE_OUTSIDE)
        self.assertIsNot(spatial_relation(a, b, inside_threshold=0.81), SpatialRelation.INSIDE_OUTSIDE)

    def test_matches_brute_force_and_is_symmetric(self):
        """乱数ボックス対でブルートフォース判定と一致し、対称"""
        rng = np.random.default_rng(7)

        def brute(a: Box, b: Box) -> SpatialRelation:
            def covered(p: Box, q: Box) -> float:
                w = max(0.0, min(p.x + p.w, q.x + q.w) - max(p.x, q.x))
                h = max(0.0, min(p.y + p.h, q.y + q.h) - max(p.y, q.y))
                return w * h / (p.w * p.h)
            if covered(a, b) >= 0.8 or covered(b, a) >= 0.8:
                return SpatialRelation.INSIDE_OUTSIDE
            dx = abs((a.x + a.w / 2) - (b.x + b.w / 2))
            dy = abs((a.y + a.h / 2) - (b.y + b.h / 2))
            return SpatialRelation.LEFT_RIGHT if dx >= dy else SpatialRelation.ABOVE_BELOW

        for _ in range(1000):
            x, y = rng.integers(0, 100, size=2), rng.integers(0, 100, size=2)
            w, h = rng.integers(1, 60, size=2), rng.integers(1, 60, size=2)
            a = Box(float(x[0]), float(y[0]), float(w[0]), float(h[0]))
            b = Box(float(x[1]), float(y[1]), float(w[1]), float(h[1]))
            self.assertIs(spatial_relation(a, b), brute(a, b))
            self.assertIs(spatial_relation(a, b), spatial_relation(b, a))


class TestNormalization(unittest.TestCase):
    """正規化とエッジ存在のテスト"""

    def test_normalize_box(self):
        """(cx, cy, w, h) をフレームサイズで割る"""
        cx, cy, w, h = normalize_box(Box(0, 0, 100, 50), 200, 100)
        self.assertEqual((cx, cy, w, h), (0.25, 0.25, 0.5, 0.5))

    def test_normalize_rejects_out_of_bounds(self):
        """フレーム外のボックスはエラー"""
        with self.assertRaises(AnnotationError) as ctx:
            normalize_box(Box(190, 0, 20, 10), 200, 100)
        self.assertEqual(ctx.exception.rule, "bbox-bounds")

    def test_normalize_rejects_bad_frame(self):
        """幅0のフレームはエラー"""
        with self.assertRaises(AnnotationError) as ctx:
            normalize_box(Box(0, 0, 1, 1), 0, 100)
        self.assertEqual(ctx.exception.rule, "frame-size")

    def test_edge_exists_by_proximity(self):
        """重なりまたは対角線の proximity 倍以内の間隔"""
        W, H = 300.0, 400.0  # 対角線 500
        a = Box(0, 0, 10, 10)
        self.assertTrue(edge_exists(a, Box(5, 5, 10, 10), W, H))
        self.assertTrue(edge_exists(a, Box(60, 0, 10, 10), W, H))  # 間隔 50 = 0.1 × 500
        self.assertFalse(edge_exists(a, Box(61, 0, 10, 10), W, H))
        self.assertAlmostEqual(box_gap(a, Box(13, 14, 5, 5)), math.hypot(3, 4), places=12)


if __name__ == "__main__":
    unittest.main()
