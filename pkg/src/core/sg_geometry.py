# -*- coding: utf-8 -*-
"""
軸平行バウンディングボックスの幾何演算と空間関係述語

ボックスは (x, y, w, h) 形式（左上座標 + 幅・高さ、ピクセル単位）。
空間関係は左右・上下・内外の3値。
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

from sg_errors import AnnotationError

# 内外関係と判定する包含率の既定しきい値
INSIDE_THRESHOLD = 0.8


@dataclass(frozen=True)
class Box:
    """バウンディングボックス"""
    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0

    def within(self, frame_w: float, frame_h: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= frame_w and self.y2 <= frame_h

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]


class SpatialRelation(Enum):
    """空間関係（対称な3クラス）"""
    LEFT_RIGHT = "LeftRight"
    ABOVE_BELOW = "AboveBelow"
    INSIDE_OUTSIDE = "InsideOutside"

    @property
    def index(self) -> int:
        return SPATIAL_RELATIONS.index(self)


SPATIAL_RELATIONS = (SpatialRelation.LEFT_RIGHT, SpatialRelation.ABOVE_BELOW,
                     SpatialRelation.INSIDE_OUTSIDE)


def _intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over Union"""
    inter = _intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def union_box(a: Box, b: Box) -> Box:
    """両方を含む最小のボックス"""
    x1 = min(a.x, b.x)
    y1 = min(a.y, b.y)
    x2 = max(a.x2, b.x2)
    y2 = max(a.y2, b.y2)
    return Box(x1, y1, x2 - x1, y2 - y1)


def containment_fraction(a: Box, b: Box) -> float:
    """a の面積のうち b に含まれる割合"""
    return _intersection_area(a, b) / a.area


def spatial_relation(a: Box, b: Box, inside_threshold: float = INSIDE_THRESHOLD) -> SpatialRelation:
    """
    空間関係の判定

    どちらかの包含率がしきい値以上なら内外、そうでなければ中心差の大きい軸で
    左右 / 上下を決める。|Δcx| == |Δcy| のときは左右。
    """
    if (containment_fraction(a, b) >= inside_threshold
            or containment_fraction(b, a) >= inside_threshold):
        return SpatialRelation.INSIDE_OUTSIDE

    (acx, acy), (bcx, bcy) = a.center, b.center
    if abs(acx - bcx) >= abs(acy - bcy):
        return SpatialRelation.LEFT_RIGHT
    return SpatialRelation.ABOVE_BELOW


def normalize_box(b: Box, frame_w: float, frame_h: float) -> Tuple[float, float, float, float]:
    """フレームサイズで正規化した (cx, cy, w, h)"""
    if frame_w <= 0 or frame_h <= 0:
        raise AnnotationError(f"フレームサイズが不正です: {frame_w}x{frame_h}", rule="frame-size")
    if not b.within(frame_w, frame_h):
        raise AnnotationError(f"ボックスがフレーム外です: {b.as_list()} in {frame_w}x{frame_h}",
                              rule="bbox-bounds")
    cx, cy = b.center
    return cx / frame_w, cy / frame_h, b.w / frame_w, b.h / frame_h


def box_gap(a: Box, b: Box) -> float:
    """ボックス間の最短距離（接触・重なりは0）"""
    dx = max(0.0, max(a.x, b.x) - min(a.x2, b.x2))
    dy = max(0.0, max(a.y, b.y) - min(a.y2, b.y2))
    return math.hypot(dx, dy)


def edge_exists(a: Box, b: Box, frame_w: float, frame_h: float, proximity: float = 0.1) -> bool:
    """エッジ存在の正解: 重なるか、間隔がフレーム対角線の proximity 倍以内"""
    return box_gap(a, b) <= proximity * math.hypot(frame_w, frame_h)
