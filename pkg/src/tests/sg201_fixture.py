# -*- coding: utf-8 -*-
"""
テスト用フィクスチャ

Features:
- SG201 の分割サイズ・カテゴリ別出現数を再現するデータセット
- 小さな手作りフレーム（1工具 + 1解剖構造など）
"""

import os
import sys
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'core'))

from sg_geometry import Box
from sg_schema import (
    SPLITS, ClassCatalog, Dataset, FrameAnnotation, ObjectAnn, ObjectKind, TripletAnn,
)

SG201_CATALOG = ClassCatalog(
    tools=("Hook", "Grasper", "Clipper", "Bipolar", "Irrigator", "Scissors"),
    anatomies=("CysticPlate", "CalotTriangle", "CysticArtery", "CysticDuct", "Gallbladder"),
    actions=("Dissect", "Retract", "Grasp", "Clip", "Coagulate", "Null_verb"),
    hands=("Rt", "Lt", "Assi"),
)

SPLIT_SIZES = {"train": 1212, "val": 409, "test": 312}

# カタログ順の出現数
TOOL_COUNTS = {
    "train": [686, 997, 128, 95, 41, 3],
    "val": [202, 347, 48, 36, 11, 0],
    "test": [172, 254, 43, 11, 17, 1],
}
ACTION_COUNTS = {
    "train": [601, 879, 72, 122, 41, 233],
    "val": [168, 308, 12, 44, 14, 98],
    "test": [147, 242, 11, 41, 5, 52],
}
HAND_COUNTS = {
    "train": [986, 842, 122],
    "val": [311, 268, 65],
    "test": [246, 218, 34],
}
TOOL_TOTALS = [1060, 1598, 219, 142, 69, 4]
ACTION_TOTALS = [916, 1429, 95, 207, 60, 383]
HAND_TOTALS = [1543, 1328, 221]

# (工具, 行為) ごとの対象解剖構造の種類数（対象は 0..m-1 を巡回）
TARGETS_PER_PAIR = {
    ("Hook", "Dissect"): 5,
    ("Hook", "Retract"): 5,
    ("Grasper", "Retract"): 5,
    ("Grasper", "Grasp"): 3,
    ("Grasper", "Clip"): 3,
    ("Grasper", "Coagulate"): 3,
    ("Clipper", "Coagulate"): 3,
    ("Clipper", "Clip"): 2,
}

FRAME_W, FRAME_H = 854.0, 480.0


def _expand(counts: Sequence[int], names: Sequence[str]) -> List[str]:
    return [name for name, n in zip(names, counts) for _ in range(n)]


def _anatomy_objects() -> List[ObjectAnn]:
    return [
        ObjectAnn(f"a{k}", ObjectKind.ANATOMY, k, Box(20.0 + 160.0 * k, 300.0, 140.0, 120.0))
        for k in range(len(SG201_CATALOG.anatomies))
    ]


def build_sg201_dataset() -> Dataset:
    """SG201 の表と同じ出現数を持つデータセット（対応するトリプレットは34種類）"""
    cat = SG201_CATALOG
    counters: Dict[Tuple[str, str], int] = defaultdict(int)
    frames: List[FrameAnnotation] = []
    splits: Dict[str, Tuple[str, ...]] = {}

    for split in SPLITS:
        n_frames = SPLIT_SIZES[split]
        tools = _expand(TOOL_COUNTS[split], cat.tools)
        hands = _expand(HAND_COUNTS[split], cat.hands)
        actions: List[Optional[str]] = _expand(ACTION_COUNTS[split], cat.actions)
        actions += [None] * (len(tools) - len(actions))

        per_frame: List[List[Tuple[ObjectAnn, Optional[TripletAnn]]]] = [[] for _ in range(n_frames)]
        for i, (tool, hand, action) in enumerate(zip(tools, hands, actions)):
            slot = per_frame[i % n_frames]
            obj_id = f"t{len(slot)}"
            box = Box(10.0 + 60.0 * len(slot), 20.0, 50.0, 60.0)
            obj = ObjectAnn(obj_id, ObjectKind.TOOL, cat.tools.index(tool), box, cat.hands.index(hand))
            trip = None
            if action is not None:
                m = TARGETS_PER_PAIR.get((tool, action))
                if m is None:
                    trip = TripletAnn(obj_id, cat.actions.index(action), None)
                else:
                    target = counters[(tool, action)] % m
                    counters[(tool, action)] += 1
                    trip = TripletAnn(obj_id, cat.actions.index(action), f"a{target}")
            slot.append((obj, trip))

        ids = []
        for k in range(n_frames):
            fid = f"{split}_{k:05d}"
            objects = [o for o, _ in per_frame[k]] + _anatomy_objects()
            triplets = [t for _, t in per_frame[k] if t is not None]
            frames.append(FrameAnnotation(fid, f"video_{split}", FRAME_W, FRAME_H,
                                          tuple(objects), tuple(triplets)))
            ids.append(fid)
        splits[split] = tuple(ids)

    return Dataset(catalog=cat, frames=tuple(frames), splits=splits)


def tool_anatomy_frame(frame_id: str = "f0001", action: str = "Dissect", hand: str = "Rt",
                       cvs: Optional[Tuple[bool, bool, bool]] = None) -> FrameAnnotation:
    """1工具 + 1解剖構造 + 1トリプレットのフレーム"""
    cat = SG201_CATALOG
    tool = ObjectAnn("t0", ObjectKind.TOOL, 0, Box(500.0, 100.0, 80.0, 60.0), cat.hands.index(hand))
    anatomy = ObjectAnn("a0", ObjectKind.ANATOMY, 1, Box(400.0, 150.0, 200.0, 150.0))
    index = cat.actions.index(action)
    target = None if index == cat.null_action_index else "a0"
    return FrameAnnotation(frame_id, "video01", FRAME_W, FRAME_H, (tool, anatomy),
                           (TripletAnn("t0", index, target),), cvs)


def two_tool_frame(frame_id: str = "f0002") -> FrameAnnotation:
    """2工具 + 3解剖構造（行為と手がすべて異なる）"""
    cat = SG201_CATALOG
    objects = (
        ObjectAnn("t0", ObjectKind.TOOL, 0, Box(60.0, 40.0, 90.0, 70.0), cat.hands.index("Lt")),
        ObjectAnn("t1", ObjectKind.TOOL, 2, Box(650.0, 60.0, 80.0, 90.0), cat.hands.index("Rt")),
        ObjectAnn("a0", ObjectKind.ANATOMY, 1, Box(100.0, 120.0, 200.0, 150.0)),
        ObjectAnn("a1", ObjectKind.ANATOMY, 3, Box(560.0, 200.0, 160.0, 120.0)),
        ObjectAnn("a2", ObjectKind.ANATOMY, 4, Box(300.0, 300.0, 250.0, 170.0)),
    )
    triplets = (
        TripletAnn("t0", cat.actions.index("Dissect"), "a0"),
        TripletAnn("t0", cat.actions.index("Retract"), "a2"),
        TripletAnn("t1", cat.actions.index("Clip"), "a1"),
    )
    return FrameAnnotation(frame_id, "video01", FRAME_W, FRAME_H, objects, triplets)


def single_frame_dataset(frames: Sequence[FrameAnnotation], split: str = "train") -> Dataset:
    splits = {s: () for s in SPLITS}
    splits[split] = tuple(f.frame_id for f in frames)
    return Dataset(catalog=SG201_CATALOG, frames=tuple(frames), splits=splits)
