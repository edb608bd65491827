# -*- coding: utf-8 -*-
"""
既知の潜在構造を持つ合成シーン生成

Features:
- フレームごとの派生シードによる決定的生成
- ルール表: 行為 = f(工具クラス, 最近傍の解剖構造)、手 = f(工具の水平位置)、
  CVS = f(存在するクラスと行為)
- ノイズ率 σ による手・行為・CVS の置換
- σ=0 のラベルを幾何から再計算するオラクル
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from sg_errors import ConfigError
from sg_geometry import Box
from sg_schema import (
    SPLITS, ClassCatalog, Dataset, FrameAnnotation, ObjectAnn, ObjectKind, TripletAnn,
)

logger = logging.getLogger(__name__)

SYNTH_CATALOG = ClassCatalog(
    tools=("Hook", "Grasper", "Clipper", "Bipolar", "Irrigator", "Scissors"),
    anatomies=("CysticPlate", "CalotTriangle", "CysticArtery", "CysticDuct", "Gallbladder"),
    actions=("Dissect", "Retract", "Grasp", "Clip", "Coagulate", "Null_verb"),
    hands=("Rt", "Lt", "Assi"),
)

# 工具ごとの (既定の行為, {最近傍の解剖構造: 行為})
DEFAULT_ACTION_RULES: Dict[str, Tuple[str, Dict[str, str]]] = {
    "Hook": ("Dissect", {"Gallbladder": "Retract"}),
    "Grasper": ("Grasp", {"Gallbladder": "Retract"}),
    "Clipper": ("Null_verb", {"CysticDuct": "Clip", "CysticArtery": "Clip"}),
    "Bipolar": ("Coagulate", {}),
    "Irrigator": ("Null_verb", {}),
    "Scissors": ("Null_verb", {"CysticDuct": "Dissect", "CysticArtery": "Dissect"}),
}

# 水平位置の3分割: 左 → Lt, 中央 → Assi, 右 → Rt
HAND_ZONES = ("Lt", "Assi", "Rt")


@dataclass
class SynthConfig:
    """合成データ設定"""
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    tools_range: Tuple[int, int] = (1, 3)
    anatomies_range: Tuple[int, int] = (2, 5)
    noise: float = 0.0
    seed: int = 0
    width: float = 854.0
    height: float = 480.0
    action_rules: Dict[str, Tuple[str, Dict[str, str]]] = field(
        default_factory=lambda: dict(DEFAULT_ACTION_RULES))

    @property
    def split_sizes(self) -> Dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def validate(self, catalog: ClassCatalog = SYNTH_CATALOG) -> None:
        t_lo, t_hi = self.tools_range
        a_lo, a_hi = self.anatomies_range
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("フレーム数は 0 以上が必要です")
        if not 0 <= t_lo <= t_hi:
            raise ConfigError(f"tools_range が不正です: {self.tools_range}")
        if not 0 <= a_lo <= a_hi <= len(catalog.anatomies):
            raise ConfigError(f"anatomies_range が不正です: {self.anatomies_range}")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise は [0, 1] の範囲: {self.noise}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"フレームサイズが不正です: {self.width}x{self.height}")
        missing = [t for t in catalog.tools if t not in self.action_rules]
        if missing:
            raise ConfigError(f"ルール表に工具がありません: {missing}")
        for tool, (default, by_anatomy) in self.action_rules.items():
            for anatomy, action in [("*", default)] + list(by_anatomy.items()):
                if action not in catalog.actions:
                    raise ConfigError(f"ルール {tool}/{anatomy} の行為 '{action}' がカタログにありません")
                if anatomy != "*" and anatomy not in catalog.anatomies:
                    raise ConfigError(f"ルール {tool} の解剖構造 '{anatomy}' がカタログにありません")


@dataclass(frozen=True)
class OracleLabels:
    triplets: Tuple[TripletAnn, ...]
    hands: Dict[str, int]
    cvs: Tuple[bool, bool, bool]


def hand_for_position(box: Box, frame_w: float, catalog: ClassCatalog = SYNTH_CATALOG) -> int:
    cx, _ = box.center
    zone = min(int(3 * cx / frame_w), 2)
    return catalog.hands.index(HAND_ZONES[zone])


def nearest_anatomy(tool: ObjectAnn, anatomies: List[ObjectAnn]) -> Optional[ObjectAnn]:
    """中心間距離が最小の解剖構造（同距離はアノテーション順で先のもの）"""
    if not anatomies:
        return None
    tx, ty = tool.bbox.center
    dists = [np.hypot(a.bbox.center[0] - tx, a.bbox.center[1] - ty) for a in anatomies]
    return anatomies[int(np.argmin(dists))]


def rule_action(tool_class: str, anatomy_class: Optional[str],
                rules: Dict[str, Tuple[str, Dict[str, str]]]) -> str:
    default, by_anatomy = rules[tool_class]
    if anatomy_class is None:
        return default
    return by_anatomy.get(anatomy_class, default)


def cvs_from_labels(frame_objects: List[ObjectAnn], triplets: List[TripletAnn],
                    catalog: ClassCatalog = SYNTH_CATALOG) -> Tuple[bool, bool, bool]:
    """C1 = 胆嚢管 ∧ 胆嚢動脈, C2 = Calot三角の剥離, C3 = 胆嚢板 ∧ 胆嚢の牽引"""
    present = {catalog.anatomies[o.class_index] for o in frame_objects if not o.is_tool}
    by_id = {o.id: o for o in frame_objects}

    def acted(action: str, anatomy: str) -> bool:
        for t in triplets:
            if t.target_obj is None or catalog.actions[t.action_index] != action:
                continue
            if catalog.anatomies[by_id[t.target_obj].class_index] == anatomy:
                return True
        return False

    c1 = "CysticDuct" in present and "CysticArtery" in present
    c2 = acted("Dissect", "CalotTriangle")
    c3 = "CysticPlate" in present and acted("Retract", "Gallbladder")
    return c1, c2, c3


def _triplet_for(tool: ObjectAnn, action: str, target: Optional[ObjectAnn],
                 catalog: ClassCatalog) -> TripletAnn:
    index = catalog.actions.index(action)
    if index == catalog.null_action_index or target is None:
        return TripletAnn(tool.id, catalog.null_action_index, None)
    return TripletAnn(tool.id, index, target.id)


def label_oracle(frame: FrameAnnotation, catalog: ClassCatalog = SYNTH_CATALOG,
                 rules: Optional[Dict[str, Tuple[str, Dict[str, str]]]] = None) -> OracleLabels:
    """幾何からラベルを再計算（σ=0 で生成したフレームでは保存値と一致）"""
    rules = rules or DEFAULT_ACTION_RULES
    anatomies = frame.anatomies
    triplets, hands = [], {}
    for tool in frame.tools:
        hands[tool.id] = hand_for_position(tool.bbox, frame.width, catalog)
        target = nearest_anatomy(tool, anatomies)
        action = rule_action(catalog.tools[tool.class_index],
                             None if target is None else catalog.anatomies[target.class_index], rules)
        triplets.append(_triplet_for(tool, action, target, catalog))
    return OracleLabels(tuple(triplets), hands, cvs_from_labels(list(frame.objects), triplets, catalog))


def _random_box(rng: np.random.Generator, W: float, H: float,
                w_frac: Tuple[float, float], h_frac: Tuple[float, float]) -> Box:
    """整数ピクセル座標のボックス（フレーム内に収まる）"""
    w = int(rng.integers(max(1, int(w_frac[0] * W)), max(2, int(w_frac[1] * W)) + 1))
    h = int(rng.integers(max(1, int(h_frac[0] * H)), max(2, int(h_frac[1] * H)) + 1))
    x = int(rng.integers(0, int(W) - w + 1))
    y = int(rng.integers(0, int(H) - h + 1))
    return Box(float(x), float(y), float(w), float(h))


def _other(rng: np.random.Generator, n: int, current: int) -> int:
    choice = int(rng.integers(0, n - 1))
    return choice if choice < current else choice + 1


def generate_frame(cfg: SynthConfig, split_index: int, frame_index: int,
                   catalog: ClassCatalog = SYNTH_CATALOG) -> FrameAnnotation:
    rng = np.random.default_rng([cfg.seed, split_index, frame_index])
    W, H = cfg.width, cfg.height
    split = SPLITS[split_index]

    n_anat = int(rng.integers(cfg.anatomies_range[0], cfg.anatomies_range[1] + 1))
    anat_classes = rng.choice(len(catalog.anatomies), size=n_anat, replace=False)
    n_tools = int(rng.integers(cfg.tools_range[0], cfg.tools_range[1] + 1))
    tool_classes = rng.integers(0, len(catalog.tools), size=n_tools)

    tools = [ObjectAnn(f"t{k}", ObjectKind.TOOL, int(c),
                       _random_box(rng, W, H, (0.05, 0.15), (0.08, 0.2)), hand=None)
             for k, c in enumerate(tool_classes)]
    anatomies = [ObjectAnn(f"a{k}", ObjectKind.ANATOMY, int(c),
                           _random_box(rng, W, H, (0.15, 0.35), (0.2, 0.4)))
                 for k, c in enumerate(anat_classes)]

    oracle = label_oracle(FrameAnnotation("", "", W, H, tuple(tools + anatomies)), catalog, cfg.action_rules)

    # ノイズ用の乱数は σ に関係なく同じ数だけ消費する
    noise_draws = rng.uniform(size=(n_tools, 2))
    cvs_draws = rng.uniform(size=3)
    sigma = cfg.noise

    labelled_tools, triplets = [], []
    for k, (tool, trip) in enumerate(zip(tools, oracle.triplets)):
        hand = oracle.hands[tool.id]
        if noise_draws[k, 0] < sigma:
            hand = _other(rng, len(catalog.hands), hand)
        labelled_tools.append(ObjectAnn(tool.id, tool.kind, tool.class_index, tool.bbox, hand))
        if noise_draws[k, 1] < sigma:
            action = catalog.actions[_other(rng, len(catalog.actions), trip.action_index)]
            trip = _triplet_for(tool, action, nearest_anatomy(tool, anatomies), catalog)
        triplets.append(trip)

    cvs = tuple(bool(c) != bool(d < sigma) for c, d in zip(oracle.cvs, cvs_draws))
    return FrameAnnotation(
        frame_id=f"{split}_{frame_index:05d}",
        video_id=f"synth{cfg.seed}_{split}",
        width=W,
        height=H,
        objects=tuple(labelled_tools + anatomies),
        triplets=tuple(triplets),
        cvs=cvs,
    )


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """合成データセット（分割はフレームIDで互いに素）"""
    cfg.validate(SYNTH_CATALOG)
    frames, splits = [], {}
    for split_index, split in enumerate(SPLITS):
        ids = []
        for frame_index in range(cfg.split_sizes[split]):
            frame = generate_frame(cfg, split_index, frame_index)
            frames.append(frame)
            ids.append(frame.frame_id)
        splits[split] = tuple(ids)
    logger.info(f"合成データ生成: train={cfg.n_train}, val={cfg.n_val}, test={cfg.n_test}, "
                f"σ={cfg.noise}, seed={cfg.seed}")
    return Dataset(catalog=SYNTH_CATALOG, frames=tuple(frames), splits=splits)
