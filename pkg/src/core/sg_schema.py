# -*- coding: utf-8 -*-
"""
SG201形式アノテーションの読み込み・検証・集計

Features:
- JSONアノテーションの構造チェック（jsonschema）と参照解決
- 不変条件の検証（違反はルール名付きのデータとして返す）
- 分割ごとのカテゴリ統計
- トリプレットラベル空間の導出
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import jsonschema

from sg_errors import AnnotationError, CatalogMismatchError, DanglingReferenceError
from sg_geometry import Box

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_NULL_ACTION = "Null_verb"

PROFILE_SG201 = "sg201"
PROFILE_GENERIC = "generic"
# SG201プロファイルのクラス数（工具・解剖・行為・手）
SG201_COUNTS = {"tools": 6, "anatomies": 5, "actions": 6, "hands": 3}

# 検証ルール名（固定の列挙）
RULES = (
    "catalog-count", "catalog-duplicate", "catalog-null-action",
    "duplicate-frame-id", "frame-size", "duplicate-object-id", "class-index",
    "bbox-degenerate", "bbox-bounds", "hand-required", "hand-forbidden", "hand-index",
    "action-index", "triplet-tool-kind", "triplet-target-kind", "missing-target",
    "null-target", "duplicate-triplet-pair", "dangling-reference", "cvs-length",
    "split-overlap", "split-unknown-frame",
)


class ObjectKind(Enum):
    TOOL = "tool"
    ANATOMY = "anatomy"


# =============================================================================
# ドメイン型
# =============================================================================

@dataclass(frozen=True)
class ClassCatalog:
    """クラス語彙（工具・解剖構造・行為・手）"""
    tools: Tuple[str, ...]
    anatomies: Tuple[str, ...]
    actions: Tuple[str, ...]
    hands: Tuple[str, ...]
    null_action: str = DEFAULT_NULL_ACTION

    @property
    def null_action_index(self) -> int:
        return self.actions.index(self.null_action)

    def names(self, kind: ObjectKind) -> Tuple[str, ...]:
        return self.tools if kind is ObjectKind.TOOL else self.anatomies

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "tools": list(self.tools),
            "anatomies": list(self.anatomies),
            "actions": list(self.actions),
            "hands": list(self.hands),
        }
        if self.null_action != DEFAULT_NULL_ACTION:
            data["null_action"] = self.null_action
        return data


@dataclass(frozen=True)
class ObjectAnn:
    id: str
    kind: ObjectKind
    class_index: int
    bbox: Box
    hand: Optional[int] = None

    @property
    def is_tool(self) -> bool:
        return self.kind is ObjectKind.TOOL


@dataclass(frozen=True)
class TripletAnn:
    tool_obj: str
    action_index: int
    target_obj: Optional[str] = None


@dataclass(frozen=True)
class FrameAnnotation:
    frame_id: str
    video_id: str
    width: float
    height: float
    objects: Tuple[ObjectAnn, ...] = ()
    triplets: Tuple[TripletAnn, ...] = ()
    cvs: Optional[Tuple[bool, ...]] = None

    def object_by_id(self, obj_id: str) -> Optional[ObjectAnn]:
        for obj in self.objects:
            if obj.id == obj_id:
                return obj
        return None

    @property
    def tools(self) -> List[ObjectAnn]:
        return [o for o in self.objects if o.is_tool]

    @property
    def anatomies(self) -> List[ObjectAnn]:
        return [o for o in self.objects if not o.is_tool]


@dataclass(frozen=True)
class Dataset:
    catalog: ClassCatalog
    frames: Tuple[FrameAnnotation, ...] = ()
    splits: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: {s: () for s in SPLITS})
    profile: str = PROFILE_SG201
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def frame(self, frame_id: str) -> FrameAnnotation:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def split_frames(self, split: str) -> List[FrameAnnotation]:
        """分割に属するフレーム（'all' は3分割の和）"""
        index = {f.frame_id: f for f in self.frames}
        names = SPLITS if split == "all" else (split,)
        out = []
        for name in names:
            if name not in self.splits:
                raise KeyError(f"unknown split: {name}")
            out.extend(index[fid] for fid in self.splits[name] if fid in index)
        return out


@dataclass(frozen=True)
class Violation:
    """不変条件違反（rule は RULES のいずれか）"""
    rule: str
    frame_id: Optional[str]
    detail: str

    def __str__(self) -> str:
        where = f"[{self.frame_id}] " if self.frame_id is not None else ""
        return f"{self.rule}: {where}{self.detail}"


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule: str, frame_id: Optional[str], detail: str) -> None:
        assert rule in RULES, rule
        self.violations.append(Violation(rule, frame_id, detail))

    def rules(self) -> List[str]:
        return [v.rule for v in self.violations]

    def counts(self) -> Dict[str, int]:
        return dict(Counter(self.rules()))


@dataclass
class SplitCounts:
    """分割ごとの出現数"""
    tools: Dict[str, int]
    actions: Dict[str, int]
    hands: Dict[str, int]
    frames: int = 0

    @classmethod
    def zeros(cls, catalog: ClassCatalog) -> "SplitCounts":
        return cls(
            tools={n: 0 for n in catalog.tools},
            actions={n: 0 for n in catalog.actions},
            hands={n: 0 for n in catalog.hands},
        )

    def row(self) -> List[int]:
        return list(self.tools.values()) + list(self.actions.values()) + list(self.hands.values())


@dataclass
class CategoryStats:
    catalog: ClassCatalog
    per_split: Dict[str, SplitCounts]
    total: SplitCounts

    def columns(self) -> List[str]:
        return list(self.catalog.tools) + list(self.catalog.actions) + list(self.catalog.hands)

    def rows(self, split: str = "all") -> List[Tuple[str, List[int]]]:
        names = SPLITS if split == "all" else (split,)
        rows = [(name, self.per_split[name].row()) for name in names]
        if split == "all":
            rows.append(("total", self.total.row()))
        return rows


@dataclass(frozen=True)
class TripletLabel:
    """トリプレットラベル（target は null 行為のとき None）"""
    tool: int
    action: int
    target: Optional[int]

    def sort_key(self, n_anatomies: int) -> Tuple[int, int, int]:
        return self.tool, self.action, n_anatomies if self.target is None else self.target

    def name(self, catalog: ClassCatalog) -> str:
        target = "-" if self.target is None else catalog.anatomies[self.target]
        return f"{catalog.tools[self.tool]}:{catalog.actions[self.action]}:{target}"


# =============================================================================
# JSONスキーマ
# =============================================================================

_STRING_ARRAY = {"type": "array", "items": {"type": "string"}}

DATASET_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["catalog", "frames", "splits"],
    "properties": {
        "catalog": {
            "type": "object",
            "required": ["tools", "anatomies", "actions", "hands"],
            "properties": {
                "tools": _STRING_ARRAY,
                "anatomies": _STRING_ARRAY,
                "actions": _STRING_ARRAY,
                "hands": _STRING_ARRAY,
                "null_action": {"type": "string"},
            },
        },
        "frames": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["frame_id", "video_id", "width", "height", "objects", "triplets"],
                "properties": {
                    "frame_id": {"type": "string"},
                    "video_id": {"type": "string"},
                    "width": {"type": "number"},
                    "height": {"type": "number"},
                    "objects": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["id", "kind", "class", "bbox"],
                            "properties": {
                                "id": {"type": "string"},
                                "kind": {"enum": ["tool", "anatomy"]},
                                "class": {"type": "string"},
                                "bbox": {"type": "array", "items": {"type": "number"},
                                         "minItems": 4, "maxItems": 4},
                                "hand": {"type": "string"},
                            },
                        },
                    },
                    "triplets": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["tool", "action"],
                            "properties": {
                                "tool": {"type": "string"},
                                "action": {"type": "string"},
                                "target": {"type": "string"},
                            },
                        },
                    },
                    "cvs": {"type": "array", "items": {"type": "boolean"}},
                },
            },
        },
        "splits": {
            "type": "object",
            "required": list(SPLITS),
            "properties": {s: _STRING_ARRAY for s in SPLITS},
        },
    },
}

_KNOWN_KEYS = {
    "root": {"catalog", "frames", "splits"},
    "catalog": {"tools", "anatomies", "actions", "hands", "null_action"},
    "frame": {"frame_id", "video_id", "width", "height", "objects", "triplets", "cvs"},
    "object": {"id", "kind", "class", "bbox", "hand"},
    "triplet": {"tool", "action", "target"},
    "splits": set(SPLITS),
}


def _unknown(keys: Iterable[str], level: str, where: str) -> List[str]:
    return [f"{where}.{k}" if where else k for k in keys if k not in _KNOWN_KEYS[level]]


def _collect_unknown_fields(doc: Dict[str, Any]) -> List[str]:
    warnings = _unknown(doc, "root", "")
    warnings += _unknown(doc["catalog"], "catalog", "catalog")
    warnings += _unknown(doc["splits"], "splits", "splits")
    for i, frame in enumerate(doc["frames"]):
        where = f"frames[{i}]"
        warnings += _unknown(frame, "frame", where)
        for j, obj in enumerate(frame["objects"]):
            warnings += _unknown(obj, "object", f"{where}.objects[{j}]")
        for j, trip in enumerate(frame["triplets"]):
            warnings += _unknown(trip, "triplet", f"{where}.triplets[{j}]")
    return warnings


# =============================================================================
# 読み込み
# =============================================================================

def _lookup(names: Sequence[str], name: str, rule: str, frame_id: Optional[str]) -> int:
    try:
        return names.index(name)
    except ValueError:
        raise AnnotationError(f"未知のクラス名 '{name}'", rule=rule, frame_id=frame_id) from None


def _parse_catalog(raw: Dict[str, Any], profile: str) -> ClassCatalog:
    catalog = ClassCatalog(
        tools=tuple(raw["tools"]),
        anatomies=tuple(raw["anatomies"]),
        actions=tuple(raw["actions"]),
        hands=tuple(raw["hands"]),
        null_action=raw.get("null_action", DEFAULT_NULL_ACTION),
    )
    for key in SG201_COUNTS:
        names = getattr(catalog, key)
        if len(set(names)) != len(names):
            raise AnnotationError(f"catalog.{key} に重複した名前があります", rule="catalog-duplicate")
    if catalog.null_action not in catalog.actions:
        raise AnnotationError(f"null行為 '{catalog.null_action}' が actions にありません",
                              rule="catalog-null-action")
    if profile == PROFILE_SG201:
        for key, expected in SG201_COUNTS.items():
            got = len(getattr(catalog, key))
            if got != expected:
                raise CatalogMismatchError(
                    f"SG201プロファイルでは catalog.{key} は {expected} 件必要です（{got} 件）")
    return catalog


def _parse_frame(raw: Dict[str, Any], catalog: ClassCatalog) -> FrameAnnotation:
    fid = raw["frame_id"]
    objects = []
    for o in raw["objects"]:
        kind = ObjectKind(o["kind"])
        hand = o.get("hand")
        objects.append(ObjectAnn(
            id=o["id"],
            kind=kind,
            class_index=_lookup(catalog.names(kind), o["class"], "class-index", fid),
            bbox=Box(*(float(v) for v in o["bbox"])),
            hand=None if hand is None else _lookup(catalog.hands, hand, "hand-index", fid),
        ))
    ids = {o.id for o in objects}

    triplets = []
    for t in raw["triplets"]:
        for key in ("tool", "target"):
            ref = t.get(key)
            if ref is not None and ref not in ids:
                raise DanglingReferenceError(
                    f"フレーム {fid} のトリプレットが存在しないオブジェクト '{ref}' を参照しています",
                    ref=ref, frame_id=fid)
        triplets.append(TripletAnn(
            tool_obj=t["tool"],
            action_index=_lookup(catalog.actions, t["action"], "action-index", fid),
            target_obj=t.get("target"),
        ))

    cvs = raw.get("cvs")
    return FrameAnnotation(
        frame_id=fid,
        video_id=raw["video_id"],
        width=float(raw["width"]),
        height=float(raw["height"]),
        objects=tuple(objects),
        triplets=tuple(triplets),
        cvs=None if cvs is None else tuple(bool(c) for c in cvs),
    )


def parse_dataset(text: str, profile: str = PROFILE_SG201) -> Dataset:
    """JSON文書から Dataset を構築（構造エラーは例外、意味的な違反は validate へ）"""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"JSONの形式エラー: {e}", rule="malformed-json") from e

    validator = jsonschema.Draft7Validator(DATASET_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        path = "/".join(str(p) for p in first.absolute_path) or "<root>"
        raise AnnotationError(f"スキーマエラー ({path}): {first.message}", rule="schema")

    warnings = _collect_unknown_fields(doc)
    for w in warnings:
        logger.warning(f"未知のフィールドを無視しました: {w}")

    catalog = _parse_catalog(doc["catalog"], profile)
    frames = tuple(_parse_frame(f, catalog) for f in doc["frames"])

    frame_ids = {f.frame_id for f in frames}
    splits = {}
    for name in SPLITS:
        ids = tuple(doc["splits"][name])
        for fid in ids:
            if fid not in frame_ids:
                raise DanglingReferenceError(f"分割 {name} が存在しないフレーム '{fid}' を参照しています",
                                             ref=fid)
        splits[name] = ids

    dataset = Dataset(catalog=catalog, frames=frames, splits=splits, profile=profile,
                      warnings=tuple(warnings))
    logger.info(f"データセット読み込み完了: {len(frames)}フレーム "
                f"(train={len(splits['train'])}, val={len(splits['val'])}, test={len(splits['test'])})")
    return dataset


def load_dataset(path: str, profile: str = PROFILE_SG201) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        return parse_dataset(f.read(), profile=profile)


def dataset_to_dict(d: Dataset) -> Dict[str, Any]:
    cat = d.catalog
    frames = []
    for f in d.frames:
        objects = []
        for o in f.objects:
            obj: Dict[str, Any] = {
                "id": o.id,
                "kind": o.kind.value,
                "class": cat.names(o.kind)[o.class_index],
                "bbox": o.bbox.as_list(),
            }
            if o.hand is not None:
                obj["hand"] = cat.hands[o.hand]
            objects.append(obj)
        triplets = []
        for t in f.triplets:
            trip: Dict[str, Any] = {"tool": t.tool_obj, "action": cat.actions[t.action_index]}
            if t.target_obj is not None:
                trip["target"] = t.target_obj
            triplets.append(trip)
        frame: Dict[str, Any] = {
            "frame_id": f.frame_id,
            "video_id": f.video_id,
            "width": f.width,
            "height": f.height,
            "objects": objects,
            "triplets": triplets,
        }
        if f.cvs is not None:
            frame["cvs"] = list(f.cvs)
        frames.append(frame)
    return {
        "catalog": cat.to_dict(),
        "frames": frames,
        "splits": {s: list(d.splits.get(s, ())) for s in SPLITS},
    }


def serialize_dataset(d: Dataset) -> str:
    """parse_dataset の逆変換（キー順固定）"""
    return json.dumps(dataset_to_dict(d), ensure_ascii=False, indent=1) + "\n"


def catalog_hash(catalog: ClassCatalog) -> str:
    canonical = json.dumps({**catalog.to_dict(), "null_action": catalog.null_action},
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# =============================================================================
# 検証
# =============================================================================

def _validate_catalog(cat: ClassCatalog, profile: str, report: ValidationReport) -> None:
    for key, expected in SG201_COUNTS.items():
        names = getattr(cat, key)
        if len(set(names)) != len(names):
            report.add("catalog-duplicate", None, f"catalog.{key} に重複があります")
        if profile == PROFILE_SG201 and len(names) != expected:
            report.add("catalog-count", None, f"catalog.{key}: {len(names)} 件（期待値 {expected}）")
    if cat.null_action not in cat.actions:
        report.add("catalog-null-action", None, f"'{cat.null_action}' が actions にありません")


def _validate_frame(f: FrameAnnotation, cat: ClassCatalog, profile: str,
                    report: ValidationReport) -> None:
    fid = f.frame_id
    if f.width <= 0 or f.height <= 0:
        report.add("frame-size", fid, f"{f.width}x{f.height}")

    seen: Dict[str, ObjectAnn] = {}
    for o in f.objects:
        if o.id in seen:
            report.add("duplicate-object-id", fid, o.id)
        seen.setdefault(o.id, o)
        if not 0 <= o.class_index < len(cat.names(o.kind)):
            report.add("class-index", fid, f"{o.id}: {o.class_index}")
        if not o.bbox.is_valid():
            report.add("bbox-degenerate", fid, f"{o.id}: {o.bbox.as_list()}")
        elif not o.bbox.within(f.width, f.height):
            report.add("bbox-bounds", fid, f"{o.id}: {o.bbox.as_list()}")
        if o.is_tool and o.hand is None and profile == PROFILE_SG201:
            report.add("hand-required", fid, o.id)
        if not o.is_tool and o.hand is not None:
            report.add("hand-forbidden", fid, o.id)
        if o.hand is not None and not 0 <= o.hand < len(cat.hands):
            report.add("hand-index", fid, f"{o.id}: {o.hand}")

    null_index = cat.actions.index(cat.null_action) if cat.null_action in cat.actions else None
    pairs = set()
    for t in f.triplets:
        if not 0 <= t.action_index < len(cat.actions):
            report.add("action-index", fid, f"{t.tool_obj}: {t.action_index}")
        tool = seen.get(t.tool_obj)
        if tool is None:
            report.add("dangling-reference", fid, t.tool_obj)
        elif not tool.is_tool:
            report.add("triplet-tool-kind", fid, t.tool_obj)
        if t.target_obj is not None:
            target = seen.get(t.target_obj)
            if target is None:
                report.add("dangling-reference", fid, t.target_obj)
            elif target.is_tool:
                report.add("triplet-target-kind", fid, t.target_obj)
            if t.action_index == null_index:
                report.add("null-target", fid, f"{t.tool_obj} -> {t.target_obj}")
        elif t.action_index != null_index:
            report.add("missing-target", fid, t.tool_obj)
        pair = (t.tool_obj, t.target_obj)
        if pair in pairs:
            report.add("duplicate-triplet-pair", fid, f"{t.tool_obj} -> {t.target_obj}")
        pairs.add(pair)

    if f.cvs is not None and len(f.cvs) != 3:
        report.add("cvs-length", fid, f"{len(f.cvs)} 件")


def validate(d: Dataset) -> ValidationReport:
    """すべての不変条件違反を列挙（空なら妥当）"""
    report = ValidationReport()
    _validate_catalog(d.catalog, d.profile, report)

    frame_ids = Counter(f.frame_id for f in d.frames)
    for fid, n in frame_ids.items():
        if n > 1:
            report.add("duplicate-frame-id", fid, f"{n} 回出現")
    for f in d.frames:
        _validate_frame(f, d.catalog, d.profile, report)

    owner: Dict[str, str] = {}
    for name in SPLITS:
        for fid in d.splits.get(name, ()):
            if fid not in frame_ids:
                report.add("split-unknown-frame", fid, name)
            if fid in owner and owner[fid] != name:
                report.add("split-overlap", fid, f"{owner[fid]} / {name}")
            owner.setdefault(fid, name)

    if report.ok:
        logger.info("検証完了: 違反なし")
    else:
        logger.info(f"検証完了: {len(report.violations)} 件の違反 {report.counts()}")
    return report


# =============================================================================
# 集計・ラベル空間
# =============================================================================

def _count_frames(frames: Iterable[FrameAnnotation], catalog: ClassCatalog) -> SplitCounts:
    counts = SplitCounts.zeros(catalog)
    for f in frames:
        counts.frames += 1
        for o in f.tools:
            counts.tools[catalog.tools[o.class_index]] += 1
            if o.hand is not None:
                counts.hands[catalog.hands[o.hand]] += 1
        for t in f.triplets:
            counts.actions[catalog.actions[t.action_index]] += 1
    return counts


def compute_stats(d: Dataset) -> CategoryStats:
    """分割ごとの工具・行為・手の出現数と合計"""
    per_split = {s: _count_frames(d.split_frames(s), d.catalog) for s in SPLITS}
    total = SplitCounts.zeros(d.catalog)
    for counts in per_split.values():
        total.frames += counts.frames
        for key in ("tools", "actions", "hands"):
            bucket = getattr(total, key)
            for name, n in getattr(counts, key).items():
                bucket[name] += n
    return CategoryStats(catalog=d.catalog, per_split=per_split, total=total)


def frame_triplet_labels(frame: FrameAnnotation) -> List[TripletLabel]:
    """フレーム内のトリプレットラベル（重複あり、出現順）"""
    labels = []
    for t in frame.triplets:
        tool = frame.object_by_id(t.tool_obj)
        target = frame.object_by_id(t.target_obj) if t.target_obj is not None else None
        labels.append(TripletLabel(
            tool=tool.class_index,
            action=t.action_index,
            target=None if target is None else target.class_index,
        ))
    return labels


def triplet_vocabulary(d: Dataset) -> List[TripletLabel]:
    """(工具, 行為, 対象) の順で並べた重複なしのラベル空間（対象なしは末尾）"""
    labels = {label for f in d.frames for label in frame_triplet_labels(f)}
    n_anat = len(d.catalog.anatomies)
    return sorted(labels, key=lambda lab: lab.sort_key(n_anat))


def collapse_tool_classes(d: Dataset, name: str = "Tool") -> Dataset:
    """全工具クラスを1つの汎用クラスに統合（汎用プロファイルになる）"""
    catalog = replace(d.catalog, tools=(name,))
    frames = tuple(
        replace(f, objects=tuple(replace(o, class_index=0) if o.is_tool else o for o in f.objects))
        for f in d.frames
    )
    return replace(d, catalog=catalog, frames=frames, profile=PROFILE_GENERIC)
