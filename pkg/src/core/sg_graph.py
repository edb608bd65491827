# -*- coding: utf-8 -*-
"""
潜在グラフの構築

Features:
- 型付きノード（工具 / 解剖構造）の生成と特徴量
- 候補エッジ（全ノード対の空間エッジ + 工具→解剖構造の行為エッジ）
- スコアに基づくエッジ保持
- フレーム単位のキャッシュ付きビルダーとミニバッチ結合
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from cachetools import LRUCache

from sg_errors import ShapeError
from sg_geometry import Box, SpatialRelation, edge_exists, normalize_box, spatial_relation, union_box
from sg_schema import ClassCatalog, FrameAnnotation, ObjectAnn, ObjectKind

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.5
BOX_DIM = 4


class EdgeKind(Enum):
    SPATIAL = "spatial"
    ACTION = "action"


@dataclass(frozen=True, eq=False)
class Node:
    """潜在グラフのノード（p: ボックス, s: クラス確率, f: 特徴量）"""
    obj_id: str
    kind: ObjectKind
    class_index: int
    box: Box
    scores: np.ndarray
    features: np.ndarray
    hand_gt: Optional[int] = None

    @property
    def is_tool(self) -> bool:
        return self.kind is ObjectKind.TOOL


@dataclass(frozen=True, eq=False)
class Edge:
    src: int
    dst: int
    kind: EdgeKind
    features: np.ndarray
    spatial_gt: Optional[SpatialRelation] = None
    action_gt: Optional[int] = None
    exist_gt: Optional[bool] = None


@dataclass(frozen=True, eq=False)
class LatentGraph:
    frame_id: str
    width: float
    height: float
    nodes: Tuple[Node, ...] = ()
    edges: Tuple[Edge, ...] = ()

    @property
    def spatial_edges(self) -> List[Edge]:
        return [e for e in self.edges if e.kind is EdgeKind.SPATIAL]

    @property
    def action_edges(self) -> List[Edge]:
        return [e for e in self.edges if e.kind is EdgeKind.ACTION]

    @property
    def tool_indices(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.is_tool]

    def canonical_form(self) -> str:
        """ノード順に依存しない正規化表現（オブジェクトIDで整列）"""
        nodes = sorted(
            [n.obj_id, n.kind.value, n.class_index, n.hand_gt, np.round(n.features, 12).tolist()]
            for n in self.nodes
        )
        edges = []
        for e in self.edges:
            a, b = self.nodes[e.src].obj_id, self.nodes[e.dst].obj_id
            if e.kind is EdgeKind.SPATIAL:
                a, b = sorted((a, b))
            edges.append([
                a, b, e.kind.value,
                None if e.spatial_gt is None else e.spatial_gt.value,
                e.action_gt, e.exist_gt,
                np.round(e.features, 12).tolist(),
            ])
        edges.sort(key=lambda row: (row[0], row[1], row[2]))
        return json.dumps({"nodes": nodes, "edges": edges}, sort_keys=True)


# =============================================================================
# 特徴量
# =============================================================================

class FeatureProvider:
    """
    ノード・エッジ特徴量の供給

    ノード特徴 = クラス確率（工具・解剖構造の連結スロット）⊕ 正規化ボックス ⊕ 外観ベクトル
    エッジ特徴 = 正規化した和集合ボックス ⊕ 両端ノード特徴の平均
    """

    def __init__(self, catalog: ClassCatalog, d_appearance: int = 0,
                 sidecar: Optional[Dict[str, Dict[str, Any]]] = None):
        self.catalog = catalog
        self.d_appearance = int(d_appearance)
        self.sidecar = sidecar or {}

    @classmethod
    def from_sidecar(cls, path: str, catalog: ClassCatalog) -> "FeatureProvider":
        """外部特徴量ファイル {frame_id: {obj_id: vector | {appearance, scores}}} を読み込む"""
        with open(path, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        dims = set()
        for frame_id, objects in sidecar.items():
            for obj_id, entry in objects.items():
                appearance = entry.get("appearance") if isinstance(entry, dict) else entry
                if appearance is not None:
                    dims.add(len(appearance))
        if len(dims) > 1:
            raise ShapeError(f"外観ベクトルの次元が揃っていません: {sorted(dims)}")
        d_appearance = dims.pop() if dims else 0
        logger.info(f"外部特徴量を読み込みました: {path} (d_appearance={d_appearance})")
        return cls(catalog, d_appearance=d_appearance, sidecar=sidecar)

    @property
    def n_classes(self) -> int:
        return len(self.catalog.tools) + len(self.catalog.anatomies)

    @property
    def d_node(self) -> int:
        return self.n_classes + BOX_DIM + self.d_appearance

    @property
    def d_edge(self) -> int:
        return BOX_DIM + self.d_node

    def _entry(self, frame_id: str, obj_id: str) -> Dict[str, Any]:
        entry = self.sidecar.get(frame_id, {}).get(obj_id)
        if entry is None:
            return {}
        return entry if isinstance(entry, dict) else {"appearance": entry}

    def class_scores(self, frame: FrameAnnotation, obj: ObjectAnn) -> np.ndarray:
        """クラス確率（既定は正解クラスの one-hot）"""
        k = len(self.catalog.names(obj.kind))
        soft = self._entry(frame.frame_id, obj.id).get("scores")
        if soft is None:
            s = np.zeros(k)
            s[obj.class_index] = 1.0
            return s
        s = np.asarray(soft, dtype=np.float64)
        if s.shape != (k,):
            raise ShapeError(f"{frame.frame_id}/{obj.id}: スコア次元 {s.shape} (期待値 {k})")
        if np.any(s < 0) or np.any(s > 1) or abs(s.sum() - 1.0) > 1e-6:
            raise ShapeError(f"{frame.frame_id}/{obj.id}: スコアが確率分布ではありません")
        return s

    def appearance(self, frame: FrameAnnotation, obj: ObjectAnn) -> np.ndarray:
        vec = self._entry(frame.frame_id, obj.id).get("appearance")
        if vec is None:
            return np.zeros(self.d_appearance)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.d_appearance,):
            raise ShapeError(
                f"{frame.frame_id}/{obj.id}: 外観ベクトル次元 {vec.shape} (期待値 {self.d_appearance})")
        return vec

    def node_features(self, frame: FrameAnnotation, obj: ObjectAnn, scores: np.ndarray) -> np.ndarray:
        slot = np.zeros(self.n_classes)
        offset = 0 if obj.is_tool else len(self.catalog.tools)
        slot[offset:offset + scores.size] = scores
        geom = normalize_box(obj.bbox, frame.width, frame.height)
        f = np.concatenate([slot, geom, self.appearance(frame, obj)])
        if not np.all(np.isfinite(f)):
            raise ShapeError(f"{frame.frame_id}/{obj.id}: 特徴量に非有限値があります")
        return f

    def edge_features(self, a: Node, b: Node, width: float, height: float) -> np.ndarray:
        geom = normalize_box(union_box(a.box, b.box), width, height)
        return np.concatenate([geom, (a.features + b.features) / 2.0])


# =============================================================================
# グラフ構築
# =============================================================================

def build_nodes(frame: FrameAnnotation, fp: FeatureProvider) -> List[Node]:
    """アノテーションの各オブジェクトから1ノード（順序はアノテーション順）"""
    nodes = []
    for obj in frame.objects:
        scores = fp.class_scores(frame, obj)
        nodes.append(Node(
            obj_id=obj.id,
            kind=obj.kind,
            class_index=obj.class_index,
            box=obj.bbox,
            scores=scores,
            features=fp.node_features(frame, obj, scores),
            hand_gt=obj.hand,
        ))
    return nodes


def action_edge_mask(nodes: Sequence[Node]) -> np.ndarray:
    """(i, j) が真 ⇔ i が工具かつ j が解剖構造"""
    is_tool = np.array([n.is_tool for n in nodes], dtype=bool)
    return np.outer(is_tool, ~is_tool)


def candidate_edges(nodes: Sequence[Node], fp: FeatureProvider, frame: FrameAnnotation,
                    proximity: float = 0.1, inside_threshold: float = 0.8) -> List[Edge]:
    """全ノード対の空間エッジ候補と、マスク真の全対の行為エッジ"""
    W, H = frame.width, frame.height
    null_action = fp.catalog.null_action_index
    actions = {(t.tool_obj, t.target_obj): t.action_index
               for t in frame.triplets if t.target_obj is not None}

    edges = []
    n = len(nodes)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = nodes[i], nodes[j]
            edges.append(Edge(
                src=i, dst=j, kind=EdgeKind.SPATIAL,
                features=fp.edge_features(a, b, W, H),
                spatial_gt=spatial_relation(a.box, b.box, inside_threshold),
                exist_gt=edge_exists(a.box, b.box, W, H, proximity),
            ))
    mask = action_edge_mask(nodes)
    for i, j in zip(*np.nonzero(mask)):
        a, b = nodes[i], nodes[j]
        edges.append(Edge(
            src=int(i), dst=int(j), kind=EdgeKind.ACTION,
            features=fp.edge_features(a, b, W, H),
            action_gt=actions.get((a.obj_id, b.obj_id), null_action),
        ))
    return edges


def build_candidate_graph(frame: FrameAnnotation, fp: FeatureProvider,
                          proximity: float = 0.1, inside_threshold: float = 0.8) -> LatentGraph:
    nodes = build_nodes(frame, fp)
    edges = candidate_edges(nodes, fp, frame, proximity, inside_threshold)
    return LatentGraph(frame.frame_id, frame.width, frame.height, tuple(nodes), tuple(edges))


def retention_mask(scores: Sequence[float], tau: float = DEFAULT_TAU) -> np.ndarray:
    """スコア ≥ τ の位置が真"""
    return np.asarray(scores, dtype=np.float64).reshape(-1) >= tau


def propose_edges(graph: LatentGraph, scores: Sequence[float], tau: float = DEFAULT_TAU) -> LatentGraph:
    """スコア ≥ τ の空間エッジを保持（行為エッジは常に保持）"""
    keep = retention_mask(scores, tau)
    spatial = graph.spatial_edges
    if keep.size != len(spatial):
        raise ShapeError(f"スコア数 {keep.size} が空間エッジ候補数 {len(spatial)} と一致しません")
    kept = [e for e, k in zip(spatial, keep) if k]
    return replace(graph, edges=tuple(kept) + tuple(graph.action_edges))


class GraphBuilder:
    """候補グラフのキャッシュ付きビルダー"""

    def __init__(self, fp: FeatureProvider, cache_size: int = 1024,
                 proximity: float = 0.1, inside_threshold: float = 0.8):
        self.fp = fp
        self.proximity = proximity
        self.inside_threshold = inside_threshold
        self._cache: LRUCache = LRUCache(maxsize=max(1, cache_size))
        self.hits = 0
        self.misses = 0

    def candidates(self, frame: FrameAnnotation) -> LatentGraph:
        graph = self._cache.get(frame.frame_id)
        if graph is not None:
            self.hits += 1
            logger.debug(f"キャッシュヒット: {frame.frame_id}")
            return graph
        self.misses += 1
        logger.debug(f"キャッシュミス: {frame.frame_id}")
        graph = build_candidate_graph(frame, self.fp, self.proximity, self.inside_threshold)
        self._cache[frame.frame_id] = graph
        return graph

    def get_stats(self) -> Dict[str, Any]:
        total = self.hits + self.misses
        return {
            "size": len(self._cache),
            "max_size": self._cache.maxsize,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hits / total if total else 0.0,
        }


# =============================================================================
# ミニバッチ
# =============================================================================

@dataclass
class GraphBatch:
    """複数グラフの非交和（インデックスはバッチ全体の通し番号）"""
    graphs: List[LatentGraph]
    node_feats: np.ndarray
    node_graph: np.ndarray
    spatial_feats: np.ndarray
    spatial_src: np.ndarray
    spatial_dst: np.ndarray
    spatial_graph: np.ndarray
    exist_gt: np.ndarray
    spatial_gt: np.ndarray
    action_feats: np.ndarray
    action_src: np.ndarray
    action_dst: np.ndarray
    action_graph: np.ndarray
    action_gt: np.ndarray
    tool_nodes: np.ndarray
    hand_gt: np.ndarray
    spatial_offsets: List[int] = field(default_factory=list)
    action_offsets: List[int] = field(default_factory=list)

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    @property
    def n_nodes(self) -> int:
        return self.node_feats.shape[0]


def batch_graphs(graphs: Sequence[LatentGraph], d_node: int, d_edge: int) -> GraphBatch:
    node_feats, node_graph = [], []
    sp_feats, sp_src, sp_dst, sp_graph, exist_gt, spatial_gt = [], [], [], [], [], []
    ac_feats, ac_src, ac_dst, ac_graph, action_gt = [], [], [], [], []
    tool_nodes, hand_gt = [], []
    sp_offsets, ac_offsets = [], []

    offset = 0
    for g_idx, g in enumerate(graphs):
        sp_offsets.append(len(sp_src))
        ac_offsets.append(len(ac_src))
        for i, n in enumerate(g.nodes):
            if n.features.shape != (d_node,):
                raise ShapeError(f"{g.frame_id}: ノード特徴次元 {n.features.shape} (期待値 {d_node})")
            node_feats.append(n.features)
            node_graph.append(g_idx)
            if n.is_tool and n.hand_gt is not None:
                tool_nodes.append(offset + i)
                hand_gt.append(n.hand_gt)
        for e in g.edges:
            if e.features.shape != (d_edge,):
                raise ShapeError(f"{g.frame_id}: エッジ特徴次元 {e.features.shape} (期待値 {d_edge})")
            if e.kind is EdgeKind.SPATIAL:
                sp_feats.append(e.features)
                sp_src.append(offset + e.src)
                sp_dst.append(offset + e.dst)
                sp_graph.append(g_idx)
                exist_gt.append(1.0 if e.exist_gt else 0.0)
                spatial_gt.append(e.spatial_gt.index if e.spatial_gt is not None else 0)
            else:
                ac_feats.append(e.features)
                ac_src.append(offset + e.src)
                ac_dst.append(offset + e.dst)
                ac_graph.append(g_idx)
                action_gt.append(e.action_gt)
        offset += len(g.nodes)

    def rows(items: List[np.ndarray], d: int) -> np.ndarray:
        return np.vstack(items) if items else np.zeros((0, d))

    def ints(items: List[int]) -> np.ndarray:
        return np.asarray(items, dtype=np.int64)

    return GraphBatch(
        graphs=list(graphs),
        node_feats=rows(node_feats, d_node),
        node_graph=ints(node_graph),
        spatial_feats=rows(sp_feats, d_edge),
        spatial_src=ints(sp_src),
        spatial_dst=ints(sp_dst),
        spatial_graph=ints(sp_graph),
        exist_gt=np.asarray(exist_gt, dtype=np.float64),
        spatial_gt=ints(spatial_gt),
        action_feats=rows(ac_feats, d_edge),
        action_src=ints(ac_src),
        action_dst=ints(ac_dst),
        action_graph=ints(ac_graph),
        action_gt=ints(action_gt),
        tool_nodes=ints(tool_nodes),
        hand_gt=ints(hand_gt),
        spatial_offsets=sp_offsets,
        action_offsets=ac_offsets,
    )
