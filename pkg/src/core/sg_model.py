# -*- coding: utf-8 -*-
"""
SSG-Com ネットワークと2段階学習

Features:
- 潜在グラフ上の GCN エンコーダ（平均集約、エッジ特徴の連結）
- 4つのヘッド: エッジ存在・空間関係・行為エッジ・手の識別
- 複合損失 L_total = L_LG + λ_action·L_action + λ_hand·L_hand
- 第1段階（潜在グラフ学習）と第2段階（CVS / トリプレット用デコーダ）
- アブレーション実行（空間のみ / +行為エッジ / 全体 / 汎用工具クラス）
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sg_autodiff import (
    ParamStore, Tensor, adam_step, add, binary_cross_entropy, concat_cols, cross_entropy,
    gather_rows, linear, load_checkpoint, matmul, relu, save_checkpoint, scale, segment_max, sigmoid,
    spmm, zeros_loss,
)
from sg_errors import CatalogMismatchError, CheckpointError, ConfigError, NumericalError, ShapeError
from sg_eval import (
    TASK_TRIPLET, TASKS, evaluate, map_multilabel, task_frames, task_label_names, task_targets,
)
from sg_geometry import SPATIAL_RELATIONS
from sg_graph import (
    Edge, FeatureProvider, GraphBatch, GraphBuilder, LatentGraph, batch_graphs, propose_edges, retention_mask,
)
from sg_monitor import PerformanceMonitor
from sg_schema import (
    ClassCatalog, Dataset, FrameAnnotation, TripletLabel, catalog_hash, collapse_tool_classes,
    triplet_vocabulary,
)

logger = logging.getLogger(__name__)

HEAD_INIT_MODES = ("xavier", "zero")


# =============================================================================
# 設定
# =============================================================================

@dataclass
class ModelConfig:
    """モデル設定"""
    d_hidden: int = 32
    gcn_layers: int = 2
    lambda_action: float = 0.6
    lambda_hand: float = 0.001
    tau: float = 0.5
    seed: int = 0
    head_init: str = "xavier"
    use_action_head: bool = True
    use_hand_head: bool = True
    d_appearance: int = 0
    d_node: Optional[int] = None
    d_edge: Optional[int] = None
    proximity: float = 0.1
    inside_threshold: float = 0.8

    def validate(self) -> None:
        if self.d_hidden <= 0 or self.gcn_layers < 0 or self.d_appearance < 0:
            raise ConfigError(f"次元・層数が不正です: d_hidden={self.d_hidden}, gcn_layers={self.gcn_layers}")
        if self.lambda_action < 0 or self.lambda_hand < 0:
            raise ConfigError(f"λ は 0 以上が必要です: ({self.lambda_action}, {self.lambda_hand})")
        if self.head_init not in HEAD_INIT_MODES:
            raise ConfigError(f"head_init は {HEAD_INIT_MODES} のいずれか: {self.head_init}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"τ は [0, 1] の範囲: {self.tau}")


@dataclass
class TrainConfig:
    """学習設定"""
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    teacher_forcing: bool = True
    keep_aux_losses: bool = True
    freeze: List[str] = field(default_factory=list)
    cache_size: int = 1024

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError(f"学習設定が不正です: epochs={self.epochs}, batch_size={self.batch_size}, lr={self.lr}")


@dataclass(frozen=True)
class LossBreakdown:
    """損失の内訳（L_LG = L_edge_exist + L_spatial）"""
    edge_exist: float
    spatial: float
    action: float
    hand: float
    lg: float
    total: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def total_loss(edge_exist: float, spatial: float, action: float, hand: float,
               cfg: ModelConfig) -> LossBreakdown:
    """L_total = L_LG + λ_action·L_action + λ_hand·L_hand"""
    terms = {"edge_exist": edge_exist, "spatial": spatial, "action": action, "hand": hand}
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError(f"損失項 {name} が有限ではありません: {value}")
    lg = edge_exist + spatial
    total = lg + action * cfg.lambda_action + hand * cfg.lambda_hand
    return LossBreakdown(edge_exist, spatial, action, hand, lg, total)


def mean_breakdown(items: Sequence[LossBreakdown], cfg: ModelConfig) -> LossBreakdown:
    return total_loss(
        float(np.mean([b.edge_exist for b in items])),
        float(np.mean([b.spatial for b in items])),
        float(np.mean([b.action for b in items])),
        float(np.mean([b.hand for b in items])),
        cfg,
    )


# =============================================================================
# モデル
# =============================================================================

@dataclass
class ForwardOutput:
    """順伝播の結果（エッジ行は保持空間エッジ → 行為エッジの順）"""
    exist_logits: Tensor
    retained: np.ndarray
    H: Tensor
    E: Tensor
    edge_graph: np.ndarray
    action_rows: np.ndarray
    spatial_logits: Tensor
    action_logits: Optional[Tensor]
    hand_logits: Optional[Tensor]

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())


class SSGComModel:
    """潜在グラフエンコーダと4ヘッド"""

    def __init__(self, catalog: ClassCatalog, fp: FeatureProvider, cfg: ModelConfig,
                 store: Optional[ParamStore] = None):
        cfg.validate()
        if cfg.d_node is not None and cfg.d_node != fp.d_node:
            raise ShapeError(f"d_node={cfg.d_node} が特徴量次元 {fp.d_node} と一致しません")
        if cfg.d_edge is not None and cfg.d_edge != fp.d_edge:
            raise ShapeError(f"d_edge={cfg.d_edge} が特徴量次元 {fp.d_edge} と一致しません")
        self.catalog = catalog
        self.fp = fp
        self.cfg = replace(cfg, d_node=fp.d_node, d_edge=fp.d_edge)
        self.store = store if store is not None else ParamStore(cfg.seed)
        if store is None:
            self._init_params()

    # --- パラメータ -----------------------------------------------------------

    @property
    def d_node_out(self) -> int:
        return self.cfg.d_hidden if self.cfg.gcn_layers > 0 else self.fp.d_node

    @property
    def d_edge_out(self) -> int:
        return self.cfg.d_hidden if self.cfg.gcn_layers > 0 else self.fp.d_edge

    def _add_mlp(self, prefix: str, d_in: int, d_out: int) -> None:
        h = self.cfg.d_hidden
        last = "zeros" if self.cfg.head_init == "zero" else "xavier"
        self.store.add(f"{prefix}.fc1.W", (d_in, h))
        self.store.add(f"{prefix}.fc1.b", (h,), init="zeros")
        self.store.add(f"{prefix}.fc2.W", (h, d_out), init=last)
        self.store.add(f"{prefix}.fc2.b", (d_out,), init="zeros")

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        s = self.store
        hidden = relu(linear(x, s[f"{prefix}.fc1.W"], s[f"{prefix}.fc1.b"]))
        return linear(hidden, s[f"{prefix}.fc2.W"], s[f"{prefix}.fc2.b"])

    def _init_params(self) -> None:
        d_n, d_e, h = self.fp.d_node, self.fp.d_edge, self.cfg.d_hidden
        self._add_mlp("exist", d_e, 1)
        for layer in range(self.cfg.gcn_layers):
            self.store.add(f"gcn.{layer}.W_s", (d_n, h))
            self.store.add(f"gcn.{layer}.W_n", (d_n + d_e, h))
            self.store.add(f"gcn.{layer}.W_e", (2 * d_n + d_e, h))
            d_n, d_e = h, h
        self._add_mlp("spatial", self.d_edge_out, len(SPATIAL_RELATIONS))
        if self.cfg.use_action_head:
            self._add_mlp("action", self.d_edge_out, len(self.catalog.actions))
        if self.cfg.use_hand_head:
            self._add_mlp("hand", self.d_node_out, len(self.catalog.hands))
        logger.debug(f"モデル初期化: {len(self.store)}パラメータ, {self.store.num_values()}要素")

    # --- 順伝播 ---------------------------------------------------------------

    def encode(self, node_feats: np.ndarray, edge_feats: np.ndarray,
               src: np.ndarray, dst: np.ndarray) -> Tuple[Tensor, Tensor]:
        """
        GCN による埋め込み更新

        h_i ← ReLU(W_s h_i + mean_j W_n [h_j ‖ e_ij])（近傍は両方向）
        e_ij ← ReLU(W_e [h_i ‖ e_ij ‖ h_j])
        """
        H, E = Tensor(node_feats), Tensor(edge_feats)
        n, m = node_feats.shape[0], edge_feats.shape[0]
        src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)

        receivers = np.concatenate([src, dst])
        senders = np.concatenate([dst, src])
        edge_rows = np.concatenate([np.arange(m), np.arange(m)])
        A = np.zeros((n, 2 * m))
        if m > 0:
            deg = np.bincount(receivers, minlength=n)
            A[receivers, np.arange(2 * m)] = 1.0 / deg[receivers]

        s = self.store
        for layer in range(self.cfg.gcn_layers):
            p = f"gcn.{layer}"
            self_term = matmul(H, s[f"{p}.W_s"])
            if m == 0:
                H_next = relu(self_term)
                E_next = Tensor(np.zeros((0, self.cfg.d_hidden)))
            else:
                messages = concat_cols([gather_rows(H, senders), gather_rows(E, edge_rows)])
                H_next = relu(add(self_term, matmul(spmm(A, messages), s[f"{p}.W_n"])))
                triple = concat_cols([gather_rows(H, src), E, gather_rows(H, dst)])
                E_next = relu(matmul(triple, s[f"{p}.W_e"]))
            H, E = H_next, E_next
        return H, E

    def forward(self, batch: GraphBatch, teacher_forcing: bool = False) -> ForwardOutput:
        exist_logits = self._mlp("exist", Tensor(batch.spatial_feats))
        if teacher_forcing:
            retained = batch.exist_gt > 0.5
        else:
            retained = retention_mask(sigmoid(exist_logits.value[:, 0]), self.cfg.tau)
        keep = np.nonzero(retained)[0]

        edge_feats = np.vstack([batch.spatial_feats[keep], batch.action_feats])
        src = np.concatenate([batch.spatial_src[keep], batch.action_src])
        dst = np.concatenate([batch.spatial_dst[keep], batch.action_dst])
        H, E = self.encode(batch.node_feats, edge_feats, src, dst)

        r, a = keep.size, batch.action_src.size
        action_rows = np.arange(r, r + a)
        spatial_logits = self._mlp("spatial", gather_rows(E, np.arange(r)))
        action_logits = (self.classify_action_edges(E, action_rows)
                         if self.cfg.use_action_head else None)
        hand_logits = self.classify_hand(H, batch.tool_nodes) if self.cfg.use_hand_head else None
        return ForwardOutput(
            exist_logits=exist_logits,
            retained=retained,
            H=H,
            E=E,
            edge_graph=np.concatenate([batch.spatial_graph[keep], batch.action_graph]),
            action_rows=action_rows,
            spatial_logits=spatial_logits,
            action_logits=action_logits,
            hand_logits=hand_logits,
        )

    def classify_action_edges(self, E: Tensor, action_rows: np.ndarray) -> Tensor:
        """行為エッジの埋め込みから行為クラスのロジット"""
        return self._mlp("action", gather_rows(E, action_rows))

    def classify_hand(self, H: Tensor, tool_nodes: np.ndarray) -> Tensor:
        """工具ノードの埋め込みから手の識別ロジット（解剖構造ノードは対象外）"""
        return self._mlp("hand", gather_rows(H, tool_nodes))

    def compute_losses(self, out: ForwardOutput, batch: GraphBatch) -> Tuple[Tensor, LossBreakdown]:
        l_exist = binary_cross_entropy(out.exist_logits, batch.exist_gt)
        l_spatial = cross_entropy(out.spatial_logits, batch.spatial_gt[out.retained])
        l_action = (cross_entropy(out.action_logits, batch.action_gt)
                    if out.action_logits is not None else zeros_loss())
        l_hand = (cross_entropy(out.hand_logits, batch.hand_gt)
                  if out.hand_logits is not None else zeros_loss())

        lg = add(l_exist, l_spatial)
        total = add(add(lg, scale(l_action, self.cfg.lambda_action)), scale(l_hand, self.cfg.lambda_hand))
        breakdown = total_loss(l_exist.item(), l_spatial.item(), l_action.item(), l_hand.item(), self.cfg)
        return total, breakdown

    def loss(self, batch: GraphBatch, teacher_forcing: bool = False) -> Tuple[Tensor, LossBreakdown]:
        return self.compute_losses(self.forward(batch, teacher_forcing), batch)

    def make_batch(self, graphs: Sequence[LatentGraph]) -> GraphBatch:
        return batch_graphs(graphs, self.fp.d_node, self.fp.d_edge)

    def make_builder(self, cache_size: int = 1024) -> GraphBuilder:
        return GraphBuilder(self.fp, cache_size, self.cfg.proximity, self.cfg.inside_threshold)

    # --- 推論 -----------------------------------------------------------------

    def predict_graph(self, frame: FrameAnnotation, builder: Optional[GraphBuilder] = None) -> LatentGraph:
        """
        予測済み潜在グラフ

        保持された空間エッジと全行為エッジを持ち、ラベル欄に予測値が入る
        （spatial_gt / action_gt / hand_gt は予測結果）。
        """
        builder = builder or self.make_builder()
        graph = builder.candidates(frame)
        batch = self.make_batch([graph])
        out = self.forward(batch, teacher_forcing=False)

        proposed = propose_edges(graph, sigmoid(out.exist_logits.value[:, 0]), self.cfg.tau)
        kept = proposed.spatial_edges
        if len(kept) != out.n_retained:
            raise ShapeError(f"{frame.frame_id}: 保持エッジ数 {len(kept)} と順伝播 {out.n_retained} が一致しません")
        relations = out.spatial_logits.value.argmax(axis=1)
        edges: List[Edge] = [
            replace(e, spatial_gt=SPATIAL_RELATIONS[int(rel)], exist_gt=True)
            for e, rel in zip(kept, relations)
        ]
        actions = (out.action_logits.value.argmax(axis=1)
                   if out.action_logits is not None and out.action_logits.shape[0] else None)
        for k, e in enumerate(graph.action_edges):
            edges.append(replace(e, action_gt=None if actions is None else int(actions[k])))

        nodes = list(graph.nodes)
        if out.hand_logits is not None and out.hand_logits.shape[0]:
            hands = out.hand_logits.value.argmax(axis=1)
            for k, idx in enumerate(batch.tool_nodes):
                nodes[idx] = replace(nodes[idx], hand_gt=int(hands[k]))
        return replace(graph, nodes=tuple(nodes), edges=tuple(edges))

    # --- 保存・読み込み ---------------------------------------------------------

    def checkpoint_meta(self) -> Dict[str, Any]:
        return {"kind": "stage1", "model_config": asdict(self.cfg)}

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
        save_checkpoint(self.store, path, catalog_hash(self.catalog), {**self.checkpoint_meta(), **(meta or {})})


class TaskModel:
    """
    第2段階のタスクモデル（SSG-Com + デコーダ）

    出力ロジット = グラフ読み出しの MLP + 行為エッジごとのスコアのグラフ内最大値。
    行為エッジのスコアは、同じ工具から出る行為エッジの中での最大値との差も入力にとる。
    """

    def __init__(self, model: SSGComModel, task: str, labels: List[str],
                 vocab: Optional[List[TripletLabel]] = None):
        if task not in TASKS:
            raise ConfigError(f"未知のタスク: {task}")
        self.model = model
        self.task = task
        self.labels = labels
        self.vocab = vocab
        self.catalog_hash = catalog_hash(model.catalog)
        store = model.store
        if "decoder.graph.fc2.W" in store:
            existing = store["decoder.graph.fc2.W"].shape[1]
            if existing != len(labels):
                raise ConfigError(
                    f"既存のデコーダの出力幅 {existing} が task={task} の {len(labels)} と一致しません")
        else:
            h = model.cfg.d_hidden
            store.add("decoder.item.W", (self.d_item, h))
            store.add("decoder.item.b", (h,), init="zeros")
            model._add_mlp("decoder.edge", 2 * h, len(labels))
            model._add_mlp("decoder.graph", self.d_readout, len(labels))

    @classmethod
    def create(cls, model: SSGComModel, task: str, dataset: Dataset) -> "TaskModel":
        vocab = triplet_vocabulary(dataset) if task == TASK_TRIPLET else None
        if task == TASK_TRIPLET and not vocab:
            raise ConfigError("データセットにトリプレットがありません")
        return cls(model, task, task_label_names(task, dataset, vocab), vocab)

    @property
    def width(self) -> int:
        return len(self.labels)

    @property
    def d_readout(self) -> int:
        m = self.model
        return 2 * m.d_node_out + m.d_edge_out + m.fp.d_node

    @property
    def d_item(self) -> int:
        m = self.model
        n_actions = len(m.catalog.actions) if m.cfg.use_action_head else 0
        return 2 * m.d_node_out + m.d_edge_out + m.fp.d_edge + n_actions

    def readout(self, out: ForwardOutput, batch: GraphBatch) -> Tensor:
        """グラフ読み出し = ノード埋め込みの平均 ‖ 最大 ‖ エッジ埋め込みの平均 ‖ 入力ノード特徴の最大"""
        G = batch.n_graphs
        pool_nodes = _mean_pool_matrix(batch.node_graph, G)
        pool_edges = _mean_pool_matrix(out.edge_graph, G)
        return concat_cols([
            spmm(pool_nodes, out.H),
            segment_max(out.H, batch.node_graph, G),
            spmm(pool_edges, out.E),
            segment_max(Tensor(batch.node_feats), batch.node_graph, G),
        ])

    def action_edge_logits(self, out: ForwardOutput, batch: GraphBatch) -> Tensor:
        """行為エッジごとのロジットをグラフ内で最大プーリング（行為エッジのないグラフは0）"""
        G = batch.n_graphs
        if batch.action_src.size == 0:
            return Tensor(np.zeros((G, self.width)))
        parts = [
            gather_rows(out.H, batch.action_src),
            gather_rows(out.E, out.action_rows),
            gather_rows(out.H, batch.action_dst),
            Tensor(batch.action_feats),
        ]
        if out.action_logits is not None:
            parts.append(out.action_logits)
        s = self.model.store
        u = relu(linear(concat_cols(parts), s["decoder.item.W"], s["decoder.item.b"]))
        # 同じ工具の行為エッジ内での最大値との差（最大の行で0）
        best = gather_rows(segment_max(u, batch.action_src, batch.n_nodes), batch.action_src)
        z = self.model._mlp("decoder.edge", concat_cols([u, add(u, scale(best, -1.0))]))
        return segment_max(z, batch.action_graph, G)

    def decode(self, out: ForwardOutput, batch: GraphBatch) -> Tensor:
        graph_logits = self.model._mlp("decoder.graph", self.readout(out, batch))
        return add(graph_logits, self.action_edge_logits(out, batch))

    def predict_scores(self, frames: Sequence[FrameAnnotation], batch_size: int = 32,
                       builder: Optional[GraphBuilder] = None) -> np.ndarray:
        builder = builder or self.model.make_builder()
        rows = []
        for start in range(0, len(frames), batch_size):
            chunk = frames[start:start + batch_size]
            batch = self.model.make_batch([builder.candidates(f) for f in chunk])
            out = self.model.forward(batch, teacher_forcing=False)
            rows.append(sigmoid(self.decode(out, batch).value))
        return np.vstack(rows) if rows else np.zeros((0, self.width))

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
        task_meta = {
            "kind": "task",
            "task": self.task,
            "labels": self.labels,
            "vocab": None if self.vocab is None else [[v.tool, v.action, v.target] for v in self.vocab],
        }
        self.model.save(path, {**task_meta, **(meta or {})})


def _mean_pool_matrix(owner: np.ndarray, n_groups: int) -> np.ndarray:
    P = np.zeros((n_groups, owner.size))
    if owner.size:
        counts = np.bincount(owner, minlength=n_groups)
        P[owner, np.arange(owner.size)] = 1.0 / counts[owner]
    return P


def load_model(path: str, dataset: Dataset, fp: Optional[FeatureProvider] = None):
    """チェックポイントから SSGComModel または TaskModel を復元"""
    ckpt = load_checkpoint(path)
    if ckpt.catalog_hash != catalog_hash(dataset.catalog):
        raise CatalogMismatchError(f"チェックポイントのカタログがデータセットと一致しません: {path}")
    try:
        cfg = ModelConfig(**ckpt.meta["model_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"チェックポイントにモデル設定がありません: {path}") from e
    fp = fp or FeatureProvider(dataset.catalog, d_appearance=cfg.d_appearance)
    model = SSGComModel(dataset.catalog, fp, cfg)

    kind = ckpt.meta.get("kind", "stage1")
    if kind == "task":
        vocab_raw = ckpt.meta.get("vocab")
        vocab = None if vocab_raw is None else [TripletLabel(*v) for v in vocab_raw]
        task_model = TaskModel(model, ckpt.meta["task"], list(ckpt.meta["labels"]), vocab)
        model.store.load_values(ckpt.params)
        model.store.frozen = set(ckpt.frozen)
        return task_model
    model.store.load_values(ckpt.params)
    return model


# =============================================================================
# 学習
# =============================================================================

@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: Optional[LossBreakdown] = None
    task_loss: Optional[float] = None
    val_map: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "train": self.train.to_dict(),
            "val": None if self.val is None else self.val.to_dict(),
            "task_loss": self.task_loss,
            "val_map": self.val_map,
        }


@dataclass
class Stage1Result:
    model: SSGComModel
    history: List[EpochRecord]
    steps: List[LossBreakdown]
    best_epoch: int


@dataclass
class Stage2Result:
    task_model: TaskModel
    history: List[EpochRecord]
    best_epoch: int


def _chunks(frames: Sequence[FrameAnnotation], order: np.ndarray, size: int) -> List[List[FrameAnnotation]]:
    return [[frames[i] for i in order[k:k + size]] for k in range(0, len(order), size)]


def _evaluate_loss(model: SSGComModel, builder: GraphBuilder, frames: Sequence[FrameAnnotation],
                   batch_size: int, teacher_forcing: bool) -> LossBreakdown:
    parts = []
    for chunk in _chunks(frames, np.arange(len(frames)), batch_size):
        batch = model.make_batch([builder.candidates(f) for f in chunk])
        parts.append(model.loss(batch, teacher_forcing)[1])
    return mean_breakdown(parts, model.cfg)


def train_stage1(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 fp: Optional[FeatureProvider] = None,
                 monitor: Optional[PerformanceMonitor] = None) -> Stage1Result:
    """
    第1段階: 複合損失で潜在グラフを学習

    検証損失 L_total が最小のエポックを採用（検証分割が空なら学習損失）。
    エポック0は学習前の評価。
    """
    train_cfg.validate()
    train = dataset.split_frames("train")
    if not train:
        raise ConfigError("学習分割が空です")
    val = dataset.split_frames("val")

    fp = fp or FeatureProvider(dataset.catalog, d_appearance=model_cfg.d_appearance)
    model = SSGComModel(dataset.catalog, fp, model_cfg)
    builder = model.make_builder(train_cfg.cache_size)
    monitor = monitor or PerformanceMonitor()
    rng = np.random.default_rng(model_cfg.seed)
    tf = train_cfg.teacher_forcing

    def record(epoch: int, train_br: LossBreakdown) -> EpochRecord:
        val_br = _evaluate_loss(model, builder, val, train_cfg.batch_size, tf) if val else None
        return EpochRecord(epoch, train_br, val_br)

    history = [record(0, _evaluate_loss(model, builder, train, train_cfg.batch_size, tf))]
    best_key = (history[0].val or history[0].train).total
    best_epoch, best_values = 0, model.store.snapshot()
    steps: List[LossBreakdown] = []

    for epoch in range(1, train_cfg.epochs + 1):
        monitor.start_operation("stage1_epoch")
        epoch_steps = []
        for chunk in _chunks(train, rng.permutation(len(train)), train_cfg.batch_size):
            batch = model.make_batch([builder.candidates(f) for f in chunk])
            model.store.zero_grad()
            total, breakdown = model.loss(batch, tf)
            total.backward()
            adam_step(model.store, lr=train_cfg.lr)
            epoch_steps.append(breakdown)
        steps.extend(epoch_steps)

        rec = record(epoch, mean_breakdown(epoch_steps, model.cfg))
        history.append(rec)
        key = (rec.val or rec.train).total
        if key < best_key:
            best_key, best_epoch, best_values = key, epoch, model.store.snapshot()
        elapsed = monitor.end_operation("stage1_epoch")
        val_text = f"{rec.val.total:.4f}" if rec.val else "-"
        logger.info(
            f"stage1 epoch {epoch}/{train_cfg.epochs}: exist={rec.train.edge_exist:.4f} "
            f"spatial={rec.train.spatial:.4f} action={rec.train.action:.4f} hand={rec.train.hand:.4f} "
            f"total={rec.train.total:.4f} val_total={val_text} ({elapsed:.2f}s)")

    model.store.restore(best_values)
    logger.info(f"stage1 完了: 採用エポック {best_epoch} (L_total={best_key:.4f}), キャッシュ {builder.get_stats()}")
    return Stage1Result(model, history, steps, best_epoch)


def _validation_map(task_model: TaskModel, frames: Sequence[FrameAnnotation], targets: np.ndarray,
                    builder: GraphBuilder) -> Optional[float]:
    if not frames:
        return None
    scores = task_model.predict_scores(frames, builder=builder)
    return map_multilabel(scores, targets, task_model.labels).map


def _task_loss(task_model: TaskModel, builder: GraphBuilder, frames: Sequence[FrameAnnotation],
               targets: np.ndarray, batch_size: int) -> float:
    losses = []
    for k in range(0, len(frames), batch_size):
        batch = task_model.model.make_batch([builder.candidates(f) for f in frames[k:k + batch_size]])
        out = task_model.model.forward(batch, teacher_forcing=False)
        losses.append(binary_cross_entropy(task_model.decode(out, batch), targets[k:k + batch_size]).item())
    return float(np.mean(losses))


def train_stage2(model: SSGComModel, task: str, dataset: Dataset, train_cfg: TrainConfig,
                 monitor: Optional[PerformanceMonitor] = None) -> Stage2Result:
    """
    第2段階: タスクデコーダを追加して微調整

    特徴量供給はパラメータを持たないため常に固定。train_cfg.freeze の接頭辞に
    一致するパラメータも凍結。検証 mAP 最大のエポック（学習前のエポック0を含む）を採用。
    """
    train_cfg.validate()
    if catalog_hash(model.catalog) != catalog_hash(dataset.catalog):
        raise CatalogMismatchError("第1段階のカタログがデータセットと一致しません")
    train = task_frames(dataset.split_frames("train"), task)
    if not train:
        raise ConfigError(f"学習分割に task={task} のラベルがありません")
    val = task_frames(dataset.split_frames("val"), task)

    task_model = TaskModel.create(model, task, dataset)
    model.store.reset_optimizer()
    frozen = model.store.freeze(train_cfg.freeze)
    if frozen:
        logger.info(f"凍結パラメータ: {frozen}")
    builder = model.make_builder(train_cfg.cache_size)
    monitor = monitor or PerformanceMonitor()
    rng = np.random.default_rng([model.cfg.seed, 2])

    y_train = task_targets(train, task, task_model.vocab)
    y_val = task_targets(val, task, task_model.vocab)
    use_val = bool(val) and bool(y_val.any())

    def select_key(rec: EpochRecord) -> float:
        return rec.val_map if use_val else -rec.task_loss

    def record(epoch: int, train_br: LossBreakdown, task_loss: float) -> EpochRecord:
        val_map = _validation_map(task_model, val, y_val, builder) if use_val else None
        return EpochRecord(epoch, train_br, task_loss=task_loss, val_map=val_map)

    zero_br = total_loss(0.0, 0.0, 0.0, 0.0, model.cfg)
    history = [record(0, zero_br, _task_loss(task_model, builder, train, y_train, train_cfg.batch_size))]
    best_key, best_epoch, best_values = select_key(history[0]), 0, model.store.snapshot()

    for epoch in range(1, train_cfg.epochs + 1):
        monitor.start_operation("stage2_epoch")
        aux_steps, task_losses = [], []
        order = rng.permutation(len(train))
        for k in range(0, len(order), train_cfg.batch_size):
            idx = order[k:k + train_cfg.batch_size]
            batch = model.make_batch([builder.candidates(train[i]) for i in idx])
            model.store.zero_grad()
            out = model.forward(batch, teacher_forcing=False)
            loss = binary_cross_entropy(task_model.decode(out, batch), y_train[idx])
            task_losses.append(loss.item())
            if train_cfg.keep_aux_losses:
                aux, breakdown = model.compute_losses(out, batch)
                aux_steps.append(breakdown)
                loss = add(loss, aux)
            loss.backward()
            adam_step(model.store, lr=train_cfg.lr)

        train_br = mean_breakdown(aux_steps, model.cfg) if aux_steps else zero_br
        rec = record(epoch, train_br, float(np.mean(task_losses)))
        history.append(rec)
        key = select_key(rec)
        if key > best_key:
            best_key, best_epoch, best_values = key, epoch, model.store.snapshot()
        elapsed = monitor.end_operation("stage2_epoch")
        val_text = f"{rec.val_map:.4f}" if rec.val_map is not None else "-"
        logger.info(
            f"stage2[{task}] epoch {epoch}/{train_cfg.epochs}: task_bce={rec.task_loss:.4f} "
            f"aux_total={train_br.total:.4f} val_mAP={val_text} ({elapsed:.2f}s)")

    model.store.restore(best_values)
    logger.info(f"stage2[{task}] 完了: 採用エポック {best_epoch}, 出力幅 {task_model.width}")
    return Stage2Result(task_model, history, best_epoch)


# =============================================================================
# アブレーション
# =============================================================================

ABLATION_VARIANTS = ("spatial-only", "+SAE", "full")


@dataclass
class AblationRow:
    variant: str
    lambda_action: float
    lambda_hand: float
    maps: List[float]

    @property
    def mean_map(self) -> float:
        return float(np.mean(self.maps))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "lambda_action": self.lambda_action,
            "lambda_hand": self.lambda_hand,
            "maps": self.maps,
            "mean_map": self.mean_map,
        }


def _ablation_lambdas(variant: str, cfg: ModelConfig) -> Tuple[float, float]:
    if variant == "spatial-only":
        return 0.0, 0.0
    if variant == "+SAE":
        return cfg.lambda_action, 0.0
    return cfg.lambda_action, cfg.lambda_hand


def run_ablation(dataset: Dataset, seeds: Sequence[int], model_cfg: ModelConfig, train_cfg: TrainConfig,
                 include_generic: bool = False, split: str = "test",
                 monitor: Optional[PerformanceMonitor] = None) -> List[AblationRow]:
    """λ の組み合わせごとに2段階学習し、テストのトリプレット mAP を平均"""
    variants = [(name, dataset) for name in ABLATION_VARIANTS]
    if include_generic:
        variants.append(("generic-tool", collapse_tool_classes(dataset)))

    rows = []
    for name, data in variants:
        lam_a, lam_h = _ablation_lambdas(name, model_cfg)
        maps = []
        for seed in seeds:
            cfg = replace(model_cfg, lambda_action=lam_a, lambda_hand=lam_h, seed=int(seed))
            stage1 = train_stage1(data, cfg, train_cfg, monitor=monitor)
            stage2 = train_stage2(stage1.model, TASK_TRIPLET, data, train_cfg, monitor=monitor)
            report = evaluate(stage2.task_model, data, split, TASK_TRIPLET)
            maps.append(report.map)
        row = AblationRow(name, lam_a, lam_h, maps)
        logger.info(f"アブレーション {name}: mAP={row.mean_map:.4f} (seeds={list(seeds)})")
        rows.append(row)
    return rows
