# -*- coding: utf-8 -*-
"""
平均適合率（AP）と mAP による評価

Features:
- 非補間 AP（同点は入力順で安定に順位付け）
- 多ラベル mAP（正例のないラベルは除外して報告）
- CVS / トリプレット認識タスクのラベル行列
- 指標レポートの CSV / JSON 出力
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from sg_errors import CatalogMismatchError, ConfigError, MetricError, ShapeError
from sg_schema import Dataset, FrameAnnotation, TripletLabel, catalog_hash, frame_triplet_labels, triplet_vocabulary

logger = logging.getLogger(__name__)

TASK_CVS = "cvs"
TASK_TRIPLET = "triplet"
TASKS = (TASK_CVS, TASK_TRIPLET)
CVS_LABELS = ("C1_TwoStructures", "C2_HCTDissection", "C3_CysticPlate")


@dataclass
class MetricsReport:
    """ラベルごとの AP と mAP"""
    task: str
    split: str
    labels: List[str]
    ap: List[Optional[float]]
    positives: List[int]
    n_frames: int
    map: Optional[float] = None

    @property
    def undefined_labels(self) -> List[str]:
        return [name for name, ap in zip(self.labels, self.ap) if ap is None]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            "label": self.labels,
            "ap": [np.nan if ap is None else ap for ap in self.ap],
            "positives": self.positives,
        })

    def summary(self, seed: Optional[int] = None, config_hash: Optional[str] = None) -> Dict[str, Any]:
        return {
            "task": self.task,
            "split": self.split,
            "mAP": self.map,
            "n_frames": self.n_frames,
            "n_labels": len(self.labels),
            "undefined_labels": self.undefined_labels,
            "seed": seed,
            "config_hash": config_hash,
        }


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """
    非補間 AP = Σ(正例の順位での適合率) / 正例数

    スコア降順、同点は入力順。正例がなければ None（未定義）。
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"スコアとラベルの数が一致しません: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None

    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.arange(1, hits.size + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / n_pos)


def map_multilabel(scores: np.ndarray, labels: np.ndarray, label_names: Optional[Sequence[str]] = None,
                   task: str = "", split: str = "") -> MetricsReport:
    """ラベルごとの AP と、正例のあるラベルでの平均"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"スコア行列とラベル行列の形状が一致しません: {scores.shape} vs {labels.shape}")
    n_frames, n_labels = scores.shape
    names = list(label_names) if label_names is not None else [str(i) for i in range(n_labels)]
    if len(names) != n_labels:
        raise ShapeError(f"ラベル名の数 {len(names)} が列数 {n_labels} と一致しません")

    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(n_labels)]
    defined = [ap for ap in aps if ap is not None]
    report = MetricsReport(
        task=task,
        split=split,
        labels=names,
        ap=aps,
        positives=[int(np.asarray(labels[:, k]).astype(bool).sum()) for k in range(n_labels)],
        n_frames=n_frames,
        map=float(np.mean(defined)) if defined else None,
    )
    if report.undefined_labels:
        logger.info(f"正例のないラベルを mAP から除外: {report.undefined_labels}")
    return report


# =============================================================================
# タスクラベル
# =============================================================================

def task_frames(frames: Sequence[FrameAnnotation], task: str) -> List[FrameAnnotation]:
    """タスクのラベルを持つフレーム（CVS はラベル付きフレームのみ）"""
    if task == TASK_CVS:
        return [f for f in frames if f.cvs is not None]
    if task == TASK_TRIPLET:
        return list(frames)
    raise ConfigError(f"未知のタスク: {task}")


def task_label_names(task: str, dataset: Dataset,
                     vocab: Optional[Sequence[TripletLabel]] = None) -> List[str]:
    if task == TASK_CVS:
        return list(CVS_LABELS)
    vocab = vocab if vocab is not None else triplet_vocabulary(dataset)
    return [label.name(dataset.catalog) for label in vocab]


def task_targets(frames: Sequence[FrameAnnotation], task: str,
                 vocab: Optional[Sequence[TripletLabel]] = None) -> np.ndarray:
    """フレーム × ラベルの 0/1 行列"""
    if task == TASK_CVS:
        rows = []
        for f in frames:
            if f.cvs is None:
                raise ConfigError(f"フレーム {f.frame_id} に CVS ラベルがありません")
            rows.append([1.0 if c else 0.0 for c in f.cvs])
        return np.asarray(rows, dtype=np.float64).reshape(len(frames), len(CVS_LABELS))
    if task != TASK_TRIPLET:
        raise ConfigError(f"未知のタスク: {task}")
    index = {label: k for k, label in enumerate(vocab or [])}
    targets = np.zeros((len(frames), len(index)))
    for r, f in enumerate(frames):
        for label in frame_triplet_labels(f):
            k = index.get(label)
            if k is not None:
                targets[r, k] = 1.0
    return targets


class ScoringModel(Protocol):
    task: str
    labels: List[str]
    vocab: Optional[List[TripletLabel]]
    catalog_hash: str

    def predict_scores(self, frames: Sequence[FrameAnnotation]) -> np.ndarray:
        ...


class LabelEchoModel:
    """正解ラベルをそのままスコアとして返す診断用モデル"""

    def __init__(self, dataset: Dataset, task: str):
        self.task = task
        self.vocab = triplet_vocabulary(dataset) if task == TASK_TRIPLET else None
        self.labels = task_label_names(task, dataset, self.vocab)
        self.catalog_hash = catalog_hash(dataset.catalog)

    def predict_scores(self, frames: Sequence[FrameAnnotation]) -> np.ndarray:
        return task_targets(frames, self.task, self.vocab)


def evaluate(model: ScoringModel, dataset: Dataset, split: str, task: str) -> MetricsReport:
    """分割上の決定的な推論と mAP 計算"""
    if model.task != task:
        raise ConfigError(f"モデルのタスク {model.task} と評価タスク {task} が一致しません")
    if model.catalog_hash != catalog_hash(dataset.catalog):
        raise CatalogMismatchError("モデルとデータセットのカタログが一致しません")
    frames = task_frames(dataset.split_frames(split), task)
    if not frames:
        raise MetricError(f"分割 {split} に評価対象フレームがありません（task={task}）")

    scores = model.predict_scores(frames)
    targets = task_targets(frames, task, model.vocab)
    report = map_multilabel(scores, targets, model.labels, task=task, split=split)
    if report.map is None:
        raise MetricError(f"分割 {split} のどのラベルにも正例がありません（task={task}）")
    logger.info(f"評価完了: task={task} split={split} mAP={report.map:.4f} ({len(frames)}フレーム)")
    return report


def write_report(report: MetricsReport, out_dir: str, seed: Optional[int] = None,
                 config_hash: Optional[str] = None) -> Tuple[str, str]:
    """metrics_{task}_{split}.csv と同名の .json を書き出す"""
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"metrics_{report.task}_{report.split}")
    csv_path, json_path = stem + ".csv", stem + ".json"
    report.to_dataframe().to_csv(csv_path, index=False, na_rep="", lineterminator="\n")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.summary(seed, config_hash), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"指標を書き出しました: {csv_path}, {json_path}")
    return csv_path, json_path
