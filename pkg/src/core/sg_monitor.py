# -*- coding: utf-8 -*-
"""
学習・評価のパフォーマンス監視（所要時間と RSS メモリ）
"""

import json
import logging
import time
from collections import defaultdict
from typing import Any, Dict

import psutil

logger = logging.getLogger(__name__)


class PerformanceMonitor:
    """パフォーマンス監視"""

    def __init__(self):
        self.operations = defaultdict(list)
        self.active_operations = {}

    def start_operation(self, operation_name: str) -> None:
        """操作開始"""
        self.active_operations[operation_name] = {
            "start_time": time.perf_counter(),
            "memory_before": self._get_memory_usage(),
        }

    def end_operation(self, operation_name: str) -> float:
        """操作終了（所要秒数を返す）"""
        op_data = self.active_operations.pop(operation_name, None)
        if op_data is None:
            logger.warning(f"開始されていない操作です: {operation_name}")
            return 0.0
        duration = time.perf_counter() - op_data["start_time"]
        self.operations[operation_name].append({
            "duration": duration,
            "memory_delta": self._get_memory_usage() - op_data["memory_before"],
        })
        return duration

    def _get_memory_usage(self) -> float:
        """メモリ使用量取得（MB）"""
        try:
            return psutil.Process().memory_info().rss / 1024 / 1024
        except psutil.Error:
            return 0.0

    def get_stats(self) -> Dict[str, Any]:
        """統計取得"""
        stats = {}
        for op_name, op_data in self.operations.items():
            durations = [op["duration"] for op in op_data]
            memory_deltas = [op["memory_delta"] for op in op_data]
            stats[op_name] = {
                "count": len(op_data),
                "avg_duration": sum(durations) / len(durations),
                "max_duration": max(durations),
                "min_duration": min(durations),
                "avg_memory_delta": sum(memory_deltas) / len(memory_deltas),
                "total_duration": sum(durations),
            }
        return stats

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.get_stats(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
