# -*- coding: utf-8 -*-
"""
手術シーングラフ パイプライン共通の例外定義

Features:
- 例外階層（SceneGraphError を基底とする）
- エラータイプの分類と終了コードへの対応付け
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional


class SceneGraphError(Exception):
    """パイプライン全体の基底例外"""


class AnnotationError(SceneGraphError):
    """アノテーション構造の不正（rule は機械可読なルール名）"""

    def __init__(self, message: str, rule: str = "schema", frame_id: Optional[str] = None):
        super().__init__(message)
        self.rule = rule
        self.frame_id = frame_id


class DanglingReferenceError(AnnotationError):
    """存在しないオブジェクトIDへの参照"""

    def __init__(self, message: str, ref: str, frame_id: Optional[str] = None):
        super().__init__(message, rule="dangling-reference", frame_id=frame_id)
        self.ref = ref


class CatalogMismatchError(AnnotationError):
    """カタログのクラス数・ハッシュ不一致"""

    def __init__(self, message: str):
        super().__init__(message, rule="catalog-count")


class ShapeError(SceneGraphError):
    """テンソル・特徴量の次元不一致"""


class NumericalError(SceneGraphError):
    """NaN / inf の検出"""


class ConfigError(SceneGraphError):
    """設定ファイル・フラグの不正"""


class CheckpointError(SceneGraphError):
    """チェックポイントの読み書き・整合性エラー"""


class MetricError(SceneGraphError):
    """評価指標が定義できない（正例ゼロなど）"""


class ErrorType(Enum):
    """エラータイプの分類"""
    VALIDATION = "validation"
    METRIC = "metric"
    IO = "io"
    CONFIG = "config"
    NUMERICAL = "numerical"
    UNKNOWN = "unknown"


# 終了コード: 0 成功, 1 検証・指標の失敗, 2 I/O・設定エラー
EXIT_CODES: Dict[ErrorType, int] = {
    ErrorType.VALIDATION: 1,
    ErrorType.METRIC: 1,
    ErrorType.NUMERICAL: 1,
    ErrorType.IO: 2,
    ErrorType.CONFIG: 2,
    ErrorType.UNKNOWN: 2,
}


@dataclass
class ErrorContext:
    """エラー文脈情報"""
    error_type: ErrorType
    original_error: Exception
    command: str
    parameters: Dict[str, Any] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.error_type]


def classify_error(error: Exception) -> ErrorType:
    """例外をエラータイプに分類"""
    if isinstance(error, (AnnotationError, CatalogMismatchError)):
        return ErrorType.VALIDATION
    if isinstance(error, MetricError):
        return ErrorType.METRIC
    if isinstance(error, NumericalError):
        return ErrorType.NUMERICAL
    if isinstance(error, (ConfigError, CheckpointError, ShapeError)):
        return ErrorType.CONFIG
    if isinstance(error, (OSError, UnicodeDecodeError)):
        return ErrorType.IO
    return ErrorType.UNKNOWN
