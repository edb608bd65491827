# -*- coding: utf-8 -*-
"""例外階層とエラー分類のテスト"""

import os
import sys
import unittest

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'core'))

from sg_errors import (
    AnnotationError, CatalogMismatchError, CheckpointError, ConfigError, DanglingReferenceError,
    ErrorContext, ErrorType, MetricError, NumericalError, SceneGraphError, ShapeError, classify_error,
)


class TestErrorHierarchy(unittest.TestCase):
    """例外階層のテスト"""

    def test_all_errors_share_base(self):
        """すべての例外が SceneGraphError を継承する"""
        for cls in (AnnotationError, ShapeError, NumericalError, ConfigError, CheckpointError, MetricError):
            self.assertTrue(issubclass(cls, SceneGraphError))

    def test_dangling_reference_carries_rule_and_ref(self):
        """参照切れはルール名と参照IDを保持する"""
        err = DanglingReferenceError("missing", ref="obj7", frame_id="f1")
        self.assertEqual(err.rule, "dangling-reference")
        self.assertEqual(err.ref, "obj7")
        self.assertEqual(err.frame_id, "f1")
        self.assertIsInstance(err, AnnotationError)

    def test_catalog_mismatch_rule(self):
        """カタログ不一致のルール名"""
        self.assertEqual(CatalogMismatchError("x").rule, "catalog-count")


class TestClassifyError(unittest.TestCase):
    """エラー分類と終了コードのテスト"""

    def test_exit_codes(self):
        """検証・指標の失敗は 1、I/O・設定は 2"""
        cases = [
            (AnnotationError("bad"), ErrorType.VALIDATION, 1),
            (CatalogMismatchError("bad"), ErrorType.VALIDATION, 1),
            (MetricError("bad"), ErrorType.METRIC, 1),
            (NumericalError("nan"), ErrorType.NUMERICAL, 1),
            (ConfigError("bad"), ErrorType.CONFIG, 2),
            (CheckpointError("bad"), ErrorType.CONFIG, 2),
            (FileNotFoundError("nope"), ErrorType.IO, 2),
            (RuntimeError("boom"), ErrorType.UNKNOWN, 2),
        ]
        for error, expected_type, expected_code in cases:
            with self.subTest(error=type(error).__name__):
                error_type = classify_error(error)
                self.assertEqual(error_type, expected_type)
                context = ErrorContext(error_type, error, "validate")
                self.assertEqual(context.exit_code, expected_code)


if __name__ == "__main__":
    unittest.main()
