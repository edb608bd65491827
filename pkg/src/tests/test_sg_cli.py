# -*- coding: utf-8 -*-
"""
パイプライン CLI のテスト

Features:
- validate / stats / export-dot の出力と終了コード
- synth → train（第1・第2段階）→ eval の一連の流れ
- 設定ファイルとフラグの優先順位
"""

import io
import json
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from unittest.mock import patch

import yaml

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'core'))
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'interfaces'))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from sg201_fixture import single_frame_dataset, tool_anatomy_frame
from sg_cli import main
from sg_schema import FrameAnnotation, serialize_dataset

TINY_CONFIG = {
    "synth": {"n_train": 12, "n_val": 4, "n_test": 8},
    "model": {"d_hidden": 8},
    "train": {"epochs": 2, "batch_size": 4},
}


def run_cli(argv):
    """CLI を実行して (終了コード, stdout, stderr) を返す"""
    out, err = io.StringIO(), io.StringIO()
    with patch.object(sys, "stdout", out), patch.object(sys, "stderr", err):
        code = main(argv + ["--no-color"])
    return code, out.getvalue(), err.getvalue()


class CLITestCase(unittest.TestCase):
    """一時ディレクトリ付きの基底クラス"""

    def setUp(self):
        """テスト準備"""
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def write_dataset(self, frames, name="data.json"):
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(serialize_dataset(single_frame_dataset(frames)))
        return path

    def write_config(self, data, name="config.yaml"):
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f)
        return path


class TestValidateCommand(CLITestCase):
    """validate コマンドのテスト"""

    def test_valid_dataset(self):
        """違反なしなら終了コード 0"""
        code, out, _ = run_cli(["validate", "--dataset", self.write_dataset([tool_anatomy_frame()])])
        self.assertEqual(code, 0)
        self.assertIn("違反なし", out)

    def test_missing_hand(self):
        """工具の手が欠けていれば 1、違反ルール名を表示"""
        frame = tool_anatomy_frame()
        tool = replace(frame.objects[0], hand=None)
        frame = replace(frame, objects=(tool,) + frame.objects[1:])
        code, out, err = run_cli(["validate", "--dataset", self.write_dataset([frame])])
        self.assertEqual(code, 1)
        self.assertIn("hand-required", out)
        self.assertIn("エラー", err)

    def test_json_report(self):
        """JSON 形式の検証結果"""
        code, out, _ = run_cli(["validate", "--dataset", self.write_dataset([tool_anatomy_frame()]),
                                "--format", "json", "--quiet"])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["violations"], [])

    def test_missing_file(self):
        """存在しないファイルは入出力エラー（2）"""
        code, _, err = run_cli(["validate", "--dataset", self.path("nope.json")])
        self.assertEqual(code, 2)
        self.assertIn("❌", err)

    def test_malformed_json(self):
        """JSON の形式エラーは検証エラー（1）"""
        path = self.path("broken.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write("{not json")
        code, _, _ = run_cli(["validate", "--dataset", path])
        self.assertEqual(code, 1)


class TestStatsCommand(CLITestCase):
    """stats コマンドのテスト"""

    def test_train_row_csv(self):
        """train 分割の1行（工具・行為・手の順）"""
        path = self.write_dataset([tool_anatomy_frame()])
        code, out, _ = run_cli(["stats", "--dataset", path, "--split", "train", "--format", "csv",
                                 "--out", self.path("stats")])
        self.assertEqual(code, 0)
        lines = out.strip().splitlines()
        self.assertTrue(lines[0].startswith("split,Hook,Grasper"))
        self.assertEqual(lines[1], "train,1,0,0,0,0,0,1,0,0,0,0,0,1,0,0")
        self.assertEqual(len(lines), 2)

    def test_all_splits_with_total(self):
        """--split all は3分割と合計"""
        path = self.write_dataset([tool_anatomy_frame()])
        code, out, _ = run_cli(["stats", "--dataset", path, "--split", "all", "--format", "csv",
                                 "--out", self.path("stats")])
        self.assertEqual(code, 0)
        names = [line.split(",")[0] for line in out.strip().splitlines()[1:]]
        self.assertEqual(names, ["train", "val", "test", "total"])

    def test_text_output_also_writes_csv(self):
        """text 表示でも stats_<split>.csv を --out に書き出す"""
        path = self.write_dataset([tool_anatomy_frame()])
        out_dir = self.path("stats")
        code, out, _ = run_cli(["stats", "--dataset", path, "--split", "train", "--format", "text",
                                 "--out", out_dir])
        self.assertEqual(code, 0)
        self.assertIn("| split", out)
        with open(os.path.join(out_dir, "stats_train.csv"), encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertTrue(lines[0].startswith("split,Hook,Grasper"))
        self.assertEqual(lines[1], "train,1,0,0,0,0,0,1,0,0,0,0,0,1,0,0")


class TestExportDotCommand(CLITestCase):
    """export-dot コマンドのテスト"""

    def test_ground_truth_graph(self):
        """行為エッジは破線、工具ノードに手を付記"""
        path = self.write_dataset([tool_anatomy_frame()])
        code, out, _ = run_cli(["export-dot", "--dataset", path, "--frame-id", "f0001"])
        self.assertEqual(code, 0)
        self.assertIn("digraph", out)
        self.assertIn("Dissect", out)
        self.assertIn("style=dashed", out)
        self.assertIn("Hook (Rt)", out)

    def test_empty_frame(self):
        """オブジェクトのないフレームはエッジなし"""
        empty = FrameAnnotation("f0009", "video01", 854.0, 480.0)
        path = self.write_dataset([tool_anatomy_frame(), empty])
        code, out, _ = run_cli(["export-dot", "--dataset", path, "--frame-id", "f0009"])
        self.assertEqual(code, 0)
        self.assertNotIn("->", out)

    def test_unknown_frame(self):
        """存在しないフレームIDは設定エラー"""
        path = self.write_dataset([tool_anatomy_frame()])
        code, _, _ = run_cli(["export-dot", "--dataset", path, "--frame-id", "missing"])
        self.assertEqual(code, 2)


class TestPipeline(CLITestCase):
    """synth → train → eval の流れ"""

    def _run_pipeline(self, out_dir):
        config = self.write_config(TINY_CONFIG)
        common = ["--config", config, "--out", out_dir, "--seed", "1", "--quiet"]
        dataset = os.path.join(out_dir, "dataset.json")
        self.assertEqual(run_cli(["synth"] + common)[0], 0)
        self.assertEqual(run_cli(["train", "--stage", "1", "--dataset", dataset] + common)[0], 0)
        self.assertEqual(run_cli(["train", "--stage", "2", "--task", "triplet", "--dataset", dataset] + common)[0], 0)
        code, out, _ = run_cli(["eval", "--task", "triplet", "--split", "test", "--dataset", dataset] + common)
        self.assertEqual(code, 0)
        self.assertIn("label", out)
        with open(os.path.join(out_dir, "metrics_triplet_test.csv"), "rb") as f:
            return f.read()

    def test_end_to_end(self):
        """各段階の成果物が揃い、再実行で指標ファイルが一致"""
        first = self._run_pipeline(self.path("run1"))
        for name in ("dataset.json", "stage1.ckpt.json", "stage2_triplet.model.json",
                     "metrics_triplet_test.json", "manifest_synth.json", "manifest_train_stage1.json",
                     "manifest_eval_triplet_test.json"):
            self.assertTrue(os.path.exists(self.path("run1", name)), name)
        self.assertTrue(first.startswith(b"label,ap,positives\n"))
        second = self._run_pipeline(self.path("run2"))
        self.assertEqual(first, second)

    def test_echo_model_cvs(self):
        """正解ラベルを返す診断モデルで CVS の mAP は 1"""
        config = self.write_config({"synth": {"n_train": 4, "n_val": 4, "n_test": 40}})
        out_dir = self.path("echo")
        self.assertEqual(run_cli(["synth", "--config", config, "--out", out_dir])[0], 0)
        code, out, _ = run_cli(["eval", "--task", "cvs", "--model", "echo", "--config", config,
                                "--dataset", os.path.join(out_dir, "dataset.json"), "--out", out_dir])
        self.assertEqual(code, 0)
        self.assertIn("mAP = 1.0000", out)
        with open(os.path.join(out_dir, "metrics_cvs_test.json"), encoding="utf-8") as f:
            self.assertEqual(json.load(f)["mAP"], 1.0)


class TestConfigPrecedence(CLITestCase):
    """設定ファイルとフラグのテスト"""

    def test_unknown_config_key(self):
        """未知の設定キーは設定エラー（2）"""
        config = self.write_config({"model": {"hidden_size": 16}})
        code, _, err = run_cli(["synth", "--config", config, "--out", self.path("x")])
        self.assertEqual(code, 2)
        self.assertIn("model.hidden_size", err)

    def test_flag_overrides_config(self):
        """フラグは設定ファイルより優先、シードは合成設定にも伝播"""
        config = self.write_config({"seed": 3, "synth": {"n_train": 2, "n_val": 1, "n_test": 1}})
        out_dir = self.path("flags")
        code, _, _ = run_cli(["synth", "--config", config, "--seed", "5", "--out", out_dir, "--quiet"])
        self.assertEqual(code, 0)
        with open(os.path.join(out_dir, "manifest_synth.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["seed"], 5)
        self.assertEqual(manifest["config"]["synth"]["seed"], 5)
        self.assertEqual(manifest["config"]["model"]["seed"], 5)
        self.assertEqual(manifest["metrics"]["frames"], 4)

    def _synth_manifest(self, data, *flags):
        config = self.write_config(dict(data, synth=dict(data.get("synth", {}), n_train=2, n_val=1, n_test=1)))
        out_dir = self.path("seeds")
        code, _, err = run_cli(["synth", "--config", config, "--out", out_dir, "--quiet", *flags])
        if code != 0:
            return code, err
        with open(os.path.join(out_dir, "manifest_synth.json"), encoding="utf-8") as f:
            return code, json.load(f)

    def test_section_seed_kept_without_flag(self):
        """セクションの seed はフラグがなければそのまま"""
        code, manifest = self._synth_manifest({"model": {"seed": 7}, "synth": {"seed": 4}})
        self.assertEqual(code, 0)
        self.assertEqual(manifest["config"]["model"]["seed"], 7)
        self.assertEqual(manifest["config"]["synth"]["seed"], 4)

    def test_top_level_seed_from_file(self):
        """設定ファイル最上位の seed は各セクションへ伝播"""
        code, manifest = self._synth_manifest({"seed": 3})
        self.assertEqual(code, 0)
        self.assertEqual((manifest["seed"], manifest["config"]["model"]["seed"],
                          manifest["config"]["synth"]["seed"]), (3, 3, 3))

    def test_conflicting_seeds(self):
        """最上位とセクションの seed が食い違えば設定エラー（2）"""
        code, err = self._synth_manifest({"seed": 3, "model": {"seed": 7}})
        self.assertEqual(code, 2)
        self.assertIn("model.seed", err)

    def test_seed_flag_overrides_sections(self):
        """--seed はセクションの seed より優先"""
        code, manifest = self._synth_manifest({"model": {"seed": 7}}, "--seed", "9")
        self.assertEqual(code, 0)
        self.assertEqual(manifest["config"]["model"]["seed"], 9)
        self.assertEqual(manifest["config"]["synth"]["seed"], 9)

    def test_invalid_lambda(self):
        """負の λ は設定エラー"""
        code, _, _ = run_cli(["synth", "--lambda-action", "-1", "--out", self.path("y")])
        self.assertEqual(code, 2)


if __name__ == "__main__":
    unittest.main()
