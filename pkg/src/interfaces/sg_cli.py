#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
手術シーングラフ（SSG-Com）パイプライン CLI

アノテーションの検証・集計から合成データ生成、2段階学習、評価までを
1つのコマンドにまとめる。

Usage:
    sg_cli.py validate --dataset data/sg201.json
    sg_cli.py stats --dataset data/sg201.json --split train --format csv
    sg_cli.py export-dot --dataset data/sg201.json --frame-id f0001 [--model runs/x/stage1.ckpt.json]
    sg_cli.py synth --out runs/synth --seed 0
    sg_cli.py train --stage 1 --dataset runs/synth/dataset.json --out runs/synth
    sg_cli.py train --stage 2 --task triplet --dataset runs/synth/dataset.json --out runs/synth
    sg_cli.py eval --task triplet --model runs/synth/stage2_triplet.model.json --dataset ...
    sg_cli.py ablate --dataset runs/synth/dataset.json --seeds 0,1,2
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, List, Optional

import colorama
import pandas as pd
import yaml
from colorama import Fore, Style
from dotenv import load_dotenv
from graphviz import Digraph
from tabulate import tabulate

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'core'))

from sg_errors import ConfigError, ErrorContext, classify_error
from sg_eval import TASKS, LabelEchoModel, evaluate, write_report
from sg_graph import EdgeKind, FeatureProvider, GraphBuilder, LatentGraph
from sg_model import (
    ModelConfig, TaskModel, TrainConfig, load_model, run_ablation, train_stage1, train_stage2,
)
from sg_monitor import PerformanceMonitor
from sg_schema import (
    PROFILE_GENERIC, PROFILE_SG201, SPLITS, ClassCatalog, Dataset, collapse_tool_classes, compute_stats,
    load_dataset, serialize_dataset, validate,
)
from sg_synth import SynthConfig, generate_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'


# =============================================================================
# 設定
# =============================================================================

@dataclass
class RunConfig:
    """実行設定（既定値 → 設定ファイル → フラグ の順に上書き）"""
    dataset: Optional[str] = None
    out: str = "runs/latest"
    task: str = "triplet"
    split: str = "test"
    seed: int = 0
    profile: str = PROFILE_SG201
    features: Optional[str] = None
    collapse_tools: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _merge(obj: Any, data: Dict[str, Any], where: str) -> Any:
    """dataclass に辞書を再帰的に上書き（未知のキーは ConfigError）"""
    if not isinstance(data, dict):
        raise ConfigError(f"設定 {where or '<root>'} は辞書である必要があります")
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"未知の設定キー: {path}")
        current = getattr(obj, key)
        if is_dataclass(current):
            value = _merge(current, value, path)
        elif key == "action_rules":
            value = {tool: (rule[0], dict(rule[1])) for tool, rule in value.items()}
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        updates[key] = value
    return replace(obj, **updates)


def load_run_config(path: Optional[str]) -> RunConfig:
    """
    設定ファイル読み込み（YAML / JSON）

    最上位の seed があれば model.seed / synth.seed に伝播する。
    各セクションの seed と食い違う場合は ConfigError。
    """
    config = RunConfig()
    if not path:
        return config
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"設定ファイルの形式エラー: {path}: {e}") from e
    config = _merge(config, data, "")
    if "seed" not in data:
        return config
    for section in ("model", "synth"):
        section_seed = (data.get(section) or {}).get("seed")
        if section_seed is not None and section_seed != config.seed:
            raise ConfigError(f"seed ({config.seed}) と {section}.seed ({section_seed}) が食い違っています")
    return with_seed(config, config.seed)


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(config, seed=seed, model=replace(config.model, seed=seed),
                   synth=replace(config.synth, seed=seed))


def apply_flags(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """フラグで上書き（--seed は model.seed / synth.seed にも伝播）"""
    top = {}
    for key in ("dataset", "out", "task", "split", "features"):
        value = getattr(args, key, None)
        if value is not None:
            top[key] = value
    if getattr(args, "collapse_tools", False):
        top["collapse_tools"] = True
    if getattr(args, "profile", None):
        top["profile"] = args.profile
    config = replace(config, **top)
    if getattr(args, "seed", None) is not None:
        config = with_seed(config, args.seed)

    model = {}
    for flag, key in (("lambda_action", "lambda_action"), ("lambda_hand", "lambda_hand"), ("tau", "tau")):
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    train = {}
    for flag in ("epochs", "lr", "batch_size"):
        value = getattr(args, flag, None)
        if value is not None:
            train[flag] = value

    config = replace(
        config,
        model=replace(config.model, **model),
        train=replace(config.train, **train),
    )
    if config.task not in TASKS:
        raise ConfigError(f"未知のタスク: {config.task}")
    if config.split not in SPLITS + ("all",):
        raise ConfigError(f"未知の分割: {config.split}")
    config.model.validate()
    config.train.validate()
    return config


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: str, run: str, config: RunConfig, inputs: List[str],
                   metrics: Dict[str, Any]) -> str:
    """実行マニフェスト（設定・シード・入力ハッシュ・指標）"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"manifest_{run}.json")
    manifest = {
        "run": run,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "inputs": {p: sha256_file(p) for p in inputs},
        "metrics": metrics,
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path


# =============================================================================
# 出力
# =============================================================================

class OutputFormatter:
    """出力フォーマッタ"""

    def __init__(self, format_type: str = "text", use_color: bool = True, quiet: bool = False):
        self.format_type = format_type.lower()
        self.use_color = use_color
        self.quiet = quiet

    def format_table(self, headers: List[str], rows: List[List[Any]]) -> str:
        """表をフォーマット"""
        if self.format_type == "json":
            return json.dumps([dict(zip(headers, r)) for r in rows], ensure_ascii=False, indent=2)
        if self.format_type == "csv":
            return pd.DataFrame(rows, columns=headers).to_csv(index=False, lineterminator="\n").rstrip("\n")
        return tabulate(rows, headers=headers, tablefmt="github")

    def print_error(self, error: str, operation: str = ""):
        """エラー出力"""
        where = f" [{operation}]" if operation else ""
        if self.use_color:
            print(f"{Fore.RED}❌ エラー{where}: {error}{Style.RESET_ALL}", file=sys.stderr)
        else:
            print(f"❌ エラー{where}: {error}", file=sys.stderr)

    def print_info(self, message: str):
        """情報出力"""
        if self.quiet:
            return
        if self.use_color:
            print(f"{Fore.BLUE}ℹ️  {message}{Style.RESET_ALL}")
        else:
            print(f"ℹ️  {message}")

    def print_success(self, message: str):
        """成功出力"""
        if self.quiet:
            return
        if self.use_color:
            print(f"{Fore.GREEN}✅ {message}{Style.RESET_ALL}")
        else:
            print(f"✅ {message}")


def graph_to_dot(graph: LatentGraph, catalog: ClassCatalog) -> str:
    """
    DOT 形式への変換

    空間エッジは実線（関係名ラベル）、行為エッジは破線（行為名ラベル、null 行為は省略）。
    工具ノードには手の識別を付記する。
    """
    dot = Digraph(name=f"frame_{graph.frame_id}")
    for i, node in enumerate(graph.nodes):
        name = catalog.names(node.kind)[node.class_index]
        if node.is_tool:
            hand = catalog.hands[node.hand_gt] if node.hand_gt is not None else "?"
            dot.node(f"n{i}", f"{name} ({hand})", shape="box")
        else:
            dot.node(f"n{i}", name, shape="ellipse")
    for e in graph.edges:
        if e.kind is EdgeKind.SPATIAL:
            label = e.spatial_gt.value if e.spatial_gt is not None else ""
            dot.edge(f"n{e.src}", f"n{e.dst}", label=label, style="solid", dir="none")
        elif e.action_gt is not None and e.action_gt != catalog.null_action_index:
            dot.edge(f"n{e.src}", f"n{e.dst}", label=catalog.actions[e.action_gt], style="dashed")
    return dot.source


# =============================================================================
# コマンド
# =============================================================================

class SceneGraphCLI:
    """SSG-Com パイプライン CLI"""

    def __init__(self, config: RunConfig, formatter: OutputFormatter):
        self.config = config
        self.formatter = formatter
        self.monitor = PerformanceMonitor()

    def _dataset_path(self) -> str:
        if not self.config.dataset:
            raise ConfigError("--dataset が指定されていません")
        return self.config.dataset

    def _load(self) -> Dataset:
        dataset = load_dataset(self._dataset_path(), profile=self.config.profile)
        if self.config.collapse_tools:
            dataset = collapse_tool_classes(dataset)
        return dataset

    def _feature_provider(self, dataset: Dataset) -> FeatureProvider:
        if self.config.features:
            return FeatureProvider.from_sidecar(self.config.features, dataset.catalog)
        return FeatureProvider(dataset.catalog, d_appearance=self.config.model.d_appearance)

    def _inputs(self, *extra: Optional[str]) -> List[str]:
        paths = [self.config.dataset, self.config.features, *extra]
        return [p for p in paths if p]

    def _save_perf(self, run: str) -> None:
        self.monitor.save(os.path.join(self.config.out, f"perf_{run}.json"))

    def cmd_validate(self) -> int:
        dataset = self._load()
        report = validate(dataset)
        if self.formatter.format_type == "json":
            print(json.dumps({
                "ok": report.ok,
                "violations": [{"rule": v.rule, "frame_id": v.frame_id, "detail": v.detail}
                               for v in report.violations],
                "warnings": list(dataset.warnings),
            }, ensure_ascii=False, indent=2))
        else:
            for w in dataset.warnings:
                self.formatter.print_info(f"未知のフィールド: {w}")
            for v in report.violations:
                print(str(v))
        if report.ok:
            self.formatter.print_success(f"違反なし: {len(dataset.frames)}フレーム")
            return 0
        self.formatter.print_error(f"{len(report.violations)} 件の違反 {report.counts()}", "validate")
        return 1

    def cmd_stats(self, split: str) -> int:
        """集計表を --format で表示し、CSV を --out に stats_<split>.csv として保存"""
        stats = compute_stats(self._load())
        headers = ["split"] + stats.columns()
        rows = [[name] + counts for name, counts in stats.rows(split)]
        os.makedirs(self.config.out, exist_ok=True)
        path = os.path.join(self.config.out, f"stats_{split}.csv")
        pd.DataFrame(rows, columns=headers).to_csv(path, index=False, lineterminator="\n")
        print(self.formatter.format_table(headers, rows))
        logger.info("集計CSVを書き出しました: %s", path)
        return 0

    def cmd_export_dot(self, frame_id: str, model_path: Optional[str]) -> int:
        dataset = self._load()
        try:
            frame = dataset.frame(frame_id)
        except KeyError:
            raise ConfigError(f"フレームが見つかりません: {frame_id}") from None

        if model_path:
            model = load_model(model_path, dataset, self._feature_provider(dataset))
            if isinstance(model, TaskModel):
                model = model.model
            graph = model.predict_graph(frame)
        else:
            builder = GraphBuilder(self._feature_provider(dataset), proximity=self.config.model.proximity,
                                   inside_threshold=self.config.model.inside_threshold)
            candidates = builder.candidates(frame)
            graph = replace(candidates, edges=tuple(
                e for e in candidates.edges if e.kind is EdgeKind.ACTION or e.exist_gt))
        print(graph_to_dot(graph, dataset.catalog), end="")
        return 0

    def cmd_synth(self) -> int:
        dataset = generate_dataset(self.config.synth)
        os.makedirs(self.config.out, exist_ok=True)
        path = os.path.join(self.config.out, "dataset.json")
        with open(path, 'w', encoding='utf-8') as f:
            f.write(serialize_dataset(dataset))
        write_manifest(self.config.out, "synth", self.config, [], {
            "frames": len(dataset.frames),
            "dataset_sha256": sha256_file(path),
        })
        self.formatter.print_success(f"合成データを書き出しました: {path}")
        return 0

    def cmd_train(self, stage: int, checkpoint: Optional[str]) -> int:
        cfg = self.config
        dataset = self._load()
        fp = self._feature_provider(dataset)
        os.makedirs(cfg.out, exist_ok=True)

        if stage == 1:
            result = train_stage1(dataset, cfg.model, cfg.train, fp=fp, monitor=self.monitor)
            path = os.path.join(cfg.out, "stage1.ckpt.json")
            history = [r.to_dict() for r in result.history]
            result.model.save(path, {"history": history, "best_epoch": result.best_epoch})
            best = result.history[result.best_epoch]
            write_manifest(cfg.out, "train_stage1", cfg, self._inputs(), {
                "best_epoch": result.best_epoch,
                "train": best.train.to_dict(),
                "val": None if best.val is None else best.val.to_dict(),
                "checkpoint_sha256": sha256_file(path),
            })
            self._save_perf("train_stage1")
            self.formatter.print_success(f"第1段階チェックポイント: {path} (採用エポック {result.best_epoch})")
            return 0

        if stage != 2:
            raise ConfigError(f"--stage は 1 または 2: {stage}")
        ckpt_path = checkpoint or os.path.join(cfg.out, "stage1.ckpt.json")
        model = load_model(ckpt_path, dataset, fp)
        if isinstance(model, TaskModel):
            raise ConfigError(f"第1段階のチェックポイントではありません: {ckpt_path}")
        model.cfg = replace(model.cfg, lambda_action=cfg.model.lambda_action,
                            lambda_hand=cfg.model.lambda_hand, tau=cfg.model.tau)
        result = train_stage2(model, cfg.task, dataset, cfg.train, monitor=self.monitor)
        path = os.path.join(cfg.out, f"stage2_{cfg.task}.model.json")
        history = [r.to_dict() for r in result.history]
        result.task_model.save(path, {"history": history, "best_epoch": result.best_epoch})
        write_manifest(cfg.out, f"train_stage2_{cfg.task}", cfg, self._inputs(ckpt_path), {
            "best_epoch": result.best_epoch,
            "val_map": result.history[result.best_epoch].val_map,
            "width": result.task_model.width,
            "model_sha256": sha256_file(path),
        })
        self._save_perf(f"train_stage2_{cfg.task}")
        self.formatter.print_success(f"タスクモデル: {path} (出力幅 {result.task_model.width})")
        return 0

    def cmd_eval(self, model_path: Optional[str]) -> int:
        cfg = self.config
        dataset = self._load()
        if not model_path:
            model_path = os.path.join(cfg.out, f"stage2_{cfg.task}.model.json")
        if model_path == "echo":
            model = LabelEchoModel(dataset, cfg.task)
            inputs = self._inputs()
        else:
            model = load_model(model_path, dataset, self._feature_provider(dataset))
            if not isinstance(model, TaskModel):
                raise ConfigError(f"タスクモデルではありません: {model_path}")
            inputs = self._inputs(model_path)

        self.monitor.start_operation("evaluate")
        report = evaluate(model, dataset, cfg.split, cfg.task)
        self.monitor.end_operation("evaluate")
        csv_path, _ = write_report(report, cfg.out, seed=cfg.seed, config_hash=cfg.config_hash())
        run = f"eval_{cfg.task}_{cfg.split}"
        write_manifest(cfg.out, run, cfg, inputs, report.summary(cfg.seed, cfg.config_hash()))
        self._save_perf(run)

        rows = [[name, "" if ap is None else f"{ap:.4f}", pos]
                for name, ap, pos in zip(report.labels, report.ap, report.positives)]
        print(self.formatter.format_table(["label", "ap", "positives"], rows))
        self.formatter.print_success(f"mAP = {report.map:.4f} ({report.n_frames}フレーム, {csv_path})")
        return 0

    def cmd_ablate(self, seeds: List[int], include_generic: bool) -> int:
        cfg = self.config
        dataset = self._load()
        rows = run_ablation(dataset, seeds, cfg.model, cfg.train, include_generic=include_generic,
                            split=cfg.split, monitor=self.monitor)
        os.makedirs(cfg.out, exist_ok=True)
        table = pd.DataFrame([r.to_dict() for r in rows])
        table.to_csv(os.path.join(cfg.out, "ablation.csv"), index=False, lineterminator="\n")
        write_manifest(cfg.out, "ablate", cfg, self._inputs(), {"rows": [r.to_dict() for r in rows]})
        self._save_perf("ablate")

        print(self.formatter.format_table(
            ["variant", "lambda_action", "lambda_hand", "mean_mAP"],
            [[r.variant, r.lambda_action, r.lambda_hand, f"{r.mean_map:.4f}"] for r in rows]))
        return 0


# =============================================================================
# エントリポイント
# =============================================================================

def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"シードはカンマ区切りの整数: {text}") from None


def create_parser() -> argparse.ArgumentParser:
    """コマンドライン引数パーサー作成"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="設定ファイル（YAML / JSON）")
    common.add_argument("--dataset", help="アノテーションファイル")
    common.add_argument("--profile", choices=[PROFILE_SG201, PROFILE_GENERIC], help="カタログプロファイル")
    common.add_argument("--seed", type=int, help="乱数シード")
    common.add_argument("--task", choices=list(TASKS), help="下流タスク")
    common.add_argument("--split", choices=list(SPLITS) + ["all"], help="対象分割")
    common.add_argument("--lambda-action", type=float, help="行為エッジ損失の重み（既定 0.6）")
    common.add_argument("--lambda-hand", type=float, help="手の識別損失の重み（既定 0.001）")
    common.add_argument("--epochs", type=int, help="エポック数（既定 50）")
    common.add_argument("--lr", type=float, help="学習率")
    common.add_argument("--batch-size", type=int, help="ミニバッチのフレーム数")
    common.add_argument("--tau", type=float, help="エッジ保持のしきい値")
    common.add_argument("--features", help="外部特徴量ファイル")
    common.add_argument("--collapse-tools", action="store_true", help="工具クラスを汎用クラスに統合")
    common.add_argument("--out", help="出力ディレクトリ")
    common.add_argument("--format", choices=["text", "csv", "json"], default="text", help="出力形式")
    common.add_argument("--no-color", action="store_true", help="カラー出力を無効化")
    common.add_argument("--verbose", "-v", action="store_true", help="詳細ログ")
    common.add_argument("--quiet", "-q", action="store_true", help="静寂モード")

    parser = argparse.ArgumentParser(
        description="手術シーングラフ（SSG-Com）パイプライン CLI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  %(prog)s validate --dataset data/sg201.json
  %(prog)s stats --dataset data/sg201.json --split all
  %(prog)s synth --out runs/synth --seed 0
  %(prog)s train --stage 1 --dataset runs/synth/dataset.json --out runs/synth
  %(prog)s train --stage 2 --task cvs --dataset runs/synth/dataset.json --out runs/synth
  %(prog)s eval --task cvs --dataset runs/synth/dataset.json --out runs/synth
        """
    )
    subparsers = parser.add_subparsers(dest="command", help="使用可能なコマンド")

    subparsers.add_parser("validate", parents=[common], help="アノテーションの検証")
    subparsers.add_parser("stats", parents=[common], help="カテゴリ別の出現数")

    dot_parser = subparsers.add_parser("export-dot", parents=[common], help="フレームのグラフを DOT 出力")
    dot_parser.add_argument("--frame-id", required=True, help="対象フレームID")
    dot_parser.add_argument("--model", help="予測に使うチェックポイント（省略時は正解グラフ）")

    subparsers.add_parser("synth", parents=[common], help="合成データ生成")

    train_parser = subparsers.add_parser("train", parents=[common], help="学習（第1段階 / 第2段階）")
    train_parser.add_argument("--stage", type=int, choices=[1, 2], default=1, help="学習段階")
    train_parser.add_argument("--checkpoint", help="第2段階で使う第1段階チェックポイント")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="mAP 評価")
    eval_parser.add_argument("--model", help="タスクモデル（'echo' で正解ラベルを返す診断モデル）")

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="λ のアブレーション")
    ablate_parser.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2], help="カンマ区切りのシード")
    ablate_parser.add_argument("--include-generic", action="store_true", help="汎用工具クラスの条件も実行")

    return parser


def setup_logging(args: argparse.Namespace) -> None:
    level = os.getenv("SSGCOM_LOG_LEVEL", "INFO").upper()
    if args.verbose:
        level = "DEBUG"
    elif args.quiet:
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    """メイン関数（終了コードを返す）"""
    load_dotenv()
    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 2

    setup_logging(args)
    if not args.no_color:
        colorama.init()
    formatter = OutputFormatter(args.format, use_color=not args.no_color, quiet=args.quiet)

    try:
        config = apply_flags(load_run_config(args.config), args)
        cli = SceneGraphCLI(config, formatter)
        if args.command == "validate":
            return cli.cmd_validate()
        if args.command == "stats":
            return cli.cmd_stats(args.split or "all")
        if args.command == "export-dot":
            return cli.cmd_export_dot(args.frame_id, args.model)
        if args.command == "synth":
            return cli.cmd_synth()
        if args.command == "train":
            return cli.cmd_train(args.stage, args.checkpoint)
        if args.command == "eval":
            return cli.cmd_eval(args.model)
        if args.command == "ablate":
            return cli.cmd_ablate(args.seeds, args.include_generic)
        raise ConfigError(f"未知のコマンド: {args.command}")
    except Exception as e:
        context = ErrorContext(classify_error(e), e, args.command, vars(args))
        logger.debug("".join(traceback.format_exception(type(e), e, e.__traceback__)))
        formatter.print_error(f"{type(e).__name__}: {e}", args.command)
        return context.exit_code


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n👋 処理を中断しました")
        sys.exit(130)
