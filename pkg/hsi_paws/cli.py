# hsi_paws/cli.py
"""
コマンドラインインターフェース
synth / pretrain / evaluate / gradcheck / benchmark / history
"""

import argparse
import sys
from typing import Optional, Sequence

from hsi_paws.config import TrainConfig, apply_environment, parse_config, set_settings
from hsi_paws.core.downstream import EVAL_MODES, write_report
from hsi_paws.core.exceptions import ConfigurationError, PawsError, exception_to_report, get_exit_code
from hsi_paws.core.pipeline import GRADCHECK_TOLERANCE, PawsPipeline, run_gradcheck
from utils.logger import get_logger, set_log_level

EPILOG = """
使用例:
  python paws.py synth --out run/                              # 合成キューブを生成
  python paws.py pretrain --cube run/cube.hsic --out run/      # PAWS 事前学習
  python paws.py evaluate --cube run/cube.hsic --model run/encoder.pawm --mode snn --out run/
  python paws.py gradcheck                                     # 解析勾配の検証
  python paws.py benchmark --cube run/cube.hsic --out run/     # 全プロトコル比較
  python paws.py history --db results.db                       # 記録済み評価の一覧
"""


def build_parser() -> argparse.ArgumentParser:
    """引数パーサーを構築"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI 設定ファイル（省略時はすべてデフォルト）")
    common.add_argument("--seed", type=int, help="乱数シード（[run] seed を上書き）")
    common.add_argument("--out", default="output", help="出力ディレクトリ")
    common.add_argument("--db", help="結果データベース（SQLite パスまたは URL）")

    cube = argparse.ArgumentParser(add_help=False)
    cube.add_argument("--cube", required=True, help="キューブファイル (.hsic)")
    cube.add_argument("--gt", help="正解ファイル（省略時は <cube>.gt）")
    cube.add_argument("--test-gt", dest="test_gt", help="テスト用の正解ファイル")

    parser = argparse.ArgumentParser(
        prog="paws",
        description="ハイパースペクトルパッチの PAWS 半教師あり事前学習",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="合成キューブを生成")
    commands.add_parser("pretrain", parents=[common, cube], help="PAWS 事前学習")
    evaluate = commands.add_parser("evaluate", parents=[common, cube], help="下流評価")
    evaluate.add_argument("--model", help="エンコーダーファイル（省略時は未学習エンコーダー）")
    evaluate.add_argument("--mode", choices=EVAL_MODES, default="snn", help="評価プロトコル")
    commands.add_parser("gradcheck", parents=[common], help="勾配チェック")
    commands.add_parser("benchmark", parents=[common, cube], help="全プロトコルを比較")
    history = commands.add_parser("history", parents=[common], help="記録済み評価の一覧")
    history.add_argument("--mode", choices=EVAL_MODES, help="モードで絞り込み")
    history.add_argument("--limit", type=int, default=20, help="表示件数")
    return parser


class PawsCLI:
    """サブコマンドの実行"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.pipeline = PawsPipeline(config)
        self.logger = get_logger()
        self._results = None

    @property
    def results(self):
        """結果データベース（未設定なら None）"""
        if self._results is None and self.config.run.results_db:
            from hsi_paws.core.results import ResultsService
            self._results = ResultsService(self.config.run.results_db)
        return self._results

    def close(self) -> None:
        """結果データベースを閉じる"""
        if self._results is not None:
            self._results.close()
            self._results = None

    def synth(self, args) -> int:
        path = self.pipeline.synthesize(args.out)
        print(f"✅ 合成キューブを書き出しました: {path}")
        return 0

    def pretrain(self, args) -> int:
        cube, _ = self.pipeline.load(args.cube, args.gt)
        result = self.pipeline.pretrain(cube)
        model_path = self.pipeline.save_pretrain(result, args.out)
        if self.results is not None:
            self.results.save_pretrain_run(result, self.pipeline.digest, self.pipeline.seed, str(model_path))
        print(f"✅ 事前学習完了: {model_path} (最終損失 {result.final_loss:.6f})")
        return 0

    def evaluate(self, args) -> int:
        cube, test_gt = self.pipeline.load(args.cube, args.gt, args.test_gt)
        report = self.pipeline.evaluate(cube, args.mode, args.model, test_gt)
        text_path, _ = write_report(report, args.out)
        self.config.write_snapshot(args.out)
        if self.results is not None:
            self.results.save_evaluation(report, args.model)
        print(f"✅ {report.mode}: 全体精度 {report.overall_accuracy:.4f} ({text_path})")
        return 0

    def gradcheck(self, args) -> int:
        error = run_gradcheck(self.pipeline.seed)
        print(f"max_relative_error={error:.6e}")
        return 0 if error < GRADCHECK_TOLERANCE else 1

    def benchmark(self, args) -> int:
        cube, test_gt = self.pipeline.load(args.cube, args.gt, args.test_gt)
        reports = self.pipeline.benchmark(cube, args.out, test_gt)
        print("=== ベンチマーク ===")
        for report in reports:
            print(f"{report.mode:<18}{report.overall_accuracy:.4f}")
            if self.results is not None:
                self.results.save_evaluation(report, note="benchmark")
        return 0

    def history(self, args) -> int:
        if self.results is None:
            raise ConfigurationError("結果データベースが指定されていません（--db または [run] results_db）", "run.results_db")
        records = self.results.list_evaluations(mode=args.mode, limit=args.limit)
        if not records:
            print("記録された評価はありません")
            return 0
        print("=== 評価履歴 ===")
        for record in records:
            print(f"#{record['id']:<4} {record['mode']:<18} {record['overall_accuracy']:.4f} "
                  f"n={record['sample_count']} config={record['config_digest']}")
        return 0


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """コマンドを実行して終了コードを返す"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        # 使用法エラーは 2、--help は 0
        return int(e.code) if isinstance(e.code, int) else 2

    logger = get_logger()
    cli = None
    try:
        config = apply_environment(parse_config(args.config))
        config = config.with_overrides(seed=args.seed, results_db=args.db)
        set_settings(config)
        set_log_level(config.get_log_config()['level'])

        cli = PawsCLI(config)
        logger.debug(f"コマンド開始: {args.command} (設定 {cli.pipeline.digest})")
        return getattr(cli, args.command)(args)

    except PawsError as e:
        logger.error(f"{e.error_code}: {e}")
        logger.debug(f"診断情報: {exception_to_report(e)}")
        print(f"❌ {e.user_message}", file=sys.stderr)
        return get_exit_code(e)
    except KeyboardInterrupt:
        logger.info("ユーザーによる中断")
        return 130
    except Exception as e:
        logger.exception(f"予期しないエラー: {e}")
        print(f"❌ 予期しないエラー: {e}", file=sys.stderr)
        return 1
    finally:
        if cli is not None:
            cli.close()


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
