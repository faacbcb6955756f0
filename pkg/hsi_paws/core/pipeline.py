# hsi_paws/core/pipeline.py
"""
パイプラインサービス
合成 → 事前学習 → 評価 → 勾配チェックの実行と成果物の書き出し
"""

import csv
import io
import math
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from hsi_paws.config import TrainConfig
from hsi_paws.core.augment import AugmentPolicy
from hsi_paws.core.autodiff import ParamStore, grad_check
from hsi_paws.core.downstream import (
    DownstreamConfig,
    EVAL_MODES,
    evaluate_fine_tuned,
    evaluate_linear,
    fine_tune,
    raw_snn_evaluate,
    snn_evaluate,
    supervised_train
)
from hsi_paws.core.encoder import EncoderConfig, build_encoder, check_compatible, read_model, save_model
from hsi_paws.core.hsi_data import (
    build_splits,
    class_balanced_draw,
    extract_patch,
    generate_synthetic,
    load_cube,
    overlap_fraction,
    read_gt,
    sample_view_centers,
    write_cube
)
from hsi_paws.core.models import EvalReport, HsiCube, PretrainResult, SyntheticSpec, ViewPair
from hsi_paws.core.optim import create_optimizer_state
from hsi_paws.core.paws import PawsHyper, PawsStepObjective, pretrain_step
from hsi_paws.core.exceptions import ConfigurationError, NumericError, StorageError
from utils.logger import get_context_logger, get_logger, PerformanceLogger

PathLike = Union[str, Path]

GRADCHECK_TOLERANCE = 1e-4

# 乱数ストリームの用途ラベル
_STREAM_VIEWS = 1
_STREAM_SUPPORT_DRAW = 2
_STREAM_AUGMENT = 3


def derive_seed(*keys: int) -> int:
    """(seed, 用途, ...) から独立な 32bit シードを作る"""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


# 設定からドメインオブジェクトへの変換

def encoder_config(config: TrainConfig, bands: int) -> EncoderConfig:
    return EncoderConfig.from_config(config.encoder, config.data.patch_size, bands)


def augment_policy(config: TrainConfig) -> AugmentPolicy:
    return AugmentPolicy.from_config(config.augment)


def paws_hyper(config: TrainConfig) -> PawsHyper:
    return PawsHyper.from_config(config.paws)


def downstream_config(config: TrainConfig) -> DownstreamConfig:
    return DownstreamConfig.from_config(config.downstream)


def synthetic_spec(config: TrainConfig) -> SyntheticSpec:
    section = config.synthetic
    return SyntheticSpec(
        rows=section.rows,
        cols=section.cols,
        bands=section.bands,
        classes=section.classes,
        noise_sigma=section.noise_sigma,
        region_seeds=section.region_seeds,
        seed=config.run.seed
    )


def write_loss_trace(loss_trace: Sequence[float], out_dir: PathLike) -> Path:
    """loss_trace.csv（epoch, mean_loss）を書き出す"""
    path = Path(out_dir) / "loss_trace.csv"
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["epoch", "mean_loss"])
    for epoch, loss in enumerate(loss_trace, start=1):
        writer.writerow([epoch, repr(float(loss))])
    try:
        path.write_text(buffer.getvalue(), encoding='utf-8')
    except OSError as e:
        raise StorageError(f"損失トレースを書き出せません: {path}", e)
    return path


class PawsPipeline:
    """1つの設定に対する実験パイプライン"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.seed = config.run.seed
        self.digest = config.digest()
        self.logger = get_logger()

    # データ

    def synthesize(self, out_dir: PathLike) -> Path:
        """合成キューブと正解ファイルを書き出す"""
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"出力ディレクトリを作成できません: {out_dir}", e)
        cube = generate_synthetic(synthetic_spec(self.config))
        path = out_dir / "cube.hsic"
        write_cube(cube, path)
        self.config.write_snapshot(out_dir)
        return path

    def load(self, cube_path: PathLike, gt_path: Optional[PathLike] = None,
             test_gt_path: Optional[PathLike] = None) -> Tuple[HsiCube, Optional[np.ndarray]]:
        """キューブを読み込み正規化する（テスト用正解は任意）"""
        cube = load_cube(cube_path, gt_path)
        test_gt = read_gt(test_gt_path) if test_gt_path is not None else None
        self.logger.info(
            f"キューブ読み込み完了: {cube.rows}x{cube.cols}x{cube.bands}, "
            f"ラベル付き {cube.labelled_count} 画素, クラス {list(cube.class_ids)}"
        )
        return cube, test_gt

    # 事前学習

    def pretrain(self, cube: HsiCube) -> PretrainResult:
        """PAWS 事前学習。エポック平均損失のトレースを返す"""
        data = self.config.data
        settings = self.config.paws
        p = data.patch_size
        cfg = encoder_config(self.config, cube.bands)
        policy = augment_policy(self.config)
        hyper = paws_hyper(self.config)

        support, _ = build_splits(cube, data.support_per_class, self.seed, p=p)
        params = build_encoder(cfg, self.seed)
        opt = self.config.optimizer
        state = create_optimizer_state("lars", params, opt.lr, opt.momentum, opt.weight_decay, opt.trust_coefficient)

        n = hyper.n
        steps_per_epoch = math.ceil(data.unlabeled_count / n)
        loss_trace: List[float] = []
        self.logger.info(
            f"事前学習開始: {settings.epochs}エポック x {steps_per_epoch}ステップ, "
            f"パラメータ {params.num_parameters()}, 設定 {self.digest}"
        )

        for epoch in range(settings.epochs):
            log = get_context_logger(epoch=epoch + 1, seed=self.seed)
            with PerformanceLogger(f"epoch {epoch + 1}") as timer:
                anchors, positives = sample_view_centers(
                    cube, p, data.unlabeled_count, derive_seed(self.seed, _STREAM_VIEWS, epoch)
                )
                draw_rng = np.random.default_rng(derive_seed(self.seed, _STREAM_SUPPORT_DRAW, epoch))
                losses = []
                for step in range(steps_per_epoch):
                    batch = slice(step * n, (step + 1) * n)
                    pairs = [
                        ViewPair(extract_patch(cube, a, p), extract_patch(cube, b, p), overlap_fraction(a, b, p))
                        for a, b in zip(anchors[batch].tolist(), positives[batch].tolist())
                    ]
                    batch_support = class_balanced_draw(support, settings.support_batch_per_class, draw_rng)
                    loss = pretrain_step(
                        params, pairs, batch_support, policy, hyper, state,
                        derive_seed(self.seed, _STREAM_AUGMENT, epoch, step), cfg
                    )
                    losses.append(loss)
                mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise NumericError(f"エポック {epoch + 1} の平均損失が非有限です: {mean_loss}")
            loss_trace.append(mean_loss)
            log.info(f"平均損失 {mean_loss:.6f} ({timer.duration:.1f}秒)")

        return PretrainResult(params=params, loss_trace=loss_trace,
                              steps_per_epoch=steps_per_epoch, epochs=settings.epochs)

    def save_pretrain(self, result: PretrainResult, out_dir: PathLike) -> Path:
        """encoder.pawm・loss_trace.csv・config.resolved.ini を書き出す"""
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"出力ディレクトリを作成できません: {out_dir}", e)
        model_path = out_dir / "encoder.pawm"
        save_model(result.params, model_path)
        write_loss_trace(result.loss_trace, out_dir)
        self.config.write_snapshot(out_dir)
        return model_path

    # 評価

    def load_encoder(self, cfg: EncoderConfig, model_path: Optional[PathLike]) -> ParamStore:
        """モデルファイルを読むか、未指定なら実行シードで新規初期化"""
        if model_path is None:
            self.logger.info("モデル未指定のため未学習エンコーダーで評価します")
            return build_encoder(cfg, self.seed)
        params = read_model(model_path)
        check_compatible(params, cfg)
        return params

    def evaluate(self, cube: HsiCube, mode: str, model_path: Optional[PathLike] = None,
                 test_gt: Optional[np.ndarray] = None) -> EvalReport:
        """指定プロトコルでテスト分割の精度を測る"""
        if mode not in EVAL_MODES:
            raise ConfigurationError(f"未知の評価モードです: {mode}", "mode")
        data = self.config.data
        support, test = build_splits(cube, data.support_per_class, self.seed, test_gt=test_gt, p=data.patch_size)
        cfg = encoder_config(self.config, cube.bands)
        dcfg = downstream_config(self.config)

        with PerformanceLogger(f"evaluate {mode}"):
            if mode == "raw_snn":
                report = raw_snn_evaluate(support, test, dcfg.snn_tau, self.digest)
            elif mode == "supervised":
                model, _ = supervised_train(cfg, support.patches, dcfg, self.seed, support.class_ids, self.digest)
                report = evaluate_fine_tuned(model, mode, support, test, dcfg, self.digest)
            else:
                encoder = self.load_encoder(cfg, model_path)
                if mode == "snn":
                    report = snn_evaluate(encoder, cfg, support, test, dcfg.snn_tau, self.digest)
                elif mode == "linear":
                    report = evaluate_linear(encoder, cfg, support, test, dcfg, self.seed, self.digest)
                else:
                    model, _ = fine_tune(encoder, cfg, support.patches, dcfg, self.seed, support.class_ids,
                                         config_digest=self.digest)
                    report = evaluate_fine_tuned(model, mode, support, test, dcfg, self.digest)

        get_context_logger(mode=mode, seed=self.seed).info(
            f"全体精度 {report.overall_accuracy:.4f} ({report.correct_count}/{report.sample_count})"
        )
        return report

    def benchmark(self, cube: HsiCube, out_dir: PathLike,
                  test_gt: Optional[np.ndarray] = None) -> List[EvalReport]:
        """事前学習を1回行い、全プロトコルを未学習/学習済みで比較する"""
        out_dir = Path(out_dir)
        result = self.pretrain(cube)
        model_path = self.save_pretrain(result, out_dir)

        rows = [
            ("supervised", "supervised", None),
            ("linear_untrained", "linear", None),
            ("linear", "linear", model_path),
            ("finetune", "finetune", model_path),
            ("raw_snn", "raw_snn", None),
            ("snn_untrained", "snn", None),
            ("snn", "snn", model_path),
        ]
        reports = []
        for label, mode, path in rows:
            reports.append(replace(self.evaluate(cube, mode, path, test_gt), mode=label))

        csv_text = "".join(report.to_csv(include_header=(i == 0)) for i, report in enumerate(reports))
        text = "".join(f"{report.mode:<18}{report.overall_accuracy:.6f}\n" for report in reports)
        try:
            (out_dir / "benchmark.csv").write_text(csv_text, encoding='utf-8')
            (out_dir / "benchmark.txt").write_text(text, encoding='utf-8')
        except OSError as e:
            raise StorageError(f"ベンチマーク結果を書き出せません: {out_dir}", e)
        return reports


# 勾配チェック

def gradcheck_objective(seed: int = 0, freeze_targets: bool = True,
                        memax_gradient: bool = False) -> Tuple[PawsStepObjective, ParamStore]:
    """小さなエンコーダー + PAWS 損失（2ペア・サポート3点）の目的関数"""
    cfg = EncoderConfig(patch_size=3, bands=8, spectral_kernel=3, spectral_stride=2,
                        conv3d_channels=2, ds_widths=(4, 4, 4), embedding_dim=4)
    rng = np.random.default_rng(seed)
    anchors = rng.uniform(0.0, 1.0, size=(2, 3, 3, 8))
    positives = rng.uniform(0.0, 1.0, size=(2, 3, 3, 8))
    support = rng.uniform(0.0, 1.0, size=(3, 3, 3, 8))
    labels = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    hyper = PawsHyper(tau=0.25, T=0.5, n=2, memax_gradient=memax_gradient)
    objective = PawsStepObjective(cfg, anchors, positives, support, labels, hyper, freeze_targets)
    return objective, build_encoder(cfg, seed)


def run_gradcheck(seed: int = 0, h: float = 1e-5) -> float:
    """エンコーダー + PAWS 損失全体の最大相対誤差"""
    objective, params = gradcheck_objective(seed)
    with PerformanceLogger("gradcheck"):
        error = grad_check(objective, params, h=h)
    get_logger().info(f"勾配チェック: 最大相対誤差 {error:.3e} ({params.num_parameters()} 座標)")
    return error
