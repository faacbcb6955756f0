# hsi_paws/core/downstream.py
"""
下流評価
線形分類器・ファインチューニング・SNN 分類（+ 教師あり・生画素 SNN ベースライン）と全体精度
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from hsi_paws.core.autodiff import ParamStore, dense, dense_backward, softmax_rows
from hsi_paws.core.encoder import ConvEncoder, EncoderConfig, build_encoder, embed_patches, stack_patches
from hsi_paws.core.models import EvalReport, Patch, SupportSet
from hsi_paws.core.optim import create_optimizer_state, sgd_step
from hsi_paws.core.paws import snn_predict
from hsi_paws.core.exceptions import ConfigurationError, DataError, StorageError
from utils.logger import get_logger

EVAL_MODES = ("linear", "finetune", "snn", "supervised", "raw_snn")

logger = get_logger()


@dataclass(frozen=True)
class DownstreamConfig:
    """下流学習（SGD）の設定"""
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    snn_tau: float = 0.25

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"エポック数は1以上: {self.epochs}", "downstream.epochs")
        if self.batch_size < 1:
            raise ConfigurationError(f"バッチサイズは1以上: {self.batch_size}", "downstream.batch_size")
        if self.snn_tau <= 0:
            raise ConfigurationError(f"SNN 温度は正: {self.snn_tau}", "downstream.snn_tau")

    @classmethod
    def from_config(cls, section) -> 'DownstreamConfig':
        return cls(
            lr=section.lr,
            momentum=section.momentum,
            weight_decay=section.weight_decay,
            epochs=section.epochs,
            batch_size=section.batch_size,
            snn_tau=section.snn_tau
        )


# 精度とレポート

def overall_accuracy(predictions: Sequence[int], truth: Sequence[int]) -> float:
    """一致数 / 総数"""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise DataError(f"予測数 {predictions.size} と正解数 {truth.size} が一致しません")
    if truth.size == 0:
        raise DataError("評価サンプルが空です")
    return int(np.count_nonzero(predictions == truth)) / int(truth.size)


def build_report(mode: str,
                 predictions: Sequence[int],
                 truth: Sequence[int],
                 class_ids: Sequence[int],
                 config_digest: str = "") -> EvalReport:
    """クラス別精度つきの評価レポートを作成"""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    accuracy = overall_accuracy(predictions, truth)
    per_class_accuracy: List[float] = []
    per_class_counts: List[int] = []
    for class_id in class_ids:
        members = truth == class_id
        count = int(np.count_nonzero(members))
        per_class_counts.append(count)
        per_class_accuracy.append(
            int(np.count_nonzero(predictions[members] == class_id)) / count if count else 0.0
        )
    return EvalReport(
        mode=mode,
        overall_accuracy=accuracy,
        per_class_accuracy=per_class_accuracy,
        sample_count=int(truth.size),
        config_digest=config_digest,
        correct_count=int(np.count_nonzero(predictions == truth)),
        class_ids=tuple(int(c) for c in class_ids),
        per_class_counts=per_class_counts
    )


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """report_<mode>.txt と report_<mode>.csv を書き出す"""
    out_dir = Path(out_dir)
    text_path = out_dir / f"report_{report.mode}.txt"
    csv_path = out_dir / f"report_{report.mode}.csv"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path.write_text(report.to_text(), encoding='utf-8')
        csv_path.write_text(report.to_csv(), encoding='utf-8')
    except OSError as e:
        raise StorageError(f"レポートを書き出せません: {out_dir}", e)
    logger.info(f"レポート出力: {text_path}")
    return text_path, csv_path


def labels_of(patches: Sequence[Patch], class_ids: Sequence[int]) -> np.ndarray:
    """パッチのラベルを class_ids の列インデックスに変換（未ラベル・未知クラスはデータエラー）"""
    column = {class_id: i for i, class_id in enumerate(class_ids)}
    indices = []
    for patch in patches:
        if patch.label is None:
            raise DataError(f"ラベルのないパッチが含まれています: {patch.center}")
        if patch.label not in column:
            raise DataError(f"サポートにないクラスです: {patch.label}", class_id=patch.label)
        indices.append(column[patch.label])
    return np.asarray(indices, dtype=np.int64)


def _class_ids_of(patches: Sequence[Patch], class_ids: Optional[Sequence[int]]) -> Tuple[int, ...]:
    if class_ids is not None:
        return tuple(class_ids)
    if any(patch.label is None for patch in patches):
        raise DataError("ラベルのないパッチが含まれています")
    return tuple(sorted({patch.label for patch in patches}))


# 線形ヘッド

def init_head(embedding_dim: int, class_count: int, seed: int) -> ParamStore:
    """d→K の全結合ヘッド"""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(embedding_dim)
    head = ParamStore()
    head.add("head.weight", rng.uniform(-bound, bound, size=(class_count, embedding_dim)).astype(np.float32))
    head.add("head.bias", np.zeros(class_count), lars_adapt=False)
    return head


def _cross_entropy_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """温度 1 の softmax 交差エントロピーのロジット勾配（バッチ平均）"""
    probs, _ = softmax_rows(logits, 1.0)
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(len(targets)), targets] = 1.0
    return (probs - one_hot) / len(targets)


def predict_with_head(head: ParamStore, embeddings: np.ndarray) -> np.ndarray:
    """列インデックスの予測（同点は小さいインデックス）"""
    logits, _ = dense(embeddings, head.value("head.weight"), head.value("head.bias"))
    return np.argmax(logits, axis=1)


def fit_linear_head(embeddings: np.ndarray,
                    targets: np.ndarray,
                    class_count: int,
                    cfg: DownstreamConfig,
                    seed: int) -> ParamStore:
    """固定埋め込みに対して線形ヘッドを SGD で学習"""
    rng = np.random.default_rng(seed)
    head = init_head(embeddings.shape[1], class_count, seed)
    state = create_optimizer_state("sgd", head, cfg.lr, cfg.momentum, cfg.weight_decay)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(embeddings))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            logits, cache = dense(embeddings[batch], head.value("head.weight"), head.value("head.bias"))
            _, d_weight, d_bias = dense_backward(_cross_entropy_grad(logits, targets[batch]), cache)
            head.accumulate("head.weight", d_weight)
            head.accumulate("head.bias", d_bias)
            sgd_step(head, state)
    return head


def train_linear_classifier(encoder: ParamStore,
                            encoder_cfg: EncoderConfig,
                            train: Sequence[Patch],
                            cfg: DownstreamConfig,
                            seed: int = 0,
                            class_ids: Optional[Sequence[int]] = None,
                            config_digest: str = "") -> Tuple[ParamStore, EvalReport]:
    """エンコーダーを凍結して最終層のみ学習。学習データ上のレポートを返す"""
    if not train:
        raise DataError("線形分類器の学習データが空です")
    class_ids = _class_ids_of(train, class_ids)
    targets = labels_of(train, class_ids)
    embeddings = embed_patches(encoder, encoder_cfg, train, cfg.batch_size)
    head = fit_linear_head(embeddings, targets, len(class_ids), cfg, seed)
    predictions = predict_with_head(head, embeddings)
    report = build_report("linear", np.asarray(class_ids)[predictions], np.asarray(class_ids)[targets],
                          class_ids, config_digest)
    return head, report


# ファインチューニング

@dataclass
class FineTunedModel:
    """エンコーダー + 線形ヘッド"""
    encoder_cfg: EncoderConfig
    encoder: ParamStore
    head: ParamStore

    def predict(self, patches: Sequence[Patch], batch_size: int = 256) -> np.ndarray:
        embeddings = embed_patches(self.encoder, self.encoder_cfg, patches, batch_size)
        return predict_with_head(self.head, embeddings)


def fine_tune(encoder: ParamStore,
              encoder_cfg: EncoderConfig,
              train: Sequence[Patch],
              cfg: DownstreamConfig,
              seed: int = 0,
              class_ids: Optional[Sequence[int]] = None,
              mode: str = "finetune",
              config_digest: str = "") -> Tuple[FineTunedModel, EvalReport]:
    """エンコーダーのコピーとヘッドを同時に学習する"""
    if not train:
        raise DataError("ファインチューニングの学習データが空です")
    class_ids = _class_ids_of(train, class_ids)
    targets = labels_of(train, class_ids)
    inputs = stack_patches(train)

    tuned = encoder.copy()
    head = init_head(encoder_cfg.embedding_dim, len(class_ids), seed)
    model_params = tuned.merge(head)
    state = create_optimizer_state("sgd", model_params, cfg.lr, cfg.momentum, cfg.weight_decay)
    network = ConvEncoder(encoder_cfg, tuned)
    rng = np.random.default_rng(seed)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            z, enc_cache = network.forward(inputs[batch])
            logits, cache = dense(z, head.value("head.weight"), head.value("head.bias"))
            dz, d_weight, d_bias = dense_backward(_cross_entropy_grad(logits, targets[batch]), cache)
            head.accumulate("head.weight", d_weight)
            head.accumulate("head.bias", d_bias)
            network.backward(dz, enc_cache)
            sgd_step(model_params, state)

    model = FineTunedModel(encoder_cfg, tuned, head)
    predictions = model.predict(train, cfg.batch_size)
    report = build_report(mode, np.asarray(class_ids)[predictions], np.asarray(class_ids)[targets],
                          class_ids, config_digest)
    return model, report


def supervised_train(encoder_cfg: EncoderConfig,
                     train: Sequence[Patch],
                     cfg: DownstreamConfig,
                     seed: int = 0,
                     class_ids: Optional[Sequence[int]] = None,
                     config_digest: str = "") -> Tuple[FineTunedModel, EvalReport]:
    """新規初期化したエンコーダーからのファインチューニング（教師ありベースライン）"""
    return fine_tune(build_encoder(encoder_cfg, seed), encoder_cfg, train, cfg, seed,
                     class_ids, mode="supervised", config_digest=config_digest)


# SNN 分類

def snn_classify(query: np.ndarray, support_z: np.ndarray, support: SupportSet, tau: float) -> np.ndarray:
    """SNN 予測の argmax をクラス ID で返す"""
    probs = snn_predict(query, support_z, support.labels, tau)
    return np.asarray(support.class_ids)[np.argmax(probs, axis=1)]


def snn_evaluate(encoder: ParamStore,
                 encoder_cfg: EncoderConfig,
                 support: SupportSet,
                 test: Sequence[Patch],
                 tau: float,
                 config_digest: str = "",
                 batch_size: int = 256) -> EvalReport:
    """学習済みエンコーダーを特徴抽出器として SNN 分類（パラメータは変更しない）"""
    if not test:
        raise DataError("評価データが空です")
    truth = np.asarray(support.class_ids)[labels_of(test, support.class_ids)]
    support_z = embed_patches(encoder, encoder_cfg, support.patches, batch_size)
    test_z = embed_patches(encoder, encoder_cfg, test, batch_size)
    predictions = snn_classify(test_z, support_z, support, tau)
    return build_report("snn", predictions, truth, support.class_ids, config_digest)


def raw_snn_evaluate(support: SupportSet,
                     test: Sequence[Patch],
                     tau: float,
                     config_digest: str = "") -> EvalReport:
    """エンコードせずに平坦化したパッチ値で SNN 分類"""
    if not test:
        raise DataError("評価データが空です")
    truth = np.asarray(support.class_ids)[labels_of(test, support.class_ids)]
    support_x = stack_patches(support.patches).reshape(len(support), -1)
    test_x = stack_patches(test).reshape(len(test), -1)
    predictions = snn_classify(test_x, support_x, support, tau)
    return build_report("raw_snn", predictions, truth, support.class_ids, config_digest)


def evaluate_linear(encoder: ParamStore,
                    encoder_cfg: EncoderConfig,
                    support: SupportSet,
                    test: Sequence[Patch],
                    cfg: DownstreamConfig,
                    seed: int = 0,
                    config_digest: str = "") -> EvalReport:
    """サポートで線形分類器を学習し、テストで評価"""
    head, _ = train_linear_classifier(encoder, encoder_cfg, support.patches, cfg, seed, support.class_ids, config_digest)
    truth = np.asarray(support.class_ids)[labels_of(test, support.class_ids)]
    embeddings = embed_patches(encoder, encoder_cfg, test, cfg.batch_size)
    predictions = np.asarray(support.class_ids)[predict_with_head(head, embeddings)]
    return build_report("linear", predictions, truth, support.class_ids, config_digest)


def evaluate_fine_tuned(model: FineTunedModel,
                        mode: str,
                        support: SupportSet,
                        test: Sequence[Patch],
                        cfg: DownstreamConfig,
                        config_digest: str = "") -> EvalReport:
    """ファインチューニング済みモデルをテストで評価"""
    truth = np.asarray(support.class_ids)[labels_of(test, support.class_ids)]
    predictions = np.asarray(support.class_ids)[model.predict(test, cfg.batch_size)]
    return build_report(mode, predictions, truth, support.class_ids, config_digest)
