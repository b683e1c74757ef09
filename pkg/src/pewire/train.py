"""Deterministic desk-scale training and evaluation."""

from __future__ import annotations

import copy
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pewire import autodiff as ad
from pewire.checkpoint import Checkpoint, save_checkpoint
from pewire.data import Dataset
from pewire.errors import NumericFault
from pewire.model import ModelConfig, ModelParams
from pewire.optim import OptimizerState, adamw_step, cosine_lr
from pewire.wiring import forward
from pewire.wiring_config import WiringConfig

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,split,loss,accuracy,lr"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 5e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_pe_zero: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float

    def csv(self) -> str:
        return f"{self.epoch},{self.split},{self.loss!r},{self.accuracy!r},{self.lr!r}"


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[MetricsRow] = field(default_factory=list)
    checkpoint: Checkpoint | None = None

    def metrics_csv(self) -> str:
        return metrics_csv(self.metrics)

    def final(self, split: str = "eval") -> MetricsRow:
        return [m for m in self.metrics if m.split == split][-1]


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    for row in rows:
        buf.write(row.csv() + "\n")
    return buf.getvalue()


def seeded_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for parameter init and batch shuffling."""
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss)


def build_model(config: ModelConfig, wiring: WiringConfig, hp: TrainConfig, rng) -> ModelParams:
    params = ModelParams.init(config, wiring, rng)
    if hp.freeze_pe_zero:
        params["pos_embed"].data = np.zeros_like(params["pos_embed"].data)
        params.freeze("pos_embed")
    return params


def evaluate(params: ModelParams, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset."""
    total_loss = 0.0
    correct = 0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            logits, _ = forward(params, images)
            total_loss += float(ad.cross_entropy(logits, labels).data) * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    n = max(len(dataset), 1)
    return total_loss / n, correct / n


def train(
    config: ModelConfig,
    wiring: WiringConfig,
    train_set: Dataset,
    eval_set: Dataset,
    hp: TrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
    experiment: dict | None = None,
) -> TrainResult:
    """Train from scratch; write ``metrics.csv`` and ``checkpoint.pewire`` under ``out_dir``.

    On a numeric fault the last checkpoint from a completed epoch is written
    and the fault re-raised.
    """
    init_rng, shuffle_rng = seeded_rngs(seed)
    params = build_model(config, wiring, hp, init_rng)
    state = OptimizerState(lr=hp.lr, beta1=hp.beta1, beta2=hp.beta2, eps=hp.eps, weight_decay=hp.weight_decay)
    n = len(train_set)
    steps_per_epoch = max(1, -(-n // hp.batch_size))
    total_steps = hp.epochs * steps_per_epoch
    warmup_steps = hp.warmup_epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(params)

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint.from_params(
            params,
            optimizer=copy.deepcopy(state),
            rng_state=copy.deepcopy(shuffle_rng.bit_generator.state),
            epoch=epoch,
            experiment=experiment,
        )

    last_good = snapshot(0)
    lr = 0.0
    for epoch in range(1, hp.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        try:
            for start in range(0, n, hp.batch_size):
                idx = order[start:start + hp.batch_size]
                images = train_set.images[idx]
                labels = train_set.labels[idx]
                logits, _ = forward(params, images)
                loss = ad.cross_entropy(logits, labels)
                grads = ad.backward(loss)
                lr = cosine_lr(state.step + 1, warmup_steps, total_steps, hp.lr, hp.min_lr)
                adamw_step(state, params, grads, lr)
                loss_sum += float(loss.data) * len(idx)
                correct += int((logits.data.argmax(axis=1) == labels).sum())
        except NumericFault as exc:
            if out is not None:
                save_checkpoint(last_good, out / "checkpoint.pewire")
                (out / "metrics.csv").write_text(result.metrics_csv())
            raise NumericFault(f"epoch {epoch}: {exc}; last good checkpoint is epoch {last_good.epoch}",
                               op=exc.op, layer=exc.layer) from None
        result.metrics.append(MetricsRow(epoch, "train", loss_sum / n, correct / n, lr))
        eval_loss, eval_acc = evaluate(params, eval_set)
        result.metrics.append(MetricsRow(epoch, "eval", eval_loss, eval_acc, lr))
        log.info("epoch %d train_loss %.4f eval_loss %.4f eval_acc %.4f", epoch, loss_sum / n, eval_loss, eval_acc)
        last_good = snapshot(epoch)

    result.checkpoint = last_good
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.metrics_csv())
        save_checkpoint(last_good, out / "checkpoint.pewire")
    return result
