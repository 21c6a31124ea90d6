"""Teacher pretraining, sparsification fine-tuning and evaluation."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from dyntok import losses
from dyntok import tensor as T
from dyntok import vit
from dyntok.data import Dataset
from dyntok.pruning import PruneSchedule
from dyntok.tensor import Tensor
from dyntok.vit import ViTConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.001
    backbone_lr_scale: float = 0.01
    freeze_backbone_epochs: int = 5
    rho: float = 0.7
    stage_blocks: tuple[int, ...] = (2, 3, 4)
    ratios: tuple[float, ...] | None = None
    strategy: str = "prediction"
    lambda_kl: float = 0.5
    lambda_distill: float = 0.5
    lambda_ratio: float = 2.0
    kl_reverse: bool = False
    temperature: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    threads: int = 1
    # teacher pretraining
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 0.05
    warmup_epochs: int = 2

    @property
    def predictor_lr(self) -> float:
        return self.batch_size / 1024 * self.base_lr

    @property
    def backbone_lr(self) -> float:
        return self.predictor_lr * self.backbone_lr_scale

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda_kl, self.lambda_distill, self.lambda_ratio)

    def schedule(self, strategy: str | None = None) -> PruneSchedule:
        strategy = strategy or ("static" if self.strategy == "static" else "prediction")
        return PruneSchedule(self.stage_blocks, self.rho, strategy, self.ratios, self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("stage_blocks", "ratios"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides) -> TrainConfig:
        raw = json.loads(Path(path).read_text()) if path else {}
        raw = {k: v for k, v in raw.items() if k in {f.name for f in fields(cls)}}
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with decoupled weight decay and per-parameter learning-rate scale."""

    def __init__(self, params: dict[str, Tensor], lr_scale: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr_scale = lr_scale
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            step_lr = lr * self.lr_scale.get(k, 1.0)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.wd and p.data.ndim > 1:
                p.data = p.data * (1 - step_lr * self.wd)
            p.data = p.data - step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(base: float, step: int, total: int, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))


def _check(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDiverged(f"loss became {loss.item()} at step {step}")


def clone_params(params: dict[str, Tensor], only_backbone: bool = False) -> dict[str, Tensor]:
    return {
        k: Tensor(p.data.copy(), requires_grad=True, name=k)
        for k, p in params.items()
        if not only_backbone or vit.is_backbone(k)
    }


# ---------------------------------------------------------------- teacher


def pretrain_teacher(config: ViTConfig, dataset: Dataset, train_cfg: TrainConfig, params: dict | None = None) -> tuple[dict[str, Tensor], list[dict]]:
    """Train a plain ViT (no sparsification) with AdamW and warmup + cosine decay."""
    params = params if params is not None else vit.init_vit(config, train_cfg.seed)
    history: list[dict] = []
    if train_cfg.pretrain_epochs <= 0:
        return params, history
    rng = np.random.default_rng(train_cfg.seed)
    opt = Adam(params, {}, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.pretrain_weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.pretrain_epochs
    warm = steps_per_epoch * train_cfg.warmup_epochs
    step = 0
    try:
        with threadpool_limits(train_cfg.threads):
            for epoch in range(train_cfg.pretrain_epochs):
                loss_sum, correct = 0.0, 0
                for x, y in dataset.batches(train_cfg.batch_size, rng):
                    out = vit.forward(x, params, config, mode="train")
                    loss = T.mul(T.mean(T.index(T.log_softmax_rows(out.logits), (np.arange(len(y)), y))), -1.0)
                    _check(loss, step)
                    opt.zero_grad()
                    T.backward(loss)
                    opt.step(cosine_lr(train_cfg.pretrain_lr, step, total, warm))
                    step += 1
                    loss_sum += loss.item() * len(y)
                    correct += int((out.logits.data.argmax(-1) == y).sum())
                history.append({"epoch": epoch, "loss": loss_sum / len(dataset), "train_acc": correct / len(dataset)})
                log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, history[-1]["loss"], history[-1]["train_acc"])
    except T.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc
    vit.snap_to_float32(params)
    return params, history


# ---------------------------------------------------------------- sparsification fine-tuning


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict] = field(default_factory=list)

    @property
    def final_ratios(self) -> list[float]:
        return self.history[-1]["ratios"] if self.history else []


def teacher_outputs(teacher: dict[str, Tensor], config: ViTConfig, dataset: Dataset, batch_size: int = 128):
    """Teacher class probabilities and final tokens for every sample (no graph)."""
    probs, tokens = [], []
    with T.no_grad():
        for x, _ in dataset.batches(batch_size):
            out = vit.forward(x, teacher, config, mode="infer")
            probs.append(T.softmax_rows(out.logits).data)
            tokens.append(out.final_tokens.data)
    return np.concatenate(probs), np.concatenate(tokens)


def final_mask(masks: list[Tensor], batch: int, config: ViTConfig) -> Tensor:
    """Full-length decision mask after the last stage (all ones without stages)."""
    return masks[-1] if masks else Tensor(np.ones((batch, config.num_patches + 1)))


def objective(out: vit.ForwardOutput, labels, teacher_probs, teacher_tokens, targets, config: ViTConfig, cfg: TrainConfig) -> dict:
    """The four loss terms of one batch and their weighted sum under ``"total"``."""
    probs = T.softmax_rows(out.logits)
    patch_masks = [m[:, 1:] for m in out.masks]
    # class token included, so the final mask is never empty; the mask only
    # selects tokens, otherwise the term pays the predictor to drop hard ones
    keep = Tensor(final_mask(out.masks, len(labels), config).data)
    parts = {
        "cls": losses.cls_loss(probs, labels),
        "kl": losses.kl_loss(probs, teacher_probs, reverse=cfg.kl_reverse),
        "distill": losses.distill_loss(out.final_tokens, teacher_tokens, keep),
        "ratio": losses.ratio_loss(patch_masks, targets) if patch_masks else None,
    }
    parts["total"] = losses.total_loss(parts["cls"], parts["kl"], parts["distill"], parts["ratio"], cfg.weights)
    return parts


def train_dynamic(teacher: dict[str, Tensor], config: ViTConfig, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fine-tune a student initialized from ``teacher`` with token sparsification.

    The backbone is frozen (gradients zeroed) for the first
    ``cfg.freeze_backbone_epochs`` epochs, then trained at
    ``cfg.backbone_lr_scale`` times the predictor learning rate.
    """
    schedule = cfg.schedule()
    schedule.validate(config.depth)
    n_stages = len(schedule.stage_blocks)
    student = clone_params(teacher, only_backbone=True)
    vit.add_stages(student, config, n_stages, cfg.seed)
    t_probs, t_tokens = teacher_outputs(teacher, config, dataset)

    scale = {k: (cfg.backbone_lr_scale if vit.is_backbone(k) else 1.0) for k in student}
    opt = Adam(student, scale, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    targets = schedule.targets
    history: list[dict] = []
    step = 0
    try:
        with threadpool_limits(cfg.threads):
            for epoch in range(cfg.epochs):
                frozen = epoch < cfg.freeze_backbone_epochs
                sums = dict(total=0.0, cls=0.0, kl=0.0, distill=0.0, ratio=0.0)
                ratio_sum = np.zeros(n_stages)
                correct = 0
                order = rng.permutation(len(dataset))
                for start in range(0, len(order), cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    x, y = dataset.floats(idx), dataset.labels[idx]
                    out = vit.forward(x, student, config, schedule, mode="train", rng=rng, temperature=cfg.temperature)
                    parts = objective(out, y, t_probs[idx], t_tokens[idx], targets, config, cfg)
                    loss = parts.pop("total")
                    patch_masks = [m[:, 1:] for m in out.masks]
                    _check(loss, step)
                    opt.zero_grad()
                    T.backward(loss)
                    if frozen:
                        for k, p in student.items():
                            if vit.is_backbone(k) and p.grad is not None:
                                p.grad = np.zeros_like(p.grad)
                    opt.step(cosine_lr(cfg.predictor_lr, step, total))
                    step += 1
                    b = len(y)
                    sums["total"] += loss.item() * b
                    for k, v in parts.items():
                        if v is not None:
                            sums[k] += v.item() * b
                    ratio_sum += [m.data.mean(axis=1).sum() for m in patch_masks] if patch_masks else 0.0
                    correct += int((out.logits.data.argmax(-1) == y).sum())
                n = len(dataset)
                rec = {k: v / n for k, v in sums.items()}
                rec.update(epoch=epoch, ratios=(ratio_sum / n).tolist(), train_acc=correct / n, frozen=frozen)
                history.append(rec)
                log.info("epoch %d loss %.4f ratios %s acc %.3f", epoch, rec["total"], np.round(rec["ratios"], 3), rec["train_acc"])
                if n_stages and epoch == cfg.epochs // 2 and min(targets) < 0.95 and min(rec["ratios"]) > 0.99:
                    warnings.warn("keep ratios stagnant at 1.0 after half the epochs; ratio loss is ineffective", RuntimeWarning)
    except T.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc
    vit.snap_to_float32(student)
    return TrainResult(student, history)


# ---------------------------------------------------------------- evaluation


def evaluate(params: dict[str, Tensor], config: ViTConfig, schedule: PruneSchedule, dataset: Dataset, batch_size: int = 128, threads: int = 1) -> dict:
    """Inference-mode top-1 accuracy, mean kept patch tokens per stage, confusion matrix."""
    schedule.validate(config.depth)
    k = dataset.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    kept: list[list[int]] = []
    rng = np.random.default_rng(schedule.seed)
    with T.no_grad(), threadpool_limits(threads):
        for x, y in dataset.batches(batch_size):
            out = vit.forward(x, params, config, schedule, mode="infer", rng=rng)
            pred = out.logits.data.argmax(-1)
            np.add.at(confusion, (y, pred), 1)
            kept.append([p.shape[1] for p in out.positions])
    return {
        "top1": float(np.trace(confusion) / max(1, confusion.sum())),
        "kept_per_stage": [int(c) for c in kept[0]] if kept else [],
        "confusion": confusion.tolist(),
        "strategy": schedule.strategy,
        "rho": schedule.rho,
    }


def schedule_with(cfg_or_schedule, **changes) -> PruneSchedule:
    base = cfg_or_schedule.schedule() if isinstance(cfg_or_schedule, TrainConfig) else cfg_or_schedule
    return replace(base, **changes)
