"""Losses, mixup and the three training stages.

1. ``train_backbone``: DiceBCE + orthogonality penalty, with mixup per batch.
2. ``self_distill``: student initialised from the teacher and trained on the
   teacher's probabilities only; it never sees rain masks.
3. ``film_finetune``: frozen backbone, only one adapter set is trained.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datagen import Dataset
from .metrics import MetricsReport, confusion, metrics_report, predict_with_threshold
from .model import Backbone, FiLMAdapterSet
from .orthoreg import mean_sigma, srip_penalty

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_CSI", "val_F1", "val_IoU", "srip_term")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    max_epochs: int = 90
    patience: int = 40
    batch_size: int = 8  # full-scale runs used 56
    mixup: bool = True
    mixup_alpha: float = 1.0
    srip_lambda: float = 0.1
    srip_iters: int = 1
    srip_seed: int = 0
    distill_epochs: int = 10
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    val_threshold: float = 0.5
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be nonnegative")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")
        if self.srip_lambda < 0:
            raise ValueError("srip_lambda must be nonnegative")
        if self.srip_iters < 1:
            raise ValueError("srip_iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainBatch:
    x: torch.Tensor
    y: torch.Tensor
    region_ids: torch.Tensor
    mix_lambda: Optional[float] = None
    mix_perm: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0] or self.x.shape[0] != self.region_ids.shape[0]:
            raise ValueError("x, y and region_ids disagree on batch size")


@dataclass
class Checkpoint:
    backbone: Backbone
    config: TrainConfig
    adapters: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_csi: Optional[float] = None
    history: list = field(default_factory=list)

    def meta(self) -> dict:
        return {"train_config": asdict(self.config), "epoch": self.epoch, "best_val_csi": self.best_val_csi}


def configure_determinism(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def dice_bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7,
                  smooth: float = 1.0) -> torch.Tensor:
    """Mean binary cross-entropy plus soft Dice loss over the whole tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    bce = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()
    dice = 1.0 - (2.0 * (p * target).sum() + smooth) / (p.sum() + target.sum() + smooth)
    return bce + dice


def mixup_batch(batch: TrainBatch, alpha: float, rng: np.random.Generator,
                lam: Optional[float] = None, perm: Optional[np.ndarray] = None) -> TrainBatch:
    """Convex combination of the batch with a shuffled copy of itself.

    One ``lam ~ Beta(alpha, alpha)`` per batch. Region ids stay with the
    unshuffled side.
    """
    n = batch.x.shape[0]
    if n == 0:
        raise ValueError("cannot mix an empty batch")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(n)
    idx = torch.as_tensor(perm, dtype=torch.long)
    x = lam * batch.x + (1.0 - lam) * batch.x[idx]
    y = lam * batch.y + (1.0 - lam) * batch.y[idx]
    return TrainBatch(x, y, batch.region_ids.clone(), lam, np.asarray(perm))


def dataset_tensors(dataset: Dataset) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(inputs [N, C, T_in, H, W], rain masks [N, 1, T_out, H, W], region ids [N])."""
    x = torch.from_numpy(np.stack([s.x for s in dataset.samples]))
    y = torch.from_numpy(np.stack([dataset.mask(s) for s in dataset.samples]).astype(np.float32)).unsqueeze(1)
    r = torch.tensor([s.region_id for s in dataset.samples], dtype=torch.long)
    return x, y, r


@torch.no_grad()
def predict_probs(backbone: Backbone, x: torch.Tensor, region_ids: torch.Tensor,
                  adapters: Optional[FiLMAdapterSet] = None, batch_size: int = 8) -> torch.Tensor:
    was_training = backbone.training
    backbone.eval()
    try:
        out = [backbone(x[i : i + batch_size], region_ids[i : i + batch_size], adapters)
               for i in range(0, x.shape[0], batch_size)]
    finally:
        backbone.train(was_training)
    return torch.cat(out)


def evaluate(backbone: Backbone, x: torch.Tensor, y: torch.Tensor, region_ids: torch.Tensor,
             adapters: Optional[FiLMAdapterSet] = None, threshold: float = 0.5) -> MetricsReport:
    prob = predict_probs(backbone, x, region_ids, adapters).numpy()
    counts = confusion(predict_with_threshold(prob, threshold), y.numpy() >= 0.5)
    return metrics_report(counts)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.as_tensor(order[i : i + batch_size], dtype=torch.long)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"{stage}: non-finite loss at epoch {epoch}, step {step}")


def write_log(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_FIELDS})


def train_backbone(backbone: Backbone, config: TrainConfig, train_set: Dataset,
                   val_set: Optional[Dataset] = None) -> Checkpoint:
    """Train ``backbone`` in place and return a checkpoint holding the best-validation weights.

    Validation CSI at ``config.val_threshold`` drives early stopping; without a
    validation set the training set is scored instead.
    """
    configure_determinism(config.deterministic)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x, y, r = dataset_tensors(train_set)
    vx, vy, vr = dataset_tensors(val_set) if val_set is not None and len(val_set) else (x, y, r)
    kernels = backbone.orthogonal_kernels()
    opt = torch.optim.AdamW(backbone.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    best_state = copy.deepcopy(backbone.state_dict())
    best_csi, best_epoch, since_best = None, 0, 0
    history = []
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        backbone.train()
        losses, srips = [], []
        for idx in _batches(x.shape[0], config.batch_size, rng):
            batch = TrainBatch(x[idx], y[idx], r[idx])
            if config.mixup:
                batch = mixup_batch(batch, config.mixup_alpha, rng)
            pred = backbone(batch.x, batch.region_ids)
            loss = dice_bce_loss(pred, batch.y)
            srip = srip_penalty(kernels, config.srip_lambda, config.srip_iters, config.srip_seed + step)
            total = loss + srip
            _check_finite(total, "train", epoch, step)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            losses.append(total.item())
            srips.append(srip.item())
            step += 1

        report = evaluate(backbone, vx, vy, vr, threshold=config.val_threshold)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_CSI": report.csi,
               "val_F1": report.f1, "val_IoU": report.iou, "srip_term": float(np.mean(srips))}
        history.append(row)
        log.info("train epoch %d loss %.5f val CSI %s", epoch, row["train_loss"], report.csi)

        score = report.csi if report.csi is not None else -math.inf
        if best_csi is None or score > best_csi:
            best_csi, best_epoch, since_best = score, epoch, 0
            best_state = copy.deepcopy(backbone.state_dict())
        else:
            since_best += 1
            if since_best >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    backbone.load_state_dict(best_state)
    backbone.eval()
    best = None if best_csi in (None, -math.inf) else best_csi
    return Checkpoint(backbone, config, epoch=best_epoch, best_val_csi=best, history=history)


def self_distill(teacher: Backbone, config: TrainConfig, x: torch.Tensor, region_ids: torch.Tensor,
                 epochs: Optional[int] = None) -> Checkpoint:
    """Retrain a copy of ``teacher`` on the teacher's own probabilities.

    Only inputs and region ids are accepted; ground-truth masks are never
    available to this stage. Mixup is off; the teacher runs in eval mode and
    is never updated.
    """
    configure_determinism(config.deterministic)
    epochs = config.distill_epochs if epochs is None else epochs
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    student = copy.deepcopy(teacher)
    if epochs <= 0:
        return Checkpoint(student, config, epoch=0)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    try:
        soft = predict_probs(teacher, x, region_ids)
        kernels = student.orthogonal_kernels()
        opt = torch.optim.AdamW(student.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
        history = []
        step = 0
        for epoch in range(1, epochs + 1):
            student.train()
            losses = []
            for idx in _batches(x.shape[0], config.batch_size, rng):
                pred = student(x[idx], region_ids[idx])
                loss = dice_bce_loss(pred, soft[idx])
                srip = srip_penalty(kernels, config.srip_lambda, config.srip_iters, config.srip_seed + step)
                total = loss + srip
                _check_finite(total, "distill", epoch, step)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                losses.append(total.item())
                step += 1
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
            log.info("distill epoch %d loss %.5f", epoch, history[-1]["train_loss"])
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
    student.eval()
    return Checkpoint(student, config, epoch=epochs, history=history)


def film_finetune(backbone: Backbone, region_id: int, year: int, region_set: Dataset, config: TrainConfig,
                  val_set: Optional[Dataset] = None, epochs: Optional[int] = None) -> FiLMAdapterSet:
    """Fit one identity-initialised adapter set for ``(region_id, year)`` on a frozen backbone.

    The backbone runs in eval mode, so dropout is off and the adapters see a
    fixed feature extractor. With ``val_set`` the adapters with the best
    validation CSI are returned, the untouched identity adapters included.
    """
    if len(region_set) == 0:
        raise ValueError(f"no samples for region {region_id}, year {year}")
    foreign = [(s.region_id, s.year) for s in region_set.samples if (s.region_id, s.year) != (region_id, year)]
    if foreign:
        raise ValueError(f"region set contains samples from other pairs, e.g. {foreign[0]}")
    configure_determinism(config.deterministic)
    epochs = config.finetune_epochs if epochs is None else epochs
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, region_id, year])
    adapters = backbone.new_adapters((region_id, year))
    if epochs <= 0:
        return adapters

    x, y, r = dataset_tensors(region_set)
    if val_set is not None and len(val_set):
        vx, vy, vr = dataset_tensors(val_set)
    else:
        vx = None
    frozen = [p.requires_grad for p in backbone.parameters()]
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(adapters.parameters(), lr=config.finetune_lr, weight_decay=0.0)
    best_state = copy.deepcopy(adapters.state_dict())
    best_csi = evaluate(backbone, vx, vy, vr, adapters, config.val_threshold).csi if vx is not None else None
    try:
        step = 0
        for epoch in range(1, epochs + 1):
            for idx in _batches(x.shape[0], config.batch_size, rng):
                pred = backbone(x[idx], r[idx], adapters)
                loss = dice_bce_loss(pred, y[idx])
                _check_finite(loss, "finetune", epoch, step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
            if vx is not None:
                score = evaluate(backbone, vx, vy, vr, adapters, config.val_threshold).csi
                if score is not None and (best_csi is None or score > best_csi):
                    best_csi = score
                    best_state = copy.deepcopy(adapters.state_dict())
    finally:
        for p, flag in zip(backbone.parameters(), frozen):
            p.requires_grad_(flag)
    if vx is not None:
        adapters.load_state_dict(best_state)
    return adapters


def kernel_sigma(backbone: Backbone, iters: int = 100, seed: int = 0) -> float:
    """Mean spectral-norm estimate of ``W^T W - I`` over the penalised kernels."""
    return mean_sigma(backbone.orthogonal_kernels(), iters, seed)
