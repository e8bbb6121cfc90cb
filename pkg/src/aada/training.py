"""Supervised source training and joint adversarial adaptation."""

from __future__ import annotations

import contextlib
import dataclasses
import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import save_checkpoint
from .data import AugmentConfig, DataError, DomainDataset, make_batch
from .evaluation import ConfusionMatrix, iou_per_class
from .losses import (
    ClassWeights,
    DivergenceError,
    LossWeights,
    ace_weights,
    adv_disc_loss,
    adv_gen_loss,
    disc_reg_loss,
    disc_total_loss,
    focal_loss,
    joint_loss,
    weighted_ce,
)
from .networks import ModelBundle
from .selection import CheckpointRecord, evaluate_checkpoint_entropy

logger = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "iter", "L_sup", "L_sup_ST", "L_advA", "L_advD", "L_reg", "mean_entropy"]


@dataclass
class SourceTrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 50
    iterations_per_epoch: int = 2500
    batch: int = 4
    kappa: float = 4.0
    loss: str = "ace"
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.loss not in ("ace", "ce", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if min(self.lr, self.momentum, self.epochs, self.iterations_per_epoch, self.batch) <= 0:
            raise ValueError("source training settings must be positive")
        if self.kappa < 0 or self.weight_decay < 0:
            raise ValueError("kappa and weight_decay must be non-negative")


@dataclass
class DAConfig:
    adam_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    lw: LossWeights = field(default_factory=LossWeights)
    epochs: int = 50
    iterations_per_epoch: int = 2500
    batch: int = 4
    selection_start_epoch: int = 25
    jitter_max_shift: int = 4
    jitter_sigma: float = 0.1
    entropy_subsample: float = 1.0
    # identity pre-fit of the adapter before adaptation; 0 keeps plain random init
    adapter_warmup_iterations: int = 0
    # classifier SGD learning rate during adaptation; None reuses the source setting
    classifier_lr: float | None = None
    # adapter Adam learning rate; None reuses adam_lr
    adapter_lr: float | None = None

    def __post_init__(self):
        if not self.selection_start_epoch < self.epochs:
            raise ValueError("selection_start_epoch must be < epochs")


@dataclass
class EpochStats:
    epoch: int
    confusion: ConfusionMatrix
    ious: np.ndarray
    weights: ClassWeights
    next_weights: ClassWeights
    losses: dict[str, float] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion.counts) / max(1, self.confusion.total))


class TrainLog:
    """CSV loss trace, one row per iteration."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, LOG_FIELDS)
            self._writer.writeheader()

    def write(self, **row):
        full = {k: row.get(k, "") for k in LOG_FIELDS}
        self.rows.append(full)
        if self._fh is not None:
            self._writer.writerow(full)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _bn_layers(model: nn.Module):
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@contextlib.contextmanager
def bn_update_policy(model: nn.Module, source_pass: bool):
    """Freeze batch-norm running statistics during source-image passes.

    Normalisation still uses batch statistics in training mode; only the
    running averages are held constant.
    """
    if not source_pass:
        yield
        return
    layers = _bn_layers(model)
    saved = [m.momentum for m in layers]
    for m in layers:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(layers, saved):
            m.momentum = mom


def discriminator_input_jitter(
    x: torch.Tensor,
    rng: np.random.Generator,
    max_shift: int = 4,
    sigma: float = 0.1,
    shifts: np.ndarray | None = None,
) -> torch.Tensor:
    """Random translation by 0..max_shift px per axis, then radiometric jitter.

    ``x`` is (B, N, H, W). Shifts are (horizontal, vertical) per sample;
    vacated borders are filled by reflection.
    """
    single = x.dim() == 3
    if single:
        x = x[None]
    b, n, h, w = x.shape
    if max_shift >= min(h, w):
        raise ValueError("patch must be larger than max_shift")
    if shifts is None:
        shifts = rng.integers(0, max_shift + 1, size=(b, 2))
    out = x
    if max_shift > 0:
        m = max_shift
        padded = F.pad(x, (m, m, m, m), mode="reflect")
        out = torch.stack(
            [padded[i, :, m - int(dy) : m - int(dy) + h, m - int(dx) : m - int(dx) + w] for i, (dx, dy) in enumerate(shifts)]
        )
    if sigma > 0:
        scale = torch.as_tensor(rng.normal(1.0, sigma, size=(b, n, 1, 1)), dtype=x.dtype)
        offset = torch.as_tensor(rng.normal(0.0, sigma, size=(b, n, 1, 1)), dtype=x.dtype)
        out = out * scale + offset
    return out[0] if single else out


def _supervised_loss(probs, labels, cfg: SourceTrainConfig, weights: ClassWeights):
    if cfg.loss == "focal":
        return focal_loss(probs, labels, cfg.focal_gamma)
    return weighted_ce(probs, labels, weights)


def _next_weights(cm: ConfusionMatrix, cfg: SourceTrainConfig) -> ClassWeights:
    if cfg.loss != "ace":
        return ClassWeights.uniform(cm.class_count)
    return ace_weights(iou_per_class(cm), cfg.kappa)


def _accumulate_argmax(cm: ConfusionMatrix, probs: torch.Tensor, labels: torch.Tensor):
    cm.accumulate(probs.detach().argmax(1).numpy(), labels.numpy())


def _sgd(model: nn.Module, cfg: SourceTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _refuse_eval_only(dataset: DomainDataset):
    if dataset.labels_for_evaluation_only:
        raise DataError(f"dataset {dataset.name!r} carries evaluation-only labels and cannot be used for training")


def source_train(
    model: nn.Module,
    dataset: DomainDataset,
    cfg: SourceTrainConfig,
    rng: np.random.Generator,
    aug: AugmentConfig | None = None,
    log: TrainLog | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[EpochStats]:
    """Train the classifier on labelled source data; updates ``model`` in place.

    The first epoch uses unit class weights. With ``loss="ace"`` the weights
    of every later epoch come from the IoUs of the previous epoch's training
    predictions.
    """
    _refuse_eval_only(dataset)
    if not dataset.labelled:
        raise DataError("source training needs labelled data")
    aug = aug or AugmentConfig()
    optimizer = optimizer or _sgd(model, cfg)
    model.train()
    weights = ClassWeights.uniform(dataset.class_count)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        cm = ConfusionMatrix(dataset.class_count)
        total = 0.0
        for it in range(cfg.iterations_per_epoch):
            images, labels = make_batch(dataset, cfg.batch, aug, rng)
            x = torch.from_numpy(images)
            y = torch.from_numpy(labels)
            probs = model(x)
            loss = _supervised_loss(probs, y, cfg, weights)
            if not torch.isfinite(loss):
                raise DivergenceError(f"source training diverged at epoch {epoch}, iteration {it}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            _accumulate_argmax(cm, probs, y)
            value = float(loss.detach())
            total += value
            if log is not None:
                log.write(epoch=epoch, iter=it, L_sup=f"{value:.6g}")
        ious = iou_per_class(cm)
        next_w = _next_weights(cm, cfg)
        history.append(EpochStats(epoch, cm, ious, weights, next_w, {"L_sup": total / cfg.iterations_per_epoch}))
        logger.info("source epoch %d loss %.4f acc %.4f", epoch, total / cfg.iterations_per_epoch, history[-1].accuracy)
        weights = next_w
    return history


def _set_trainable(model: nn.Module, flag: bool):
    for p in model.parameters():
        p.requires_grad_(flag)


def da_step(
    bundle: ModelBundle,
    opts: dict[str, torch.optim.Optimizer],
    x_s: torch.Tensor,
    y_s: torch.Tensor,
    x_t: torch.Tensor,
    weights: ClassWeights,
    cfg: DAConfig,
    rng: np.random.Generator,
    bn_policy: bool = True,
) -> dict:
    """One alternating iteration: update adapter+classifier, then discriminator."""
    C, A, D = bundle.classifier, bundle.adapter, bundle.discriminator
    lw = cfg.lw

    # step 1: joint adapter/classifier update, discriminator frozen
    _set_trainable(D, False)
    x_st = A(x_s)
    r_st = C(x_st)
    with bn_update_policy(C, source_pass=bn_policy):
        r_s = C(x_s)
    l_sup_st = weighted_ce(r_st, y_s, weights)
    l_sup = weighted_ce(r_s, y_s, weights)
    l_adv_a = adv_gen_loss(D(x_st))
    loss_ac = joint_loss(l_sup_st, l_sup, l_adv_a, lw)
    opts["classifier"].zero_grad(set_to_none=True)
    opts["adapter"].zero_grad(set_to_none=True)
    loss_ac.backward()
    opts["classifier"].step()
    opts["adapter"].step()
    _set_trainable(D, True)

    # step 2: discriminator update on the same transformed batch
    x_st_d = discriminator_input_jitter(x_st.detach(), rng, cfg.jitter_max_shift, cfg.jitter_sigma)
    p_t = D(x_t)
    p_st = D(x_st_d)
    l_adv_d = adv_disc_loss(p_t, p_st)
    l_reg = disc_reg_loss(p_t, p_st)
    loss_d = disc_total_loss(l_adv_d, l_reg, lw.rho)
    opts["discriminator"].zero_grad(set_to_none=True)
    loss_d.backward()
    opts["discriminator"].step()

    return {
        "L_sup": float(l_sup.detach()),
        "L_sup_ST": float(l_sup_st.detach()),
        "L_advA": float(l_adv_a.detach()),
        "L_advD": float(l_adv_d.detach()),
        "L_reg": float(l_reg.detach()),
        "p_target": float(p_t.detach().mean()),
        "p_transformed": float(p_st.detach().mean()),
        "_r_st": r_st.detach(),
    }


def adapter_warmup(
    adapter: nn.Module,
    optimizer: torch.optim.Optimizer,
    source: DomainDataset,
    target: DomainDataset,
    iterations: int,
    batch: int,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> float:
    """Fit the adapter to the identity map on patches from both domains."""
    loss = torch.tensor(float("nan"))
    for _ in range(iterations):
        xs, _ = make_batch(source, batch // 2 or 1, aug, rng)
        xt, _ = make_batch(target, batch // 2 or 1, aug, rng)
        x = torch.from_numpy(np.concatenate([xs, xt]))
        loss = F.mse_loss(adapter(x), x)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def make_da_optimizers(bundle: ModelBundle, cfg: DAConfig, source_cfg: SourceTrainConfig) -> dict[str, torch.optim.Optimizer]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    if cfg.classifier_lr is not None:
        source_cfg = dataclasses.replace(source_cfg, lr=cfg.classifier_lr)
    return {
        "classifier": _sgd(bundle.classifier, source_cfg),
        "adapter": torch.optim.Adam(bundle.adapter.parameters(), lr=cfg.adapter_lr or cfg.adam_lr, betas=betas),
        "discriminator": torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.adam_lr, betas=betas),
    }


def da_train(
    bundle: ModelBundle,
    source: DomainDataset,
    target: DomainDataset,
    cfg: DAConfig,
    rng: np.random.Generator,
    source_cfg: SourceTrainConfig | None = None,
    aug: AugmentConfig | None = None,
    initial_weights: ClassWeights | None = None,
    checkpoint_dir: str | Path | None = None,
    log: TrainLog | None = None,
    on_epoch_end: Callable[[int, ModelBundle], None] | None = None,
    checkpoint_extra: dict | None = None,
) -> list[CheckpointRecord]:
    """Joint adversarial adaptation; returns one record per stored checkpoint.

    From ``selection_start_epoch`` on, every epoch's classifier is kept (in
    memory, and on disk when ``checkpoint_dir`` is given) together with its
    mean entropy on the target tiles. Before that only the latest epoch is
    kept.
    """
    _refuse_eval_only(source)
    if not source.labelled:
        raise DataError("adaptation needs a labelled source domain")
    if bundle.adapter is None or bundle.discriminator is None:
        raise ValueError("bundle needs an adapter and a discriminator")
    source_cfg = source_cfg or SourceTrainConfig()
    aug = aug or AugmentConfig()
    target_unlabelled = target.unlabelled()
    l = source.class_count
    weights = initial_weights or ClassWeights.uniform(l)
    kappa = source_cfg.kappa if source_cfg.loss == "ace" else 0.0
    opts = make_da_optimizers(bundle, cfg, source_cfg)
    C, A, D = bundle.classifier, bundle.adapter, bundle.discriminator
    for m in (C, A, D):
        m.train()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if cfg.adapter_warmup_iterations > 0:
        mse = adapter_warmup(A, opts["adapter"], source, target_unlabelled, cfg.adapter_warmup_iterations, cfg.batch, aug, rng)
        logger.info("adapter identity warm-up: mse %.4f", mse)

    history: list[CheckpointRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        cm = ConfusionMatrix(l)
        p_means = []
        for it in range(cfg.iterations_per_epoch):
            xs, ys = make_batch(source, cfg.batch, aug, rng)
            xt, _ = make_batch(target_unlabelled, cfg.batch, aug, rng)
            out = da_step(bundle, opts, torch.from_numpy(xs), torch.from_numpy(ys), torch.from_numpy(xt), weights, cfg, rng)
            for key in ("L_sup", "L_sup_ST", "L_advA", "L_advD", "L_reg"):
                if not math.isfinite(out[key]):
                    raise DivergenceError(f"{key} diverged at epoch {epoch}, iteration {it}")
            _accumulate_argmax(cm, out.pop("_r_st"), torch.from_numpy(ys))
            p_means.append(0.5 * (out["p_target"] + out["p_transformed"]))
            if log is not None:
                log.write(epoch=epoch, iter=it, **{k: f"{out[k]:.6g}" for k in LOG_FIELDS[2:7]})
        mean_p = float(np.mean(p_means))
        if mean_p < 1e-3 or mean_p > 1 - 1e-3:
            logger.warning("discriminator saturated in epoch %d (mean p = %.2e)", epoch, mean_p)
        weights = ace_weights(iou_per_class(cm), kappa) if kappa > 0 else ClassWeights.uniform(l)
        bundle.epoch = epoch
        bundle.optimizer_states = {k: o.state_dict() for k, o in opts.items()}

        entropy = None
        if epoch >= cfg.selection_start_epoch:
            entropy = evaluate_checkpoint_entropy(C, target_unlabelled, cfg.entropy_subsample, rng)
            C.train()
            if log is not None:
                log.write(epoch=epoch, iter="", mean_entropy=f"{entropy:.8g}")
        record = CheckpointRecord(epoch, entropy, None, copy.deepcopy(C.state_dict()))
        if ckpt_dir is not None:
            path = ckpt_dir / f"epoch{epoch:03d}.pt"
            save_checkpoint(path, bundle, **(checkpoint_extra or {}))
            record.checkpoint_path = str(path)
        if entropy is None:
            # before selection starts only the latest epoch is retained
            for old in history:
                if old.checkpoint_path and Path(old.checkpoint_path).exists():
                    Path(old.checkpoint_path).unlink()
            history = [r for r in history if r.mean_entropy is not None]
        history.append(record)
        logger.info("DA epoch %d entropy %s mean p %.3f", epoch, entropy, mean_p)
        if on_epoch_end is not None:
            on_epoch_end(epoch, bundle)
            for m in (C, A, D):
                m.train()
    return history
