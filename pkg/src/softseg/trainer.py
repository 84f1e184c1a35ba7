"""Training loop for one candidate and slice-wise inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import AffineRanges, augment_pair, finalize_mask, sample_affine
from .candidates import CandidateConfig
from .errors import ConfigurationError, ShapeError, StateError
from .nn import OptimState, UNet, UNetConfig, adam_step, build_unet, cosine_annealing_lr
from .objective import activate, activation_grad, loss_gradient, loss_value
from .volio import Processed, SoftMask, Subject, preprocess, to_native

log = logging.getLogger(__name__)

STAGES = ("train", "val", "test")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 50
    min_improvement: float = 0.001
    lr0: float = 0.001
    unet: UNetConfig = UNetConfig(depth=3, in_channels=1, base_filters=16, dropout_rate=0.3)
    crop: tuple = (128, 128)
    target_spacing: tuple = (0.25, 0.25, 2.0)
    augmentation: AffineRanges = AffineRanges()
    seed: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigurationError("patience must lie in [0, max_epochs]")
        if self.lr0 < 0:
            raise ConfigurationError("lr0 must be >= 0")
        self.unet.validate()
        return self


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_epoch: int = 0
    stop_reason: str = ""
    converged: bool = True
    diagnostic: str = ""

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.lr):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])

    def summary(self):
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_epoch": self.stop_epoch,
            "stop_reason": self.stop_reason,
            "converged": self.converged,
            "diagnostic": self.diagnostic,
        }


class SliceSet:
    """Stacked 2D samples from preprocessed subjects, tagged with a pipeline stage."""

    def __init__(self, processed: list, stage: str):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage = stage
        images, masks = [], []
        for p in processed:
            for img, m in p.slice_samples():
                images.append(img)
                masks.append(m)
        if not images:
            raise ShapeError(f"{stage} set has no slices")
        self.images = np.stack(images).astype(np.float32)  # (N, C, H, W)
        self.masks = np.stack(masks).astype(np.float32)  # (N, H, W)

    def __len__(self):
        return len(self.images)

    def augmented(self, idx, rng, ranges: AffineRanges, hard: bool):
        if self.stage != "train":
            raise StateError(f"augmentation requested for the {self.stage} set")
        xs, ys = [], []
        for i in idx:
            p = sample_affine(rng, ranges)
            img, m = augment_pair(self.images[i], self.masks[i], p)
            xs.append(img)
            ys.append(finalize_mask(m, hard))
        return np.stack(xs), np.stack(ys)[:, None]

    def plain(self, idx, hard: bool):
        return self.images[idx], finalize_mask(self.masks[idx], hard)[:, None]


def rng_streams(seed: int) -> dict:
    """One independent generator per concern, identical for paired candidates."""
    children = np.random.SeedSequence([int(seed), 0x5EED]).spawn(4)
    names = ("init", "shuffle", "augment", "dropout")
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _batches(n, size):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def validation_loss(model: UNet, candidate: CandidateConfig, val: SliceSet, batch_size: int) -> float:
    total, count = 0.0, 0
    for idx in _batches(len(val), batch_size):
        x, y = val.plain(idx, candidate.binarize_after_aug)
        pred = activate(candidate.activation, model.forward(x, training=False))
        total += loss_value(candidate.loss, pred, y) * len(idx)
        count += len(idx)
    return total / count


def train(train_data, val_data, candidate: CandidateConfig, cfg: TrainConfig, progress=None):
    """Train one candidate; returns (model holding the best-validation weights, history).

    ``train_data``/``val_data`` are lists of :class:`Processed` subjects or
    ready :class:`SliceSet` objects.
    """
    cfg.validate()
    train_set = train_data if isinstance(train_data, SliceSet) else SliceSet(train_data, "train")
    val_set = val_data if isinstance(val_data, SliceSet) else SliceSet(val_data, "val")
    if train_set.stage != "train" or val_set.stage != "val":
        raise StateError("train/val sets carry the wrong stage tags")
    streams = rng_streams(cfg.seed)
    init_seed = int(streams["init"].integers(0, 2**31 - 1))
    model = build_unet(cfg.unet, seed=init_seed)
    params = model.parameters()
    opt = OptimState()
    hist = TrainHistory()
    hard = candidate.binarize_after_aug
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    since_improvement = 0
    best_for_patience = math.inf

    for epoch in range(cfg.max_epochs):
        lr = cosine_annealing_lr(epoch, cfg.lr0, cfg.max_epochs)
        order = streams["shuffle"].permutation(len(train_set))
        running, seen = 0.0, 0
        diverged = False
        for idx in _batches(len(order), cfg.batch_size):
            x, y = train_set.augmented(order[idx], streams["augment"], cfg.augmentation, hard)
            logits = model.forward(x, training=True, rng=streams["dropout"])
            pred = activate(candidate.activation, logits)
            loss = loss_value(candidate.loss, pred, y)
            if not math.isfinite(loss):
                diverged = True
                break
            g = activation_grad(candidate.activation, logits, loss_gradient(candidate.loss, pred, y))
            grads = model.backward(g)
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                diverged = True
                break
            adam_step(opt, params, grads, lr)
            running += loss * len(idx)
            seen += len(idx)
        val = validation_loss(model, candidate, val_set, cfg.batch_size) if not diverged else math.nan
        if diverged or not math.isfinite(val):
            hist.converged = False
            hist.stop_reason = "non_finite"
            hist.stop_epoch = epoch + 1
            hist.diagnostic = f"non-finite loss at epoch {epoch + 1} (lr={lr:.3g})"
            log.warning("%s: %s", candidate.name, hist.diagnostic)
            break
        hist.epochs.append(epoch + 1)
        hist.train_loss.append(running / max(seen, 1))
        hist.val_loss.append(val)
        hist.lr.append(lr)
        if progress is not None:
            progress(epoch + 1, hist.train_loss[-1], val, lr)
        if val < hist.best_val_loss:
            hist.best_val_loss = val
            hist.best_epoch = epoch + 1
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if val < best_for_patience - cfg.min_improvement:
            best_for_patience = val
            since_improvement = 0
        else:
            since_improvement += 1
        hist.stop_epoch = epoch + 1
        if since_improvement >= cfg.patience and epoch + 1 < cfg.max_epochs:
            hist.stop_reason = "early_stopping"
            break
    else:
        hist.stop_reason = "budget"

    model.load_state_dict(best_state)
    return model, hist


# -- inference ---------------------------------------------------------------------


def predict_processed(model: UNet, candidate: CandidateConfig, processed: Processed, batch_size=16):
    """Soft prediction on the processed grid, shape (X, Y, Z)."""
    imgs = np.stack([img for img, _ in processed.slice_samples()])
    if imgs.shape[1] != model.config.in_channels:
        raise ShapeError(f"subject has {imgs.shape[1]} contrasts, model expects {model.config.in_channels}")
    outs = []
    for idx in _batches(len(imgs), batch_size):
        logits = model.forward(imgs[idx], training=False)
        outs.append(activate(candidate.activation, logits)[:, 0])
    pred = np.concatenate(outs)  # (Z, X, Y)
    return np.clip(pred.transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


def predict_subject(model: UNet, candidate: CandidateConfig, subject, cfg: TrainConfig | None = None) -> SoftMask:
    """Preprocess (if needed), run every axial slice, and map back to the native grid."""
    if isinstance(subject, Subject):
        if cfg is None:
            raise StateError("a raw Subject needs the TrainConfig preprocessing settings")
        processed = preprocess(subject, cfg.target_spacing, cfg.crop)
    else:
        processed = subject
    pred = predict_processed(model, candidate, processed)
    return to_native(pred, processed)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["crop"] = list(cfg.crop)
    d["target_spacing"] = list(cfg.target_spacing)
    return d
