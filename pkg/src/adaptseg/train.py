"""Adapter-only training and prompt-protocol evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneConfig
from .metrics import dice, hd95, iou
from .model import ModelConfig, SegModel
from .optim import AdamW
from .prompting import PromptSet, generate_bbox, sample_iterative_click, sample_random_clicks
from .synthetic import Sample

log = logging.getLogger(__name__)

PROMPT_SETTINGS = ("1point", "3points", "bbox0.5", "bbox0.75")
_SETTING_ALIASES = {"1-point": "1point", "3-points": "3points"}


@dataclass
class TrainConfig:
    # backbone
    image_size: int = 64
    depth: int = 1
    patch: int = 8
    channels: int = 1
    embed_len: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0
    # adaptation
    adapters: bool = True
    reduction: int = 4
    scale: float = 0.5
    mode: str = "hyper"
    sd_trans: bool = False
    decoder_blocks: int = 2
    cond_target: str = "image"
    decoder_len: int = 0  # 0 keeps the encoder width
    # optimisation
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    bce_weight: float = 0.5
    dice_weight: float = 0.5
    train_fraction: float = 0.75
    iter_click_prob: float = 0.5
    # evaluation during training
    eval_prompt: str = "1point"
    data: str = ""

    def __post_init__(self):
        for name in ("epochs", "batch_size", "decoder_blocks"):
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.iter_click_prob <= 1:
            raise ValueError("iter_click_prob must lie in [0, 1]")
        self.eval_prompt = normalize_setting(self.eval_prompt)
        self.model_config  # validates the model part

    @property
    def model_config(self) -> ModelConfig:
        bb = BackboneConfig(
            self.image_size, self.depth, self.patch, self.channels, self.embed_len, self.heads, self.blocks, self.mlp_ratio
        )
        return ModelConfig(
            bb,
            self.reduction,
            self.scale,
            self.adapters,
            self.mode,
            self.sd_trans,
            self.decoder_blocks,
            self.cond_target,
            self.decoder_len or None,
        )


def normalize_setting(setting: str) -> str:
    setting = _SETTING_ALIASES.get(setting, setting)
    if setting not in PROMPT_SETTINGS:
        raise ValueError(f"unknown prompt setting {setting!r}; expected one of {PROMPT_SETTINGS}")
    return setting


# -- loss ---------------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, log(1 + e^x) - y x."""
    return ag.mean(ag.softplus(logits) - logits * Tensor(target))


def soft_dice_loss(logits: Tensor, target: np.ndarray, eps: float = 1.0) -> Tensor:
    """1 - soft Dice per sample (all non-batch axes reduced), averaged over the batch."""
    probs = ag.sigmoid(logits)
    axes = tuple(range(1, logits.ndim))
    t = Tensor(target)
    inter = ag.sum_(probs * t, axis=axes)
    denom = ag.sum_(probs, axis=axes) + Tensor(target.sum(axis=axes))
    return ag.mean(1.0 - (2.0 * inter + eps) / (denom + eps))


def segmentation_loss(logits: Tensor, target: np.ndarray, bce_weight: float = 0.5, dice_weight: float = 0.5) -> Tensor:
    target = target.astype(np.float64)
    return bce_with_logits(logits, target) * bce_weight + soft_dice_loss(logits, target) * dice_weight


# -- prompts ------------------------------------------------------------------------------


def prompt_mask(mask: np.ndarray, volume: bool) -> np.ndarray:
    """Mask in the prompt coordinate frame: (D, H, W) for volumes, (H, W) otherwise."""
    return mask if volume else mask[0]


def make_prompt(mask: np.ndarray, setting: str, seed, volume: bool) -> PromptSet:
    gt = prompt_mask(mask, volume)
    setting = normalize_setting(setting)
    if setting == "1point":
        return PromptSet(sample_random_clicks(gt, 1, 0, seed))
    if setting == "3points":
        return PromptSet(sample_random_clicks(gt, 3, 0, seed))
    overlap = 0.5 if setting == "bbox0.5" else 0.75
    return PromptSet(box=generate_bbox(gt, overlap, seed))


def training_prompts(batch: Sequence[Sample], rng: np.random.Generator, volume: bool) -> list[PromptSet]:
    """Random initial prompts: 1-3 positive clicks, or a box with IoU drawn from [0.5, 1]."""
    seeds = rng.integers(0, 2**63 - 1, size=len(batch))
    if rng.random() < 0.5:
        k = int(rng.integers(1, 4))
        return [PromptSet(sample_random_clicks(prompt_mask(s.mask, volume), k, 0, sd)) for s, sd in zip(batch, seeds)]
    overlap = float(rng.choice([0.5, 0.6, 0.75, 0.9, 1.0]))
    return [PromptSet(box=generate_bbox(prompt_mask(s.mask, volume), overlap, sd)) for s, sd in zip(batch, seeds)]


def add_iterative_clicks(model: SegModel, images: np.ndarray, batch: Sequence[Sample], prompts: list[PromptSet], volume: bool) -> list[PromptSet]:
    pred = model.predict(images, prompts) > 0.5
    out = []
    for ps, s, p in zip(prompts, batch, pred):
        click = sample_iterative_click(prompt_mask(p, volume), prompt_mask(s.mask, volume))
        out.append(PromptSet(ps.clicks + [click], ps.box) if click is not None else ps)
    return out


# -- training -----------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dice: float
    iou: float
    hd95: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "dice": self.dice, "iou": self.iou, "hd95": self.hd95}


@dataclass
class TrainResult:
    model: SegModel
    history: list[EpochRecord] = field(default_factory=list)
    steps: int = 0


def stack_images(batch: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in batch])


def train(
    cfg: TrainConfig,
    train_set: Sequence[Sample],
    test_set: Sequence[Sample] = (),
    log_path: str | Path | None = None,
    model: SegModel | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train the trainable-flagged parameters only; frozen tensors are never touched.

    Deterministic given ``cfg.seed``.  One metrics record per epoch is
    appended to ``log_path`` (JSON lines) when given.
    """
    if not train_set:
        raise ValueError("empty training set")
    model = model or SegModel(cfg.model_config, seed=cfg.seed)
    volume = cfg.model_config.is_volume
    model.set_grad_for_training()
    trainable = model.trainable_parameters()
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model)
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
                images = stack_images(batch)
                prompts = training_prompts(batch, rng, volume)
                if cfg.iter_click_prob and rng.random() < cfg.iter_click_prob:
                    prompts = add_iterative_clicks(model, images, batch, prompts, volume)
                target = np.stack([s.mask for s in batch])
                logits = model.forward(images, prompts)
                loss = segmentation_loss(logits, target, cfg.bce_weight, cfg.dice_weight)
                losses.append(loss.item())
                if trainable:
                    opt.zero_grad()
                    ag.backward(loss)
                    opt.step()
                result.steps += 1
            if test_set:
                summary = evaluate(model, test_set, cfg.eval_prompt, seed=cfg.seed, volume=volume).summary
            else:
                summary = {"dice": math.nan, "iou": math.nan, "hd95": math.nan}
            rec = EpochRecord(epoch, float(np.mean(losses)), summary["dice"], summary["iou"], summary["hd95"])
            result.history.append(rec)
            log.info("epoch %d loss %.4f dice %.4f", epoch, rec.loss, rec.dice)
            if log_file:
                log_file.write(json.dumps(rec.as_dict()) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        if log_file:
            log_file.close()
        model.set_grad_all()
    return result


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    setting: str
    seed: int
    rows: list[dict]

    @property
    def summary(self) -> dict:
        keys = ("dice", "iou", "hd95")
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}


def sample_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Dice / IoU / HD95 for one sample; an empty prediction scores HD95 = grid diagonal."""
    d, i = dice(pred, gt), iou(pred, gt)
    if pred.any() and gt.any():
        h = hd95(pred, gt)
    else:
        h = float(np.sqrt(sum(n * n for n in gt.shape)))
    return {"dice": d, "iou": i, "hd95": h}


def prompts_for(samples: Sequence[Sample], setting: str, seed: int, volume: bool) -> list[PromptSet]:
    return [make_prompt(s.mask, setting, [seed, k], volume) for k, s in enumerate(samples)]


def evaluate(
    predictor,
    samples: Sequence[Sample],
    setting: str,
    seed: int = 0,
    volume: bool | None = None,
    batch_size: int = 16,
) -> EvalReport:
    """Per-sample metrics under one prompt setting; prompts use seeds derived from (seed, sample index).

    ``predictor`` is a SegModel or any callable (images, prompts) -> probabilities.
    """
    setting = normalize_setting(setting)
    if volume is None:
        volume = isinstance(predictor, SegModel) and predictor.cfg.is_volume
    prompts = prompts_for(samples, setting, seed, volume)
    predict = predictor.predict if isinstance(predictor, SegModel) else predictor
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        probs = predict(stack_images(chunk), prompts[start : start + batch_size])
        for k, (s, p) in enumerate(zip(chunk, probs)):
            pred = prompt_mask(p > 0.5, volume)
            row = {"index": start + k}
            row.update(sample_metrics(pred, prompt_mask(s.mask, volume)))
            rows.append(row)
    return EvalReport(setting, seed, rows)
