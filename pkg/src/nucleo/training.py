"""Three-stage training schedule.

Stage 1 updates only ``head``-tagged parameters (FPN, RPN and ROI heads),
stage 2 adds the ``upper`` backbone stages, and stage 3 trains every
parameter at ``lr_final``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout

from nucleo.autodiff import Tape, load_checkpoint, save_checkpoint, sgd_momentum_step
from nucleo.config import RunConfig, to_text
from nucleo.data import (
    Sample,
    augment,
    compute_channel_means,
    discover_samples,
    load_dataset,
    preprocess,
    sample_rng,
    split_dataset,
)
from nucleo.detection.model import MaskRCNN
from nucleo.evaluation import evaluate_dataset
from nucleo.inference import predict_samples

log = logging.getLogger(__name__)

TRAINABLE_TAGS = {1: {"head"}, 2: {"head", "upper"}, 3: {"head", "upper", "lower"}}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    stage: int
    lr: float
    l_cls: float
    l_bbox: float
    l_mask: float
    total: float
    grad_norm: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.steps and (rec.epoch, rec.step) <= (self.steps[-1].epoch, self.steps[-1].step):
            raise ValueError("train log keys must increase")
        self.steps.append(rec)

    def write_csv(self, path: str | os.PathLike):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(StepRecord.__dataclass_fields__), lineterminator="\n")
            w.writeheader()
            for rec in self.steps:
                w.writerow(asdict(rec))


def set_stage(model: MaskRCNN, stage: int) -> None:
    tags = TRAINABLE_TAGS[stage]
    for p in model.parameters():
        p.trainable = p.stage_tag in tags


def build_model(cfg: RunConfig) -> MaskRCNN:
    return MaskRCNN(cfg.detector, seed=cfg.seed, dtype=np.dtype(cfg.precision))


def load_model(path: str | os.PathLike) -> tuple[MaskRCNN, np.ndarray, RunConfig]:
    """Rebuild a model from a checkpoint written by :class:`Trainer`."""
    from nucleo.autodiff import read_meta
    from nucleo.config import parse_config

    meta = read_meta(path)
    cfg = parse_config(meta.get("config", ""))
    model = build_model(cfg)
    load_checkpoint(path, model)
    return model, np.asarray(meta["channel_means"]), cfg


class Trainer:
    def __init__(
        self,
        cfg: RunConfig,
        train_samples: Sequence[Sample],
        val_samples: Sequence[Sample] = (),
        channel_means=None,
        out_dir: str | os.PathLike | None = None,
    ):
        if not train_samples:
            raise ValueError("no training samples")
        self.cfg = cfg
        self.raw_train = list(train_samples)
        self.raw_val = list(val_samples)
        self.means = compute_channel_means(self.raw_train) if channel_means is None else np.asarray(channel_means)
        self.train = [preprocess(s, self.means) for s in self.raw_train]
        self.model = build_model(cfg)
        self.params = self.model.parameters()
        self.log = TrainLog()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(self.train) / cfg.batch_size)
        self.best_val = -math.inf

    def batches(self, epoch: int) -> list[list[int]]:
        """Sample indices for every step of an epoch, cycling a seeded permutation."""
        rng = np.random.default_rng([self.cfg.seed, epoch, 7])
        need = self.steps_per_epoch * self.cfg.batch_size
        order = np.concatenate(
            [rng.permutation(len(self.train)) for _ in range(math.ceil(need / len(self.train)))]
        )[:need]
        return [list(order[i : i + self.cfg.batch_size]) for i in range(0, need, self.cfg.batch_size)]

    def train_step(self, epoch: int, step: int, indices: Sequence[int]) -> StepRecord:
        cfg = self.cfg
        stage = cfg.stage_of(epoch)
        set_stage(self.model, stage)
        self.model.zero_grad()
        weight = np.asarray(1.0 / len(indices), dtype=self.model.dtype)
        terms = np.zeros(3)
        target_rng = np.random.default_rng([cfg.seed, epoch, step, 1])
        try:
            for i in indices:
                s = self.train[i]
                s = augment(s, cfg.augment, sample_rng(cfg.seed, s.id, epoch * 100003 + step))
                with Tape() as tape:
                    total, br, _ = self.model.training_losses(s.image, s.boxes, s.instances, target_rng)
                    tape.backward(total, weight)
                terms += (br.l_cls, br.l_bbox, br.l_mask)
            terms /= len(indices)
            if not np.all(np.isfinite(terms)):
                raise FloatingPointError(f"non-finite loss {terms}")
            lr = cfg.lr_for_stage(stage)
            norm = sgd_momentum_step(self.params, lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
        rec = StepRecord(epoch, step, stage, lr, *map(float, terms), float(terms.sum()), norm)
        self.log.append(rec)
        return rec

    def run_epoch(self, epoch: int) -> list[StepRecord]:
        return [self.train_step(epoch, k, idx) for k, idx in enumerate(self.batches(epoch))]

    def validate(self, epoch: int) -> dict | None:
        if not self.raw_val:
            return None
        preds = predict_samples(self.model, self.raw_val, self.means)
        report = evaluate_dataset(preds, {s.id: s.instances for s in self.raw_val})
        row = {"epoch": epoch, "ap": report.ap, "mean_mask_iou": report.mean_mask_iou}
        self.log.val.append(row)
        return row

    def save(self, name: str, **extra) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / name
        meta = {"config": to_text(self.cfg), "channel_means": list(map(float, self.means)), **extra}
        save_checkpoint(path, self.model, meta)
        return path

    def fit(self) -> TrainLog:
        cfg = self.cfg
        lock = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            lock = FileLock(str(self.out_dir / ".train.lock"))
            try:
                lock.acquire(timeout=0)
            except Timeout:
                raise RuntimeError(f"another training run holds {self.out_dir}") from None
            (self.out_dir / "config.txt").write_text(to_text(cfg) + "\n", encoding="utf-8")
        try:
            for epoch in range(cfg.epochs):
                recs = self.run_epoch(epoch)
                log.info("epoch %d stage %d loss %.4f", epoch, recs[-1].stage, recs[-1].total)
                self.save("last.npz", epoch=epoch)
                if cfg.val_every and (epoch + 1) % cfg.val_every == 0:
                    row = self.validate(epoch)
                    if row is not None and row["ap"] is not None and row["ap"] > self.best_val:
                        self.best_val = row["ap"]
                        self.save("best_val.npz", epoch=epoch, val_ap=row["ap"])
                stage = cfg.stage_of(epoch)
                if epoch + 1 == cfg.epochs or cfg.stage_of(epoch + 1) != stage:
                    self.save(f"stage{stage}.npz", epoch=epoch)
        finally:
            if self.out_dir is not None:
                self.log.write_csv(self.out_dir / "train_log.csv")
                if self.log.val:
                    with open(self.out_dir / "val_log.csv", "w", newline="", encoding="utf-8") as fh:
                        w = csv.DictWriter(fh, fieldnames=["epoch", "ap", "mean_mask_iou"], lineterminator="\n")
                        w.writeheader()
                        w.writerows(self.log.val)
            if lock is not None:
                lock.release()
        return self.log


def prepare_trainer(cfg: RunConfig, out_dir: str | os.PathLike | None = None) -> Trainer:
    """Discover, split and load ``cfg.dataset_root`` and build a trainer."""
    ids = discover_samples(cfg.dataset_root)
    if not ids:
        from nucleo.data import DataError

        raise DataError(f"no samples found under {cfg.dataset_root}")
    split = split_dataset(ids, cfg.seed, cfg.test_count, cfg.val_fraction)
    train = load_dataset(cfg.dataset_root, split.train_ids)
    val = load_dataset(cfg.dataset_root, split.val_ids)
    return Trainer(cfg, train, val, out_dir=out_dir if out_dir is not None else cfg.out_dir)
