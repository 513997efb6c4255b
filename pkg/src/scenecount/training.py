"""End-to-end SGD training against density-map ground truth.

Batch size is one whole image: patch extraction would destroy the spatial
context the gating branch feeds on, and variable image sizes make larger
batches awkward anyway. No augmentation, no weight decay, no schedule; the
objective is exactly the half mean sum-of-squares density loss.

Metric convention: MAE is the mean absolute count error; MSE is the *root*
of the mean squared count error. That root-mean-square reading is the
standard one in counting benchmarks (an MSE reported on the same scale as
MAE only makes sense as an RMSE) and is what :func:`evaluate` returns.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .autodiff import SGD, Tensor, backward, mse_density_loss
from .errors import ConfigError, DimensionError, NumericalError
from .model import TwoPathwayCounter, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    # the loss sums over pixels, so per-step gradients are large; the small
    # default lr keeps whole-image SGD stable
    lr: float = 2e-4
    momentum: float = 0.9
    epochs: int = 50
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mae: float
    mse: float
    bin_trace: list = field(default_factory=list)  # bin index per image, dataset order


@dataclass
class TrainLog:
    records: list

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "mae", "mse"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.loss:.9g}", f"{r.mae:.9g}", f"{r.mse:.9g}"])

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([asdict(r) for r in self.records], fh, indent=1)
            fh.write("\n")


def count_metrics(gt_counts, pred_counts) -> tuple[float, float]:
    """(MAE, root-mean-square count error) for paired count vectors."""
    gt = [float(c) for c in gt_counts]
    pred = [float(c) for c in pred_counts]
    if len(gt) != len(pred) or not gt:
        raise ConfigError("count_metrics needs equal nonempty count vectors")
    errors = [p - g for p, g in zip(pred, gt)]
    mae = math.fsum(abs(e) for e in errors) / len(errors)
    mse = math.sqrt(math.fsum(e * e for e in errors) / len(errors))
    return mae, mse


def _as_pairs(model: TwoPathwayCounter, dataset) -> tuple[list, list]:
    """Wrap (image, gt map) pairs as tensors, checking shapes up front."""
    if not dataset:
        raise ConfigError("dataset must be nonempty")
    images, gts = [], []
    for i, (img, gt) in enumerate(dataset):
        img_arr = img.data if isinstance(img, Tensor) else np.asarray(img)
        if img_arr.ndim == 2:
            img_arr = img_arr[None]
        gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
        if gt_arr.ndim == 2:
            gt_arr = gt_arr[None]
        expected = model.output_shape(img_arr.shape[1], img_arr.shape[2])
        if gt_arr.shape != (1, *expected):
            raise DimensionError(
                f"dataset pair {i}: ground truth shape {gt_arr.shape} does not match "
                f"model output {(1, *expected)}; resample it first")
        images.append(Tensor(img_arr, dtype=model.dtype))
        gts.append(Tensor(gt_arr, dtype=model.dtype))
    return images, gts


def train(model: TwoPathwayCounter, dataset, cfg: TrainConfig,
          checkpoint_path=None) -> TrainLog:
    """SGD over per-image losses; deterministic given the seed.

    ``dataset`` is a sequence of (image, ground-truth map) pairs with maps
    already at the model's output resolution. Returns one record per epoch
    with the mean loss, running train MAE/MSE, and the bin index each image
    landed in. Non-finite losses or parameters abort with a diagnostic.
    """
    images, gts = _as_pairs(model, dataset)
    n = len(images)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)

    records = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = [0.0] * n
        pred_counts = [0.0] * n
        gt_counts = [0.0] * n
        bins = [0] * n
        for i in order:
            out = model.forward(images[i])
            loss = mse_density_loss([out.fused], [gts[i]])
            lval = loss.item()
            if not math.isfinite(lval):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, image {i}: {lval}")
            backward(loss)
            opt.step()
            losses[i] = lval
            pred_counts[i] = out.predicted_count
            gt_counts[i] = float(gts[i].data.sum(dtype=np.float64))
            bins[i] = out.bin_index
        for name, p in model.params.items():
            if not np.isfinite(p.data).all():
                raise NumericalError(f"non-finite parameter {name} after epoch {epoch}")
        mae, mse = count_metrics(gt_counts, pred_counts)
        records.append(EpochRecord(epoch=epoch, loss=math.fsum(losses) / n,
                                   mae=mae, mse=mse, bin_trace=bins))
        if checkpoint_path and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model)
    return TrainLog(records=records)


def evaluate(model: TwoPathwayCounter, dataset) -> tuple[float, float]:
    """(MAE, MSE) of predicted vs ground-truth counts over a dataset.

    Order-invariant: metrics are exact sums of per-image errors, so any
    permutation of the dataset yields identical values.
    """
    images, gts = _as_pairs(model, dataset)
    pred_counts = [model.forward(img).predicted_count for img in images]
    gt_counts = [float(g.data.sum(dtype=np.float64)) for g in gts]
    return count_metrics(gt_counts, pred_counts)
