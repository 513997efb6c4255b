"""Synthetic datasets, scenario reports, and the ablation driver.

The synthetic generator stands in for real crowd photos at desk scale: each
image is a superposition of unit-peak Gaussian blobs at the annotated
points plus a little uniform noise, so the pixels genuinely carry the
counting signal and overfit/separation experiments mean something. Blobs
reuse the density renderer with their own sigma, independent of the
ground-truth kernels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from .density import (FIXED, AnnotationSet, KernelSpec, render_density,
                      sum_pool_resample)
from .errors import ConfigError, ScenecountError
from .model import ModelConfig, TwoPathwayCounter, build, discretize
from .training import TrainConfig, evaluate, train

NOISE_MAX = 0.05


@dataclass(frozen=True)
class Regime:
    """One crowd-density regime of the synthetic mix."""

    count_range: tuple  # inclusive (lo, hi)
    blob_sigma: float
    fraction: float

    def __post_init__(self):
        lo, hi = self.count_range
        object.__setattr__(self, "count_range", (int(lo), int(hi)))
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad count_range {self.count_range}")
        if self.blob_sigma <= 0:
            raise ConfigError("blob_sigma must be > 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("fraction must lie in [0, 1]")


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 16
    width: int = 64
    height: int = 64
    regimes: tuple = (Regime((5, 15), 2.5, 1.0),)
    seed: int = 0

    def __post_init__(self):
        regimes = tuple(r if isinstance(r, Regime) else Regime(**r) for r in self.regimes)
        object.__setattr__(self, "regimes", regimes)
        if self.num_images < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("num_images, width, height must be positive")
        if not regimes:
            raise ConfigError("at least one regime is required")
        total = math.fsum(r.fraction for r in regimes)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"regime fractions must sum to 1, got {total}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regimes"] = [
            {"count_range": list(r.count_range), "blob_sigma": r.blob_sigma,
             "fraction": r.fraction} for r in self.regimes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def synth_dataset(cfg: SynthConfig):
    """Generate ``[(image, AnnotationSet, regime_index), ...]``, seeded.

    Images are float32 ``[height, width]`` rasters in [0, 1]: unit-peak
    blobs at uniformly scattered points, plus uniform noise in
    [0, NOISE_MAX], clipped at 1 where blobs pile up.
    """
    rng = np.random.default_rng(cfg.seed)
    fractions = np.array([r.fraction for r in cfg.regimes])
    out = []
    for _ in range(cfg.num_images):
        ridx = int(rng.choice(len(cfg.regimes), p=fractions))
        regime = cfg.regimes[ridx]
        lo, hi = regime.count_range
        n = int(rng.integers(lo, hi + 1))
        pts = rng.uniform((0.0, 0.0), (cfg.width, cfg.height), size=(n, 2))
        ann = AnnotationSet(width=cfg.width, height=cfg.height, points=pts)
        blob_spec = KernelSpec(mode=FIXED, fixed_sigma=regime.blob_sigma,
                               normalize_mass=False)
        # unnormalized kernels carry 1/(2 pi sigma^2); undo it for unit peaks
        image = render_density(ann, blob_spec) * (2.0 * math.pi * regime.blob_sigma ** 2)
        image += rng.uniform(0.0, NOISE_MAX, size=image.shape)
        np.clip(image, 0.0, 1.0, out=image)
        out.append((image.astype(np.float32), ann, ridx))
    return out


def render_targets(annotations, spec: KernelSpec, factor: int = 1):
    """Ground-truth maps for a batch, resampled by ``factor``.

    Adaptive sigmas need two points; images with fewer fall back to the
    spec's fixed sigma so zero- and one-person images stay renderable.
    """
    maps = []
    for ann in annotations:
        eff = spec if (spec.mode == FIXED or len(ann) >= 2) else replace(spec, mode=FIXED)
        maps.append(sum_pool_resample(render_density(ann, eff), factor))
    return maps


# ---------------------------------------------------------------------------
# Scenario discovery reporting
# ---------------------------------------------------------------------------

@dataclass
class ImageScenario:
    id: int
    w_star: float
    bin_index: int
    gt_count: float
    pred_count: float


@dataclass
class ScenarioReport:
    """Per-image responses and the bin partition they induce.

    Every image appears in exactly one bin list; ``occupied_bin_count`` is
    the number of distinct bins in use (the discovered scenarios).
    """

    bins: int
    entries: list
    bin_members: dict = field(default_factory=dict)
    occupied_bin_count: int = 0

    def to_json(self, path) -> None:
        payload = {
            "bins": self.bins,
            "occupied_bin_count": self.occupied_bin_count,
            "entries": [asdict(e) for e in self.entries],
            "bin_members": {str(b): ids for b, ids in sorted(self.bin_members.items())},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")


def scenario_report(model: TwoPathwayCounter, dataset, bins: int) -> ScenarioReport:
    """Group a dataset by discretized response.

    ``dataset`` is a sequence of (image, gt_count) pairs; ``bins`` may
    differ from the model's configured bin count.
    """
    entries = []
    members: dict[int, list] = {}
    for i, (image, gt_count) in enumerate(dataset):
        out = model.forward(image if image.ndim == 3 else image[None])
        idx, _ = discretize(out.w_star, bins)
        entries.append(ImageScenario(id=i, w_star=out.w_star, bin_index=idx,
                                     gt_count=float(gt_count),
                                     pred_count=out.predicted_count))
        members.setdefault(idx, []).append(i)
    return ScenarioReport(bins=bins, entries=entries, bin_members=members,
                          occupied_bin_count=len(members))


# ---------------------------------------------------------------------------
# Ablation driver
# ---------------------------------------------------------------------------

@dataclass
class AblationCell:
    variant: str
    bins: int
    mae: float
    mse: float
    status: str  # "ok" or "failed: <reason>"


@dataclass
class AblationTable:
    cells: list

    def to_csv_rows(self):
        yield ["variant", "bins", "mae", "mse", "status"]
        for c in self.cells:
            mae = f"{c.mae:.9g}" if c.status == "ok" else ""
            mse = f"{c.mse:.9g}" if c.status == "ok" else ""
            yield [c.variant, c.bins, mae, mse, c.status]

    def cell(self, variant: str, bins: int) -> AblationCell:
        for c in self.cells:
            if c.variant == variant and c.bins == bins:
                return c
        raise KeyError((variant, bins))


def run_ablation(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 variants=(), bins_list=()) -> AblationTable:
    """Train one model per cell and tabulate MAE/MSE on the same data.

    Cells are the requested architecture variants at the base bin count plus
    a bin sweep of the discretized variant. Every cell shares the training
    seed; a failing cell is recorded and the sweep continues.
    """
    cells_spec = [(v, model_cfg.bins) for v in variants]
    cells_spec += [("discretized", int(b)) for b in bins_list]
    seen = set()
    cells = []
    for variant, bins in cells_spec:
        if (variant, bins) in seen:
            continue
        seen.add((variant, bins))
        cfg = replace(model_cfg, variant=variant, bins=bins)
        try:
            model = build(cfg, seed=train_cfg.seed)
            train(model, dataset, train_cfg)
            mae, mse = evaluate(model, dataset)
            cells.append(AblationCell(variant, bins, mae, mse, "ok"))
        except ScenecountError as exc:
            cells.append(AblationCell(variant, bins, math.nan, math.nan,
                                      f"failed: {exc}"))
    return AblationTable(cells=cells)
