"""The two-pathway counting network with scenario-adaptive fusion.

Layout, front to back:

* a small backbone of 3x3 conv+ReLU blocks with optional 2x2 max pools;
* a *dense* pathway tuned for congested scenes: a stride-2 transposed
  convolution that amplifies the feature map, large-kernel convs, then a
  2x2 max pool that restores the backbone's spatial extent;
* a *sparse* pathway of 3x3 convs for lighter crowds;
* an *adaption* branch (global average pool, two fully connected layers)
  that emits one scalar response ``w`` from the backbone features.

Both pathways end in a 1x1 conv producing a single-channel density map of
identical extent. The response is squashed to ``w* = arctan(sigmoid(w)) *
2/pi`` — note the codomain is (0, 0.5), so only the lower half of the bin
range is ever occupied — then snapped to the center of one of B equal bins
of [0, 1). The fused prediction is the convex combination ``w_disc * dense
+ (1 - w_disc) * sparse`` (or a variant, below), trained end to end: the
bin snap uses a straight-through gradient (treated as identity in the
backward pass), except with a single bin, where the weight is the constant
0.5 and the whole thing degenerates to fixed equal-weight fusion.

Variants cover the ablation grid: each single pathway alone, fixed
equal-weight fusion, the continuous response without discretization, and
the full discretized form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import fileio
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError, NumericalError

VARIANTS = ("sparse_only", "dense_only", "fixed_half", "continuous", "discretized")

INIT_STD = 0.1  # weights ~ N(0, 0.01); biases start at zero

TWO_OVER_PI = 2.0 / math.pi


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: tuple = (8, 16)
    backbone_pools: int = 1
    dense_kernel: int = 5
    dense_layers: int = 2
    sparse_layers: int = 2
    pathway_channels: int = 8
    adaption_hidden: int = 8
    bins: int = 10
    variant: str = "discretized"
    gate_dense: bool = True  # False swaps which pathway receives w

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        if not self.backbone_channels or any(c < 1 for c in self.backbone_channels):
            raise ConfigError("backbone_channels must be a nonempty list of positive ints")
        if not 0 <= self.backbone_pools <= len(self.backbone_channels):
            raise ConfigError(
                f"backbone_pools must be in [0, {len(self.backbone_channels)}], "
                f"got {self.backbone_pools}")
        if self.dense_kernel < 5 or self.dense_kernel % 2 == 0:
            raise ConfigError(f"dense_kernel must be odd and >= 5, got {self.dense_kernel}")
        if min(self.dense_layers, self.sparse_layers, self.pathway_channels,
               self.adaption_hidden) < 1:
            raise ConfigError("layer and channel counts must be >= 1")
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardResult:
    """Everything one forward pass produces.

    ``w_star``/``w_disc``/``bin_index`` are always reported, whatever the
    variant; only the fusion rule changes with it.
    """

    fused: Tensor
    dense_map: Tensor
    sparse_map: Tensor
    w_raw: float
    w_star: float
    w_disc: float
    bin_index: int

    @property
    def predicted_count(self) -> float:
        return float(self.fused.data.sum(dtype=np.float64))


def normalize_response(w_raw: float) -> float:
    """Squash a raw adaption response into (0, 0.5): ``arctan(sigmoid(w)) * 2/pi``."""
    if w_raw >= 0:
        s = 1.0 / (1.0 + math.exp(-w_raw))
    else:
        e = math.exp(w_raw)
        s = e / (1.0 + e)
    return math.atan(s) * TWO_OVER_PI


def discretize(w_star: float, bins: int) -> tuple[int, float]:
    """Snap a normalized response to its bin: index and bin-center value."""
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    if not math.isfinite(w_star):
        raise NumericalError(f"discretize received non-finite response {w_star!r}")
    if not 0.0 <= w_star < 1.0:
        raise ConfigError(f"normalized response must lie in [0, 1), got {w_star}")
    index = int(math.floor(w_star * bins))
    return index, (index + 0.5) / bins


def straight_through_discretize(w_star: Tensor, bins: int) -> Tensor:
    """Graph node for the bin snap: bin-center forward, identity backward."""
    index, w_disc = discretize(w_star.item(), bins)
    value = np.full_like(w_star.data, w_disc)

    def make_backward(out: Tensor):
        def _bw():
            w_star.grad += out.grad
        return _bw

    return ad._result(value, (w_star,), "straight_through_discretize", make_backward)


class TwoPathwayCounter:
    """Builds and runs the network; owns all learnable parameters.

    Immutable during inference (safe to share read-only across threads);
    training mutates parameters and needs exclusive access.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def param(name, shape, kind="weight"):
            if kind == "weight":
                data = rng.normal(0.0, INIT_STD, size=shape)
            else:
                data = np.zeros(shape)
            t = Tensor(data.astype(self.dtype), requires_grad=True)
            self.params[name] = t
            return t

        cfg = config
        c_prev = 1
        for i, c in enumerate(cfg.backbone_channels):
            param(f"backbone.conv{i}.weight", (c, c_prev, 3, 3))
            param(f"backbone.conv{i}.bias", (c,), "bias")
            c_prev = c
        c_feat = c_prev
        p = cfg.pathway_channels

        param("dense.deconv.weight", (c_feat, p, 2, 2))
        c_prev = p
        for i in range(cfg.dense_layers):
            param(f"dense.conv{i}.weight", (p, c_prev, cfg.dense_kernel, cfg.dense_kernel))
            param(f"dense.conv{i}.bias", (p,), "bias")
            c_prev = p
        param("dense.head.weight", (1, p, 1, 1))
        param("dense.head.bias", (1,), "bias")

        c_prev = c_feat
        for i in range(cfg.sparse_layers):
            param(f"sparse.conv{i}.weight", (p, c_prev, 3, 3))
            param(f"sparse.conv{i}.bias", (p,), "bias")
            c_prev = p
        param("sparse.head.weight", (1, p, 1, 1))
        param("sparse.head.bias", (1,), "bias")

        param("adapt.fc1.weight", (cfg.adaption_hidden, c_feat))
        param("adapt.fc1.bias", (cfg.adaption_hidden,), "bias")
        param("adapt.fc2.weight", (1, cfg.adaption_hidden))
        param("adapt.fc2.bias", (1,), "bias")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        f = 2 ** self.config.backbone_pools
        return h // f, w // f

    def _check_input(self, image: Tensor) -> None:
        if image.data.ndim != 3 or image.shape[0] != 1:
            raise DimensionError(f"expected a [1,H,W] image, got shape {image.shape}")
        f = 2 ** self.config.backbone_pools
        _, h, w = image.shape
        if h % f or w % f:
            raise DimensionError(
                f"image extent {h}x{w} must be divisible by 2^pools = {f}")
        lo, hi = float(image.data.min()), float(image.data.max())
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0.0 or hi > 1.0:
            raise DataError(f"image values must lie in [0, 1], got range [{lo}, {hi}]")

    def forward(self, image) -> ForwardResult:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image), dtype=self.dtype)
        self._check_input(image)
        cfg = self.config
        P = self.params

        z = image
        for i in range(len(cfg.backbone_channels)):
            z = ad.relu(ad.conv2d(z, P[f"backbone.conv{i}.weight"],
                                  P[f"backbone.conv{i}.bias"], padding=1))
            if i < cfg.backbone_pools:
                z = ad.max_pool2d(z, 2)
        features = z

        d = ad.relu(ad.conv_transpose2d(features, P["dense.deconv.weight"], stride=2))
        pad = (cfg.dense_kernel - 1) // 2
        for i in range(cfg.dense_layers):
            d = ad.relu(ad.conv2d(d, P[f"dense.conv{i}.weight"],
                                  P[f"dense.conv{i}.bias"], padding=pad))
        d = ad.max_pool2d(d, 2)
        dense_map = ad.conv2d(d, P["dense.head.weight"], P["dense.head.bias"])

        s = features
        for i in range(cfg.sparse_layers):
            s = ad.relu(ad.conv2d(s, P[f"sparse.conv{i}.weight"],
                                  P[f"sparse.conv{i}.bias"], padding=1))
        sparse_map = ad.conv2d(s, P["sparse.head.weight"], P["sparse.head.bias"])

        a = ad.global_avg_pool(features)
        a = ad.relu(ad.affine(a, P["adapt.fc1.weight"], P["adapt.fc1.bias"]))
        w_raw_t = ad.affine(a, P["adapt.fc2.weight"], P["adapt.fc2.bias"])
        w_star_t = ad.scale(ad.arctan(ad.sigmoid(w_raw_t)), TWO_OVER_PI)

        w_raw = w_raw_t.item()
        w_star = w_star_t.item()
        bin_index, w_disc = discretize(w_star, cfg.bins)

        first, second = (dense_map, sparse_map) if cfg.gate_dense else (sparse_map, dense_map)
        if cfg.variant == "sparse_only":
            fused = sparse_map
        elif cfg.variant == "dense_only":
            fused = dense_map
        elif cfg.variant == "fixed_half":
            fused = ad.weighted_sum(first, second, 0.5)
        elif cfg.variant == "continuous":
            fused = ad.weighted_sum(first, second, w_star_t)
        else:  # discretized; one bin degenerates to the constant half weight
            if cfg.bins == 1:
                fused = ad.weighted_sum(first, second, 0.5)
            else:
                fused = ad.weighted_sum(
                    first, second, straight_through_discretize(w_star_t, cfg.bins))

        return ForwardResult(fused=fused, dense_map=dense_map, sparse_map=sparse_map,
                             w_raw=w_raw, w_star=w_star, w_disc=w_disc,
                             bin_index=bin_index)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TwoPathwayCounter:
    """Construct a freshly initialized model (same seed, same bits)."""
    return TwoPathwayCounter(config, seed=seed, dtype=dtype)


def scenario_of(model: TwoPathwayCounter, image) -> int:
    """Bin index assigned to one image; the model's notion of its scenario."""
    return model.forward(image).bin_index


def save_checkpoint(path, model: TwoPathwayCounter) -> None:
    fileio.write_checkpoint(path, model.config.to_dict(),
                            {name: t.data for name, t in model.params.items()})


def load_checkpoint(path) -> TwoPathwayCounter:
    config_dict, tensors = fileio.read_checkpoint(path)
    model = TwoPathwayCounter(ModelConfig.from_dict(config_dict))
    if set(tensors) != set(model.params):
        raise DataError(f"{path}: tensor names do not match the embedded config")
    for name, arr in tensors.items():
        t = model.params[name]
        if arr.shape != t.shape:
            raise DataError(f"{path}: tensor {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(model.dtype)
        t.grad = np.zeros_like(t.data)
    return model
