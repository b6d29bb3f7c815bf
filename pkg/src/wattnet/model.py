"""WATT-EffNet-d-k construction and static analysis (parameters, MACs)."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .blocks import ConvBN, WattStage, WideMBConvParams
from .errors import CalibrationError, ConfigurationError
from .nn import Dense, Module
from .tensor import Tensor, _wrap, softmax

# EfficientNet-B0 MBConv sequence, one row per block:
# (in_channels, out_channels, expand_ratio, kernel_size, stride)
B0_BLOCKS = (
    (32, 16, 1, 3, 1),
    (16, 24, 6, 3, 2),
    (24, 24, 6, 3, 1),
    (24, 40, 6, 5, 2),
    (40, 40, 6, 5, 1),
    (40, 80, 6, 3, 2),
    (80, 80, 6, 3, 1),
    (80, 80, 6, 3, 1),
    (80, 112, 6, 5, 1),
    (112, 112, 6, 5, 1),
    (112, 112, 6, 5, 1),
    (112, 192, 6, 5, 2),
    (192, 192, 6, 5, 1),
    (192, 192, 6, 5, 1),
    (192, 192, 6, 5, 1),
    (192, 320, 6, 3, 1),
)

# Reported parameter counts per (d, k); identical with and without attention.
REFERENCE_COUNTS = {
    (1, 2): 8_501, (1, 3): 13_693, (1, 4): 19_909, (1, 5): 27_149, (1, 6): 35_413, (1, 7): 44_701,
    (3, 2): 106_629, (3, 3): 205_673, (3, 4): 335_693, (3, 5): 496_689, (3, 6): 688_661, (3, 7): 911_609,
    (5, 2): 371_493, (5, 3): 720_233,
}

GRID_D = (1, 3, 5)
GRID_K = (2, 3, 4, 5, 6, 7)
PARAM_BUDGET = 1_000_000


@dataclass(frozen=True)
class ArchPolicy:
    """Structural choices of the block family; defaults reproduce REFERENCE_COUNTS."""

    stem_filters: int = 32
    n_depthwise: int = 2
    conv_bias: bool = True
    se_ratio: int = 4
    kernel_schedule: str = "b0"  # "b0" -> per-block table kernels, "5" -> all 5x5
    bn_values_per_channel: int = 4  # gamma, beta, moving mean, moving var
    attention_reduction: int = 8
    skip: str = "auto"


@dataclass
class ArchConfig:
    d: int = 3
    k: int = 6
    attention: bool = True
    input_shape: tuple = (224, 224, 3)  # H, W, C
    num_classes: int = 5
    base_widths: list | None = None  # per-block unwidened expanded width; None -> B0 table
    out_widths: list | None = None
    policy: ArchPolicy = field(default_factory=ArchPolicy)
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    @property
    def name(self) -> str:
        return f"WATT-EffNet-{self.d}-{self.k}"

    def validate(self) -> None:
        if not isinstance(self.d, int) or self.d < 1:
            raise ConfigurationError(f"d must be a positive integer, got {self.d!r}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigurationError(f"k must be a positive integer, got {self.k!r}")
        if self.base_widths is None and self.d > len(B0_BLOCKS):
            raise ConfigurationError(f"d={self.d} exceeds the {len(B0_BLOCKS)}-block table; pass base_widths")
        for name in ("base_widths", "out_widths"):
            v = getattr(self, name)
            if v is not None and len(v) != self.d:
                raise ConfigurationError(f"{name} has {len(v)} entries, expected d={self.d}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (H, W, C), got {self.input_shape}")

    def block_params(self) -> list[WideMBConvParams]:
        self.validate()
        pol = self.policy
        rows = []
        in_ch = pol.stem_filters
        for i in range(self.d):
            b_in, b_out, expand, ksize, stride = B0_BLOCKS[i % len(B0_BLOCKS)]
            width = self.base_widths[i] if self.base_widths is not None else in_ch * expand
            out = self.out_widths[i] if self.out_widths is not None else b_out
            if pol.kernel_schedule == "5":
                ksize = 5
            rows.append(WideMBConvParams(in_ch, out, width, self.k, ksize, stride, pol.se_ratio,
                                         pol.n_depthwise, pol.conv_bias))
            in_ch = out
        return rows

    def to_dict(self) -> dict:
        out = asdict(self)
        out["input_shape"] = list(self.input_shape)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        data = dict(data)
        data["policy"] = ArchPolicy(**data.get("policy", {}))
        data["input_shape"] = tuple(data.get("input_shape", (224, 224, 3)))
        return cls(**data)


class WattEffNet(Module):
    """stem 3x3/2 conv+BN+ReLU -> d WATT stages -> global average pool -> dense."""

    def __init__(self, config: ArchConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        pol = config.policy
        H, W, C = config.input_shape
        kw = dict(bn_momentum=config.bn_momentum, bn_eps=config.bn_eps, rng=rng, dtype=dtype)
        self.stem = ConvBN(C, pol.stem_filters, 3, 2, bias=pol.conv_bias, **kw)
        self.stage_names = []
        for i, p in enumerate(config.block_params()):
            setattr(self, f"stage{i + 1}", WattStage(p, config.attention, pol.attention_reduction, pol.skip, **kw))
            self.stage_names.append(f"stage{i + 1}")
        last = config.block_params()[-1].out_channels
        self.head = Dense(last, config.num_classes, bias=True, rng=rng, dtype=dtype)

    @property
    def stages(self) -> list[WattStage]:
        return [getattr(self, n) for n in self.stage_names]

    def features(self, x) -> Tensor:
        x = _wrap(x)
        H, W, C = self.config.input_shape
        if x.ndim != 4 or x.shape[1] != C:
            raise ConfigurationError(f"expected input [N,{C},H,W], got {x.shape}")
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
        N, Cl = y.shape[:2]
        return ops.global_avg_pool(y).reshape(N, Cl)

    def logits(self, x) -> Tensor:
        return self.head(self.features(x))

    def forward(self, x) -> Tensor:
        return softmax(self.logits(x), axis=1)

    def kernels(self) -> list:
        return [p for p in self.parameters() if p.kernel]

    def attention_parameters(self) -> list:
        return [p for s in self.stages if s.attention is not None for p in s.attention.parameters()]


def build(config: ArchConfig, seed: int = 0, dtype=np.float32) -> WattEffNet:
    return WattEffNet(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# static analysis


@dataclass
class LayerRow:
    name: str
    out_shape: tuple
    params: int
    macs: int


@dataclass
class ModelSummary:
    name: str
    rows: list
    total_params: int  # headline count, attention excluded
    attention_params: int
    total_macs: int

    @property
    def all_params(self) -> int:
        return self.total_params + self.attention_params

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def mega_macs(self) -> float:
        return self.total_macs / 1e6

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "out_shape", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, "x".join(map(str, r.out_shape)), r.params, r.macs])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'layer':<{width}}  {'out_shape':>14}  {'params':>9}  {'macs':>13}"]
        for r in self.rows:
            shape = "x".join(map(str, r.out_shape))
            lines.append(f"{r.name:<{width}}  {shape:>14}  {r.params:>9}  {r.macs:>13}")
        lines += [
            f"model: {self.name}",
            f"total params: {self.total_params}",
            f"attention params: {self.attention_params}",
            f"total params incl. attention: {self.all_params}",
            f"total MACs: {self.total_macs} ({self.mega_macs:.3f} M)",
            f"total FLOPs: {self.total_flops}",
        ]
        return "\n".join(lines)


def _count(module: Module, bn_values: int = 4) -> int:
    """Parameter elements plus BN running buffers (bn_values=4) or not (2)."""
    n = sum(p.size for p in module.parameters())
    if bn_values == 4:
        n += sum(b.size for _, b in module.named_buffers())
    return n


def analyze(model: WattEffNet) -> ModelSummary:
    """Per-layer parameters, output shapes (C,H,W) and MACs."""
    cfg = model.config
    bnv = cfg.policy.bn_values_per_channel
    H, W, C = cfg.input_shape
    rows: list[LayerRow] = []
    shape = model.stem.conv.output_shape((C, H, W))
    rows.append(LayerRow("stem", shape, _count(model.stem, bnv), model.stem.conv.macs(shape)))
    attention_total = 0
    for name, stage in zip(model.stage_names, model.stages):
        blk = stage.block
        shape = blk.expand.conv.output_shape(shape)
        rows.append(LayerRow(f"{name}.expand", shape, _count(blk.expand, bnv), blk.expand.conv.macs(shape)))
        for i, layer in enumerate(blk.depthwise_layers):
            shape = layer.conv.output_shape(shape)
            rows.append(LayerRow(f"{name}.depthwise{i}", shape, _count(layer, bnv), layer.conv.macs(shape)))
        rows.append(LayerRow(f"{name}.se", shape, _count(blk.se, bnv), blk.se.macs(shape)))
        shape = blk.project.conv.output_shape(shape)
        rows.append(LayerRow(f"{name}.project", shape, _count(blk.project, bnv), blk.project.conv.macs(shape)))
        if stage.attention is not None:
            a = _count(stage.attention, bnv)
            attention_total += a
            rows.append(LayerRow(f"{name}.attention", shape, a, stage.attention.macs(shape)))
        if stage.skip_mode == "project":
            rows.append(LayerRow(f"{name}.skip", shape, _count(stage.skip_proj, bnv), stage.skip_proj.conv.macs(shape)))
    c, h, w = shape
    rows.append(LayerRow("pool", (c, 1, 1), 0, c * h * w))
    rows.append(LayerRow("head", (cfg.num_classes,), _count(model.head, bnv), c * cfg.num_classes))
    everything = sum(r.params for r in rows)
    return ModelSummary(cfg.name, rows, everything - attention_total, attention_total, sum(r.macs for r in rows))


def count_params(model: WattEffNet) -> ModelSummary:
    return analyze(model)


def count_flops(model: WattEffNet, input_shape=None) -> ModelSummary:
    """MACs at ``input_shape`` (H, W, C); defaults to the model's own."""
    if input_shape is None or tuple(input_shape) == tuple(model.config.input_shape):
        return analyze(model)
    cfg = replace(model.config, input_shape=tuple(input_shape))
    return analyze(WattEffNet(cfg, dtype=model.dtype))


def describe(config: ArchConfig) -> ModelSummary:
    """Static summary without keeping the model around."""
    return analyze(WattEffNet(config, dtype=np.float32))


# ---------------------------------------------------------------------------
# closed-form count and calibration


def closed_form_params(d: int, k: int, policy: ArchPolicy = ArchPolicy(), num_classes: int = 5,
                       base_widths=None, out_widths=None, in_channels: int = 3) -> int:
    """Hand formula for the backbone count (attention excluded)."""
    bn = policy.bn_values_per_channel
    b = 1 if policy.conv_bias else 0
    s = policy.stem_filters
    total = 9 * in_channels * s + b * s + bn * s
    cin = s
    for i in range(d):
        b_in, b_out, expand, ksize, _ = B0_BLOCKS[i]
        width = base_widths[i] if base_widths else cin * expand
        out = out_widths[i] if out_widths else b_out
        if policy.kernel_schedule == "5":
            ksize = 5
        c = k * width
        h = c // policy.se_ratio
        total += cin * c + b * c + bn * c  # expand
        total += policy.n_depthwise * (ksize * ksize * c + b * c + bn * c)
        total += c * h + b * h + h * c + b * c  # SE
        total += c * out + b * out + bn * out  # project
        cin = out
    return total + cin * num_classes + num_classes


@dataclass
class CalibrationReport:
    policy: ArchPolicy
    rows: list  # (d, k, target, achieved, delta)

    @property
    def exact(self) -> bool:
        return all(r[4] == 0 for r in self.rows)

    @property
    def max_relative_delta(self) -> float:
        return max(abs(r[4]) / r[2] for r in self.rows)

    def to_text(self) -> str:
        lines = [f"policy: {self.policy}", "d,k,target,achieved,delta"]
        lines += [",".join(map(str, r)) for r in self.rows]
        return "\n".join(lines)


def _candidate_policies():
    for stem, ndw, bias, se, ks, bnv in itertools.product(
        (16, 24, 32, 40, 48), (1, 2), (True, False), (2, 4, 8), ("b0", "5"), (2, 4)
    ):
        yield ArchPolicy(stem_filters=stem, n_depthwise=ndw, conv_bias=bias, se_ratio=se,
                         kernel_schedule=ks, bn_values_per_channel=bnv)


def calibrate_base_widths(targets: dict | None = None, verify: bool = True) -> CalibrationReport:
    """Search the policy space for an architecture whose counts equal ``targets``.

    Returns the exact report; raises CalibrationError carrying the best-achievable
    report when no candidate matches every target. With ``verify`` the winning
    policy is re-counted on built models (independent of the hand formula).
    """
    targets = REFERENCE_COUNTS if targets is None else targets
    best = None
    for pol in _candidate_policies():
        rows = []
        for (d, k), target in sorted(targets.items()):
            got = closed_form_params(d, k, pol)
            rows.append((d, k, target, got, got - target))
        report = CalibrationReport(pol, rows)
        if best is None or report.max_relative_delta < best.max_relative_delta:
            best = report
        if report.exact:
            break
    if not best.exact:
        raise CalibrationError("no exact architecture for the given targets:\n" + best.to_text(), best)
    if verify:
        for d, k, target, _, _ in best.rows:
            got = describe(ArchConfig(d=d, k=k, attention=False, policy=best.policy)).total_params
            if got != target:
                raise CalibrationError(f"built model d={d} k={k} counts {got}, formula says {target}", best)
    return best


def default_grid(budget: int = PARAM_BUDGET, d_values=GRID_D, k_values=GRID_K, policy: ArchPolicy = ArchPolicy()):
    """(d, k) pairs whose parameter count stays under ``budget``."""
    return [(d, k) for d in d_values for k in k_values if closed_form_params(d, k, policy) < budget]
