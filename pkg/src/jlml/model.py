"""Two-branch JLML network: shared stem, global branch, m-stream local branch.

The architecture is described declaratively by :class:`ModelConfig`. A single
layer plan (:func:`block_plan`) drives parameter creation, the forward pass,
and the closed-form parameter/FLOP accounting, so the three never drift apart.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConfigError, DimensionError, Tensor

MULTILOSS = "multiloss"
UNILOSS = "uniloss"

PAPER_GLOBAL_WIDTHS = ((32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512))
PAPER_LOCAL_WIDTHS = ((16, 16, 32), (32, 32, 64), (64, 64, 128), (128, 128, 256))


def _widths_str(widths) -> str:
    return ";".join(",".join(str(v) for v in triple) for triple in widths)


def _parse_widths(text: str) -> tuple[tuple[int, int, int], ...]:
    out = []
    for part in text.split(";"):
        vals = tuple(int(v) for v in part.split(","))
        if len(vals) != 3:
            raise ConfigError(f"bottleneck widths need three values, got {part!r}")
        out.append(vals)
    return tuple(out)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    stem_channels: int = 32
    stage_widths_global: tuple[tuple[int, int, int], ...] = PAPER_GLOBAL_WIDTHS
    stage_widths_local: tuple[tuple[int, int, int], ...] = PAPER_LOCAL_WIDTHS
    blocks_per_stage: int = 3
    m: int = 4
    feat_dim_global: int = 512
    feat_dim_local: int = 512
    n_id: int = 751
    share_stem: bool = True
    sfl_enabled: bool = True
    loss_mode: str = MULTILOSS
    lambda_global: float = 5e-4
    lambda_local: float = 5e-4
    batchnorm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        if h <= 0 or w <= 0 or self.in_channels <= 0 or self.stem_channels <= 0:
            raise ConfigError("input size and channel counts must be positive")
        for widths in (self.stage_widths_global, self.stage_widths_local):
            if len(widths) != 4 or any(v <= 0 for triple in widths for v in triple):
                raise ConfigError("need four bottleneck stages with positive widths")
        if self.blocks_per_stage < 1 or self.m < 1:
            raise ConfigError("blocks_per_stage and m must be >= 1")
        if min(self.feat_dim_global, self.feat_dim_local, self.n_id) < 1:
            raise ConfigError("feature dims and n_id must be positive")
        if self.loss_mode not in (MULTILOSS, UNILOSS):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.lambda_global < 0 or self.lambda_local < 0:
            raise ConfigError("sparsity weights must be non-negative")
        sh = stem_output_size(self)[0]
        if sh % self.m:
            raise ConfigError(f"stem output height {sh} is not divisible by m={self.m}")

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        if not self.sfl_enabled:
            return 0.0, 0.0
        return self.lambda_global, self.lambda_local

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> dict[str, str]:
        return {
            "input_size": f"{self.input_size[0]}x{self.input_size[1]}",
            "in_channels": str(self.in_channels),
            "stem_channels": str(self.stem_channels),
            "stage_widths_global": _widths_str(self.stage_widths_global),
            "stage_widths_local": _widths_str(self.stage_widths_local),
            "blocks_per_stage": str(self.blocks_per_stage),
            "m": str(self.m),
            "feat_dim_global": str(self.feat_dim_global),
            "feat_dim_local": str(self.feat_dim_local),
            "n_id": str(self.n_id),
            "share_stem": str(self.share_stem).lower(),
            "sfl_enabled": str(self.sfl_enabled).lower(),
            "loss_mode": self.loss_mode,
            "lambda_global": repr(float(self.lambda_global)),
            "lambda_local": repr(float(self.lambda_local)),
            "batchnorm": str(self.batchnorm).lower(),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kv) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        parsed: dict = {}
        for key, text in kv.items():
            if key == "input_size":
                h, _, w = text.lower().partition("x")
                parsed[key] = (int(h), int(w or h))
            elif key.startswith("stage_widths"):
                parsed[key] = _parse_widths(text)
            elif key in ("share_stem", "sfl_enabled", "batchnorm"):
                parsed[key] = _parse_bool(text)
            elif key.startswith("lambda"):
                parsed[key] = float(text)
            elif key == "loss_mode":
                parsed[key] = text.strip().lower()
            else:
                parsed[key] = int(text)
        return cls(**parsed)


def paper_config(**overrides) -> ModelConfig:
    """JLML-ResNet39 at 224x224 with four stripes."""
    return ModelConfig(**overrides)


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale preset: 64x64 input, every width divided by four."""
    base = dict(
        input_size=(64, 64),
        stem_channels=8,
        stage_widths_global=tuple(tuple(v // 4 for v in t) for t in PAPER_GLOBAL_WIDTHS),
        stage_widths_local=tuple(tuple(v // 4 for v in t) for t in PAPER_LOCAL_WIDTHS),
        feat_dim_global=128,
        feat_dim_local=128,
        n_id=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# layer plan

def _conv_out(n: int, k: int, s: int, pad_total: int) -> int:
    return (n + pad_total - k) // s + 1


def stem_output_size(cfg: ModelConfig) -> tuple[int, int]:
    h, w = cfg.input_size
    return _conv_out(h, 3, 2, 2), _conv_out(w, 3, 2, 2)


# local stripe pooling: 2x2 window, stride (1, 2), one padded row at the bottom
# so the stripe height is kept while the width halves
LOCAL_POOL_K = (2, 2)
LOCAL_POOL_STRIDE = (1, 2)
LOCAL_POOL_PAD = (0, 1, 0, 0)


@dataclass(frozen=True)
class BlockSpec:
    prefix: str
    cin: int
    widths: tuple[int, int, int]
    stride: int
    project: bool
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    stage: int


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int
    stride: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]


@dataclass
class BranchPlan:
    stem_prefix: str
    pool_out_hw: tuple[int, int]
    blocks: list[BlockSpec] = field(default_factory=list)

    @property
    def out_hw(self) -> tuple[int, int]:
        return self.blocks[-1].out_hw

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].widths[2]


def _stage_blocks(prefix: str, cin: int, widths, hw, n_blocks: int) -> list[BlockSpec]:
    blocks = []
    for s, triple in enumerate(widths):
        for b in range(n_blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            out_hw = (_conv_out(hw[0], 3, stride, 2), _conv_out(hw[1], 3, stride, 2))
            project = b == 0 and (stride != 1 or cin != triple[2])
            blocks.append(BlockSpec(f"{prefix}.s{s + 2}.b{b}", cin, tuple(triple), stride,
                                    project, hw, out_hw, s + 2))
            cin, hw = triple[2], out_hw
    return blocks


def block_plan(cfg: ModelConfig) -> tuple[BranchPlan, BranchPlan]:
    """Global plan and the plan of one local stream (all m streams are alike)."""
    sh, sw = stem_output_size(cfg)
    g_pool = (_conv_out(sh, 3, 2, 2), _conv_out(sw, 3, 2, 2))
    stripe_h = sh // cfg.m
    l_pool = (_conv_out(stripe_h, LOCAL_POOL_K[0], LOCAL_POOL_STRIDE[0], sum(LOCAL_POOL_PAD[:2])),
              _conv_out(sw, LOCAL_POOL_K[1], LOCAL_POOL_STRIDE[1], sum(LOCAL_POOL_PAD[2:])))
    g_stem = "stem" if cfg.share_stem else "stem_g"
    l_stem = "stem" if cfg.share_stem else "stem_l"
    g = BranchPlan(g_stem, g_pool, _stage_blocks("global", cfg.stem_channels,
                                                 cfg.stage_widths_global, g_pool, cfg.blocks_per_stage))
    loc = BranchPlan(l_stem, l_pool, _stage_blocks("local.p{j}", cfg.stem_channels,
                                                   cfg.stage_widths_local, l_pool, cfg.blocks_per_stage))
    return g, loc


def _block_convs(b: BlockSpec, prefix: str) -> list[ConvSpec]:
    a, mid, c = b.widths
    convs = [
        ConvSpec(f"{prefix}.conv1", b.cin, a, 1, 1, b.in_hw, b.in_hw),
        ConvSpec(f"{prefix}.conv2", a, mid, 3, b.stride, b.in_hw, b.out_hw),
        ConvSpec(f"{prefix}.conv3", mid, c, 1, 1, b.out_hw, b.out_hw),
    ]
    if b.project:
        convs.append(ConvSpec(f"{prefix}.proj", b.cin, c, 1, b.stride, b.in_hw, b.out_hw))
    return convs


def iter_convs(cfg: ModelConfig) -> Iterator[ConvSpec]:
    """Every conv of the instantiated network, local streams expanded."""
    stem_hw = stem_output_size(cfg)
    stems = ["stem"] if cfg.share_stem else ["stem_g", "stem_l"]
    for s in stems:
        yield ConvSpec(f"{s}.conv", cfg.in_channels, cfg.stem_channels, 3, 2, cfg.input_size, stem_hw)
    g, loc = block_plan(cfg)
    for b in g.blocks:
        yield from _block_convs(b, b.prefix)
    for j in range(cfg.m):
        for b in loc.blocks:
            yield from _block_convs(b, b.prefix.format(j=j))


def feature_in_dims(cfg: ModelConfig) -> tuple[int, int]:
    """Input widths d_g and m*d_l of the two feature layers."""
    g, loc = block_plan(cfg)
    return g.out_channels, cfg.m * loc.out_channels


def head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    if cfg.loss_mode == UNILOSS:
        return {"head.fused": (cfg.n_id, cfg.feat_dim_global + cfg.feat_dim_local)}
    return {"head.global": (cfg.n_id, cfg.feat_dim_global),
            "head.local": (cfg.n_id, cfg.feat_dim_local)}


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable parameter, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for c in iter_convs(cfg):
        shapes[f"{c.name}.w"] = (c.cout, c.cin, c.k, c.k)
        if cfg.batchnorm:
            shapes[f"{c.name}.bn.g"] = (c.cout,)
            shapes[f"{c.name}.bn.b"] = (c.cout,)
        else:
            shapes[f"{c.name}.b"] = (c.cout,)
    d_g, d_l = feature_in_dims(cfg)
    shapes["global.fc.w"] = (cfg.feat_dim_global, d_g)
    shapes["global.fc.b"] = (cfg.feat_dim_global,)
    shapes["local.fc.w"] = (cfg.feat_dim_local, d_l)
    shapes["local.fc.b"] = (cfg.feat_dim_local,)
    for name, (n, d) in head_shapes(cfg).items():
        shapes[f"{name}.w"] = (n, d)
        shapes[f"{name}.b"] = (n,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if not cfg.batchnorm:
        return {}
    out = {}
    for c in iter_convs(cfg):
        out[f"{c.name}.bn.mean"] = (c.cout,)
        out[f"{c.name}.bn.var"] = (c.cout,)
    return out


# ---------------------------------------------------------------------------
# accounting

def count_params(cfg: ModelConfig, include_heads: bool = False) -> int:
    total = 0
    for name, shape in parameter_shapes(cfg).items():
        if name.startswith("head.") and not include_heads:
            continue
        total += int(np.prod(shape))
    return total


def count_head_params(cfg: ModelConfig) -> int:
    return count_params(cfg, include_heads=True) - count_params(cfg)


def count_flops(cfg: ModelConfig, include_heads: bool = False) -> int:
    """Multiply-accumulates x 2 over convs and fc layers. Pooling, ReLU and BN are not counted."""
    flops = 0
    for c in iter_convs(cfg):
        flops += 2 * c.cin * c.cout * c.k * c.k * c.out_hw[0] * c.out_hw[1]
    d_g, d_l = feature_in_dims(cfg)
    flops += 2 * d_g * cfg.feat_dim_global + 2 * d_l * cfg.feat_dim_local
    if include_heads:
        for n, d in head_shapes(cfg).values():
            flops += 2 * n * d
    return flops


def depth(cfg: ModelConfig) -> int:
    """Weighted layers along one path: stem, three convs per block, feature fc, classifier."""
    return 1 + 3 * 4 * cfg.blocks_per_stage + 1 + 1


def stream_count(cfg: ModelConfig) -> int:
    return 1 + cfg.m


@dataclass(frozen=True)
class StageRow:
    layer: str
    global_size: tuple[int, int]
    local_size: tuple[int, int]


def stage_output_sizes(cfg: ModelConfig) -> list[StageRow]:
    """Per-stage output sizes (height x width) of both branches."""
    g, loc = block_plan(cfg)
    stem = stem_output_size(cfg)
    rows = [StageRow("conv1", stem, stem)]
    for s in range(2, 6):
        gb = [b for b in g.blocks if b.stage == s][-1]
        lb = [b for b in loc.blocks if b.stage == s][-1]
        rows.append(StageRow(f"conv{s}_x", gb.out_hw, lb.out_hw))
    rows.append(StageRow("fc", (1, 1), (1, 1)))
    return rows


# ---------------------------------------------------------------------------
# instantiated model

class JlmlModel:
    """Parameter set of one JLML network plus its batch-norm running buffers."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.meta: dict[str, str] = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self, include_heads: bool = True) -> int:
        return sum(p.data.size for n, p in self.params.items()
                   if include_heads or not n.startswith("head."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "JlmlModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        out = JlmlModel(self.config, params, buffers)
        out.meta = dict(self.meta)
        return out

    def copy(self) -> "JlmlModel":
        return self.astype(self.dtype)

    @property
    def W_G(self) -> Tensor:
        return self.params["global.fc.w"]

    @property
    def W_L(self) -> Tensor:
        return self.params["local.fc.w"]


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> JlmlModel:
    """Deterministic initialisation: He-normal convs, uniform +-1/sqrt(fan_in) linear layers."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bn.g"):
            arr = np.ones(shape)
        elif name.endswith(".bn.b"):
            arr = np.zeros(shape)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            # bias: fan-in of the owning weight
            wname = name[:-2] + ".w"
            wshape = params[wname].shape
            fan_in = int(np.prod(wshape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    buffers = {}
    for name, shape in buffer_shapes(cfg).items():
        buffers[name] = (np.zeros(shape) if name.endswith(".mean") else np.ones(shape)).astype(dtype)
    return JlmlModel(cfg, params, buffers)


@dataclass
class ForwardOutput:
    global_feature: Tensor
    local_feature: Tensor
    global_logits: Tensor | None = None
    local_logits: Tensor | None = None
    fused_logits: Tensor | None = None


def _conv_bn(model: JlmlModel, name: str, x: Tensor, stride, pad, training: bool, act: bool) -> Tensor:
    p = model.params
    if model.config.batchnorm:
        y = T.conv2d(x, p[f"{name}.w"], None, stride=stride, pad=pad)
        y = T.batchnorm2d(y, p[f"{name}.bn.g"], p[f"{name}.bn.b"], model.buffers[f"{name}.bn.mean"],
                          model.buffers[f"{name}.bn.var"], training)
    else:
        y = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)
    return T.relu(y) if act else y


def _bottleneck(model: JlmlModel, b: BlockSpec, prefix: str, x: Tensor, training: bool) -> Tensor:
    y = _conv_bn(model, f"{prefix}.conv1", x, 1, 0, training, True)
    y = _conv_bn(model, f"{prefix}.conv2", y, b.stride, 1, training, True)
    y = _conv_bn(model, f"{prefix}.conv3", y, 1, 0, training, False)
    shortcut = _conv_bn(model, f"{prefix}.proj", x, b.stride, 0, training, False) if b.project else x
    return T.relu(T.add(y, shortcut))


def _flatten(x: Tensor) -> Tensor:
    return T.reshape(x, (x.shape[0], -1))


def forward(model: JlmlModel, batch, training: bool = False) -> ForwardOutput:
    """Run both branches on an N x C x H x W batch.

    ``training`` selects batch statistics (and running-stat updates) in batch norm.
    """
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != tuple(cfg.input_size):
        raise DimensionError(f"batch shape {x.shape} does not match config input "
                             f"{cfg.in_channels}x{cfg.input_size[0]}x{cfg.input_size[1]}")
    p = model.params
    g_plan, l_plan = block_plan(cfg)

    g_stem = _conv_bn(model, f"{g_plan.stem_prefix}.conv", x, 2, 1, training, True)
    l_stem = g_stem if cfg.share_stem else _conv_bn(model, f"{l_plan.stem_prefix}.conv", x, 2, 1, training, True)

    y = T.maxpool2d(g_stem, 3, 2, 1)
    for b in g_plan.blocks:
        y = _bottleneck(model, b, b.prefix, y, training)
    y = T.avgpool2d(y, y.shape[2:])
    global_feature = T.linear(_flatten(y), p["global.fc.w"], p["global.fc.b"])

    pooled = []
    for j, stripe in enumerate(T.slice_h(l_stem, cfg.m)):
        z = T.maxpool2d(stripe, LOCAL_POOL_K, LOCAL_POOL_STRIDE, LOCAL_POOL_PAD)
        for b in l_plan.blocks:
            z = _bottleneck(model, b, b.prefix.format(j=j), z, training)
        pooled.append(_flatten(T.avgpool2d(z, z.shape[2:])))
    local_feature = T.linear(T.concat(pooled, axis=1), p["local.fc.w"], p["local.fc.b"])

    out = ForwardOutput(global_feature, local_feature)
    if cfg.loss_mode == UNILOSS:
        fused = T.concat([global_feature, local_feature], axis=1)
        out.fused_logits = T.linear(fused, p["head.fused.w"], p["head.fused.b"])
    else:
        out.global_logits = T.linear(global_feature, p["head.global.w"], p["head.global.b"])
        out.local_logits = T.linear(local_feature, p["head.local.w"], p["head.local.b"])
    return out
