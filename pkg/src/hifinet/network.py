"""HIFI-Net forward graph.

Data flow: ``make_five_inputs`` -> fusion module (RFM-Haar, or the plain
six-conv block for ablations) -> CBAM -> gated fusion.  Parameters live in a
flat, ordered name -> Tensor mapping; the names are the archive keys, e.g.::

    rfm.rfu1.base_path.conv1.weight      1x1, C/2 outputs
    rfm.rfu1.base_path.conv5.weight      5x5, C outputs
    rfm.rfu1.mlp.fc1.weight / fc2        shared MLP (1x1 convs)
    rfm.rfu1.reinf_path.conv1 / conv3    reinforcement path
    rfm.re1.weight ... rfm.re4.weight    residual 3x3 convs (linear)
    convs.conv1 ... convs.conv6          ablation block replacing ``rfm``
    cbam.channel_mlp.fc1 / fc2           32 -> 2 -> 32, shared by both pools
    cbam.spatial.conv7                   64 -> 1, 7x7 (local avg/max maps spliced)
    f3_proj                              3x3, 12 outputs
    weight_gen.conv1 ... conv5           (3,32) (5,32) (7,64) (3,32) (5,12)

each followed by ``.weight`` / ``.bias``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .haar import make_five_inputs
from .tensor import ConfigError, ConvParams, ShapeError, Tensor

CONFIDENCE_MODES = ("none", "sigmoid", "softmax")
WEIGHT_GEN_PLAN = ((3, 32), (5, 32), (7, 64), (3, 32), (5, 12))
CONVS_PLAN = (16, 16, 32, 32, 32, 32)


@dataclass(frozen=True)
class NetConfig:
    """Architecture switches.

    ``use_haar``/``use_cbam``/``use_rfm`` are the structure ablations;
    ``use_residual``/``use_maxpool``/``use_mlp``/``use_base_image`` remove one
    component inside the fusion module.  ``confidence`` optionally squashes
    the gated-fusion confidence maps.
    """

    use_haar: bool = True
    use_cbam: bool = True
    use_rfm: bool = True
    use_residual: bool = True
    use_maxpool: bool = True
    use_mlp: bool = True
    use_base_image: bool = True
    confidence: str = "none"
    channels: int = 16

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 2:
            raise ConfigError(f"channels must be a positive even number, got {self.channels}")
        if self.confidence not in CONFIDENCE_MODES:
            raise ConfigError(f"confidence must be one of {CONFIDENCE_MODES}, got {self.confidence!r}")

    @property
    def fused_channels(self) -> int:
        return 2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


# Ablation presets: which of the Haar inputs, CBAM and the fusion module are enabled.
ABLATIONS = {
    "exp1": NetConfig(use_haar=True, use_cbam=False, use_rfm=True),
    "exp2": NetConfig(use_haar=False, use_cbam=True, use_rfm=False),
    "exp3": NetConfig(use_haar=True, use_cbam=True, use_rfm=False),
    "exp4": NetConfig(),
}


def _rfu_layout(prefix: str, in1: int, in2: int, c: int, cfg: NetConfig):
    half = c // 2
    if cfg.use_base_image:
        yield f"{prefix}.base_path.conv1", half, in1, 1
        yield f"{prefix}.base_path.conv5", c, half, 5
    if cfg.use_mlp:
        yield f"{prefix}.mlp.fc1", half, in1, 1
        yield f"{prefix}.mlp.fc2", c, half, 1
    yield f"{prefix}.reinf_path.conv1", c, in2, 1
    yield f"{prefix}.reinf_path.conv3", c, c, 3


def conv_layout(cfg: NetConfig) -> Iterator[tuple[str, int, int, int]]:
    """Yield ``(name, out_ch, in_ch, kernel)`` for every convolution, in archive order."""
    c, fused = cfg.channels, cfg.fused_channels
    if cfg.use_rfm:
        ins = (3, c, c, fused)
        res_in = (3, c, c, fused)
        for j in range(4):
            yield from _rfu_layout(f"rfm.rfu{j + 1}", ins[j], 3, c, cfg)
            if cfg.use_residual:
                yield f"rfm.re{j + 1}", c, res_in[j], 3
    else:
        in_ch = 15
        for j, out_ch in enumerate(CONVS_PLAN[:-1] + (fused,)):
            yield f"convs.conv{j + 1}", out_ch, in_ch, 3
            in_ch = out_ch
    if cfg.use_cbam:
        yield "cbam.channel_mlp.fc1", 2, fused, 1
        yield "cbam.channel_mlp.fc2", fused, 2, 1
        yield "cbam.spatial.conv7", 1, 2 * fused, 7
    yield "f3_proj", 12, fused, 3
    in_ch = fused
    for j, (k, out_ch) in enumerate(WEIGHT_GEN_PLAN):
        yield f"weight_gen.conv{j + 1}", out_ch, in_ch, k
        in_ch = out_ch


def param_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for name, out_ch, in_ch, k in conv_layout(cfg):
        shapes.append((name + ".weight", (out_ch, in_ch, k, k)))
        shapes.append((name + ".bias", (out_ch,)))
    return shapes


class NetworkParams:
    """Ordered name -> Tensor mapping plus the architecture config."""

    def __init__(self, config: NetConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        names = [n for n, _ in expected]
        if set(names) != set(tensors):
            missing = sorted(set(names) - set(tensors))
            extra = sorted(set(tensors) - set(names))
            raise ShapeError(f"parameter set mismatch; missing={missing} unexpected={extra}")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = {n: tensors[n] for n in names}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def conv(self, prefix: str) -> ConvParams:
        return ConvParams(self.tensors[prefix + ".weight"], self.tensors[prefix + ".bias"])

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> "NetworkParams":
        return NetworkParams(self.config, {n: Tensor(arrays[n], requires_grad=requires_grad) for n in self.tensors})

    def trainable(self) -> "NetworkParams":
        return self.with_arrays({n: t.data for n, t in self.items()}, requires_grad=True)

    def astype(self, dtype) -> "NetworkParams":
        return self.with_arrays({n: t.data.astype(dtype) for n, t in self.items()})


def init_params(seed: int, config: NetConfig | None = None, dtype=np.float64) -> NetworkParams:
    """He-style uniform weights in +-sqrt(6 / fan_in), zero biases."""
    config = config or NetConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, out_ch, in_ch, k in conv_layout(config):
        bound = np.sqrt(6.0 / (in_ch * k * k))
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        tensors[name + ".weight"] = Tensor(w.astype(dtype))
        tensors[name + ".bias"] = Tensor(np.zeros(out_ch, dtype=dtype))
    return NetworkParams(config, tensors)


# ---------------------------------------------------------------------------
# blocks


def rfu_forward(input1: Tensor, input2: Tensor, p: NetworkParams, prefix: str) -> Tensor:
    """Reinforcement fusion unit: base image ``input1`` gated by ``input2``."""
    if input1.shape[2:] != input2.shape[2:]:
        raise ShapeError(f"RFU inputs differ spatially: {input1.shape} vs {input2.shape}")
    cfg = p.config
    pool = T.maxpool2d if cfg.use_maxpool else (lambda t: t)

    m_a = pool(T.conv2d(T.conv2d(input2, p.conv(prefix + ".reinf_path.conv1"), "relu"),
                        p.conv(prefix + ".reinf_path.conv3"), "relu"))
    if cfg.use_mlp:
        hidden = T.conv2d(input1, p.conv(prefix + ".mlp.fc1"), "relu")
        m_b = T.sigmoid(T.conv2d(hidden, p.conv(prefix + ".mlp.fc2")))
        m_f = T.add(m_a, m_b)
    else:
        m_f = m_a
    if not cfg.use_base_image:
        return m_f
    i_b = pool(T.conv2d(T.conv2d(input1, p.conv(prefix + ".base_path.conv1"), "relu"),
                        p.conv(prefix + ".base_path.conv5"), "relu"))
    return T.mul(i_b, m_f)


def _residual(x: Tensor, u: Tensor, p: NetworkParams, name: str) -> Tensor:
    if not p.config.use_residual:
        return u
    return T.add(u, T.conv2d(x, p.conv(name)))


def rfm_haar_forward(inputs, p: NetworkParams) -> Tensor:
    """Fuse InputA with the four reinforcement images through four RFUs."""
    if len(inputs) != 5:
        raise ShapeError(f"fusion module needs 5 inputs, got {len(inputs)}")
    in_a, in_b, in_c, in_d, in_e = inputs
    if in_a.ndim != 4 or in_a.shape[1] != 3:
        raise ShapeError(f"InputA must be (n, 3, h, w), got {in_a.shape}")
    if any(t.shape[2:] != in_a.shape[2:] for t in inputs):
        raise ShapeError("fusion inputs must share one spatial size")

    u1 = rfu_forward(in_a, in_b, p, "rfm.rfu1")
    x2 = _residual(in_a, u1, p, "rfm.re1")
    u2 = rfu_forward(x2, in_c, p, "rfm.rfu2")
    x3 = _residual(x2, u2, p, "rfm.re2")
    u3 = rfu_forward(x3, in_d, p, "rfm.rfu3")
    x4 = T.concat_channels(x3, _residual(x3, u3, p, "rfm.re3"))
    u4 = rfu_forward(x4, in_e, p, "rfm.rfu4")
    return T.concat_channels(x2, _residual(x4, u4, p, "rfm.re4"))


def convs_forward(inputs, p: NetworkParams) -> Tensor:
    """Plain six-conv replacement for the fusion module (ablation)."""
    x = inputs[0]
    for t in inputs[1:]:
        x = T.concat_channels(x, t)
    last = len(CONVS_PLAN)
    for j in range(1, last + 1):
        x = T.conv2d(x, p.conv(f"convs.conv{j}"), "relu" if j < last else "none")
    return x


def cbam_forward(f0: Tensor, p: NetworkParams) -> Tensor:
    fused = p.config.fused_channels
    if f0.ndim != 4 or f0.shape[1] != fused:
        raise ShapeError(f"CBAM expects {fused} channels, got {f0.shape}")

    def mlp(t):
        return T.conv2d(T.conv2d(t, p.conv("cbam.channel_mlp.fc1"), "relu"), p.conv("cbam.channel_mlp.fc2"))

    channel_att = T.sigmoid(T.add(mlp(T.avgpool2d(f0)), mlp(T.maxpool2d(f0))))
    f1 = T.mul(f0, channel_att)
    pooled = T.concat_channels(T.avgpool2d(f1), T.maxpool2d(f1))
    spatial_att = T.sigmoid(T.conv2d(pooled, p.conv("cbam.spatial.conv7")))
    return T.mul(f1, spatial_att)


def _confidence(w_all: Tensor, mode: str) -> list[Tensor]:
    parts = [T.slice_channels(w_all, 3 * i, 3 * i + 3) for i in range(4)]
    if mode == "sigmoid":
        return [T.sigmoid(t) for t in parts]
    if mode == "softmax":
        # shift by a constant per pixel; softmax is invariant to it
        shift = Tensor(np.max(np.stack([t.data for t in parts]), axis=0))
        exps = [T.exp(T.sub(t, shift)) for t in parts]
        total = exps[0]
        for e in exps[1:]:
            total = T.add(total, e)
        return [T.div(e, total) for e in exps]
    return parts


def gated_fusion(f2: Tensor, p: NetworkParams) -> Tensor:
    """Sum of four 3-channel feature slices weighted by learned confidences."""
    fused = p.config.fused_channels
    if f2.ndim != 4 or f2.shape[1] != fused:
        raise ShapeError(f"gated fusion expects {fused} channels, got {f2.shape}")
    f3 = T.conv2d(f2, p.conv("f3_proj"), "relu")
    w = f2
    for j in range(1, len(WEIGHT_GEN_PLAN) + 1):
        w = T.conv2d(w, p.conv(f"weight_gen.conv{j}"), "relu")
    weights = _confidence(w, p.config.confidence)
    out = None
    for i in range(4):
        term = T.mul(T.slice_channels(f3, 3 * i, 3 * i + 3), weights[i])
        out = term if out is None else T.add(out, term)
    return out


def hifi_forward(image: Tensor, p: NetworkParams) -> Tensor:
    """Enhance an ``(n, 3, h, w)`` image batch; the result is not clamped."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected an (n, 3, h, w) image, got {image.shape}")
    cfg = p.config
    if cfg.use_haar:
        inputs = make_five_inputs(image)
    else:
        inputs = (image,) * 5
    f0 = rfm_haar_forward(inputs, p) if cfg.use_rfm else convs_forward(inputs, p)
    f2 = cbam_forward(f0, p) if cfg.use_cbam else f0
    return gated_fusion(f2, p)


def config_for(name: str, **overrides) -> NetConfig:
    return replace(ABLATIONS[name], **overrides)
