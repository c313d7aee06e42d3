"""Conv subsampling + self-attention encoder with a CTC head and a linear
projection producing contrastive targets.

Shapes follow the column convention ``[features x time]`` for ``z``, ``c`` and
``q``; inside the attention stack frames are rows.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import CheckpointError, ConfigError, DimensionError
from .masking import MaskPlan, apply_mask

CHECKPOINT_MAGIC = b"SCLC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    out_channels: int


def parse_conv(text: str) -> tuple[ConvSpec, ...]:
    """``"3:2:64,3:2:64"`` -> two layers of kernel 3, stride 2, 64 channels."""
    layers = []
    for part in text.split(","):
        try:
            k, s, c = (int(x) for x in part.strip().split(":"))
        except ValueError:
            raise ConfigError(f"bad conv layer spec {part!r}; want kernel:stride:channels") from None
        layers.append(ConvSpec(k, s, c))
    return tuple(layers)


def format_conv(conv: tuple[ConvSpec, ...]) -> str:
    return ",".join(f"{c.kernel}:{c.stride}:{c.out_channels}" for c in conv)


@dataclass(frozen=True)
class ModelConfig:
    d_s: int = 12
    vocab_size: int = 21
    d_f: int = 64
    conv: tuple[ConvSpec, ...] = (ConvSpec(3, 2, 64),)
    n_sab: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    activation: str = "gelu"
    mask_replacement: str = "learned"
    stop_grad_targets: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        dims = (self.d_s, self.vocab_size, self.d_f, self.n_heads, self.ffn_dim)
        if min(dims) < 1 or self.n_sab < 0 or not self.conv:
            raise ConfigError("model dimensions must be >= 1 and the conv stack non-empty")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size counts the blank and at least one token")
        if self.d_f % self.n_heads:
            raise ConfigError("d_f must be divisible by n_heads")
        if self.conv[-1].out_channels != self.d_f:
            raise ConfigError("last conv layer must output d_f channels")
        if any(c.kernel < 1 or c.stride < 1 or c.out_channels < 1 for c in self.conv):
            raise ConfigError("conv kernel, stride and channels must be >= 1")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("activation must be 'gelu' or 'relu'")
        if self.mask_replacement not in ("learned", "zero"):
            raise ConfigError("mask replacement must be 'learned' or 'zero'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def strides(self) -> list[int]:
        return [c.stride for c in self.conv]

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = format_conv(v) if f.name == "conv" else str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name == "conv":
                kw[f.name] = parse_conv(raw)
            elif f.type in ("int",):
                kw[f.name] = int(raw)
            elif f.type == "bool":
                kw[f.name] = raw == "True"
            elif f.type == "float":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


# Full-size preset (3 conv, 10 SAB, 2 FC on 80-dim inputs); too slow for
# the test suite and never instantiated there.
FULL_SCALE = dict(d_s=80, d_f=256, conv=(ConvSpec(3, 2, 256), ConvSpec(3, 2, 256), ConvSpec(3, 1, 256)),
                  n_sab=10, n_heads=4, ffn_dim=1024)


@dataclass
class EncoderOutputs:
    z: nc.Tensor
    z_masked: nc.Tensor
    c: nc.Tensor
    q: nc.Tensor | None
    log_probs: nc.Tensor | None

    @property
    def S(self) -> int:
        return self.z.shape[1]


def output_length(T: int, cfg: ModelConfig) -> int:
    S = T
    for s in cfg.strides:
        S = nc.conv_output_length(S, s)
    return S


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    d_in = cfg.d_s
    for i, c in enumerate(cfg.conv):
        shapes[f"conv{i}.weight"] = (c.out_channels, d_in, c.kernel)
        shapes[f"conv{i}.bias"] = (c.out_channels,)
        d_in = c.out_channels
    d = cfg.d_f
    shapes["mask_vector"] = (d,)
    for j in range(cfg.n_sab):
        p = f"sab{j}."
        for ln in ("ln1", "ln2"):
            shapes[p + ln + ".gain"] = (d,)
            shapes[p + ln + ".bias"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (d, d)
            shapes[p + f"attn.b{w}"] = (d,)
        shapes[p + "ffn.w1"] = (d, cfg.ffn_dim)
        shapes[p + "ffn.b1"] = (cfg.ffn_dim,)
        shapes[p + "ffn.w2"] = (cfg.ffn_dim, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["ln_out.gain"] = (d,)
    shapes["ln_out.bias"] = (d,)
    shapes["head.w1"] = (d, d)
    shapes["head.b1"] = (d,)
    shapes["head.w2"] = (d, cfg.vocab_size)
    shapes["head.b2"] = (cfg.vocab_size,)
    shapes["target.w"] = (d, d)
    shapes["target.b"] = (d,)
    return shapes


def init_model(cfg: ModelConfig, seed: int) -> nc.ParamStore:
    """Uniform fan-in initialisation; biases zero, layer-norm gains one."""
    rng = np.random.default_rng(seed)
    params = nc.ParamStore()
    for name, shape in sorted(param_shapes(cfg).items()):
        if name == "mask_vector":
            value = rng.normal(0.0, 0.1, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] if len(shape) == 3 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = nc.Tensor(value)
    return params


@functools.lru_cache(maxsize=64)
def positional_encoding(S: int, d: int) -> np.ndarray:
    """Sinusoidal encodings, ``S x d`` (cached; treat as read-only)."""
    pos = np.arange(S)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((S, d))
    pe[:, 0:2 * (d // 2):2] = np.sin(angle)
    pe[:, 1:2 * (d // 2):2] = np.cos(angle)
    return pe


def _act(cfg: ModelConfig):
    return nc.gelu if cfg.activation == "gelu" else nc.relu


def _sab(h: nc.Tensor, params: nc.ParamStore, j: int, cfg: ModelConfig, rng=None) -> nc.Tensor:
    p = f"sab{j}."
    x = nc.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
    q = nc.linear(x, params[p + "attn.wq"], params[p + "attn.bq"])
    k = nc.linear(x, params[p + "attn.wk"], params[p + "attn.bk"])
    v = nc.linear(x, params[p + "attn.wv"], params[p + "attn.bv"])
    a = nc.multihead_attention(q, k, v, cfg.n_heads)
    a = nc.linear(a, params[p + "attn.wo"], params[p + "attn.bo"])
    h = nc.add(h, nc.dropout(a, cfg.dropout, rng))
    x = nc.layer_norm(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
    f = _act(cfg)(nc.linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"]))
    f = nc.linear(f, params[p + "ffn.w2"], params[p + "ffn.b2"])
    return nc.add(h, nc.dropout(f, cfg.dropout, rng))


def encode(params: nc.ParamStore, features: np.ndarray, cfg: ModelConfig) -> nc.Tensor:
    """Conv stack: ``features[d_s x T]`` -> ``z[d_f x S]``."""
    if features.shape[0] != cfg.d_s:
        raise DimensionError(f"features have {features.shape[0]} dims, model expects {cfg.d_s}")
    h = nc.Tensor(features)
    act = _act(cfg)
    for i, c in enumerate(cfg.conv):
        h = act(nc.conv1d(h, params[f"conv{i}.weight"], c.stride, params[f"conv{i}.bias"]))
    return h


def forward(params: nc.ParamStore, features: np.ndarray, plan: MaskPlan | None,
            cfg: ModelConfig, with_head: bool = True, with_targets: bool = True,
            rng=None) -> EncoderOutputs:
    """Full pass; ``with_head`` / ``with_targets`` skip the CTC head or the
    target projection when a caller needs only one loss. Dropout is active
    only when a generator ``rng`` is supplied (training passes)."""
    z = encode(params, features, cfg)
    S = z.shape[1]
    if plan is None:
        plan = MaskPlan.empty(S)
    if plan.S != S:
        raise DimensionError(f"mask plan covers {plan.S} positions, encoder produced {S}")

    q = None
    if with_targets:
        zq = nc.detach(z) if cfg.stop_grad_targets else z
        q = nc.transpose(nc.linear(nc.transpose(zq), params["target.w"], params["target.b"]))

    mvec = params["mask_vector"] if cfg.mask_replacement == "learned" else nc.Tensor(np.zeros(cfg.d_f))
    z_masked = apply_mask(z, plan, mvec)

    h = nc.add_const(nc.transpose(z_masked), positional_encoding(S, cfg.d_f))
    for j in range(cfg.n_sab):
        h = _sab(h, params, j, cfg, rng)
    h = nc.layer_norm(h, params["ln_out.gain"], params["ln_out.bias"])
    c = nc.transpose(h)
    if not with_head:
        return EncoderOutputs(z=z, z_masked=z_masked, c=c, q=q, log_probs=None)

    f = _act(cfg)(nc.linear(h, params["head.w1"], params["head.b1"]))
    logits = nc.linear(f, params["head.w2"], params["head.b2"])
    return EncoderOutputs(z=z, z_masked=z_masked, c=c, q=q, log_probs=nc.log_softmax(logits, axis=1))


def greedy_decode(log_probs: nc.Tensor | np.ndarray) -> list[int]:
    """Best-path CTC decoding: frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, nc.Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=1)  # first maximum wins ties, i.e. lower index
    out, prev = [], -1
    for k in best:
        k = int(k)
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


# --------------------------------------------------------------------------- checkpoint files


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_checkpoint(path: Path, config: dict[str, str], blobs: dict[str, np.ndarray]) -> None:
    """``SCLC | u32 version | config text | u32 n | (name, shape, f64 data)*``."""
    text = "".join(f"{k}={v}\n" for k, v in sorted(config.items()))
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(text),
             struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        arr = np.asarray(blobs[name], dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path: Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    def string():
        nonlocal pos
        n = u32()
        s = raw[pos:pos + n].decode("utf-8")
        pos += n
        return s

    try:
        version = u32()
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = {}
        for line in string().splitlines():
            k, _, v = line.partition("=")
            config[k] = v
        blobs = {}
        for _ in range(u32()):
            name = string()
            ndim = u32()
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            blobs[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return config, blobs


def save_model(path: Path, params: nc.ParamStore, cfg: ModelConfig, extra: dict[str, str] | None = None) -> None:
    config = {f"model.{k}": v for k, v in cfg.to_items().items()}
    config.update(extra or {})
    write_checkpoint(path, config, {f"param.{n}": t.data for n, t in params.items()})


def load_model(path: Path) -> tuple[nc.ParamStore, ModelConfig, dict[str, str]]:
    config, blobs = read_checkpoint(path)
    cfg = ModelConfig.from_items({k[6:]: v for k, v in config.items() if k.startswith("model.")})
    params = nc.ParamStore({k[6:]: nc.Tensor(v) for k, v in blobs.items() if k.startswith("param.")})
    expected = param_shapes(cfg)
    if set(expected) != set(params.names()):
        raise CheckpointError(f"{path}: parameter set does not match model config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return params, cfg, config
