"""Two-encoder / shared-decoder generator and the patch discriminator.

Every net follows one recipe: a chain of 3x3 conv + batch norm + ReLU blocks.
Encoders pool after each block, doubling the filter count at every halving,
and finish with a latent block at base_channels * 2^depth channels. The
decoder mirrors the chain with nearest-neighbor upsampling and halving
widths, ending in a 1x1 conv + sigmoid head. The discriminator is the
encoder recipe plus a 1x1 sigmoid head whose score map is averaged into one
scalar per sample. There are no skip connections: everything passes through
the latent space, which is what lets two encoders share one decoder.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from . import tensor as tc
from .tensor import BNState, ShapeError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    base_channels: int = 16
    depth: int = 4
    in_channels_g: int = 4   # RGB image + input mask
    in_channels_r: int = 1

    def __post_init__(self):
        if self.image_size % (1 << self.depth) != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{self.depth}")
        if self.latent_size < 4:
            raise ValueError(f"latent extent {self.latent_size} < 4; reduce depth")

    @property
    def latent_size(self) -> int:
        return self.image_size >> self.depth

    @property
    def latent_channels(self) -> int:
        return self.base_channels << self.depth

    def channels_at(self, stage: int) -> int:
        return self.base_channels << stage

    def to_meta(self) -> dict:
        return {"image_size": self.image_size, "base_channels": self.base_channels,
                "depth": self.depth, "in_channels_g": self.in_channels_g,
                "in_channels_r": self.in_channels_r}

    @classmethod
    def from_meta(cls, meta: dict) -> "NetConfig":
        return cls(**{k: int(meta[k]) for k in
                      ("image_size", "base_channels", "depth", "in_channels_g", "in_channels_r")})


@dataclass
class ConvUnit:
    """One conv layer with optional batch norm."""

    kernel: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: BNState | None = None

    def named(self, prefix: str):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias
        if self.gamma is not None:
            yield f"{prefix}.gamma", self.gamma
            yield f"{prefix}.beta", self.beta


@dataclass
class Net:
    """A chain of ConvUnits plus an optional unnormalized head unit."""

    units: list = field(default_factory=list)
    head: ConvUnit | None = None

    def named_units(self, prefix: str):
        for i, u in enumerate(self.units):
            yield f"{prefix}.conv{i}", u
        if self.head is not None:
            yield f"{prefix}.head", self.head


@dataclass
class NetworkBundle:
    config: NetConfig
    enc_g: Net
    enc_r: Net
    decoder: Net
    disc: Net

    def nets(self):
        return (("enc_g", self.enc_g), ("enc_r", self.enc_r),
                ("decoder", self.decoder), ("disc", self.disc))

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for net_name, net in self.nets():
            for unit_name, unit in net.named_units(net_name):
                out.update(unit.named(unit_name))
        return out

    def generator_parameters(self) -> "OrderedDict[str, Tensor]":
        """Parameters updated by the joint E_G / E_R / F step."""
        out = OrderedDict()
        for net_name, net in self.nets():
            if net_name == "disc":
                continue
            for unit_name, unit in net.named_units(net_name):
                out.update(unit.named(unit_name))
        return out

    def discriminator_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for unit_name, unit in self.disc.named_units("disc"):
            out.update(unit.named(unit_name))
        return out

    def named_stats(self) -> "OrderedDict[str, BNState]":
        out = OrderedDict()
        for net_name, net in self.nets():
            for unit_name, unit in net.named_units(net_name):
                if unit.bn is not None:
                    out[f"{unit_name}.bn"] = unit.bn
        return out


def _conv_unit(rng, c_in: int, c_out: int, k: int, with_bn: bool) -> ConvUnit:
    kernel = Tensor(rng.normal(0.0, INIT_STD, (c_out, c_in, k, k)), requires_grad=True)
    bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
    if not with_bn:
        return ConvUnit(kernel, bias)
    return ConvUnit(kernel, bias,
                    gamma=Tensor(np.ones(c_out, np.float32), requires_grad=True),
                    beta=Tensor(np.zeros(c_out, np.float32), requires_grad=True),
                    bn=BNState.for_channels(c_out))


def _build_encoder(rng, cfg: NetConfig, in_channels: int) -> Net:
    units = []
    c_in = in_channels
    for s in range(cfg.depth + 1):
        c_out = cfg.channels_at(s)
        units.append(_conv_unit(rng, c_in, c_out, 3, with_bn=True))
        c_in = c_out
    return Net(units=units)


def _build_decoder(rng, cfg: NetConfig) -> Net:
    units = []
    c_in = cfg.latent_channels
    for s in range(cfg.depth, 0, -1):
        c_out = cfg.channels_at(s - 1)
        units.append(_conv_unit(rng, c_in, c_out, 3, with_bn=True))
        c_in = c_out
    head = _conv_unit(rng, c_in, 1, 1, with_bn=False)
    return Net(units=units, head=head)


def init_parameters(cfg: NetConfig, seed: int) -> NetworkBundle:
    """Fresh bundle: conv weights ~ N(0, 0.02), zero biases, identity norms.
    Draw order is fixed (E_G, E_R, F, D), so a seed pins every value."""
    rng = np.random.default_rng(seed)
    enc_g = _build_encoder(rng, cfg, cfg.in_channels_g)
    enc_r = _build_encoder(rng, cfg, cfg.in_channels_r)
    decoder = _build_decoder(rng, cfg)
    disc = _build_encoder(rng, cfg, 1)
    disc.head = _conv_unit(rng, cfg.latent_channels, 1, 1, with_bn=False)
    return NetworkBundle(cfg, enc_g, enc_r, decoder, disc)


def parameter_count(cfg: NetConfig) -> int:
    """Closed form for the default recipe, from the layer shapes."""

    def enc(c_in):
        total = 0
        for s in range(cfg.depth + 1):
            c_out = cfg.channels_at(s)
            total += c_out * c_in * 9 + c_out + 2 * c_out  # kernel, bias, gamma+beta
            c_in = c_out
        return total

    dec = 0
    c_in = cfg.latent_channels
    for s in range(cfg.depth, 0, -1):
        c_out = cfg.channels_at(s - 1)
        dec += c_out * c_in * 9 + c_out + 2 * c_out
        c_in = c_out
    dec += 1 * c_in * 1 + 1                                 # 1x1 head
    disc_head = 1 * cfg.latent_channels + 1
    return enc(cfg.in_channels_g) + enc(cfg.in_channels_r) + dec + enc(1) + disc_head


# ---------------------------------------------------------------------------
# forward passes


def _check_raster(name: str, data: np.ndarray, cfg: NetConfig, channels: int) -> None:
    if data.ndim != 4 or data.shape[1] != channels:
        raise ShapeError(name, f"need (N,{channels},H,W), got {data.shape}")
    h, w = data.shape[2], data.shape[3]
    step = 1 << cfg.depth
    if h % step or w % step:
        raise ShapeError(name, f"spatial dims {h}x{w} not divisible by 2^{cfg.depth}")
    if (1 << cfg.depth) > min(h, w):
        raise ShapeError(name, f"raster {h}x{w} too small for depth {cfg.depth}")


def _check_range(name: str, data: np.ndarray) -> None:
    if data.size and (not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0):
        raise ValueError(f"{name}: inputs must be normalized to [0, 1]")


def encoder_forward(net: Net, x: Tensor, training: bool) -> Tensor:
    h = x
    last = len(net.units) - 1
    for i, u in enumerate(net.units):
        h = tc.conv2d(h, u.kernel, u.bias)
        h = tc.batch_norm(h, u.gamma, u.beta, u.bn, training)
        h = tc.relu(h)
        if i < last:
            h = tc.max_pool2(h)
    return h


def decoder_forward(net: Net, latent: Tensor, training: bool) -> Tensor:
    # dual of the encoder: each halving-with-pool becomes upsample-then-conv,
    # so the last 3x3 conv runs at full resolution before the sigmoid head
    h = latent
    for u in net.units:
        h = tc.upsample2(h)
        h = tc.conv2d(h, u.kernel, u.bias)
        h = tc.batch_norm(h, u.gamma, u.beta, u.bn, training)
        h = tc.relu(h)
    h = tc.conv2d(h, net.head.kernel, net.head.bias)
    return tc.sigmoid(h)


def generator_forward(mask_x: Tensor, image_z: Tensor, bundle: NetworkBundle,
                      training: bool) -> Tensor:
    """G(x, z) = F(E_G(x, z)): the regularized footprint, per-pixel in (0, 1)."""
    cfg = bundle.config
    _check_raster("generator_forward", mask_x.data, cfg, 1)
    _check_raster("generator_forward", image_z.data, cfg, 3)
    if mask_x.data.shape[0] != image_z.data.shape[0] or \
            mask_x.data.shape[2:] != image_z.data.shape[2:]:
        raise ShapeError("generator_forward",
                         f"mask {mask_x.data.shape} and image {image_z.data.shape} disagree")
    _check_range("generator_forward", mask_x.data)
    _check_range("generator_forward", image_z.data)
    joint = Tensor(np.concatenate([image_z.data, mask_x.data], axis=1))  # [R,G,B,mask]
    latent = encoder_forward(bundle.enc_g, joint, training)
    return decoder_forward(bundle.decoder, latent, training)


def reconstruction_forward(mask_y: Tensor, bundle: NetworkBundle, training: bool) -> Tensor:
    """R(y) = F(E_R(y)): the autoencoded ideal footprint."""
    cfg = bundle.config
    _check_raster("reconstruction_forward", mask_y.data, cfg, 1)
    _check_range("reconstruction_forward", mask_y.data)
    latent = encoder_forward(bundle.enc_r, mask_y, training)
    return decoder_forward(bundle.decoder, latent, training)


def discriminator_forward(mask: Tensor, bundle: NetworkBundle, training: bool) -> Tensor:
    """Patch scores via the encoder recipe, averaged to one score per sample."""
    cfg = bundle.config
    _check_raster("discriminator_forward", mask.data, cfg, 1)
    feat = encoder_forward(bundle.disc, mask, training)
    patch = tc.sigmoid(tc.conv2d(feat, bundle.disc.head.kernel, bundle.disc.head.bias))
    return tc.mean_per_sample(patch)


# ---------------------------------------------------------------------------
# checkpoints


def bundle_state(bundle: NetworkBundle) -> "OrderedDict[str, np.ndarray]":
    """All parameters plus batch-norm running stats as named float32 arrays."""
    out = OrderedDict((k, t.data) for k, t in bundle.named_parameters().items())
    for name, st in bundle.named_stats().items():
        out[f"{name}.mean"] = st.mean
        out[f"{name}.var"] = st.var
        out[f"{name}.count"] = np.float32(st.batches_seen)
    return out


def save_checkpoint(path, bundle: NetworkBundle, extra_tensors=None, meta=None) -> None:
    """Binary tensor container plus a plain-text sidecar with the config echo
    and a checksum for corruption detection."""
    path = Path(path)
    tensors = bundle_state(bundle)
    for k, v in (extra_tensors or {}).items():
        tensors[f"extra.{k}"] = v
    serialize.write_tensors(path, tensors)
    lines = {f"net.{k}": v for k, v in bundle.config.to_meta().items()}
    lines.update(meta or {})
    lines["checksum_sha256"] = serialize.sha256_of_file(path)
    sidecar = "".join(f"{k} = {v}\n" for k, v in lines.items())
    path.with_suffix(path.suffix + ".meta").write_text(sidecar)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path):
    """Returns (bundle, extra_tensors, meta). Verifies the sidecar checksum."""
    path = Path(path)
    side = path.with_suffix(path.suffix + ".meta")
    if not path.exists() or not side.exists():
        raise CheckpointError(f"missing checkpoint file or sidecar: {path}")
    meta = {}
    for line in side.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    expect = meta.get("checksum_sha256")
    actual = serialize.sha256_of_file(path)
    if expect != actual:
        raise CheckpointError(f"checksum mismatch for {path}: {actual} != {expect}")
    cfg = NetConfig.from_meta({k[4:]: v for k, v in meta.items() if k.startswith("net.")})
    bundle = init_parameters(cfg, seed=0)
    tensors = serialize.read_tensors(path)
    extra = {}
    params = bundle.named_parameters()
    stats = bundle.named_stats()
    for name, arr in tensors.items():
        if name.startswith("extra."):
            extra[name[6:]] = arr
        elif name.endswith(".bn.mean"):
            stats[name[:-5]].mean = arr
        elif name.endswith(".bn.var"):
            stats[name[:-4]].var = arr
        elif name.endswith(".bn.count"):
            stats[name[:-6]].batches_seen = int(arr)
        else:
            if name not in params:
                raise CheckpointError(f"unknown tensor {name!r} in {path}")
            if params[name].data.shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name!r}")
            params[name].data = arr
    return bundle, extra, meta
