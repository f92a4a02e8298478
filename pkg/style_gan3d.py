# style_gan3d.py - Style-based 3D voxel generator and packed Wasserstein critic
#
# Generator: 8-layer mapping network z -> w, per-block style affines,
# a learned 4³ constant and stride-2 deconvolution blocks up to the output size.
# Critic: five 3D convolutions over `pack_size` same-class samples stacked
# along the channel axis, unbounded scalar output.

import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

import autodiff_tensor as ad
import matgan_logger as _mlog
from autodiff_tensor import DimensionError, Tensor

logger = _mlog.get("style_gan3d")

SUPPORTED_SIZES = (16, 32, 64)
BASE_SIZE = 4
GEN_BASE_CHANNELS = (512, 256, 128, 64)
DISC_BASE_CHANNELS = (64, 128, 256, 512)
DECONV_KERNEL, DECONV_STRIDE, DECONV_PAD = 4, 2, 1
INIT_STD = 0.02

CKPT_MAGIC = b"3DMG"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


# ========== CONFIGURATION ==========
@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 512
    mapping_layers: int = 8
    output_size: int = 64
    channel_divisor: int = 1
    pack_size: int = 2
    leaky_slope: float = ad.LEAKY_SLOPE
    dtype: str = "float32"

    def __post_init__(self):
        if self.output_size not in SUPPORTED_SIZES:
            raise ValueError(f"output_size must be one of {SUPPORTED_SIZES}, got {self.output_size}")
        if self.latent_dim < 1 or self.mapping_layers < 1 or self.pack_size < 1 or self.channel_divisor < 1:
            raise ValueError(f"invalid model config {self}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def num_deconv_blocks(self):
        return int(np.log2(self.output_size // BASE_SIZE))

    @property
    def generator_channels(self):
        """Constant-input channels followed by each deconv block's output channels."""
        n = self.num_deconv_blocks
        return tuple(max(1, c // self.channel_divisor) for c in GEN_BASE_CHANNELS[:n]) + (1,)

    @property
    def discriminator_channels(self):
        return tuple(max(1, c // self.channel_divisor) for c in DISC_BASE_CHANNELS) + (1,)

    @property
    def block_sizes(self):
        return tuple(BASE_SIZE * 2 ** b for b in range(self.num_deconv_blocks + 1))

    @property
    def discriminator_sizes(self):
        """Spatial edge at the input and after each of the five layers."""
        sizes = [self.output_size]
        for _ in range(4):
            sizes.append(ad.conv_output_size(sizes[-1], DECONV_KERNEL, 2, 1))
        sizes.append(1)
        return tuple(sizes)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def generator_parameter_shapes(cfg):
    """(name, shape) in declaration order."""
    d = cfg.latent_dim
    ch = cfg.generator_channels
    shapes = []
    for i in range(cfg.mapping_layers):
        shapes += [(f"mapping{i}.weight", (d, d)), (f"mapping{i}.bias", (d,))]
    shapes.append(("const", (ch[0], BASE_SIZE, BASE_SIZE, BASE_SIZE)))
    for b, c in enumerate(ch, start=1):
        if b > 1:
            k = DECONV_KERNEL
            shapes += [(f"block{b}.deconv.weight", (ch[b - 2], c, k, k, k)), (f"block{b}.deconv.bias", (c,))]
        shapes += [
            (f"block{b}.style.scale.weight", (d, c)), (f"block{b}.style.scale.bias", (c,)),
            (f"block{b}.style.shift.weight", (d, c)), (f"block{b}.style.shift.bias", (c,)),
        ]
    return shapes


def discriminator_parameter_shapes(cfg):
    ch = (cfg.pack_size,) + cfg.discriminator_channels
    last_kernel = cfg.discriminator_sizes[4]
    shapes = []
    for layer in range(1, 6):
        k = DECONV_KERNEL if layer < 5 else last_kernel
        shapes += [(f"conv{layer}.weight", (ch[layer], ch[layer - 1], k, k, k)),
                   (f"conv{layer}.bias", (ch[layer],))]
    return shapes


def parameter_count(cfg):
    return {
        "generator": int(sum(int(np.prod(s)) for _, s in generator_parameter_shapes(cfg))),
        "discriminator": int(sum(int(np.prod(s)) for _, s in discriminator_parameter_shapes(cfg))),
    }


# ========== PARAMETER CONTAINER ==========
class _ParameterSet:
    """Named, ordered trainable tensors."""

    def __init__(self, cfg, shapes, rng):
        self.config = cfg
        self.params = OrderedDict()
        for name, shape in shapes:
            self.params[name] = Tensor(self._init_value(name, shape, rng).astype(cfg.np_dtype),
                                       requires_grad=True)

    @staticmethod
    def _init_value(name, shape, rng):
        if name.endswith(".bias"):
            return np.zeros(shape)
        return rng.normal(0.0, INIT_STD, size=shape)

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def get_arrays(self):
        return [p.data.copy() for p in self.params.values()]

    def set_arrays(self, arrays):
        arrays = list(arrays)
        if len(arrays) != len(self.params):
            raise DimensionError("set_arrays", f"expected {len(self.params)} arrays, got {len(arrays)}")
        for (name, p), a in zip(self.params.items(), arrays):
            if a.shape != p.shape:
                raise DimensionError("set_arrays", f"{name}: shape {a.shape} != {p.shape}")
            p.data = np.asarray(a, dtype=p.dtype).copy()


# ========== GENERATOR ==========
class Generator(_ParameterSet):

    def __init__(self, cfg, seed=0):
        super().__init__(cfg, generator_parameter_shapes(cfg), np.random.default_rng(seed))
        # learned constant starts as unit Gaussian, style scales start at 1
        rng = np.random.default_rng([seed, 1])
        self.params["const"].data = rng.standard_normal(self.params["const"].shape).astype(cfg.np_dtype)
        for b in range(1, len(cfg.generator_channels) + 1):
            self.params[f"block{b}.style.scale.bias"].data[...] = 1.0

    def map_latent(self, z):
        """z [batch, latent_dim] -> w [batch, latent_dim] through the mapping network."""
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise DimensionError("map_latent", f"expects [batch, {self.config.latent_dim}], got {z.shape}")
        w = z
        for i in range(self.config.mapping_layers):
            w = ad.leaky_relu(ad.add_bias(ad.matmul(w, self[f"mapping{i}.weight"]), self[f"mapping{i}.bias"]),
                              self.config.leaky_slope)
        return w

    def styles(self, w, block):
        """(y_s, y_b) for a block, each [batch, channels]."""
        p = f"block{block}.style"
        y_s = ad.add_bias(ad.matmul(w, self[f"{p}.scale.weight"]), self[f"{p}.scale.bias"])
        y_b = ad.add_bias(ad.matmul(w, self[f"{p}.shift.weight"]), self[f"{p}.shift.bias"])
        return y_s, y_b

    def synthesize(self, w, trace=None):
        """
        w [batch, latent_dim] -> occupancy [batch, 1, S, S, S] in (0, 1).
        If `trace` is a list, each block's pre-AdaIN activation is appended to it.
        """
        if w.ndim != 2 or w.shape[1] != self.config.latent_dim:
            raise DimensionError("synthesize", f"expects [batch, {self.config.latent_dim}], got {w.shape}")
        n_blocks = len(self.config.generator_channels)
        const = self["const"]
        x = ad.broadcast_to(const, (w.shape[0],) + const.shape, axes=(0,))
        for b in range(1, n_blocks + 1):
            if b > 1:
                x = ad.conv_transpose3d(x, self[f"block{b}.deconv.weight"], DECONV_STRIDE, DECONV_PAD)
                x = ad.add_bias(x, self[f"block{b}.deconv.bias"])
            if trace is not None:
                trace.append(x)
            x = ad.adain(x, *self.styles(w, b))
            x = ad.sigmoid(x) if b == n_blocks else ad.relu(x)
        return x

    def __call__(self, z):
        return self.synthesize(self.map_latent(z))

    def summary(self):
        cfg = self.config
        lines = [f"mapping: {cfg.mapping_layers} x FC({cfg.latent_dim}) + LeakyReLU({cfg.leaky_slope})"]
        for b, (c, s) in enumerate(zip(cfg.generator_channels, cfg.block_sizes), start=1):
            head = "const" if b == 1 else "deconv k4 s2 p1"
            tail = "sigmoid" if b == len(cfg.generator_channels) else "ReLU"
            lines.append(f"block{b}: {head} -> AdaIN -> {tail}  [{c} x {s}³]")
        lines.append(f"parameters: {self.parameter_count()}")
        return lines


# ========== DISCRIMINATOR ==========
class Discriminator(_ParameterSet):

    def __init__(self, cfg, seed=0):
        super().__init__(cfg, discriminator_parameter_shapes(cfg), np.random.default_rng([seed, 2]))

    def _check_input(self, pack):
        s = self.config.output_size
        if pack.ndim != 5 or pack.shape[1] != self.config.pack_size or pack.shape[2:] != (s, s, s):
            raise DimensionError("discriminate",
                                 f"expects [batch, {self.config.pack_size}, {s}, {s}, {s}], got {pack.shape}")

    def activations(self, pack):
        """Post-LeakyReLU outputs of layers 1-4 followed by the raw layer-5 output."""
        self._check_input(pack)
        outs = []
        x = pack
        for layer in range(1, 6):
            stride, pad = (2, 1) if layer < 5 else (1, 0)
            x = ad.add_bias(ad.conv3d(x, self[f"conv{layer}.weight"], stride, pad), self[f"conv{layer}.bias"])
            if layer < 5:
                x = ad.leaky_relu(x, self.config.leaky_slope)
            outs.append(x)
        return outs

    def discriminate(self, pack):
        """[batch, pack_size, S, S, S] -> scores [batch]."""
        out = self.activations(pack)[-1]
        return ad.reshape(out, (pack.shape[0],))

    __call__ = discriminate

    def summary(self):
        cfg = self.config
        ch = (cfg.pack_size,) + cfg.discriminator_channels
        sizes = cfg.discriminator_sizes
        lines = []
        for layer in range(1, 6):
            act = "LeakyReLU" if layer < 5 else "linear"
            lines.append(f"conv{layer}: {ch[layer - 1]} -> {ch[layer]}, {sizes[layer - 1]}³ -> {sizes[layer]}³, {act}")
        lines.append(f"parameters: {self.parameter_count()}")
        return lines


# ========== CHECKPOINTS ==========
def save_checkpoint(path, generator, discriminator, step=0):
    """magic | version u16 | meta length u32 | meta JSON | f32 payload | CRC32(payload)."""
    meta = json.dumps({"config": asdict(generator.config), "step": int(step)}, sort_keys=True).encode("utf-8")
    arrays = generator.get_arrays() + discriminator.get_arrays()
    payload = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    blob = (CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(meta)) + meta + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    logger.info(f"Checkpoint written: {path} (step {step}, {len(payload)} payload bytes)")


def load_checkpoint(path, dtype=None):
    """Returns (generator, discriminator, step)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected '3DMG'")
    if len(blob) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, meta_len = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(blob[10:10 + meta_len].decode("utf-8"))
        values = dict(meta["config"])
        if dtype is not None:
            values["dtype"] = dtype
        cfg = ModelConfig.from_dict(values)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable model config ({e})") from e

    shapes = [s for _, s in generator_parameter_shapes(cfg) + discriminator_parameter_shapes(cfg)]
    expected = 4 * int(sum(int(np.prod(s)) for s in shapes))
    start = 10 + meta_len
    payload = blob[start:start + expected]
    if len(payload) != expected or len(blob) != start + expected + 4:
        raise CheckpointError(f"{path}: payload is {len(blob) - start - 4} bytes, config needs {expected}")
    (crc,) = struct.unpack_from("<I", blob, start + expected)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, checkpoint is corrupted")

    flat = np.frombuffer(payload, dtype="<f4")
    arrays, offset = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[offset:offset + n].reshape(s))
        offset += n
    generator, discriminator = Generator(cfg), Discriminator(cfg)
    n_gen = len(generator.params)
    generator.set_arrays(arrays[:n_gen])
    discriminator.set_arrays(arrays[n_gen:])
    logger.info(f"Loaded checkpoint {path} (step {meta.get('step', 0)}, {cfg.output_size}³)")
    return generator, discriminator, int(meta.get("step", 0))
