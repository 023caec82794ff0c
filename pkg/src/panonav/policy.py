"""Decentralized navigation policy.

Encoder: stacked 3x3 convolutions with circular horizontal padding (the
panorama wraps in azimuth; zero padding vertically), ELU activations, strided
downsampling, then a linear projection to a d_z feature vector.  A 10-D
body-frame state vector (local velocity, commanded velocity, tilt axis,
normalized safety margin) embeds through W_s, adds to the image feature, and
feeds a GRU; the hidden state maps through an ELU and a linear head to six
outputs: a 3-D acceleration command and a 3-D auxiliary velocity prediction,
both in the yaw-aligned frame.

Parameters live in a named, ordered bank that flattens canonically for
optimization and for the binary checkpoint format (magic, version, dtype tag,
architecture echo, count, flat array, trailing CRC32).
"""

import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import (ConfigError, NumericError, CheckpointMagicError,
                     CheckpointVersionError, CheckpointArchError,
                     CheckpointChecksumError, CheckpointTruncatedError)

CKPT_MAGIC = b"PNAVCKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class ArchConfig:
    in_height: int = 16          # pooled panorama rows fed to the encoder
    in_width: int = 64           # pooled panorama columns
    channels: tuple = (16, 32, 64, 64)
    kernel: int = 3
    first_kernel: int = 3        # layer-1 kernel size knob
    strides: tuple = ((2, 2), (2, 2), (2, 2), (1, 1))
    d_z: int = 192
    d_h: int = 192
    state_dim: int = 10
    out_dim: int = 6
    wrap: bool = True            # circular horizontal padding

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.strides = tuple(tuple(s) for s in self.strides)
        if len(self.strides) != len(self.channels):
            raise ConfigError("need one stride pair per conv layer")
        if min(self.d_z, self.d_h) <= 0:
            raise ConfigError("d_z and d_h must be positive")

    def kernels(self):
        return [self.first_kernel] + [self.kernel] * (len(self.channels) - 1)

    def conv_shapes(self):
        """Per-layer output (C, H, W), validating divisibility as it goes."""
        h, w = self.in_height, self.in_width
        shapes = []
        for k, c, (sh, sw) in zip(self.kernels(), self.channels, self.strides):
            p = k // 2
            h = (h + 2 * p - k) // sh + 1
            w = (w + 2 * p - k) // sw + 1
            if h <= 0 or w <= 0:
                raise ConfigError("encoder strides collapse the input")
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_features(self):
        c, h, w = self.conv_shapes()[-1]
        return c * h * w

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class PolicyParams:
    """Ordered bank of named parameter tensors."""

    def __init__(self, arch, tensors):
        self.arch = arch
        self.tensors = tensors  # dict preserves canonical insertion order

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def items(self):
        return list(self.tensors.items())

    @property
    def count(self):
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def flat(self):
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def flat_grad(self):
        return np.concatenate([
            (np.zeros(t.size, dtype=t.dtype) if t.grad is None
             else t.grad.ravel()) for t in self.tensors.values()])

    def load_flat(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.count:
            raise ConfigError(
                f"flat vector has {vec.size} values, bank holds {self.count}")
        off = 0
        for t in self.tensors.values():
            t.data = vec[off:off + t.size].reshape(t.shape).astype(
                t.dtype, copy=True)
            off += t.size
        return self

    def astype(self, dtype):
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
        return self


def init_params(seed, arch, dtype=np.float64, verbose=True):
    """Fan-in-scaled uniform initialization; biases start at zero."""
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return ad.Tensor(rng.uniform(-b, b, size=shape).astype(dtype),
                         requires_grad=True)

    def zeros(shape):
        return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    t = {}
    c_in = 1
    for i, (k, c_out) in enumerate(zip(arch.kernels(), arch.channels)):
        t[f"conv{i}.w"] = uni((c_out, c_in, k, k), c_in * k * k)
        t[f"conv{i}.b"] = zeros((c_out,))
        c_in = c_out
    flat = arch.flat_features
    t["proj.w"] = uni((flat, arch.d_z), flat)
    t["proj.b"] = zeros((arch.d_z,))
    t["state.w"] = uni((arch.state_dim, arch.d_z), arch.state_dim)
    for gate in ("z", "r", "n"):
        t[f"gru.w{gate}"] = uni((arch.d_z, arch.d_h), arch.d_z)
        t[f"gru.u{gate}"] = uni((arch.d_h, arch.d_h), arch.d_h)
        t[f"gru.b{gate}"] = zeros((arch.d_h,))
    t["head.w"] = uni((arch.d_h, arch.out_dim), arch.d_h)
    params = PolicyParams(arch, t)
    if verbose:
        print(f"policy parameters: {params.count}")
    return params


# ---------------------------------------------------------------------------
# forward pieces


def encode(params, x, return_maps=False):
    """Panorama features: (B, 1, H, W) -> (B, d_z).

    return_maps additionally yields the per-layer pre-flatten feature maps
    (post-activation), for equivariance checks.
    """
    arch = params.arch
    x = ad._wrap(x)
    if x.shape[1:] != (1, arch.in_height, arch.in_width):
        raise ConfigError(
            f"encoder expects (B, 1, {arch.in_height}, {arch.in_width}), "
            f"got {x.shape}")
    maps = []
    for i, (k, stride) in enumerate(zip(arch.kernels(), arch.strides)):
        x = ad.conv2d(x, params.tensors[f"conv{i}.w"],
                      params.tensors[f"conv{i}.b"], stride=stride,
                      pad=(k // 2, k // 2), wrap=arch.wrap)
        x = ad.elu(x)
        if return_maps:
            maps.append(x)
    b = x.shape[0]
    z = ad.matmul(x.reshape(b, arch.flat_features), params.tensors["proj.w"])
    z = ad.add(z, params.tensors["proj.b"])
    return (z, maps) if return_maps else z


def build_state_vector(v_local, v_cmd, tilt, margin):
    """(B, 10) input: [v_local | v_cmd | tilt | margin].

    v_local may be a Tensor (gradients flow through it); the command, tilt,
    and margin channels are targets/measurements and enter as constants.
    """
    v_local = ad._wrap(v_local)
    b = v_local.shape[0]
    like = v_local.data.dtype
    parts = [
        v_local,
        ad.Tensor(np.asarray(v_cmd, dtype=like).reshape(b, 3)),
        ad.Tensor(np.asarray(tilt, dtype=like).reshape(b, 3)),
        ad.Tensor(np.asarray(margin, dtype=like).reshape(b, 1)),
    ]
    return ad.concat(parts, axis=1)


def policy_step(params, h, z, s):
    """One recurrent step: returns (h', a_pred, v_hat), all (B, ...)."""
    if not np.isfinite(h.data if isinstance(h, ad.Tensor) else h).all():
        raise NumericError("non-finite hidden state entering policy_step")
    t = params.tensors
    e = ad.matmul(ad._wrap(s), t["state.w"])
    x = ad.elu(ad.add(z, e))
    zg = ad.sigmoid(ad.add(ad.add(ad.matmul(x, t["gru.wz"]),
                                  ad.matmul(h, t["gru.uz"])), t["gru.bz"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, t["gru.wr"]),
                                 ad.matmul(h, t["gru.ur"])), t["gru.br"]))
    n = ad.tanh(ad.add(ad.add(ad.matmul(x, t["gru.wn"]),
                              ad.mul(r, ad.matmul(h, t["gru.un"]))),
                       t["gru.bn"]))
    h_new = ad.add(ad.mul(ad.sub(1.0, zg), h), ad.mul(zg, n))
    u = ad.matmul(ad.elu(h_new), t["head.w"])
    a_pred = ad.narrow(u, 1, 0, 3)
    v_hat = ad.narrow(u, 1, 3, 3)
    return h_new, a_pred, v_hat


def zero_hidden(arch, batch, dtype=np.float64):
    return ad.Tensor(np.zeros((batch, arch.d_h), dtype=dtype))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path, dtype=np.float32):
    """Little-endian binary: magic, version, dtype tag, arch echo (JSON),
    count, flat parameter array in canonical order, trailing CRC32."""
    flat = params.flat().astype(dtype)
    arch_blob = json.dumps(params.arch.to_dict(), sort_keys=True).encode()
    head = CKPT_MAGIC
    head += struct.pack("<HB", CKPT_VERSION, _DTYPE_CODES[np.dtype(dtype)])
    head += struct.pack("<I", len(arch_blob)) + arch_blob
    head += struct.pack("<Q", flat.size)
    body = flat.astype("<" + np.dtype(dtype).str[1:]).tobytes()
    crc = zlib.crc32(head + body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(head + body + struct.pack("<I", crc))


def load_checkpoint(path, expect_arch=None, verbose=True):
    """Inverse of save_checkpoint; raises distinct errors for bad magic,
    version, truncation, checksum, or architecture mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) + 3:
        raise CheckpointTruncatedError(f"{path}: file too short")
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    version, tag = struct.unpack_from("<HB", blob, off)
    off += 3
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CKPT_VERSION}")
    if tag not in _DTYPE_TAGS:
        raise CheckpointVersionError(f"{path}: unknown dtype tag {tag}")
    dtype = np.dtype(_DTYPE_TAGS[tag])
    (alen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + alen + 8 > len(blob):
        raise CheckpointTruncatedError(f"{path}: truncated arch block")
    arch_dict = json.loads(blob[off:off + alen].decode())
    off += alen
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    payload = count * dtype.itemsize
    if off + payload + 4 > len(blob):
        raise CheckpointTruncatedError(f"{path}: truncated parameter payload")
    (crc_stored,) = struct.unpack_from("<I", blob, off + payload)
    crc = zlib.crc32(blob[:off + payload]) & 0xFFFFFFFF
    if crc != crc_stored:
        raise CheckpointChecksumError(
            f"{path}: checksum mismatch (stored {crc_stored:#010x}, "
            f"computed {crc:#010x})")
    arch = ArchConfig.from_dict(arch_dict)
    if expect_arch is not None and arch.to_dict() != expect_arch.to_dict():
        raise CheckpointArchError(
            f"{path}: architecture config does not match the requested one")
    flat = np.frombuffer(blob, dtype="<" + dtype.str[1:], count=count,
                         offset=off).astype(dtype)
    params = init_params(0, arch, dtype=dtype, verbose=False)
    params.load_flat(flat)
    if verbose:
        print(f"policy parameters: {params.count}")
    return params
