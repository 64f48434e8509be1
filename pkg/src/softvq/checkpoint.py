"""Binary checkpoint format for a whole model.

Layout: magic ``SVQC``, version byte, a length-prefixed key=value text block
holding every shape hyperparameter, then one record per tensor (u16 name
length, name, u8 rank, u32 extents, raw little-endian float32 data) until
end of file. Saving the same model twice yields identical bytes, and the
first eight bytes of the SHA-256 of those bytes serve as the model checksum
embedded in every bitstream.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from softvq.model import assemble
from softvq.nets import NetConfig, ParamStore
from softvq.autodiff import Tensor

MAGIC = b"SVQC"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint data."""


def _config_text(cfg, k, m, sigma):
    pairs = [
        ("height", cfg.height),
        ("width", cfg.width),
        ("channels", cfg.channels),
        ("widths", ",".join(str(w) for w in cfg.widths)),
        ("downsample_folds", cfg.downsample_folds),
        ("latent_channels", cfg.latent_channels),
        ("num_residual_blocks", cfg.num_residual_blocks),
        ("skip_every", cfg.skip_every),
        ("activation", cfg.activation),
        ("io_kernel", cfg.io_kernel),
        ("k", k),
        ("m", m),
        ("sigma", repr(float(sigma))),
    ]
    return "".join(f"{key}={value}\n" for key, value in pairs)


def _parse_config(text):
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        cfg = NetConfig(
            height=int(kv["height"]),
            width=int(kv["width"]),
            channels=int(kv["channels"]),
            widths=tuple(int(w) for w in kv["widths"].split(",")),
            downsample_folds=int(kv["downsample_folds"]),
            latent_channels=int(kv["latent_channels"]),
            num_residual_blocks=int(kv["num_residual_blocks"]),
            skip_every=int(kv["skip_every"]),
            activation=kv["activation"],
            io_kernel=int(kv["io_kernel"]),
        )
        return cfg, int(kv["k"]), int(kv["m"]), float(kv["sigma"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint config block: {exc}") from exc


def checkpoint_bytes(model):
    """Serialize a model; float64 parameters are stored as float32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    text = _config_text(model.cfg, model.k, model.m, model.sigma).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, tensor in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", tensor.ndim))
        for extent in tensor.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return checksum_of(data)


def load_checkpoint_bytes(data, dtype=np.float32):
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = data[4]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (text_len,) = struct.unpack_from("<I", data, 5)
    pos = 9
    text = data[pos:pos + text_len].decode()
    pos += text_len
    cfg, k, m, sigma = _parse_config(text)

    store = ParamStore()
    while pos < len(data):
        if pos + 2 > len(data):
            raise CheckpointError("truncated tensor record")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode()
        pos += name_len
        rank = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape)
        pos = end
        store.add(name, Tensor(arr.astype(dtype)))
    return assemble(cfg, k, m, sigma, store)


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        data = fh.read()
    return load_checkpoint_bytes(data, dtype=dtype)


def checksum_of(data):
    """First eight bytes of SHA-256, as a little-endian u64."""
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def model_checksum(model):
    """Checksum the model as it would sit on disk."""
    return checksum_of(checkpoint_bytes(model))
