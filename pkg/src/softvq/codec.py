"""Bitstream assembly and the end-user compress / decompress / eval paths.

A bitstream is self-describing for rate: the quantized frequency table
travels in the header, so decoding the code sequence needs no checkpoint.
Reconstruction does need the original model, which is enforced by a
checkpoint checksum in the header. Inference runs in float32 with a fixed
evaluation order; reconstructions are reproducible on one platform, while
the code path itself (integer coder) is bit-exact everywhere.
"""

from __future__ import annotations

import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from softvq import autodiff as ad
from softvq import coder
from softvq import quantizer as vq
from softvq.autodiff import Tensor
from softvq.checkpoint import model_checksum
from softvq.training import PIXEL_SCALE

MAGIC = b"SVQ1"
VERSION = 1
THREADS_ENV = "SOFTVQ_THREADS"

# magic(4) version(1) k(2) m(2) H(2) W(2) C(1) H'(2) W'(2) latC(1) n(4) hash(8)
_FIXED_HEADER = struct.Struct("<4sBHHHHBHHBIQ")
CRC_BYTES = 4


class BitstreamError(ValueError):
    """Structurally invalid bitstream."""


class BadMagicError(BitstreamError):
    """Leading bytes or version do not identify a known bitstream."""


class CrcError(BitstreamError):
    """Checksum over the container failed."""


class ModelMismatchError(BitstreamError):
    """Bitstream was produced by a different checkpoint."""


def header_overhead_bytes(k):
    """Container bytes around the payload for an alphabet of size k."""
    return _FIXED_HEADER.size + 2 * k + 4 + CRC_BYTES  # + payload length field + CRC


def _inference_model(model):
    return model if model.params.tensors()[0].dtype == np.float32 else model.astype(np.float32)


def _normalize_f32(image, channels):
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ValueError(f"expected (H, W, {channels}) image, got {arr.shape}")
    x = arr.astype(np.float32) / np.float32(PIXEL_SCALE) - np.float32(1.0)
    return x.transpose(2, 0, 1)[None]


def _to_pixels(recon):
    x = (recon + 1.0) * PIXEL_SCALE
    img = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    img = img[0].transpose(1, 2, 0)
    return img[:, :, 0] if img.shape[2] == 1 else img


def encode_image(model, image):
    """Run 32-bit inference and entropy-code one image.

    Returns (codes, frequency table, payload bytes); compress() wraps this
    in the container format.
    """
    m32 = _inference_model(model)
    cfg = m32.cfg
    x = _normalize_f32(image, cfg.channels)
    if x.shape[2] != cfg.height or x.shape[3] != cfg.width:
        raise ValueError(f"image {x.shape[2]}x{x.shape[3]} does not match "
                         f"model {cfg.height}x{cfg.width}")
    with ad.no_grad():
        latent = m32.encoder(Tensor(x, dtype=np.float32))
        Z = vq.latent_to_columns(latent, m32.m)
    codes, _ = vq.quantize_hard(Z, m32.codebook)
    table = coder.quantize_model(m32.entropy.probs())
    payload = coder.encode(codes, table)
    return codes, table, payload


def reconstruct_from_codes(model, codes):
    """Decode: codebook lookup, decoder network, pixel mapping."""
    m32 = _inference_model(model)
    cfg = m32.cfg
    lh, lw = cfg.latent_hw
    z_hat = vq.dequantize(codes, m32.codebook)
    latent = vq.columns_to_latent(Tensor(z_hat, dtype=np.float32),
                                  (1, cfg.latent_channels, lh, lw))
    with ad.no_grad():
        recon = m32.decoder(latent)
    return _to_pixels(recon.data)


def build_container(model, codes, table, payload, model_hash=None):
    """Wrap an encoded message in the self-describing container."""
    cfg = model.cfg
    lh, lw = cfg.latent_hw
    if model_hash is None:
        model_hash = model_checksum(model)
    head = _FIXED_HEADER.pack(
        MAGIC, VERSION, model.k, model.m, cfg.height, cfg.width, cfg.channels,
        lh, lw, cfg.latent_channels, codes.size, model_hash)
    body = head + table.freq.astype("<u2").tobytes()
    body += struct.pack("<I", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def compress(model, image, model_hash=None):
    """Image -> self-contained bitstream bytes."""
    codes, table, payload = encode_image(model, image)
    return build_container(model, codes, table, payload, model_hash)


@dataclass
class ParsedBitstream:
    k: int
    m: int
    height: int
    width: int
    channels: int
    latent_h: int
    latent_w: int
    latent_channels: int
    n_codes: int
    model_hash: int
    table: coder.FrequencyTable
    payload: bytes


def parse_bitstream(blob):
    if len(blob) < _FIXED_HEADER.size + CRC_BYTES:
        raise BitstreamError("bitstream too short")
    magic, version = blob[:4], blob[4]
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadMagicError(f"unsupported bitstream version {version}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - CRC_BYTES)
    if zlib.crc32(blob[:-CRC_BYTES]) != crc:
        raise CrcError("CRC mismatch")
    (_, _, k, m, height, width, channels, lh, lw, latc, n, model_hash) = \
        _FIXED_HEADER.unpack_from(blob, 0)
    pos = _FIXED_HEADER.size
    end = pos + 2 * k
    if end + 4 > len(blob) - CRC_BYTES:
        raise BitstreamError("truncated frequency table")
    freq = np.frombuffer(blob[pos:end], dtype="<u2").astype(np.int64)
    try:
        table = coder.FrequencyTable(freq)
    except ValueError as exc:
        raise BitstreamError(f"invalid frequency table: {exc}") from exc
    (payload_len,) = struct.unpack_from("<I", blob, end)
    pos = end + 4
    if pos + payload_len != len(blob) - CRC_BYTES:
        raise BitstreamError("payload length does not match container size")
    if m < 1 or latc % m or n != lh * lw * (latc // m):
        raise BitstreamError("inconsistent code count in header")
    return ParsedBitstream(k=k, m=m, height=height, width=width,
                           channels=channels, latent_h=lh, latent_w=lw,
                           latent_channels=latc, n_codes=n,
                           model_hash=model_hash,
                           payload=blob[pos:pos + payload_len], table=table)


def decompress(model, blob, model_hash=None):
    """Bitstream bytes -> reconstructed image under the original model."""
    parsed = parse_bitstream(blob)
    cfg = model.cfg
    lh, lw = cfg.latent_hw
    if (parsed.height, parsed.width, parsed.channels) != (cfg.height, cfg.width, cfg.channels) \
            or (parsed.latent_h, parsed.latent_w) != (lh, lw) \
            or parsed.latent_channels != cfg.latent_channels \
            or (parsed.k, parsed.m) != (model.k, model.m):
        raise BitstreamError("bitstream geometry does not match the model")
    if model_hash is None:
        model_hash = model_checksum(model)
    if parsed.model_hash != model_hash:
        raise ModelMismatchError("bitstream was produced by a different checkpoint")
    codes = coder.decode(parsed.payload, parsed.table, parsed.n_codes)
    return reconstruct_from_codes(model, codes)


@dataclass
class ImageMetrics:
    index: int
    bpp: float
    mse: float
    hard_xent_bpp: float
    model_entropy_bits: float

    def row(self):
        return [self.index, self.bpp, self.mse, self.hard_xent_bpp,
                self.model_entropy_bits]


@dataclass
class EvalAggregate:
    n_images: int
    bpp: float
    mse: float
    hard_xent_bpp: float
    model_entropy_bits: float


EVAL_HEADER = ["index", "bpp", "mse", "hard_xent_bpp", "model_entropy_bits"]


def worker_count():
    env = os.environ.get(THREADS_ENV, "")
    if env.strip():
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def evaluate_model(model, images, per_image=False):
    """Compress and decompress every image; report measured rate/distortion.

    bpp is the actual bitstream size over the pixel count, never a
    theoretical substitute. Images are processed by a thread pool capped by
    SOFTVQ_THREADS; results keep input order.
    """
    m32 = _inference_model(model)
    images = np.asarray(images)
    if images.ndim == 3 and model.cfg.channels == 1:
        images = images[..., None]
    if images.ndim != 4:
        raise ValueError(f"expected an image stack, got shape {images.shape}")
    pixels = model.cfg.height * model.cfg.width
    q = m32.entropy.probs()
    logq = np.log2(q)
    h_model_bits = -float(np.sum(q * logq))
    model_hash = model_checksum(m32)

    def one(args):
        i, img = args
        codes, table, payload = encode_image(m32, img)
        blob = build_container(m32, codes, table, payload, model_hash)
        recon = decompress(m32, blob, model_hash)
        rec = recon if recon.ndim == 3 else recon[:, :, None]
        mse = float(np.mean((img.astype(np.float64) - rec.astype(np.float64)) ** 2))
        hx_bpp = float(-logq[codes].sum()) / pixels
        return ImageMetrics(index=i, bpp=len(blob) * 8 / pixels, mse=mse,
                            hard_xent_bpp=hx_bpp,
                            model_entropy_bits=h_model_bits)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(one, enumerate(images)))

    agg = EvalAggregate(
        n_images=len(rows),
        bpp=float(np.mean([r.bpp for r in rows])),
        mse=float(np.mean([r.mse for r in rows])),
        hard_xent_bpp=float(np.mean([r.hard_xent_bpp for r in rows])),
        model_entropy_bits=h_model_bits,
    )
    return (agg, rows) if per_image else agg


def write_eval_csv(path, rows, agg):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        for r in rows:
            writer.writerow(r.row())
        writer.writerow(["aggregate", agg.bpp, agg.mse, agg.hard_xent_bpp,
                         agg.model_entropy_bits])
