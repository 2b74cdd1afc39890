"""Versioned binary checkpoint container.

Layout: magic bytes "IBHV", format version (u32), then six length-prefixed
sections in fixed order: config JSON, vocabularies JSON, parameter table,
optimizer state, RNG state JSON, and a SHA-256 checksum of everything before
it. All integers are little-endian; parameter payloads are raw little-endian
float bytes in C order. Loading verifies the checksum and refuses versions
this build does not know, with distinct error types for the two failures.
"""

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .aggregate import CHANNELS, Vocabulary
from .encoder import EncoderConfig
from .optim import AdamWState

MAGIC = b"IBHV"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": 1, "float64": 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for checkpoint serialization failures."""


class CorruptCheckpointError(CheckpointError):
    """The file is not a complete, intact checkpoint."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported by this build."""


@dataclass
class Checkpoint:
    train_config: object
    encoder_config: EncoderConfig
    vocabs: dict
    params: dict
    opt_state: AdamWState
    step: int
    rng_state: dict
    version: int = FORMAT_VERSION


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _encode_array_table(arrays):
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _DTYPE_CODES.get(arr.dtype.name)
        if code is None:
            raise ValueError(f"array {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BB", code, arr.ndim))
        if arr.ndim:
            out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C")
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


class _Reader:
    def __init__(self, data, context):
        self.data = data
        self.pos = 0
        self.context = context

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.context}: truncated (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_array_table(reader):
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CorruptCheckpointError(f"{reader.context}: unknown dtype code {code} for {name!r}")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        dt = _CODE_DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        if nbytes != expected:
            raise CorruptCheckpointError(f"{reader.context}: payload size {nbytes} != {expected} for {name!r}")
        arr = np.frombuffer(reader.take(nbytes), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, ckpt):
    """Write a checkpoint atomically (temp file + rename)."""
    from .trainer import TrainConfig  # local import to avoid a module cycle

    if not isinstance(ckpt.train_config, TrainConfig):
        raise TypeError("save_checkpoint: train_config must be a TrainConfig")
    enc = asdict(ckpt.encoder_config)
    enc["conv_widths"] = list(enc["conv_widths"])
    config = {"train": asdict(ckpt.train_config), "encoder": enc, "step": int(ckpt.step)}
    vocab_obj = {ch: ckpt.vocabs[ch].tokens for ch in CHANNELS}
    opt = io.BytesIO()
    opt.write(struct.pack("<Q", int(ckpt.opt_state.step)))
    opt.write(_encode_array_table(ckpt.opt_state.m))
    opt.write(_encode_array_table(ckpt.opt_state.v))
    sections = [
        _canonical_json(config),
        _canonical_json(vocab_obj),
        _encode_array_table(ckpt.params),
        opt.getvalue(),
        _canonical_json(ckpt.rng_state),
    ]
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", FORMAT_VERSION))
    for s in sections:
        body.write(struct.pack("<Q", len(s)))
        body.write(s)
    raw = body.getvalue()
    digest = hashlib.sha256(raw).digest()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
        f.write(struct.pack("<Q", len(digest)))
        f.write(digest)
    os.replace(tmp, str(path))


def load_checkpoint(path):
    from .trainer import TrainConfig

    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, str(path))
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}; this build supports versions 1 through {FORMAT_VERSION}"
        )
    sections = []
    for _ in range(5):
        (length,) = r.unpack("<Q")
        sections.append(r.take(length))
    expected = hashlib.sha256(data[: r.pos]).digest()
    (dig_len,) = r.unpack("<Q")
    digest = r.take(dig_len)
    if digest != expected:
        raise CorruptCheckpointError(f"{path}: checksum mismatch, file contents were altered")
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - r.pos} bytes of trailing junk")

    try:
        config = json.loads(sections[0].decode("utf-8"))
        vocab_obj = json.loads(sections[1].decode("utf-8"))
        rng_state = json.loads(sections[4].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: undecodable metadata section: {e}") from e
    enc = dict(config["encoder"])
    enc["conv_widths"] = tuple(enc["conv_widths"])
    encoder_config = EncoderConfig(**enc)
    train_config = TrainConfig(**config["train"])
    vocabs = {ch: Vocabulary(vocab_obj[ch]) for ch in CHANNELS}
    params = _decode_array_table(_Reader(sections[2], f"{path} params"))
    opt_r = _Reader(sections[3], f"{path} optimizer")
    (opt_step,) = opt_r.unpack("<Q")
    opt_state = AdamWState(step=int(opt_step), m=_decode_array_table(opt_r), v=_decode_array_table(opt_r))
    return Checkpoint(
        train_config=train_config,
        encoder_config=encoder_config,
        vocabs=vocabs,
        params=params,
        opt_state=opt_state,
        step=int(config["step"]),
        rng_state=rng_state,
        version=version,
    )
